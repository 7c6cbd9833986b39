//! Articulated skeleton, pinhole camera and the pose error metrics.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{check_dim, Error, Result};

pub const BETA_DIM: usize = 10;
pub const BETA_MIN: f64 = 0.5;
pub const BETA_MAX: f64 = 2.0;
/// Smallest depth (m) accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<[f64; 3]>,
    /// Which bone-scale coefficient stretches each joint's offset.
    bone_groups: Vec<Option<usize>>,
}

const DEFAULT_SKELETON: [(Option<usize>, [f64; 3], Option<usize>); 15] = [
    (None, [0.0, 0.0, 0.0], None),              // 0 pelvis
    (Some(0), [0.0, -0.48, 0.0], Some(0)),      // 1 thorax
    (Some(1), [0.0, -0.24, 0.0], Some(1)),      // 2 head
    (Some(1), [0.18, 0.02, 0.0], Some(2)),      // 3 left shoulder
    (Some(3), [0.0, 0.28, 0.0], Some(3)),       // 4 left elbow
    (Some(4), [0.0, 0.25, 0.0], Some(5)),       // 5 left wrist
    (Some(1), [-0.18, 0.02, 0.0], Some(2)),     // 6 right shoulder
    (Some(6), [0.0, 0.28, 0.0], Some(4)),       // 7 right elbow
    (Some(7), [0.0, 0.25, 0.0], Some(5)),       // 8 right wrist
    (Some(0), [0.10, 0.06, 0.0], Some(6)),      // 9 left hip
    (Some(9), [0.0, 0.42, 0.0], Some(7)),       // 10 left knee
    (Some(10), [0.0, 0.42, 0.0], Some(9)),      // 11 left ankle
    (Some(0), [-0.10, 0.06, 0.0], Some(6)),     // 12 right hip
    (Some(12), [0.0, 0.42, 0.0], Some(8)),      // 13 right knee
    (Some(13), [0.0, 0.42, 0.0], Some(9)),      // 14 right ankle
];

impl Default for SkeletonTemplate {
    /// Fifteen-joint body in camera convention (x right, y down, z forward).
    fn default() -> Self {
        Self::new(
            DEFAULT_SKELETON.iter().map(|j| j.0).collect(),
            DEFAULT_SKELETON.iter().map(|j| j.1).collect(),
            DEFAULT_SKELETON.iter().map(|j| j.2).collect(),
        )
        .expect("default skeleton is valid")
    }
}

impl SkeletonTemplate {
    /// Joints must be listed parents-first with joint 0 as the only root.
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<[f64; 3]>,
        bone_groups: Vec<Option<usize>>,
    ) -> Result<Self> {
        let j = parents.len();
        if j == 0 {
            return Err(Error::InvalidInput("skeleton has no joints".into()));
        }
        check_dim("rest offsets", j, rest_offsets.len())?;
        check_dim("bone groups", j, bone_groups.len())?;
        if parents[0].is_some() || rest_offsets[0] != [0.0; 3] {
            return Err(Error::InvalidInput(
                "joint 0 must be a root with zero offset".into(),
            ));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "joint {i} must have a parent listed before it"
                    )))
                }
            }
        }
        if bone_groups.iter().flatten().any(|&g| g >= BETA_DIM) {
            return Err(Error::InvalidInput("bone group out of range".into()));
        }
        Ok(Self {
            parents,
            rest_offsets,
            bone_groups,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn rest_offset(&self, joint: usize) -> [f64; 3] {
        self.rest_offsets[joint]
    }

    pub fn bone_group(&self, joint: usize) -> Option<usize> {
        self.bone_groups[joint]
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(joint))
            .map(|(i, _)| i)
    }

    /// Joints whose rotation moves at least one other joint.
    pub fn has_children(&self, joint: usize) -> bool {
        self.children(joint).next().is_some()
    }

    /// Length of the flat parameter vector (theta, beta, trans).
    pub fn param_dim(&self) -> usize {
        3 * self.joint_count() + BETA_DIM + 3
    }
}

/// Per-joint axis-angle rotations, bone-scale coefficients and root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub trans: [f64; 3],
}

impl PoseParams {
    pub fn rest(joint_count: usize, depth: f64) -> Self {
        Self {
            theta: vec![0.0; 3 * joint_count],
            beta: vec![1.0; BETA_DIM],
            trans: [0.0, 0.0, depth],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.theta.len() / 3
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + BETA_DIM + 3);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.trans);
        v
    }

    pub fn from_flat(flat: &[f64], joint_count: usize) -> Result<Self> {
        check_dim("pose parameter vector", 3 * joint_count + BETA_DIM + 3, flat.len())?;
        let t = 3 * joint_count;
        Ok(Self {
            theta: flat[..t].to_vec(),
            beta: flat[t..t + BETA_DIM].to_vec(),
            trans: [flat[t + BETA_DIM], flat[t + BETA_DIM + 1], flat[t + BETA_DIM + 2]],
        })
    }

    pub fn clamp_beta(&mut self) {
        for b in &mut self.beta {
            *b = b.clamp(BETA_MIN, BETA_MAX);
        }
    }

    fn check(&self, skel: &SkeletonTemplate) -> Result<()> {
        check_dim("theta", 3 * skel.joint_count(), self.theta.len())?;
        check_dim("beta", BETA_DIM, self.beta.len())?;
        Ok(())
    }
}

/// Camera-frame joint positions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Joints relative to the root joint.
    pub fn root_relative(&self) -> Vec<[f64; 3]> {
        let r = self.joints[0];
        self.joints
            .iter()
            .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal: 500.0,
            principal: [128.0, 128.0],
            image_size: [256.0, 256.0],
        }
    }
}

impl Camera {
    pub fn new(focal: f64, principal: [f64; 2], image_size: [f64; 2]) -> Result<Self> {
        let cam = Self {
            focal,
            principal,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::InvalidInput(format!("focal must be > 0, got {}", self.focal)));
        }
        let inside = |p: f64, s: f64| (0.0..=s).contains(&p);
        if !inside(self.principal[0], self.image_size[0])
            || !inside(self.principal[1], self.image_size[1])
        {
            return Err(Error::InvalidInput("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= self.image_size[0] && p[1] <= self.image_size[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl Keypoints2D {
    pub fn new(points: Vec<[f64; 2]>, confidence: Vec<f64>) -> Result<Self> {
        check_dim("confidence", points.len(), confidence.len())?;
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("confidence outside [0, 1]".into()));
        }
        Ok(Self { points, confidence })
    }

    pub fn fully_confident(points: Vec<[f64; 2]>) -> Self {
        let n = points.len();
        Self {
            points,
            confidence: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub(crate) type Mat3<R> = [[R; 3]; 3];

/// Rotation matrix of an axis-angle vector.
pub(crate) fn rodrigues<R: Real>(w: [R; 3]) -> Mat3<R> {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let t2v = t2.val();
    let (a, b) = if t2v < 1e-8 {
        // Taylor expansions of sin(t)/t and (1-cos(t))/t^2.
        let t4 = t2 * t2;
        (
            R::cst(1.0) - t2.scale(1.0 / 6.0) + t4.scale(1.0 / 120.0),
            R::cst(0.5) - t2.scale(1.0 / 24.0) + t4.scale(1.0 / 720.0),
        )
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (R::cst(1.0) - t.cos()) / t2)
    };
    let diag = R::cst(1.0) - b * t2;
    let [x, y, z] = w;
    let bxy = b * x * y;
    let bxz = b * x * z;
    let byz = b * y * z;
    [
        [diag + b * x * x, bxy - a * z, bxz + a * y],
        [bxy + a * z, diag + b * y * y, byz - a * x],
        [bxz - a * y, byz + a * x, diag + b * z * z],
    ]
}

pub(crate) fn matmul<R: Real>(a: &Mat3<R>, b: &Mat3<R>) -> Mat3<R> {
    let mut out = [[R::cst(0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn matvec<R: Real>(a: &Mat3<R>, v: [R; 3]) -> [R; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Forward kinematics over any scalar type; `theta` is 3J long.
pub(crate) fn fk_generic<R: Real>(
    skel: &SkeletonTemplate,
    theta: &[R],
    beta: &[R],
    trans: [R; 3],
) -> Vec<[R; 3]> {
    let j = skel.joint_count();
    let mut rots: Vec<Mat3<R>> = Vec::with_capacity(j);
    let mut pos: Vec<[R; 3]> = Vec::with_capacity(j);
    for i in 0..j {
        let local = rodrigues([theta[3 * i], theta[3 * i + 1], theta[3 * i + 2]]);
        match skel.parents[i] {
            None => {
                rots.push(local);
                pos.push(trans);
            }
            Some(p) => {
                let s = match skel.bone_groups[i] {
                    Some(g) => beta[g],
                    None => R::cst(1.0),
                };
                let o = skel.rest_offsets[i];
                let off = [s.scale(o[0]), s.scale(o[1]), s.scale(o[2])];
                let d = matvec(&rots[p], off);
                let pp = pos[p];
                pos.push([pp[0] + d[0], pp[1] + d[1], pp[2] + d[2]]);
                let cum = matmul(&rots[p], &local);
                rots.push(cum);
            }
        }
    }
    pos
}

pub fn forward_kinematics(skel: &SkeletonTemplate, params: &PoseParams) -> Result<Pose3D> {
    params.check(skel)?;
    Ok(Pose3D {
        joints: fk_generic(skel, &params.theta, &params.beta, params.trans),
    })
}

pub(crate) fn project_generic<R: Real>(joints: &[[R; 3]], cam: &Camera) -> Vec<[R; 2]> {
    joints
        .iter()
        .map(|p| {
            let inv = R::cst(1.0) / p[2];
            [
                (p[0] * inv).scale(cam.focal) + R::cst(cam.principal[0]),
                (p[1] * inv).scale(cam.focal) + R::cst(cam.principal[1]),
            ]
        })
        .collect()
}

/// Pinhole projection; confidences are all one.
pub fn project(pose: &Pose3D, cam: &Camera) -> Result<Keypoints2D> {
    if let Some((joint, p)) = pose
        .joints
        .iter()
        .enumerate()
        .find(|(_, p)| !(p[2] > MIN_DEPTH))
    {
        return Err(Error::ProjectionDegenerate {
            joint,
            depth: p[2],
        });
    }
    Ok(Keypoints2D::fully_confident(project_generic(&pose.joints, cam)))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Root-relative mean per-joint position error in millimeters.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_dim("joints", gt.joint_count(), pred.joint_count())?;
    if gt.joints.is_empty() {
        return Ok(0.0);
    }
    let p = pred.root_relative();
    let g = gt.root_relative();
    let sum: f64 = p.iter().zip(&g).map(|(a, b)| dist3(*a, *b)).sum();
    Ok(1000.0 * sum / g.len() as f64)
}

/// Weighted least-squares similarity fit from `src` onto `dst`, plus, if
/// `turns` is set, the same fit turned about each principal axis of the
/// cross-covariance in eighths of a revolution. Best fit first; empty when
/// the weighted source has no spread.
fn weighted_similarities(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: &[f64], turns: bool) -> Vec<Similarity3> {
    let total: f64 = w.iter().sum();
    let ms = src.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / total;
    let md = dst.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vector3<f64>>() / total;
    let var_s: f64 = src.iter().zip(w).map(|(p, wi)| wi * (p - ms).norm_squared()).sum();
    if var_s < 1e-24 * total {
        return Vec::new();
    }
    let mut cov = Matrix3::zeros();
    for ((s, d), wi) in src.iter().zip(dst).zip(w) {
        cov += (d - md) * (s - ms).transpose() * *wi;
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut signs = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        signs[(2, 2)] = -1.0;
    }
    let base = u * signs * vt;
    let fit = |rot: Matrix3<f64>| {
        let scale = ((rot.transpose() * cov).trace() / var_s).max(0.0);
        Similarity3 {
            scale,
            rot,
            shift: md - scale * (rot * ms),
        }
    };
    let mut out = vec![fit(base)];
    if turns {
        for axis in vt.row_iter() {
            let axis = Unit::new_normalize(axis.transpose());
            for k in 1..8 {
                let turn = Rotation3::from_axis_angle(&axis, k as f64 * std::f64::consts::FRAC_PI_4);
                out.push(fit(base * turn.matrix()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Similarity3 {
    scale: f64,
    rot: Matrix3<f64>,
    shift: Vector3<f64>,
}

impl Similarity3 {
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rot * p) + self.shift
    }

    fn mean_error(&self, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        src.iter().zip(dst).map(|(s, d)| (self.apply(s) - d).norm()).sum::<f64>() / src.len() as f64
    }
}

/// Reweighted Procrustes: each pass solves the weighted least-squares fit
/// with weights 1/residual, which never increases the mean residual.
fn refine_mean_distance(src: &[Vector3<f64>], dst: &[Vector3<f64>], start: Similarity3, passes: usize) -> (Similarity3, f64) {
    let mut best = start;
    let mut err = start.mean_error(src, dst);
    let mut w = vec![0.0; src.len()];
    for _ in 0..passes {
        if err < 1e-15 {
            break;
        }
        for ((wi, s), d) in w.iter_mut().zip(src).zip(dst) {
            *wi = 1.0 / (best.apply(s) - d).norm().max(1e-12);
        }
        let Some(&next) = weighted_similarities(src, dst, &w, false).first() else {
            break;
        };
        let next_err = next.mean_error(src, dst);
        if next_err >= err {
            break;
        }
        let gain = err - next_err;
        best = next;
        err = next_err;
        if gain <= 1e-13 * err {
            break;
        }
    }
    (best, err)
}

/// Similarity transform (scale, rotation, translation) of `src` that
/// minimises the mean joint distance to `dst`, applied to `src`.
pub fn procrustes_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    check_dim("joints", dst.len(), src.len())?;
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let s: Vec<Vector3<f64>> = src.iter().map(to_v).collect();
    let d: Vec<Vector3<f64>> = dst.iter().map(to_v).collect();
    let n = d.len() as f64;
    let md = d.iter().sum::<Vector3<f64>>() / n;
    if d.iter().map(|p| (p - md).norm_squared()).sum::<f64>() < 1e-18 {
        return Err(Error::AlignmentDegenerate);
    }
    let mut starts = weighted_similarities(&s, &d, &vec![1.0; s.len()], true);
    if starts.is_empty() {
        // Collapsed prediction: only a translation is left to fit.
        let centre = geometric_median(&d);
        return Ok(vec![[centre.x, centre.y, centre.z]; src.len()]);
    }
    // The root-aligned identity is the transform plain MPJPE scores.
    starts.push(Similarity3 {
        scale: 1.0,
        rot: Matrix3::identity(),
        shift: d[0] - s[0],
    });
    let mut screened: Vec<(Similarity3, f64)> =
        starts.into_iter().map(|start| refine_mean_distance(&s, &d, start, 4)).collect();
    screened.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = screened
        .into_iter()
        .take(3)
        .map(|(start, _)| refine_mean_distance(&s, &d, start, 500))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start")
        .0;
    Ok(s.iter()
        .map(|p| {
            let q = best.apply(p);
            [q.x, q.y, q.z]
        })
        .collect())
}

/// Weiszfeld iteration.
fn geometric_median(points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut centre = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    for _ in 0..500 {
        let (mut num, mut den) = (Vector3::zeros(), 0.0);
        for p in points {
            let w = 1.0 / (p - centre).norm().max(1e-12);
            num += p * w;
            den += w;
        }
        let next = num / den;
        let moved = (next - centre).norm();
        centre = next;
        if moved < 1e-15 {
            break;
        }
    }
    centre
}

/// MPJPE after the similarity alignment of `pred` to `gt` that minimises it,
/// in millimeters. Never exceeds [`mpjpe`].
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let aligned = procrustes_align(&pred.joints, &gt.joints)?;
    let sum: f64 = aligned.iter().zip(&gt.joints).map(|(a, b)| dist3(*a, *b)).sum();
    Ok(1000.0 * sum / gt.joints.len() as f64)
}

/// Mean per-keypoint pixel distance.
pub fn epe_2d(pred: &Keypoints2D, reference: &Keypoints2D) -> Result<f64> {
    check_dim("keypoints", reference.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .points
        .iter()
        .zip(&reference.points)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / pred.len() as f64)
}
