//! The five adaptation losses.
//!
//! 2D terms are confidence-weighted mean squared pixel errors; 3D terms are
//! summed squared root-relative joint errors in decimeters.

use std::f64::consts::FRAC_PI_2;

use crate::autodiff::Real;
use crate::diffmodel::{ParamsView, PoseObjective, RegressorState};
use crate::error::{Error, Result};
use crate::kinematics::{
    fk_generic, forward_kinematics, project, project_generic, Camera, Keypoints2D, PoseParams, Pose3D,
    SkeletonTemplate, MIN_DEPTH,
};
use crate::selection::{ConfidenceRule, SampleRecord};

use super::augment::{apply_transform, AugmentSpec, Similarity2D};
use super::LossWeights;

/// Maximum joint angle magnitude before the joint-limit prior engages.
pub const THETA_MAX: f64 = FRAC_PI_2;

const DM_PER_M: f64 = 10.0;

/// Normalised per-keypoint weights of a 2D term: keypoints above the
/// confidence threshold count equally; with none above it, every keypoint
/// counts in proportion to its confidence. Masked keypoints never count.
pub fn keypoint_weights(conf: &[f64], rule: &ConfidenceRule, masked: Option<&[bool]>) -> Vec<f64> {
    let open = |k: usize| masked.is_none_or(|m| !m[k]);
    let mut w: Vec<f64> = conf
        .iter()
        .enumerate()
        .map(|(k, &c)| if open(k) && rule.keypoint_confident(c) { 1.0 } else { 0.0 })
        .collect();
    if w.iter().sum::<f64>() == 0.0 {
        w = conf
            .iter()
            .enumerate()
            .map(|(k, &c)| if open(k) { c.max(0.0) } else { 0.0 })
            .collect();
    }
    if w.iter().sum::<f64>() == 0.0 {
        w = (0..conf.len()).map(|k| if open(k) { 1.0 } else { 0.0 }).collect();
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for v in &mut w {
            *v /= total;
        }
    }
    w
}

fn prior_generic<R: Real>(theta: &[R], beta: &[R]) -> R {
    let mut e = R::cst(0.0);
    for &b in beta {
        let d = b - R::cst(1.0);
        e = e + d * d;
    }
    for &t in theta {
        let h = (t.abs() - R::cst(THETA_MAX)).relu();
        e = e + h * h;
    }
    e
}

/// `E_theta + E_beta`: hinge joint limits plus bone-scale regulariser.
pub fn prior_penalty(params: &PoseParams) -> f64 {
    prior_generic(&params.theta, &params.beta)
}

/// A 2D/3D consistency objective on a regressor output.
///
/// Predicted joints are projected with `camera`, mapped back through
/// `similarity` and compared with `target_2d`; their root-relative pose,
/// rotated back likewise, is compared with `target_3d` when present.
pub struct Consistency<'a> {
    pub skel: &'a SkeletonTemplate,
    pub camera: Camera,
    pub similarity: Similarity2D,
    pub target_2d: &'a [[f64; 2]],
    pub weights_2d: Vec<f64>,
    /// Root-relative target pose in meters.
    pub target_3d: Option<Vec<[f64; 3]>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl<'a> Consistency<'a> {
    /// `loss_proj`; with `lambda1 = 0` this is `loss_2d`.
    pub fn projection(
        skel: &'a SkeletonTemplate,
        camera: Camera,
        est: &'a Keypoints2D,
        rule: &ConfidenceRule,
        lambda1: f64,
    ) -> Self {
        Self {
            skel,
            camera,
            similarity: Similarity2D::identity(camera.principal),
            target_2d: &est.points,
            weights_2d: keypoint_weights(&est.confidence, rule, None),
            target_3d: None,
            lambda1,
            lambda2: 0.0,
        }
    }

    /// Objective for a prediction made on an augmented view of a frame with
    /// estimate `est` and 3D pseudo-label `pseudo_3d`. Keypoints masked by
    /// the augmentation drop out of the 2D term.
    #[allow(clippy::too_many_arguments)]
    pub fn augmented(
        skel: &'a SkeletonTemplate,
        camera: Camera,
        spec: &AugmentSpec,
        masked: &[bool],
        est: &'a Keypoints2D,
        pseudo_3d: Option<&Pose3D>,
        rule: &ConfidenceRule,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        Self {
            skel,
            camera,
            similarity: spec.similarity,
            target_2d: &est.points,
            weights_2d: keypoint_weights(&est.confidence, rule, Some(masked)),
            target_3d: pseudo_3d.map(|p| p.root_relative()),
            lambda1,
            lambda2,
        }
    }
}

impl PoseObjective for Consistency<'_> {
    fn eval<R: Real>(&self, p: &ParamsView<R>) -> R {
        let joints = fk_generic(self.skel, &p.theta, &p.beta, p.trans);
        if joints.iter().any(|j| !(j[2].val() > MIN_DEPTH)) {
            return R::cst(f64::NAN);
        }
        let proj = project_generic(&joints, &self.camera);
        let sim = &self.similarity;
        let (sn, cs) = sim.angle.sin_cos();
        let inv_s = 1.0 / sim.scale;
        let mut loss = R::cst(0.0);
        for ((q, t), &w) in proj.iter().zip(self.target_2d).zip(&self.weights_2d) {
            if w == 0.0 {
                continue;
            }
            let dx = (q[0] - R::cst(sim.center[0] + sim.shift[0])).scale(inv_s);
            let dy = (q[1] - R::cst(sim.center[1] + sim.shift[1])).scale(inv_s);
            let bx = dx.scale(cs) + dy.scale(sn) - R::cst(t[0] - sim.center[0]);
            let by = dy.scale(cs) - dx.scale(sn) - R::cst(t[1] - sim.center[1]);
            loss = loss + (bx * bx + by * by).scale(w);
        }
        if let Some(target) = &self.target_3d {
            if self.lambda2 > 0.0 {
                let root = joints[0];
                let mut e3 = R::cst(0.0);
                for (j, t) in joints.iter().zip(target) {
                    let v = [j[0] - root[0], j[1] - root[1], j[2] - root[2]];
                    let ux = v[0].scale(cs) + v[1].scale(sn);
                    let uy = v[1].scale(cs) - v[0].scale(sn);
                    let d = [
                        (ux - R::cst(t[0])).scale(DM_PER_M),
                        (uy - R::cst(t[1])).scale(DM_PER_M),
                        (v[2] - R::cst(t[2])).scale(DM_PER_M),
                    ];
                    e3 = e3 + d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                }
                loss = loss + e3.scale(self.lambda2);
            }
        }
        if self.lambda1 > 0.0 {
            loss = loss + prior_generic(&p.theta, &p.beta).scale(self.lambda1);
        }
        loss
    }
}

fn view_of(params: &PoseParams) -> ParamsView<f64> {
    ParamsView {
        theta: params.theta.clone(),
        beta: params.beta.clone(),
        trans: params.trans,
    }
}

fn check_projectable(skel: &SkeletonTemplate, params: &PoseParams, cam: &Camera) -> Result<()> {
    project(&forward_kinematics(skel, params)?, cam).map(|_| ())
}

/// Confidence-masked mean squared pixel error of the projected prediction.
pub fn loss_2d(params: &PoseParams, est: &Keypoints2D, cam: &Camera, rule: &ConfidenceRule) -> Result<f64> {
    loss_proj(params, est, cam, rule, &LossWeights { lambda1: 0.0, ..LossWeights::default() })
}

/// `loss_2d + lambda1 * prior_penalty`.
pub fn loss_proj(
    params: &PoseParams,
    est: &Keypoints2D,
    cam: &Camera,
    rule: &ConfidenceRule,
    weights: &LossWeights,
) -> Result<f64> {
    let skel = SkeletonTemplate::default();
    check_projectable(&skel, params, cam)?;
    Ok(Consistency::projection(&skel, *cam, est, rule, weights.lambda1).eval(&view_of(params)))
}

/// Strong-augmentation consistency of `model` on a confident frame whose
/// estimate is `est` and whose original 3D prediction is `pseudo_3d`.
#[allow(clippy::too_many_arguments)]
pub fn loss_aug(
    model: &RegressorState,
    features: &[f64],
    est: &Keypoints2D,
    pseudo_3d: &Pose3D,
    cam: &Camera,
    spec: &AugmentSpec,
    rule: &ConfidenceRule,
    weights: &LossWeights,
) -> Result<f64> {
    let skel = SkeletonTemplate::default();
    let view = apply_transform(spec, features, &est.points);
    let obj = Consistency::augmented(&skel, *cam, spec, &view.masked, est, Some(pseudo_3d), rule, 0.0, weights.lambda2);
    finite(model.loss_value(&view.features, &obj)?)
}

/// Pseudo-labelling loss of a banked record under a weak augmentation. The
/// 3D term is included only when `use_3d`.
pub fn loss_adapt(
    model: &RegressorState,
    record: &SampleRecord,
    spec: &AugmentSpec,
    use_3d: bool,
    rule: &ConfidenceRule,
    weights: &LossWeights,
) -> Result<f64> {
    let skel = SkeletonTemplate::default();
    let view = apply_transform(spec, &record.features, &record.est_2d.points);
    let obj = adapt_objective(&skel, record, spec, &view.masked, use_3d, rule, weights);
    finite(model.loss_value(&view.features, &obj)?)
}

pub(crate) fn adapt_objective<'a>(
    skel: &'a SkeletonTemplate,
    record: &'a SampleRecord,
    spec: &AugmentSpec,
    masked: &[bool],
    use_3d: bool,
    rule: &ConfidenceRule,
    weights: &LossWeights,
) -> Consistency<'a> {
    Consistency::augmented(
        skel,
        record.camera,
        spec,
        masked,
        &record.est_2d,
        use_3d.then_some(&record.pseudo_3d),
        rule,
        weights.lambda1,
        weights.lambda2,
    )
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::GradientInvalid(v))
    }
}
