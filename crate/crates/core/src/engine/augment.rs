//! Geometric (weak) and occlusion/truncation (strong) augmentations of a
//! frame's features and keypoints.
//!
//! A weak augmentation is the image-plane similarity
//! `p' = s R(a) (p - c) + c + t` about the principal point `c`. Its 3D
//! counterpart on root-relative poses is the rotation `R(a)` about the
//! camera axis; scale and translation only move the body along the ray.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streamgen::{decode_features, encode_features, truncation_crop, CropWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shift_px: f64,
    /// Pixel noise put on occluded keypoints' feature evidence.
    pub occlusion_noise_px: f64,
    /// Chance that a strong augmentation also truncates the frame.
    pub truncation_prob: f64,
    pub truncation_min: usize,
    pub truncation_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 20.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_shift_px: 10.0,
            occlusion_noise_px: 25.0,
            truncation_prob: 0.3,
            truncation_min: 3,
            truncation_max: 6,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::Config("augment scale range must be positive and ordered".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_shift_px >= 0.0 && self.occlusion_noise_px >= 0.0) {
            return Err(Error::Config("augment ranges must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.truncation_prob) || self.truncation_min > self.truncation_max {
            return Err(Error::Config("invalid truncation settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2D {
    /// Radians, counter-clockwise in image coordinates.
    pub angle: f64,
    pub scale: f64,
    pub shift: [f64; 2],
    pub center: [f64; 2],
}

impl Similarity2D {
    pub fn identity(center: [f64; 2]) -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            shift: [0.0, 0.0],
            center,
        }
    }

    pub fn new(angle: f64, scale: f64, shift: [f64; 2], center: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("augmentation scale {scale} is not invertible")));
        }
        Ok(Self {
            angle,
            scale,
            shift,
            center,
        })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [
            self.scale * (c * d[0] - s * d[1]) + self.center[0] + self.shift[0],
            self.scale * (s * d[0] + c * d[1]) + self.center[1] + self.shift[1],
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let d = [
            (p[0] - self.center[0] - self.shift[0]) / self.scale,
            (p[1] - self.center[1] - self.shift[1]) / self.scale,
        ];
        [c * d[0] + s * d[1] + self.center[0], -s * d[0] + c * d[1] + self.center[1]]
    }

    /// 3D rotation about the camera axis matching the image rotation.
    pub fn rotate_3d(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    pub fn unrotate_3d(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub similarity: Similarity2D,
    /// Keypoints whose evidence is replaced by noise.
    pub occluded: Vec<bool>,
    /// Crop in augmented image coordinates.
    pub crop: Option<CropWindow>,
    pub occlusion_noise_px: f64,
    pub noise_seed: u64,
}

impl AugmentSpec {
    pub fn identity(joint_count: usize, center: [f64; 2]) -> Self {
        Self {
            kind: AugmentKind::Weak,
            similarity: Similarity2D::identity(center),
            occluded: vec![false; joint_count],
            crop: None,
            occlusion_noise_px: 0.0,
            noise_seed: 0,
        }
    }

    pub fn weak<R: Rng>(cfg: &AugmentConfig, joint_count: usize, center: [f64; 2], rng: &mut R) -> Self {
        let angle = cfg.max_rotation_deg.to_radians() * rng.random_range(-1.0..=1.0);
        let scale = if cfg.max_scale > cfg.min_scale {
            rng.random_range(cfg.min_scale..=cfg.max_scale)
        } else {
            cfg.min_scale
        };
        let shift = [
            cfg.max_shift_px * rng.random_range(-1.0..=1.0),
            cfg.max_shift_px * rng.random_range(-1.0..=1.0),
        ];
        Self {
            kind: AugmentKind::Weak,
            similarity: Similarity2D {
                angle,
                scale,
                shift,
                center,
            },
            occluded: vec![false; joint_count],
            crop: None,
            occlusion_noise_px: cfg.occlusion_noise_px,
            noise_seed: rng.random(),
        }
    }

    /// Weak geometry plus the given occlusion set and, sometimes, a crop that
    /// cuts off keypoints at one side of the augmented keypoints `points`.
    pub fn strong<R: Rng>(
        cfg: &AugmentConfig,
        occluded: Vec<bool>,
        points: &[[f64; 2]],
        center: [f64; 2],
        rng: &mut R,
    ) -> Self {
        let mut spec = Self::weak(cfg, occluded.len(), center, rng);
        spec.kind = AugmentKind::Strong;
        spec.occluded = occluded;
        if rng.random_bool(cfg.truncation_prob) && points.len() > 1 {
            let moved: Vec<[f64; 2]> = points.iter().map(|p| spec.similarity.apply(*p)).collect();
            let count = rng.random_range(cfg.truncation_min..=cfg.truncation_max);
            spec.crop = Some(truncation_crop(&moved, rng.random_range(0..4), count));
        }
        spec
    }

    /// Keypoints the losses must skip.
    pub fn masked(&self, transformed: &[[f64; 2]]) -> Vec<bool> {
        self.occluded
            .iter()
            .zip(transformed)
            .map(|(&o, p)| o || self.crop.is_some_and(|c| !c.contains(*p)))
            .collect()
    }
}

/// A frame as seen through an augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub features: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub masked: Vec<bool>,
}

/// Transform features and keypoints consistently.
pub fn apply_transform(spec: &AugmentSpec, features: &[f64], points: &[[f64; 2]]) -> AugmentedView {
    let sim = &spec.similarity;
    let moved: Vec<[f64; 2]> = points.iter().map(|p| sim.apply(*p)).collect();
    let masked = spec.masked(&moved);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let evidence: Vec<[f64; 2]> = decode_features(features)
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut q = sim.apply(p);
            if spec.occluded.get(k).copied().unwrap_or(false) {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                q = [q[0] + spec.occlusion_noise_px * nx, q[1] + spec.occlusion_noise_px * ny];
            }
            if let Some(c) = spec.crop {
                q = c.clamp(q);
            }
            q
        })
        .collect();
    AugmentedView {
        features: encode_features(&evidence),
        points: moved,
        masked,
    }
}

/// Map augmented-frame keypoints back to the original frame.
pub fn invert_points(spec: &AugmentSpec, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points.iter().map(|p| spec.similarity.invert(*p)).collect()
}

/// Map an augmented-frame root-relative 3D pose back to the original frame.
pub fn invert_pose(spec: &AugmentSpec, joints: &[[f64; 3]]) -> Vec<[f64; 3]> {
    joints.iter().map(|v| spec.similarity.unrotate_3d(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_view_unchanged() {
        let pts = vec![[100.0, 90.0], [140.0, 170.0]];
        let feats = encode_features(&pts);
        let spec = AugmentSpec::identity(2, [128.0, 128.0]);
        let v = apply_transform(&spec, &feats, &pts);
        assert_eq!(v.points, pts);
        for (a, b) in v.features.iter().zip(&feats) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(v.masked, vec![false, false]);
    }

    #[test]
    fn rotation_round_trip() {
        let sim = Similarity2D::new(30f64.to_radians(), 1.07, [3.0, -4.0], [128.0, 128.0]).unwrap();
        for p in [[0.0, 0.0], [200.0, 31.5], [128.0, 128.0]] {
            let q = sim.invert(sim.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
        let v = [0.3, -0.2, 0.1];
        let w = sim.unrotate_3d(sim.rotate_3d(v));
        for k in 0..3 {
            assert!((w[k] - v[k]).abs() < 1e-12);
        }
        assert!(Similarity2D::new(0.0, 0.0, [0.0, 0.0], [0.0, 0.0]).is_err());
    }

    #[test]
    fn image_rotation_matches_camera_axis_rotation() {
        use crate::kinematics::{project, Camera, Pose3D};
        let cam = Camera::default();
        let sim = Similarity2D::new(0.4, 1.0, [0.0, 0.0], cam.principal).unwrap();
        let pose = Pose3D {
            joints: vec![[0.1, -0.2, 5.0], [0.4, 0.3, 4.2]],
        };
        let rotated = Pose3D {
            joints: pose.joints.iter().map(|v| sim.rotate_3d(*v)).collect(),
        };
        let a = project(&pose, &cam).unwrap();
        let b = project(&rotated, &cam).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            let r = sim.apply(*p);
            assert!((r[0] - q[0]).abs() < 1e-9 && (r[1] - q[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_marks_points_outside_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AugmentConfig {
            truncation_prob: 1.0,
            ..AugmentConfig::default()
        };
        let pts: Vec<[f64; 2]> = (0..15).map(|k| [60.0 + 9.0 * k as f64, 40.0 + 11.0 * k as f64]).collect();
        for _ in 0..50 {
            let spec = AugmentSpec::strong(&cfg, vec![false; 15], &pts, [128.0, 128.0], &mut rng);
            let view = apply_transform(&spec, &encode_features(&pts), &pts);
            let crop = spec.crop.unwrap();
            for (p, m) in view.points.iter().zip(&view.masked) {
                assert_eq!(*m, !crop.contains(*p));
            }
            assert!(view.masked.iter().filter(|m| **m).count() >= cfg.truncation_min);
        }
    }
}
