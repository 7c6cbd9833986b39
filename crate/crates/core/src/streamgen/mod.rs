//! Synthetic source data and domain-shifted test streams.
//!
//! Features are the model's stand-in for an image: the keypoints visible in
//! the frame, normalised to roughly [-1, 1] against the nominal camera. Test
//! streams add a per-video domain shift (feature bias plus focal jitter) and
//! sporadic occlusion/truncation events that corrupt both the features and a
//! simulated 2D estimator whose confidence tracks its own noise level.

pub(crate) mod format;

pub use format::{read_stream, read_stream_from, write_stream, write_stream_to};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, project, Camera, Keypoints2D, PoseParams, Pose3D, SkeletonTemplate,
    BETA_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Gaussian,
    /// Heavy-tailed alternative; scale matches the Gaussian sigma.
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub video_count: usize,
    pub frames_per_video: usize,
    /// Samples drawn by [`generate_source`].
    pub source_count: usize,
    /// Scales the source joint-angle spread.
    pub source_spread: f64,
    /// How far the test pose distribution's means move from the source's.
    pub target_mean_shift: f64,
    /// Multiplier on the source joint-angle spread for test poses.
    pub target_spread: f64,
    /// Feature-bias scale of the domain shift (normalised feature units).
    pub shift_magnitude: f64,
    /// Fraction of the bias variance shared by every test video.
    pub shared_shift_fraction: f64,
    /// Relative focal-length jitter per test video.
    pub focal_jitter: f64,
    /// Pixel noise on the image evidence encoded into features.
    pub feature_noise_px: f64,
    /// Pixel noise on occluded keypoints' image evidence.
    pub occluded_feature_noise_px: f64,
    pub noise_sigma_base: f64,
    pub noise_model: NoiseModel,
    pub student_t_dof: f64,
    pub event_rate: f64,
    pub event_noise_multiplier: f64,
    /// Pixel scale of the confidence map `exp(-sigma / conf_scale)`.
    pub conf_scale: f64,
    pub conf_jitter: f64,
    /// Largest per-frame change of any joint angle (radians).
    pub step_bound: f64,
    pub step_sigma: f64,
    /// Pull of the random walk towards the test distribution mean.
    pub mean_reversion: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            video_count: 8,
            frames_per_video: 200,
            source_count: 8000,
            source_spread: 1.0,
            target_mean_shift: 1.0,
            target_spread: 1.3,
            shift_magnitude: 0.2,
            shared_shift_fraction: 0.85,
            focal_jitter: 0.15,
            feature_noise_px: 1.0,
            occluded_feature_noise_px: 25.0,
            noise_sigma_base: 12.0,
            noise_model: NoiseModel::Gaussian,
            student_t_dof: 3.0,
            event_rate: 0.3,
            event_noise_multiplier: 10.0,
            conf_scale: 80.0,
            conf_jitter: 0.05,
            step_bound: 0.06,
            step_sigma: 0.03,
            mean_reversion: 0.02,
            seed: 22,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.video_count < 1 {
            return bad("video_count must be >= 1");
        }
        if self.frames_per_video < 2 {
            return bad("frames_per_video must be >= 2");
        }
        for (name, r) in [
            ("event_rate", self.event_rate),
            ("shared_shift_fraction", self.shared_shift_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, s) in [
            ("noise_sigma_base", self.noise_sigma_base),
            ("event_noise_multiplier", self.event_noise_multiplier),
            ("feature_noise_px", self.feature_noise_px),
            ("occluded_feature_noise_px", self.occluded_feature_noise_px),
            ("shift_magnitude", self.shift_magnitude),
            ("focal_jitter", self.focal_jitter),
            ("step_bound", self.step_bound),
            ("step_sigma", self.step_sigma),
            ("conf_jitter", self.conf_jitter),
            ("source_spread", self.source_spread),
            ("target_spread", self.target_spread),
        ] {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if !(self.conf_scale > 0.0) {
            return bad("conf_scale must be > 0");
        }
        if self.focal_jitter >= 1.0 {
            return bad("focal_jitter must be < 1");
        }
        if self.noise_model == NoiseModel::StudentT && !(self.student_t_dof > 0.0) {
            return bad("student_t_dof must be > 0");
        }
        Ok(())
    }

    /// Short content hash recorded in stream headers.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Visible,
    Occluded,
    Truncated,
}

impl Visibility {
    pub fn code(self) -> u8 {
        match self {
            Visibility::Visible => 0,
            Visibility::Occluded => 1,
            Visibility::Truncated => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Visibility::Visible),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Truncated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMask {
    pub flags: Vec<Visibility>,
}

impl EventMask {
    pub fn all_visible(j: usize) -> Self {
        Self {
            flags: vec![Visibility::Visible; j],
        }
    }

    pub fn is_event(&self) -> bool {
        self.flags.iter().any(|f| *f != Visibility::Visible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub video_id: usize,
    pub frame_id: usize,
    pub camera: Camera,
    pub features: Vec<f64>,
    pub gt_params: PoseParams,
    pub gt_3d: Pose3D,
    pub gt_2d: Keypoints2D,
    pub est_2d: Keypoints2D,
    pub mask: EventMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub video_id: usize,
    pub camera: Camera,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct SourceSample {
    pub features: Vec<f64>,
    pub gt_params: PoseParams,
    pub gt_3d: Pose3D,
}

/// Length of the feature vector for `j` joints.
pub fn feature_dim(j: usize) -> usize {
    2 * j
}

/// Normalise pixel positions against the nominal camera.
pub fn encode_features(points: &[[f64; 2]]) -> Vec<f64> {
    let cam = Camera::default();
    let half = [cam.image_size[0] / 2.0, cam.image_size[1] / 2.0];
    points
        .iter()
        .flat_map(|p| {
            [
                (p[0] - cam.principal[0]) / half[0],
                (p[1] - cam.principal[1]) / half[1],
            ]
        })
        .collect()
}

/// Inverse of [`encode_features`].
pub fn decode_features(features: &[f64]) -> Vec<[f64; 2]> {
    let cam = Camera::default();
    let half = [cam.image_size[0] / 2.0, cam.image_size[1] / 2.0];
    features
        .chunks_exact(2)
        .map(|f| {
            [
                f[0] * half[0] + cam.principal[0],
                f[1] * half[1] + cam.principal[1],
            ]
        })
        .collect()
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-joint, per-axis mean and spread of the joint angles.
#[derive(Debug, Clone)]
pub struct PoseDistribution {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

// (joint, [mean], [std]) for joints that move other joints; leaves stay at zero.
const SOURCE_PRIOR: [(usize, [f64; 3], [f64; 3]); 10] = [
    (0, [0.0, 0.0, 0.0], [0.12, 0.35, 0.08]),
    (1, [-0.05, 0.0, 0.0], [0.15, 0.15, 0.10]),
    (3, [-0.1, 0.0, -0.25], [0.40, 0.20, 0.30]),
    (4, [-0.4, 0.0, 0.0], [0.35, 0.10, 0.10]),
    (6, [-0.1, 0.0, 0.25], [0.40, 0.20, 0.30]),
    (7, [-0.4, 0.0, 0.0], [0.35, 0.10, 0.10]),
    (9, [-0.1, 0.0, 0.0], [0.30, 0.10, 0.10]),
    (10, [0.25, 0.0, 0.0], [0.30, 0.05, 0.05]),
    (12, [-0.1, 0.0, 0.0], [0.30, 0.10, 0.10]),
    (13, [0.25, 0.0, 0.0], [0.30, 0.05, 0.05]),
];

// Direction in which test poses differ from training poses.
const TARGET_SHIFT: [(usize, [f64; 3]); 9] = [
    (0, [0.15, 0.0, 0.0]),
    (1, [-0.30, 0.0, 0.10]),
    (3, [-0.60, 0.0, -0.20]),
    (4, [-0.50, 0.0, 0.0]),
    (6, [-0.60, 0.0, 0.20]),
    (7, [-0.50, 0.0, 0.0]),
    (9, [-0.50, 0.0, 0.0]),
    (10, [0.60, 0.0, 0.0]),
    (12, [-0.40, 0.0, 0.0]),
];

impl PoseDistribution {
    pub fn source(j: usize, spread: f64) -> Self {
        let mut mean = vec![0.0; 3 * j];
        let mut std = vec![0.0; 3 * j];
        for (jt, m, s) in SOURCE_PRIOR {
            if jt < j {
                for a in 0..3 {
                    mean[3 * jt + a] = m[a];
                    std[3 * jt + a] = spread * s[a];
                }
            }
        }
        Self { mean, std }
    }

    pub fn target(j: usize, cfg: &StreamConfig) -> Self {
        let mut d = Self::source(j, cfg.source_spread * cfg.target_spread);
        for (jt, s) in TARGET_SHIFT {
            if jt < j {
                for (m, sa) in d.mean[3 * jt..3 * jt + 3].iter_mut().zip(s) {
                    *m += cfg.target_mean_shift * sa;
                }
            }
        }
        d
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| if s > 0.0 { m + s * standard_normal(rng) } else { m })
            .collect()
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn sample_beta<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..BETA_DIM)
        .map(|_| (1.0 + 0.06 * standard_normal(rng)).clamp(0.8, 1.2))
        .collect()
}

fn sample_trans<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        0.15 * standard_normal(rng),
        0.10 * standard_normal(rng),
        rng.random_range(4.5..6.0),
    ]
}

/// i.i.d. labelled samples from the training pose distribution, rendered with
/// the nominal camera and no domain shift.
pub fn generate_source(cfg: &StreamConfig) -> Result<Vec<SourceSample>> {
    cfg.validate()?;
    let skel = SkeletonTemplate::default();
    let j = skel.joint_count();
    let dist = PoseDistribution::source(j, cfg.source_spread);
    let cam = Camera::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5eed_0000));
    let noise = Normal::new(0.0, cfg.feature_noise_px.max(0.0)).expect("valid sigma");
    let mut out = Vec::with_capacity(cfg.source_count);
    while out.len() < cfg.source_count {
        let params = PoseParams {
            theta: dist.sample(&mut rng),
            beta: sample_beta(&mut rng),
            trans: sample_trans(&mut rng),
        };
        let gt_3d = forward_kinematics(&skel, &params)?;
        let Ok(gt_2d) = project(&gt_3d, &cam) else { continue };
        let obs: Vec<[f64; 2]> = gt_2d
            .points
            .iter()
            .map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)])
            .collect();
        out.push(SourceSample {
            features: encode_features(&obs),
            gt_params: params,
            gt_3d,
        });
    }
    Ok(out)
}

/// Body regions hidden together by an occlusion event.
const OCCLUSION_GROUPS: [&[usize]; 6] = [
    &[1, 3, 4, 5, 9, 10, 11],
    &[1, 6, 7, 8, 12, 13, 14],
    &[0, 9, 10, 11, 12, 13, 14],
    &[2, 3, 4, 5, 6, 7, 8],
    &[4, 5, 7, 8, 10, 11, 13, 14],
    &[0, 1, 9, 10, 11, 12, 13, 14],
];

/// Axis-aligned window of the frame that stays in view after a truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl CropWindow {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }
}

/// Crop that cuts off the `count` most extreme keypoints on one side.
pub fn truncation_crop(points: &[[f64; 2]], side: usize, count: usize) -> CropWindow {
    let (axis, far_high) = match side % 4 {
        0 => (1, true),
        1 => (1, false),
        2 => (0, true),
        _ => (0, false),
    };
    let mut coords: Vec<f64> = points.iter().map(|p| p[axis]).collect();
    coords.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if far_high {
        coords.reverse();
    }
    let count = count.clamp(1, points.len() - 1);
    let edge = 0.5 * (coords[count - 1] + coords[count]);
    let big = 1e9;
    let mut w = CropWindow {
        min: [-big, -big],
        max: [big, big],
    };
    if far_high {
        w.max[axis] = edge;
    } else {
        w.min[axis] = edge;
    }
    w
}

/// Estimated keypoints with confidences for a frame whose visibility is `mask`.
pub fn simulate_estimator<R: Rng>(
    gt_2d: &Keypoints2D,
    mask: &EventMask,
    cfg: &StreamConfig,
    rng: &mut R,
) -> Keypoints2D {
    let t = StudentT::new(cfg.student_t_dof.max(1e-3)).expect("valid dof");
    let mut points = Vec::with_capacity(gt_2d.len());
    let mut confidence = Vec::with_capacity(gt_2d.len());
    for (p, flag) in gt_2d.points.iter().zip(&mask.flags) {
        let sigma = match flag {
            Visibility::Visible => cfg.noise_sigma_base,
            _ => cfg.noise_sigma_base * cfg.event_noise_multiplier,
        };
        let mut draw = || match cfg.noise_model {
            NoiseModel::Gaussian => standard_normal(rng),
            NoiseModel::StudentT => t.sample(rng),
        };
        let (nx, ny) = (draw(), draw());
        points.push([p[0] + sigma * nx, p[1] + sigma * ny]);
        let jitter = if cfg.conf_jitter > 0.0 {
            rng.random_range(-cfg.conf_jitter..=cfg.conf_jitter)
        } else {
            0.0
        };
        confidence.push(((-sigma / cfg.conf_scale).exp() + jitter).clamp(0.0, 1.0));
    }
    Keypoints2D { points, confidence }
}

struct VideoSetup {
    camera: Camera,
    beta: Vec<f64>,
    bias: Vec<f64>,
}

fn video_setup(cfg: &StreamConfig, video: usize, j: usize, shared: &[f64]) -> VideoSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0100_0000 + video as u64));
    let nominal = Camera::default();
    let focal = nominal.focal * (1.0 + cfg.focal_jitter * rng.random_range(-1.0..=1.0));
    let f = cfg.shared_shift_fraction;
    let bias = shared
        .iter()
        .map(|s| cfg.shift_magnitude * (f.sqrt() * s + (1.0 - f).sqrt() * standard_normal(&mut rng)))
        .collect();
    debug_assert_eq!(shared.len(), feature_dim(j));
    VideoSetup {
        camera: Camera { focal, ..nominal },
        beta: sample_beta(&mut rng),
        bias,
    }
}

fn sample_event<R: Rng>(gt_2d: &Keypoints2D, rng: &mut R) -> (EventMask, Option<CropWindow>) {
    let j = gt_2d.len();
    let mut mask = EventMask::all_visible(j);
    if rng.random_bool(0.6) {
        let group = OCCLUSION_GROUPS[rng.random_range(0..OCCLUSION_GROUPS.len())];
        for &k in group.iter().filter(|&&k| k < j) {
            mask.flags[k] = Visibility::Occluded;
        }
        (mask, None)
    } else {
        let count = rng.random_range(6..=9).min(j - 1);
        let crop = truncation_crop(&gt_2d.points, rng.random_range(0..4), count);
        for (k, p) in gt_2d.points.iter().enumerate() {
            if !crop.contains(*p) {
                mask.flags[k] = Visibility::Truncated;
            }
        }
        (mask, Some(crop))
    }
}

/// Domain-shifted test videos, each a smooth random walk through test poses.
pub fn generate_streams(cfg: &StreamConfig) -> Result<Vec<Video>> {
    cfg.validate()?;
    let skel = SkeletonTemplate::default();
    let j = skel.joint_count();
    let target = PoseDistribution::target(j, cfg);
    let mut shared_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHARED_SHIFT_STREAM));
    let shared: Vec<f64> = (0..feature_dim(j)).map(|_| standard_normal(&mut shared_rng)).collect();
    (0..cfg.video_count)
        .map(|v| generate_video(cfg, &skel, &target, &shared, v))
        .collect()
}

const SHARED_SHIFT_STREAM: u64 = 0x5348_4152;

fn generate_video(
    cfg: &StreamConfig,
    skel: &SkeletonTemplate,
    target: &PoseDistribution,
    shared: &[f64],
    v: usize,
) -> Result<Video> {
    let j = skel.joint_count();
    let setup = video_setup(cfg, v, j, shared);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0200_0000 + v as u64));
    let mut theta = target.sample(&mut rng);
    let mut trans = sample_trans(&mut rng);
    let home_trans = trans;
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for f in 0..cfg.frames_per_video {
        if f > 0 {
            for (k, th) in theta.iter_mut().enumerate() {
                if target.std[k] == 0.0 {
                    continue;
                }
                let step = cfg.step_sigma * standard_normal(&mut rng)
                    + cfg.mean_reversion * (target.mean[k] - *th);
                *th += step.clamp(-cfg.step_bound, cfg.step_bound);
            }
            for a in 0..3 {
                let step = 0.01 * standard_normal(&mut rng) + 0.02 * (home_trans[a] - trans[a]);
                trans[a] += step.clamp(-0.03, 0.03);
            }
        }
        let gt_params = PoseParams {
            theta: theta.clone(),
            beta: setup.beta.clone(),
            trans,
        };
        let gt_3d = forward_kinematics(skel, &gt_params)?;
        let gt_2d = project(&gt_3d, &setup.camera)?;
        let (mask, crop) = if rng.random_bool(cfg.event_rate) {
            sample_event(&gt_2d, &mut rng)
        } else {
            (EventMask::all_visible(j), None)
        };
        let est_2d = simulate_estimator(&gt_2d, &mask, cfg, &mut rng);
        let obs: Vec<[f64; 2]> = gt_2d
            .points
            .iter()
            .zip(&mask.flags)
            .map(|(p, flag)| {
                let (base, sigma) = match flag {
                    Visibility::Visible => (*p, cfg.feature_noise_px),
                    Visibility::Occluded => (*p, cfg.occluded_feature_noise_px),
                    Visibility::Truncated => (
                        crop.expect("truncation carries a crop").clamp(*p),
                        cfg.feature_noise_px,
                    ),
                };
                [
                    base[0] + sigma * standard_normal(&mut rng),
                    base[1] + sigma * standard_normal(&mut rng),
                ]
            })
            .collect();
        let features = encode_features(&obs)
            .into_iter()
            .zip(&setup.bias)
            .map(|(x, b)| x + b)
            .collect();
        frames.push(Frame {
            video_id: v,
            frame_id: f,
            camera: setup.camera,
            features,
            gt_params,
            gt_3d,
            gt_2d,
            est_2d,
            mask,
        });
    }
    Ok(Video {
        video_id: v,
        camera: setup.camera,
        frames,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut k = i;
            while k + 1 < idx.len() && v[idx[k + 1]] == v[idx[i]] {
                k += 1;
            }
            let avg = (i + k) as f64 / 2.0;
            for &t in &idx[i..=k] {
                r[t] = avg;
            }
            i = k + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
