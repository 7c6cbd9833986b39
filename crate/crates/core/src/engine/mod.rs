//! Losses, augmentations, the per-frame optimisation schedule and the
//! streaming pipelines.

pub mod adapt;
pub mod augment;
pub mod losses;
pub mod pipeline;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{ConfidenceRule, SelectionStrategy};

pub use adapt::{
    adaptive_aggregation, local_augmentation, plain_fit, stage1_adapt, stage2_adapt, FrameInput, Stage1Outcome,
    Stage2Outcome,
};
pub use augment::{apply_transform, invert_points, invert_pose, AugmentConfig, AugmentKind, AugmentSpec, AugmentedView, Similarity2D};
pub use losses::{loss_2d, loss_adapt, loss_aug, loss_proj, prior_penalty, Consistency};
pub use pipeline::{run_stream, RunOptions};
pub use report::{FrameRow, RunReport, SplitStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Prior weight.
    pub lambda1: f64,
    /// 3D consistency weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 3.0,
            lambda2: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub cos_sim_stop_threshold: f64,
    pub stage1_max_iters: usize,
    pub stage2_epe_threshold_px: f64,
    pub stage2_max_iters: usize,
    /// Hidden layer watched by the stage-1 stop rule; `None` = last hidden layer.
    pub similarity_layer: Option<usize>,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            cos_sim_stop_threshold: 0.9998,
            stage1_max_iters: 10,
            stage2_epe_threshold_px: 15.0,
            stage2_max_iters: 30,
            similarity_layer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    /// 2D term only, for every record.
    Weak,
    /// 2D and 3D terms for every record.
    Strong,
    /// 3D term only for confident records.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    SingleStream,
    PerVideoReset,
    FullMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineMode {
    pub kind: PipelineKind,
    pub aggregation: bool,
    pub local_aug: bool,
    pub two_stage: bool,
    pub pseudo_label: PseudoLabel,
    pub selection: SelectionStrategy,
}

impl Default for PipelineMode {
    fn default() -> Self {
        Self::full()
    }
}

impl PipelineMode {
    pub fn single() -> Self {
        Self {
            kind: PipelineKind::SingleStream,
            aggregation: false,
            local_aug: false,
            two_stage: false,
            pseudo_label: PseudoLabel::Adaptive,
            selection: SelectionStrategy::BalancedClustered,
        }
    }

    pub fn per_video() -> Self {
        Self {
            kind: PipelineKind::PerVideoReset,
            ..Self::single()
        }
    }

    pub fn full() -> Self {
        Self {
            kind: PipelineKind::FullMethod,
            aggregation: true,
            local_aug: true,
            two_stage: true,
            ..Self::single()
        }
    }

    /// Whether the model is rewound at every video boundary.
    pub fn resets(&self) -> bool {
        self.kind != PipelineKind::SingleStream
    }

    pub fn uses_aggregation(&self) -> bool {
        self.kind == PipelineKind::FullMethod && self.aggregation
    }

    pub fn uses_local_aug(&self) -> bool {
        self.kind == PipelineKind::FullMethod && self.local_aug
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub weights: LossWeights,
    pub two_stage: TwoStageConfig,
    pub confidence: ConfidenceRule,
    pub augment: AugmentConfig,
    pub lr_stream: f64,
    pub beta1_stream: f64,
    pub lr_agg: f64,
    pub beta1_agg: f64,
    pub batch_agg: usize,
    pub agg_epochs: usize,
    /// Samples kept per video and drawn per aggregation.
    pub n_v: usize,
    /// Pose clusters per subset.
    pub n_c: usize,
    /// Preceding frames searched by local augmentation.
    pub window: usize,
    pub ema_decay: f64,
    pub pseudo_label_source: PseudoLabelSource,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            two_stage: TwoStageConfig::default(),
            confidence: ConfidenceRule::default(),
            augment: AugmentConfig::default(),
            lr_stream: 3e-4,
            beta1_stream: 0.5,
            lr_agg: 3e-4,
            beta1_agg: 0.7,
            batch_agg: 8,
            agg_epochs: 1,
            n_v: 160,
            n_c: 15,
            window: 5,
            ema_decay: 0.99,
            pseudo_label_source: PseudoLabelSource::Teacher,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.weights.lambda1 >= 0.0 && self.weights.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        let t = &self.two_stage;
        if !(t.cos_sim_stop_threshold > 0.0 && t.stage2_epe_threshold_px > 0.0) {
            return bad("two-stage thresholds must be positive");
        }
        if !(self.lr_stream >= 0.0 && self.lr_agg >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        for b in [self.beta1_stream, self.beta1_agg] {
            if !(0.0..1.0).contains(&b) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        if self.batch_agg == 0 {
            return bad("batch_agg must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        self.confidence.validate(joint_count)?;
        self.augment.validate()
    }
}
