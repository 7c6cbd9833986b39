//! Per-frame optimisation (two-stage or plain), local augmentation and
//! cross-video aggregation.

use rand::Rng;

use crate::diffmodel::{adam_step, cosine_similarity, ema_update, AdamState, Gradient, RegressorState, Snapshot, TeacherState};
use crate::error::Result;
use crate::kinematics::{forward_kinematics, project, Camera, Keypoints2D, PoseParams, Pose3D, SkeletonTemplate};
use crate::selection::{is_confident, ConfidenceRule, MemoryBank};

use super::augment::{apply_transform, AugmentSpec};
use super::losses::{adapt_objective, Consistency};
use super::{EngineConfig, PseudoLabel};

/// Student model, its optimizer and (optionally) the mean teacher that
/// follows every persisted step.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: RegressorState,
    pub adam: AdamState,
    pub teacher: Option<TeacherState>,
}

impl Learner {
    pub fn new(model: RegressorState, adam: AdamState, teacher: Option<TeacherState>) -> Self {
        Self { model, adam, teacher }
    }

    pub fn step(&mut self, grad: &Gradient) -> Result<()> {
        adam_step(self.model.params_mut(), &mut self.adam, grad)?;
        if let Some(t) = &mut self.teacher {
            ema_update(t, &self.model)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::capture(&self.model, &self.adam)
    }
}

/// What a frame needs for its projection losses.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub features: &'a [f64],
    pub est: &'a Keypoints2D,
    pub camera: Camera,
}

fn similarity_layer(model: &RegressorState, cfg: &EngineConfig) -> usize {
    let last = model.layer_count() - 2;
    cfg.two_stage.similarity_layer.unwrap_or(last).min(last)
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub iters: usize,
    /// Cosine similarity measured after the last step (1 when none ran).
    pub last_similarity: f64,
    /// State handed to the next frame.
    pub snapshot: Snapshot,
}

/// Steps on `loss_proj` until the watched hidden features move far enough
/// (cosine similarity below the threshold), the gradient vanishes, or the
/// iteration budget runs out.
pub fn stage1_adapt(
    learner: &mut Learner,
    skel: &SkeletonTemplate,
    input: FrameInput<'_>,
    cfg: &EngineConfig,
) -> Result<Stage1Outcome> {
    let obj = Consistency::projection(skel, input.camera, input.est, &cfg.confidence, cfg.weights.lambda1);
    let layer = similarity_layer(&learner.model, cfg);
    let mut iters = 0;
    let mut last_similarity = 1.0;
    if cfg.two_stage.stage1_max_iters > 0 {
        let mut before = learner.model.feature_at_layer(input.features, layer)?;
        while iters < cfg.two_stage.stage1_max_iters {
            let (_, grad) = learner.model.loss_gradient(input.features, &obj)?;
            iters += 1;
            if grad.is_zero() {
                break;
            }
            learner.step(&grad)?;
            let after = learner.model.feature_at_layer(input.features, layer)?;
            last_similarity = cosine_similarity(&before, &after);
            if last_similarity < cfg.two_stage.cos_sim_stop_threshold {
                break;
            }
            before = after;
        }
    }
    Ok(Stage1Outcome {
        iters,
        last_similarity,
        snapshot: learner.snapshot(),
    })
}

/// Mean pixel distance over confident keypoints (all keypoints when none is
/// confident) between the projected prediction and the estimate.
pub fn confident_epe(
    skel: &SkeletonTemplate,
    params: &PoseParams,
    input: FrameInput<'_>,
    rule: &ConfidenceRule,
) -> Result<f64> {
    let proj = project(&forward_kinematics(skel, params)?, &input.camera)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    let any = input.est.confidence.iter().any(|&c| rule.keypoint_confident(c));
    for ((p, e), &c) in proj.points.iter().zip(&input.est.points).zip(&input.est.confidence) {
        if !any || rule.keypoint_confident(c) {
            sum += ((p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub prediction: PoseParams,
    pub iters: usize,
    /// Confident-keypoint 2D EPE of the returned prediction.
    pub epe_px: f64,
}

/// Keep fitting a throwaway copy of the stage-1 model until the 2D fit
/// reaches the threshold or the budget runs out; return the best-fitting
/// prediction seen.
pub fn stage2_adapt(
    model: &RegressorState,
    adam: &AdamState,
    skel: &SkeletonTemplate,
    input: FrameInput<'_>,
    cfg: &EngineConfig,
) -> Result<Stage2Outcome> {
    let obj = Consistency::projection(skel, input.camera, input.est, &cfg.confidence, cfg.weights.lambda1);
    let mut model = model.clone();
    let mut adam = adam.clone();
    let mut best = model.predict(input.features)?;
    let mut best_epe = confident_epe(skel, &best, input, &cfg.confidence)?;
    let mut iters = 0;
    while best_epe > cfg.two_stage.stage2_epe_threshold_px && iters < cfg.two_stage.stage2_max_iters {
        let (_, grad) = model.loss_gradient(input.features, &obj)?;
        iters += 1;
        if grad.is_zero() {
            break;
        }
        adam_step(model.params_mut(), &mut adam, &grad)?;
        let pred = model.predict(input.features)?;
        let epe = confident_epe(skel, &pred, input, &cfg.confidence)?;
        if epe < best_epe {
            best_epe = epe;
            best = pred;
        }
    }
    Ok(Stage2Outcome {
        prediction: best,
        iters,
        epe_px: best_epe,
    })
}

/// Stage 2 without the split: the fitted model carries on to the next
/// frame. Runs until the stage-2 threshold or budget.
pub fn plain_fit(
    learner: &mut Learner,
    skel: &SkeletonTemplate,
    input: FrameInput<'_>,
    cfg: &EngineConfig,
) -> Result<Stage2Outcome> {
    let obj = Consistency::projection(skel, input.camera, input.est, &cfg.confidence, cfg.weights.lambda1);
    let mut pred = learner.model.predict(input.features)?;
    let mut epe = confident_epe(skel, &pred, input, &cfg.confidence)?;
    let mut iters = 0;
    while epe > cfg.two_stage.stage2_epe_threshold_px && iters < cfg.two_stage.stage2_max_iters {
        let (_, grad) = learner.model.loss_gradient(input.features, &obj)?;
        iters += 1;
        if grad.is_zero() {
            break;
        }
        learner.step(&grad)?;
        pred = learner.model.predict(input.features)?;
        epe = confident_epe(skel, &pred, input, &cfg.confidence)?;
    }
    Ok(Stage2Outcome {
        prediction: pred,
        iters,
        epe_px: epe,
    })
}

/// A processed frame kept for local augmentation.
#[derive(Debug, Clone)]
pub struct WindowEntry {
    pub features: Vec<f64>,
    pub est: Keypoints2D,
    pub camera: Camera,
    /// The prediction reported for the frame.
    pub pose: Pose3D,
    pub confident: bool,
}

/// One step per confident window frame, oldest first, on its strongly
/// augmented view. Keypoints confident there but not in `current` are
/// occluded. Returns the number of steps taken.
pub fn local_augmentation<R: Rng>(
    learner: &mut Learner,
    skel: &SkeletonTemplate,
    window: &[WindowEntry],
    current: &Keypoints2D,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<usize> {
    let rule = &cfg.confidence;
    let mut steps = 0;
    for entry in window.iter().filter(|e| e.confident) {
        let occluded: Vec<bool> = entry
            .est
            .confidence
            .iter()
            .zip(&current.confidence)
            .map(|(&then, &now)| rule.keypoint_confident(then) && !rule.keypoint_confident(now))
            .collect();
        let spec = AugmentSpec::strong(&cfg.augment, occluded, &entry.est.points, entry.camera.principal, rng);
        let view = apply_transform(&spec, &entry.features, &entry.est.points);
        let obj = Consistency::augmented(
            skel,
            entry.camera,
            &spec,
            &view.masked,
            &entry.est,
            Some(&entry.pose),
            rule,
            0.0,
            cfg.weights.lambda2,
        );
        let (_, grad) = learner.model.loss_gradient(&view.features, &obj)?;
        learner.step(&grad)?;
        steps += 1;
    }
    Ok(steps)
}

/// Whether a banked record's 3D pseudo-label is used.
pub fn uses_3d(mode: PseudoLabel, confident: bool) -> bool {
    match mode {
        PseudoLabel::Weak => false,
        PseudoLabel::Strong => true,
        PseudoLabel::Adaptive => confident,
    }
}

/// Rewind to `start` and train on records drawn from the bank: one pass (per
/// configured epoch) in mini-batches with a fresh optimizer. Returns the
/// model for the next video and the number of optimizer steps.
pub fn adaptive_aggregation<R: Rng>(
    start: &Snapshot,
    bank: &mut MemoryBank,
    skel: &SkeletonTemplate,
    pseudo_label: PseudoLabel,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<(RegressorState, usize)> {
    let mut model = start.model().clone();
    if bank.is_empty() || cfg.n_v == 0 {
        return Ok((model, 0));
    }
    let drawn = bank.draw_indices(cfg.n_v, rng);
    let mut adam = AdamState::for_model(&model, cfg.lr_agg, cfg.beta1_agg);
    let mut steps = 0;
    for _ in 0..cfg.agg_epochs {
        for batch in drawn.chunks(cfg.batch_agg) {
            let mut grad = Gradient::zeros(model.param_count());
            for &i in batch {
                let record = &bank.records()[i];
                let spec = AugmentSpec::weak(&cfg.augment, record.est_2d.len(), record.camera.principal, rng);
                let view = apply_transform(&spec, &record.features, &record.est_2d.points);
                let use_3d = uses_3d(pseudo_label, record.confident);
                let obj = adapt_objective(skel, record, &spec, &view.masked, use_3d, &cfg.confidence, &cfg.weights);
                let (_, g) = model.loss_gradient(&view.features, &obj)?;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            adam_step(model.params_mut(), &mut adam, &grad)?;
            steps += 1;
        }
    }
    Ok((model, steps))
}

/// Confidence flag of an estimate under `rule`.
pub fn frame_confident(est: &Keypoints2D, rule: &ConfidenceRule) -> bool {
    is_confident(&est.confidence, rule)
}
