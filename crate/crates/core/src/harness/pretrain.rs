//! Supervised training of the regressor on labelled source samples.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::diffmodel::{adam_step, AdamState, Gradient, ParamsView, PoseObjective, RegressorState};
use crate::error::{Error, Result};
use crate::kinematics::{fk_generic, forward_kinematics, mpjpe, SkeletonTemplate};
use crate::streamgen::{derive_seed, SourceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub param_weight: f64,
    /// Weight of the mean squared root-relative joint error (cm^2).
    pub joint_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            batch_size: 32,
            max_epochs: 60,
            patience: 5,
            validation_fraction: 0.1,
            param_weight: 1.0,
            joint_weight: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1 must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.param_weight >= 0.0 && self.joint_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Squared parameter error plus squared root-relative joint error.
pub struct SupervisedLoss<'a> {
    pub skel: &'a SkeletonTemplate,
    pub target: &'a SourceSample,
    target_rel: Vec<[f64; 3]>,
    target_flat: Vec<f64>,
    pub param_weight: f64,
    pub joint_weight: f64,
}

impl<'a> SupervisedLoss<'a> {
    pub fn new(skel: &'a SkeletonTemplate, target: &'a SourceSample, cfg: &PretrainConfig) -> Self {
        Self {
            skel,
            target,
            target_rel: target.gt_3d.root_relative(),
            target_flat: target.gt_params.to_flat(),
            param_weight: cfg.param_weight,
            joint_weight: cfg.joint_weight,
        }
    }
}

impl PoseObjective for SupervisedLoss<'_> {
    fn eval<R: Real>(&self, p: &ParamsView<R>) -> R {
        let mut e_param = R::cst(0.0);
        let flat = p.theta.iter().chain(&p.beta).chain(p.trans.iter());
        for (v, &t) in flat.zip(&self.target_flat) {
            let d = *v - R::cst(t);
            e_param = e_param + d * d;
        }
        let joints = fk_generic(self.skel, &p.theta, &p.beta, p.trans);
        let root = joints[0];
        let mut e_joint = R::cst(0.0);
        for (j, t) in joints.iter().zip(&self.target_rel) {
            for k in 0..3 {
                let d = (j[k] - root[k] - R::cst(t[k])).scale(100.0);
                e_joint = e_joint + d * d;
            }
        }
        e_param.scale(self.param_weight / self.target_flat.len() as f64)
            + e_joint.scale(self.joint_weight / joints.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mpjpe_mm: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters with the best validation error.
    pub model: RegressorState,
    pub log: Vec<EpochLog>,
    /// Validation error of the untrained initialisation.
    pub initial_val_mpjpe_mm: f64,
    pub best_val_mpjpe_mm: f64,
}

impl PretrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mpjpe_mm\n");
        let _ = writeln!(s, "0,,{}", self.initial_val_mpjpe_mm);
        for e in &self.log {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_mpjpe_mm);
        }
        s
    }
}

/// Mean MPJPE of `model` over `samples`.
pub fn evaluate(model: &RegressorState, samples: &[SourceSample]) -> Result<f64> {
    let skel = SkeletonTemplate::default();
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in samples {
        let pred = forward_kinematics(&skel, &model.predict(&s.features)?)?;
        sum += mpjpe(&pred, &s.gt_3d)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Train from `init` on `samples` until validation error stops improving.
pub fn pretrain(init: RegressorState, samples: &[SourceSample], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
    if samples.len() <= n_val {
        return Err(Error::InvalidInput("too few source samples to hold out a validation split".into()));
    }
    let (val, train) = samples.split_at(n_val);
    let skel = SkeletonTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a11));
    let mut model = init;
    let mut adam = AdamState::for_model(&model, cfg.learning_rate, cfg.beta1);
    let initial = evaluate(&model, val)?;
    let mut best = (initial, model.clone());
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Gradient::zeros(model.param_count());
            for &i in batch {
                let obj = SupervisedLoss::new(&skel, &train[i], cfg);
                let (loss, g) = model.loss_gradient(&train[i].features, &obj).map_err(|e| match e {
                    Error::GradientInvalid(v) => Error::Diverged(format!("epoch {epoch}: training loss became {v}")),
                    other => other,
                })?;
                total += loss;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            adam_step(model.params_mut(), &mut adam, &grad)?;
        }
        if !model.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite parameters")));
        }
        let val_mpjpe = evaluate(&model, val)?;
        let train_loss = total / train.len() as f64;
        info!("epoch {epoch}: train loss {train_loss:.5}, validation MPJPE {val_mpjpe:.2} mm");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mpjpe_mm: val_mpjpe,
        });
        if val_mpjpe < best.0 {
            best = (val_mpjpe, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        model: best.1,
        log,
        initial_val_mpjpe_mm: initial,
        best_val_mpjpe_mm: best.0,
    })
}
