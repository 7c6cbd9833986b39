//! The streaming driver: frames in order, videos in order.

use std::collections::VecDeque;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmodel::{AdamState, RegressorState, Snapshot, TeacherState};
use crate::error::{check_dim, Result};
use crate::kinematics::{forward_kinematics, mpjpe, pa_mpjpe, epe_2d, project, Pose3D, PoseParams, SkeletonTemplate};
use crate::selection::{select_representatives, MemoryBank};
use crate::streamgen::{derive_seed, feature_dim, Frame, Video};

use super::adapt::{
    adaptive_aggregation, frame_confident, local_augmentation, plain_fit, stage1_adapt, stage2_adapt, FrameInput,
    Learner, WindowEntry,
};
use super::report::{FrameRow, RunReport};
use super::{EngineConfig, PipelineMode, PseudoLabelSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Compare the state entering every frame with the previous frame's
    /// stage-1 snapshot.
    pub check_isolation: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 22,
            check_isolation: false,
        }
    }
}

const AUG_STREAM: u64 = 0x1000;
const AGG_STREAM: u64 = 0x2000;
const SELECT_STREAM: u64 = 0x3000;

struct FrameResult {
    prediction: PoseParams,
    stage1_iters: usize,
    stage2_iters: usize,
    localaug_steps: usize,
    /// State to hand to the next frame.
    handoff: Snapshot,
}

struct Driver<'a> {
    skel: SkeletonTemplate,
    mode: &'a PipelineMode,
    cfg: &'a EngineConfig,
    learner: Learner,
}

impl Driver<'_> {
    fn fresh_adam(&self, model: &RegressorState) -> AdamState {
        AdamState::for_model(model, self.cfg.lr_stream, self.cfg.beta1_stream)
    }

    fn process_frame(&mut self, frame: &Frame, window: &[WindowEntry], rng: &mut ChaCha8Rng) -> Result<FrameResult> {
        let input = FrameInput {
            features: &frame.features,
            est: &frame.est_2d,
            camera: frame.camera,
        };
        let confident = frame_confident(&frame.est_2d, &self.cfg.confidence);
        let mut localaug_steps = 0;
        if self.mode.uses_local_aug() && !confident {
            localaug_steps = local_augmentation(&mut self.learner, &self.skel, window, &frame.est_2d, self.cfg, rng)?;
        }
        if self.mode.two_stage {
            let s1 = stage1_adapt(&mut self.learner, &self.skel, input, self.cfg)?;
            let s2 = stage2_adapt(&self.learner.model, &self.learner.adam, &self.skel, input, self.cfg)?;
            Ok(FrameResult {
                prediction: s2.prediction,
                stage1_iters: s1.iters,
                stage2_iters: s2.iters,
                localaug_steps,
                handoff: s1.snapshot,
            })
        } else {
            let s1 = stage1_adapt(&mut self.learner, &self.skel, input, self.cfg)?;
            let fit = plain_fit(&mut self.learner, &self.skel, input, self.cfg)?;
            Ok(FrameResult {
                prediction: fit.prediction,
                stage1_iters: s1.iters,
                stage2_iters: fit.iters,
                localaug_steps,
                handoff: self.learner.snapshot(),
            })
        }
    }
}

/// Run one pipeline over `videos`, starting from `pretrained`.
pub fn run_stream(
    mode: &PipelineMode,
    videos: &[Video],
    pretrained: &RegressorState,
    cfg: &EngineConfig,
    opts: &RunOptions,
) -> Result<RunReport> {
    let skel = SkeletonTemplate::default();
    let j = skel.joint_count();
    check_dim("model joints", j, pretrained.joint_count())?;
    check_dim("model input", feature_dim(j), pretrained.input_dim())?;
    cfg.validate(j)?;
    let mut report = RunReport::default();
    if videos.is_empty() {
        return Ok(report);
    }

    let adam = AdamState::for_model(pretrained, cfg.lr_stream, cfg.beta1_stream);
    let mut driver = Driver {
        skel,
        mode,
        cfg,
        learner: Learner::new(pretrained.clone(), adam, None),
    };
    let keep_teacher = mode.uses_aggregation() && cfg.pseudo_label_source == PseudoLabelSource::Teacher;
    let mut bank = MemoryBank::new();
    let mut video_start = driver.learner.snapshot();

    for (vi, video) in videos.iter().enumerate() {
        if vi > 0 && mode.resets() {
            let model = if mode.uses_aggregation() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, AGG_STREAM + vi as u64));
                let (m, steps) =
                    adaptive_aggregation(&video_start, &mut bank, &driver.skel, mode.pseudo_label, cfg, &mut rng)?;
                debug!("video {}: aggregation took {steps} steps over a bank of {}", video.video_id, bank.len());
                m
            } else {
                video_start.model().clone()
            };
            let adam = driver.fresh_adam(&model);
            driver.learner.model = model;
            driver.learner.adam = adam;
        }
        video_start = driver.learner.snapshot();
        driver.learner.teacher = keep_teacher.then(|| TeacherState::new(&driver.learner.model, cfg.ema_decay));

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, AUG_STREAM + vi as u64));
        let mut window: VecDeque<WindowEntry> = VecDeque::with_capacity(cfg.window + 1);
        let mut reported: Vec<Pose3D> = Vec::with_capacity(video.frames.len());
        let mut handoff: Option<Vec<u8>> = None;

        for frame in &video.frames {
            if opts.check_isolation {
                if let Some(prev) = &handoff {
                    report.isolation_checks += 1;
                    if *prev != driver.learner.snapshot().to_bytes() {
                        report.isolation_violations += 1;
                    }
                }
            }
            let pre = driver.learner.clone();
            let entries: Vec<WindowEntry> = window.iter().cloned().collect();
            let result = driver.process_frame(frame, &entries, &mut rng);
            let (prediction, s1, s2, la) = match result {
                Ok(r) => {
                    if opts.check_isolation {
                        handoff = Some(r.handoff.to_bytes());
                    }
                    (r.prediction, r.stage1_iters, r.stage2_iters, r.localaug_steps)
                }
                Err(e) => {
                    warn!("video {} frame {}: adaptation aborted ({e}); restoring pre-frame state", frame.video_id, frame.frame_id);
                    report.aborted_frames += 1;
                    driver.learner = pre;
                    if opts.check_isolation {
                        handoff = Some(driver.learner.snapshot().to_bytes());
                    }
                    (driver.learner.model.predict(&frame.features)?, 0, 0, 0)
                }
            };
            let pose = forward_kinematics(&driver.skel, &prediction)?;
            let confident = frame_confident(&frame.est_2d, &cfg.confidence);
            report.rows.push(FrameRow {
                video_id: frame.video_id,
                frame_id: frame.frame_id,
                confident,
                mpjpe_mm: mpjpe(&pose, &frame.gt_3d)?,
                pa_mpjpe_mm: pa_mpjpe(&pose, &frame.gt_3d)?,
                epe2d_px: epe_2d(&project(&pose, &frame.camera)?, &frame.gt_2d)?,
                stage1_iters: s1,
                stage2_iters: s2,
                localaug_steps: la,
            });
            if mode.uses_local_aug() {
                if window.len() == cfg.window {
                    window.pop_front();
                }
                if cfg.window > 0 {
                    window.push_back(WindowEntry {
                        features: frame.features.clone(),
                        est: frame.est_2d.clone(),
                        camera: frame.camera,
                        pose: pose.clone(),
                        confident,
                    });
                }
            }
            reported.push(pose);
        }

        if mode.uses_aggregation() {
            let pseudo: Vec<Pose3D> = match &driver.learner.teacher {
                Some(t) => video
                    .frames
                    .iter()
                    .zip(reported)
                    .map(|(f, student)| {
                        if frame_confident(&f.est_2d, &cfg.confidence) {
                            let teacher = forward_kinematics(&driver.skel, &t.model.predict(&f.features)?)?;
                            Ok(blend(&teacher, &student))
                        } else {
                            Ok(student)
                        }
                    })
                    .collect::<Result<_>>()?,
                None => reported,
            };
            let records = select_representatives(
                &video.frames,
                &pseudo,
                &cfg.confidence,
                cfg.n_v,
                cfg.n_c,
                derive_seed(opts.seed, SELECT_STREAM + vi as u64),
                mode.selection,
            )?;
            bank.extend(records);
        }
    }
    Ok(report)
}

/// Joint-wise midpoint of two poses.
fn blend(a: &Pose3D, b: &Pose3D) -> Pose3D {
    Pose3D {
        joints: a
            .joints
            .iter()
            .zip(&b.joints)
            .map(|(p, q)| [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0])
            .collect(),
    }
}
