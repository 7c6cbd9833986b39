//! Command implementations behind the `otta` binary. Every command reads
//! its inputs from disk and the config, and writes into the output
//! directory.

pub mod ablate;
pub mod config;
pub mod pretrain;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::diffmodel::RegressorState;
use crate::engine::{run_stream, RunOptions, RunReport};
use crate::error::{Error, Result};
use crate::kinematics::SkeletonTemplate;
use crate::streamgen::{feature_dim, generate_source, generate_streams, read_stream, write_stream};

pub use ablate::{ablation_arms, arm_means, run_ablation, Arm, ArmMean, ArmResult};
pub use config::{ExperimentConfig, RunMode, Switches};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<RegressorState> {
    require(path)?;
    RegressorState::read_checkpoint(fs::File::open(path)?)
}

pub fn save_checkpoint(path: &Path, model: &RegressorState) -> Result<()> {
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf)?;
    write_file(path, &buf)
}

/// Untrained regressor shaped by the config.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<RegressorState> {
    let j = SkeletonTemplate::default().joint_count();
    RegressorState::new(feature_dim(j), &cfg.model.hidden, j, cfg.model.init_seed)
}

/// Train on source data; writes the checkpoint and `pretrain_log.csv`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let source = generate_source(&cfg.stream)?;
    let outcome = pretrain(initial_model(cfg)?, &source, &cfg.pretrain, cfg.seed)?;
    save_checkpoint(&cfg.checkpoint_path(), &outcome.model)?;
    write_file(&cfg.out_dir().join("pretrain_log.csv"), outcome.log_csv().as_bytes())?;
    info!(
        "pretrained: validation MPJPE {:.2} mm (untrained {:.2} mm)",
        outcome.best_val_mpjpe_mm, outcome.initial_val_mpjpe_mm
    );
    Ok(outcome)
}

pub fn cmd_gen_streams(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let videos = generate_streams(&cfg.stream)?;
    let path = cfg.streams_path();
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_stream(&path, &videos, &cfg.stream.hash())?;
    Ok(path)
}

/// Run the configured mode; writes `frames.csv`, `splits.csv` and `summary.md`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = load_checkpoint(&cfg.checkpoint_path())?;
    let streams = cfg.streams_path();
    require(&streams)?;
    let videos = read_stream(&streams)?;
    let (mode, engine) = cfg.resolve();
    let report = run_stream(&mode, &videos, &model, &engine, &RunOptions {
        seed: cfg.seed,
        check_isolation: false,
    })?;
    let out = cfg.out_dir();
    let mut frames = Vec::new();
    report.write_frames_csv(&mut frames)?;
    write_file(&out.join("frames.csv"), &frames)?;
    let mut splits = Vec::new();
    report.write_split_csv(&mut splits)?;
    write_file(&out.join("splits.csv"), &splits)?;
    let title = format!("# Run: mode {}, seed {}\n", cfg.mode.name(), cfg.seed);
    write_file(&out.join("summary.md"), report.summary_table(&title).as_bytes())?;
    if report.aborted_frames > 0 {
        log::warn!("{} frames fell back to their pre-frame model", report.aborted_frames);
    }
    Ok(report)
}

/// Run the switch matrix over the configured seeds; writes `ablation.csv`
/// (per seed) and `ablation_mean.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<ArmMean>> {
    cfg.validate()?;
    let model = load_checkpoint(&cfg.checkpoint_path())?;
    let arms = ablate::filter_arms(ablation_arms(&cfg.engine, &cfg.ablate.thresholds_px), &cfg.ablate.arms)?;
    let seeds = ablate::ablation_seeds(cfg.stream.seed, cfg.ablate.seeds);
    let results = run_ablation(&arms, &cfg.stream, &model, &seeds)?;
    let means = arm_means(&results);
    let out = cfg.out_dir();
    write_file(&out.join("ablation.csv"), ablate::ablation_csv(&results).as_bytes())?;
    write_file(&out.join("ablation_mean.csv"), ablate::arm_means_csv(&means).as_bytes())?;
    Ok(means)
}

/// Render whatever results are present in the output directory into
/// `report.md`, plus `confidence_bins.csv` and `frame_bins.csv` when the
/// stream file (and a run) exist.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let mut md = String::from("# Results\n\n");
    let mut found = false;
    let streams = cfg.streams_path();
    let videos = if streams.exists() { Some(read_stream(&streams)?) } else { None };
    if let Some(videos) = &videos {
        let (bins, rho) = report::confidence_bins(videos);
        write_file(&out.join("confidence_bins.csv"), bins.as_bytes())?;
        md.push_str(&format!(
            "Keypoint confidence vs. estimator error: Spearman {rho:.3} (bins in `confidence_bins.csv`).\n\n"
        ));
        found = true;
    }
    let frames = out.join("frames.csv");
    if frames.exists() {
        let rows = report::parse_frames_csv(&fs::read_to_string(&frames)?)?;
        if let Some(videos) = &videos {
            let bins = report::frame_bins(videos, &rows, &cfg.engine.confidence)?;
            write_file(&out.join("frame_bins.csv"), bins.as_bytes())?;
        }
        let summary = out.join("summary.md");
        if summary.exists() {
            md.push_str(&fs::read_to_string(summary)?);
            md.push('\n');
        }
        found = true;
    }
    let means = out.join("ablation_mean.csv");
    if means.exists() {
        let means = ablate::parse_arm_means_csv(&fs::read_to_string(&means)?)?;
        md.push_str(&report::ablation_tables(&means));
        found = true;
    }
    if !found {
        return Err(Error::MissingInput(out.join("ablation_mean.csv")));
    }
    let path = out.join("report.md");
    write_file(&path, md.as_bytes())?;
    Ok(path)
}
