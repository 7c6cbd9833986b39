//! The ablation switch matrix and its per-seed execution.

use std::fmt::Write as _;

use crate::diffmodel::RegressorState;
use crate::engine::{run_stream, EngineConfig, PipelineMode, PseudoLabel, RunOptions, RunReport, SplitStats};
use crate::error::{Error, Result};
use crate::selection::SelectionStrategy;
use crate::streamgen::{generate_streams, StreamConfig};

use super::config::{resolve_mode, RunMode, Switches};

pub const ABLATION_COLUMNS: &str = "arm,seed,split,frames,mpjpe_mm,pa_mpjpe_mm,epe2d_px";
pub const ABLATION_MEAN_COLUMNS: &str = "arm,split,seeds,mpjpe_mm,mpjpe_mm_std,pa_mpjpe_mm,epe2d_px";

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub mode: PipelineMode,
    pub engine: EngineConfig,
}

fn arm(name: &str, mode: RunMode, switches: Switches, engine: &EngineConfig) -> Arm {
    let (mode, engine) = resolve_mode(mode, &switches, engine);
    Arm {
        name: name.to_string(),
        mode,
        engine,
    }
}

fn only(aggregation: bool, local_aug: bool, two_stage: bool) -> Switches {
    Switches {
        aggregation: Some(aggregation),
        local_aug: Some(local_aug),
        two_stage: Some(two_stage),
        ..Switches::default()
    }
}

/// Every arm of the matrix. Pseudo-label and selection arms vary the
/// aggregation-only pipeline; threshold arms vary the per-video pipeline
/// with and without the two-stage split.
pub fn ablation_arms(engine: &EngineConfig, thresholds_px: &[f64]) -> Vec<Arm> {
    let mut arms = vec![
        arm("noadapt", RunMode::None, Switches::default(), engine),
        arm("single", RunMode::Single, Switches::default(), engine),
        arm("pervideo", RunMode::PerVideo, Switches::default(), engine),
        arm("all_off", RunMode::Full, only(false, false, false), engine),
        arm("+aggregation", RunMode::Full, only(true, false, false), engine),
        arm("+local_aug", RunMode::Full, only(false, true, false), engine),
        arm("+two_stage", RunMode::Full, only(false, false, true), engine),
        arm("full", RunMode::Full, Switches::default(), engine),
    ];
    for (name, p) in [
        ("pseudo_weak", PseudoLabel::Weak),
        ("pseudo_strong", PseudoLabel::Strong),
        ("pseudo_adaptive", PseudoLabel::Adaptive),
    ] {
        let s = Switches {
            pseudo_label: Some(p),
            ..only(true, false, false)
        };
        arms.push(arm(name, RunMode::Full, s, engine));
    }
    for (name, sel) in [
        ("select_uniform", SelectionStrategy::Uniform),
        ("select_weight", SelectionStrategy::WeightSampled),
        ("select_balanced", SelectionStrategy::Balanced),
        ("select_balanced_clustered", SelectionStrategy::BalancedClustered),
    ] {
        let s = Switches {
            selection: Some(sel),
            ..only(true, false, false)
        };
        arms.push(arm(name, RunMode::Full, s, engine));
    }
    for &t in thresholds_px {
        for (suffix, two_stage) in [("two_stage", true), ("plain", false)] {
            let mut e = engine.clone();
            e.two_stage.stage2_epe_threshold_px = t;
            arms.push(arm(
                &format!("thr{t}_{suffix}"),
                RunMode::Full,
                only(false, false, two_stage),
                &e,
            ));
        }
    }
    arms
}

/// Keep the arms named in `names` (all when empty), rejecting unknown names.
pub fn filter_arms(arms: Vec<Arm>, names: &[String]) -> Result<Vec<Arm>> {
    if names.is_empty() {
        return Ok(arms);
    }
    for n in names {
        if !arms.iter().any(|a| &a.name == n) {
            return Err(Error::Config(format!("unknown ablation arm `{n}`")));
        }
    }
    Ok(arms.into_iter().filter(|a| names.contains(&a.name)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub splits: [(&'static str, SplitStats); 3],
}

/// Seeds used by an ablation over `count` seeds starting at `base`.
pub fn ablation_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base + k).collect()
}

/// Generate each seed's streams once and run every arm on them.
pub fn run_ablation(
    arms: &[Arm],
    stream: &StreamConfig,
    pretrained: &RegressorState,
    seeds: &[u64],
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for &seed in seeds {
        let videos = generate_streams(&StreamConfig {
            seed,
            ..stream.clone()
        })?;
        for a in arms {
            let report = run_stream(&a.mode, &videos, pretrained, &a.engine, &RunOptions {
                seed,
                check_isolation: false,
            })?;
            log::info!("seed {seed} arm {}: MPJPE {:.2} mm", a.name, report.all().mpjpe_mm);
            out.push(ArmResult {
                arm: a.name.clone(),
                seed,
                splits: report.splits(),
            });
        }
    }
    Ok(out)
}

/// Run a single arm on already generated streams.
pub fn run_arm(a: &Arm, videos: &[crate::streamgen::Video], pretrained: &RegressorState, seed: u64) -> Result<RunReport> {
    run_stream(&a.mode, videos, pretrained, &a.engine, &RunOptions {
        seed,
        check_isolation: false,
    })
}

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = format!("{ABLATION_COLUMNS}\n");
    for r in results {
        for (split, st) in &r.splits {
            let _ = writeln!(
                s,
                "{},{},{split},{},{},{},{}",
                r.arm, r.seed, st.frames, st.mpjpe_mm, st.pa_mpjpe_mm, st.epe2d_px
            );
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmMean {
    pub arm: String,
    pub split: String,
    pub seeds: usize,
    pub mpjpe_mm: f64,
    pub mpjpe_mm_std: f64,
    pub pa_mpjpe_mm: f64,
    pub epe2d_px: f64,
}

/// Mean over seeds per (arm, split), in first-seen order.
pub fn arm_means(results: &[ArmResult]) -> Vec<ArmMean> {
    let mut keys: Vec<(String, &'static str)> = Vec::new();
    for r in results {
        for (split, _) in &r.splits {
            if !keys.iter().any(|(a, s)| a == &r.arm && s == split) {
                keys.push((r.arm.clone(), split));
            }
        }
    }
    keys.into_iter()
        .map(|(arm, split)| {
            let stats: Vec<SplitStats> = results
                .iter()
                .filter(|r| r.arm == arm)
                .flat_map(|r| r.splits.iter().filter(|(s, _)| *s == split).map(|(_, st)| *st))
                .collect();
            let n = stats.len() as f64;
            let mean = |f: fn(&SplitStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
            let m = mean(|s| s.mpjpe_mm);
            let var = stats.iter().map(|s| (s.mpjpe_mm - m).powi(2)).sum::<f64>() / n;
            ArmMean {
                arm,
                split: split.to_string(),
                seeds: stats.len(),
                mpjpe_mm: m,
                mpjpe_mm_std: var.sqrt(),
                pa_mpjpe_mm: mean(|s| s.pa_mpjpe_mm),
                epe2d_px: mean(|s| s.epe2d_px),
            }
        })
        .collect()
}

pub fn arm_means_csv(means: &[ArmMean]) -> String {
    let mut s = format!("{ABLATION_MEAN_COLUMNS}\n");
    for m in means {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.arm, m.split, m.seeds, m.mpjpe_mm, m.mpjpe_mm_std, m.pa_mpjpe_mm, m.epe2d_px
        );
    }
    s
}

pub fn parse_arm_means_csv(text: &str) -> Result<Vec<ArmMean>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            record: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", f[k])));
        out.push(ArmMean {
            arm: f[0].to_string(),
            split: f[1].to_string(),
            seeds: f[2].parse().map_err(|_| bad("bad seed count"))?,
            mpjpe_mm: num(3)?,
            mpjpe_mm_std: num(4)?,
            pa_mpjpe_mm: num(5)?,
            epe2d_px: num(6)?,
        });
    }
    Ok(out)
}
