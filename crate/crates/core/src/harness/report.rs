//! Markdown tables and binned plot data from the files other commands wrote.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::selection::ConfidenceRule;
use crate::streamgen::{spearman, Video};

use super::ablate::ArmMean;

pub const CONFIDENCE_BIN_COLUMNS: &str = "conf_lo,conf_hi,keypoints,mean_conf,mean_error_px";
pub const FRAME_BIN_COLUMNS: &str = "confident_keypoints,frames,mpjpe_mm,epe2d_px";

/// Keypoint-level estimator error against confidence, in ten equal bins.
pub fn confidence_bins(videos: &[Video]) -> (String, f64) {
    let mut sums = [(0usize, 0.0f64, 0.0f64); 10];
    let mut conf = Vec::new();
    let mut err = Vec::new();
    for f in videos.iter().flat_map(|v| &v.frames) {
        for ((e, g), &c) in f.est_2d.points.iter().zip(&f.gt_2d.points).zip(&f.est_2d.confidence) {
            let d = ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2)).sqrt();
            let b = ((c * 10.0).floor() as usize).min(9);
            sums[b].0 += 1;
            sums[b].1 += c;
            sums[b].2 += d;
            conf.push(c);
            err.push(d);
        }
    }
    let mut s = format!("{CONFIDENCE_BIN_COLUMNS}\n");
    for (b, (n, sc, se)) in sums.iter().enumerate() {
        let (mc, me) = if *n > 0 {
            (sc / *n as f64, se / *n as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        let _ = writeln!(s, "{:.1},{:.1},{n},{mc},{me}", b as f64 / 10.0, (b + 1) as f64 / 10.0);
    }
    (s, spearman(&conf, &err))
}

/// Rows of a frames CSV: `(video_id, frame_id, mpjpe_mm, epe2d_px)`.
pub fn parse_frames_csv(text: &str) -> Result<Vec<(usize, usize, f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            record: i + 1,
            msg: format!("malformed frame row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        out.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
            f[5].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Per-frame results grouped by the number of confident keypoints.
pub fn frame_bins(videos: &[Video], rows: &[(usize, usize, f64, f64)], rule: &ConfidenceRule) -> Result<String> {
    let j = videos.first().map_or(0, |v| v.frames.first().map_or(0, |f| f.est_2d.len()));
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); j + 1];
    for &(vid, fid, m, e) in rows {
        let frame = videos
            .iter()
            .find(|v| v.video_id == vid)
            .and_then(|v| v.frames.get(fid))
            .ok_or_else(|| Error::InvalidInput(format!("frame {vid}/{fid} is not in the stream file")))?;
        let k = frame.est_2d.confidence.iter().filter(|&&c| rule.keypoint_confident(c)).count();
        sums[k].0 += 1;
        sums[k].1 += m;
        sums[k].2 += e;
    }
    let mut s = format!("{FRAME_BIN_COLUMNS}\n");
    for (k, (n, m, e)) in sums.iter().enumerate() {
        if *n > 0 {
            let _ = writeln!(s, "{k},{n},{},{}", m / *n as f64, e / *n as f64);
        }
    }
    Ok(s)
}

fn find<'a>(means: &'a [ArmMean], arm: &str, split: &str) -> Option<&'a ArmMean> {
    means.iter().find(|m| m.arm == arm && m.split == split)
}

fn cell(m: Option<&ArmMean>) -> String {
    m.map_or_else(|| "-".into(), |m| format!("{:.2}", m.mpjpe_mm))
}

/// Ablation means rendered as comparison tables (MPJPE in mm).
pub fn ablation_tables(means: &[ArmMean]) -> String {
    let mut s = String::new();
    let seeds = means.first().map_or(0, |m| m.seeds);
    let _ = writeln!(s, "## Adaptation strategies ({seeds} seeds)\n");
    let _ = writeln!(s, "| arm | MPJPE | PA-MPJPE |\n|---|---:|---:|");
    for arm in ["noadapt", "single", "pervideo", "full"] {
        if let Some(m) = find(means, arm, "all") {
            let _ = writeln!(s, "| {arm} | {:.2} | {:.2} |", m.mpjpe_mm, m.pa_mpjpe_mm);
        }
    }
    let _ = writeln!(s, "\n## Components\n");
    let _ = writeln!(s, "| arm | All | Conf. | Non-conf. |\n|---|---:|---:|---:|");
    for arm in ["pervideo", "+aggregation", "+local_aug", "+two_stage", "full"] {
        if find(means, arm, "all").is_some() {
            let _ = writeln!(
                s,
                "| {arm} | {} | {} | {} |",
                cell(find(means, arm, "all")),
                cell(find(means, arm, "conf")),
                cell(find(means, arm, "nonconf"))
            );
        }
    }
    let _ = writeln!(s, "\n## Pseudo-labels and selection\n");
    let _ = writeln!(s, "| arm | All | Conf. | Non-conf. |\n|---|---:|---:|---:|");
    let mut seen = Vec::new();
    for m in means.iter().filter(|m| m.arm.starts_with("pseudo_") || m.arm.starts_with("select_")) {
        if seen.contains(&m.arm) {
            continue;
        }
        seen.push(m.arm.clone());
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            m.arm,
            cell(find(means, &m.arm, "all")),
            cell(find(means, &m.arm, "conf")),
            cell(find(means, &m.arm, "nonconf"))
        );
    }
    let mut thresholds: Vec<String> = means
        .iter()
        .filter_map(|m| m.arm.strip_prefix("thr").and_then(|r| r.strip_suffix("_two_stage")).map(str::to_string))
        .collect();
    thresholds.dedup();
    if !thresholds.is_empty() {
        let _ = writeln!(s, "\n## Stage-2 threshold\n");
        let _ = writeln!(s, "| threshold (px) | two-stage | plain |\n|---|---:|---:|");
        for t in thresholds {
            let _ = writeln!(
                s,
                "| {t} | {} | {} |",
                cell(find(means, &format!("thr{t}_two_stage"), "all")),
                cell(find(means, &format!("thr{t}_plain"), "all"))
            );
        }
    }
    s
}
