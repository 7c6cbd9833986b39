//! Per-frame results of a pipeline run and their CSV forms.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

pub const FRAME_COLUMNS: &str =
    "video_id,frame_id,confident,mpjpe_mm,pa_mpjpe_mm,epe2d_px,stage1_iters,stage2_iters,localaug_steps";
pub const SPLIT_COLUMNS: &str = "split,frames,mpjpe_mm,pa_mpjpe_mm,epe2d_px";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub video_id: usize,
    pub frame_id: usize,
    pub confident: bool,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    /// Projected prediction against the ground-truth 2D pose.
    pub epe2d_px: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub localaug_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitStats {
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub epe2d_px: f64,
}

impl SplitStats {
    fn of<'a, I: Iterator<Item = &'a FrameRow>>(rows: I) -> Self {
        let mut s = SplitStats::default();
        for r in rows {
            s.frames += 1;
            s.mpjpe_mm += r.mpjpe_mm;
            s.pa_mpjpe_mm += r.pa_mpjpe_mm;
            s.epe2d_px += r.epe2d_px;
        }
        if s.frames > 0 {
            let n = s.frames as f64;
            s.mpjpe_mm /= n;
            s.pa_mpjpe_mm /= n;
            s.epe2d_px /= n;
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<FrameRow>,
    /// Frames whose adaptation was abandoned and scored with the pre-frame model.
    pub aborted_frames: usize,
    /// Frame transitions checked for snapshot isolation (when enabled).
    pub isolation_checks: usize,
    pub isolation_violations: usize,
}

impl RunReport {
    pub fn all(&self) -> SplitStats {
        SplitStats::of(self.rows.iter())
    }

    pub fn confident(&self) -> SplitStats {
        SplitStats::of(self.rows.iter().filter(|r| r.confident))
    }

    pub fn non_confident(&self) -> SplitStats {
        SplitStats::of(self.rows.iter().filter(|r| !r.confident))
    }

    pub fn splits(&self) -> [(&'static str, SplitStats); 3] {
        [("all", self.all()), ("conf", self.confident()), ("nonconf", self.non_confident())]
    }

    /// Per-frame CSV followed by a `#`-prefixed aggregate footer.
    pub fn write_frames_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FRAME_COLUMNS}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.video_id,
                r.frame_id,
                r.confident as u8,
                r.mpjpe_mm,
                r.pa_mpjpe_mm,
                r.epe2d_px,
                r.stage1_iters,
                r.stage2_iters,
                r.localaug_steps
            )?;
        }
        writeln!(w, "# aggregate")?;
        writeln!(w, "# {SPLIT_COLUMNS}")?;
        for (name, s) in self.splits() {
            writeln!(w, "# {name},{},{},{},{}", s.frames, s.mpjpe_mm, s.pa_mpjpe_mm, s.epe2d_px)?;
        }
        writeln!(w, "# aborted_frames,{}", self.aborted_frames)?;
        w.flush()?;
        Ok(())
    }

    /// All / confident / non-confident aggregates.
    pub fn write_split_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SPLIT_COLUMNS}")?;
        for (name, s) in self.splits() {
            writeln!(w, "{name},{},{},{},{}", s.frames, s.mpjpe_mm, s.pa_mpjpe_mm, s.epe2d_px)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "| split | frames | MPJPE (mm) | PA-MPJPE (mm) | 2D EPE (px) |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for (name, st) in self.splits() {
            let _ = writeln!(
                s,
                "| {name} | {} | {:.2} | {:.2} | {:.2} |",
                st.frames, st.mpjpe_mm, st.pa_mpjpe_mm, st.epe2d_px
            );
        }
        s
    }
}
