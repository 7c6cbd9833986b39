//! Line-delimited stream records.
//!
//! ```text
//! #otta-stream v1 joints=15 feature_dim=30 param_dim=58 videos=8 frames=1600 config_hash=...
//! video_id=0 frame_id=0 cam=500,128,128,256,256 features=... gt_params=... gt_2d=... est_2d=... conf=... mask=...
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so a write/read cycle
//! is lossless.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, Camera, Keypoints2D, PoseParams, SkeletonTemplate};

use super::{feature_dim, EventMask, Frame, Video, Visibility};

const MAGIC: &str = "#otta-stream";
const VERSION: &str = "v1";

/// Builder for one `label=v,v,v` record line.
#[derive(Default)]
pub(crate) struct Record(String);

impl Record {
    pub(crate) fn int(&mut self, label: &str, v: usize) -> &mut Self {
        self.sep();
        let _ = write!(self.0, "{label}={v}");
        self
    }

    pub(crate) fn floats<'a, I: IntoIterator<Item = &'a f64>>(&mut self, label: &str, vs: I) -> &mut Self {
        self.sep();
        let _ = write!(self.0, "{label}=");
        for (i, v) in vs.into_iter().enumerate() {
            if i > 0 {
                self.0.push(',');
            }
            let _ = write!(self.0, "{v:?}");
        }
        self
    }

    pub(crate) fn codes<I: IntoIterator<Item = u8>>(&mut self, label: &str, vs: I) -> &mut Self {
        self.sep();
        let _ = write!(self.0, "{label}=");
        for (i, v) in vs.into_iter().enumerate() {
            if i > 0 {
                self.0.push(',');
            }
            let _ = write!(self.0, "{v}");
        }
        self
    }

    fn sep(&mut self) {
        if !self.0.is_empty() {
            self.0.push(' ');
        }
    }

    pub(crate) fn finish(&self) -> &str {
        &self.0
    }
}

/// Parsed `label=value` fields of one record.
pub(crate) struct Fields<'a> {
    record: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    pub(crate) fn parse(line: &'a str, record: usize) -> Result<Self> {
        let mut map = HashMap::new();
        for tok in line.split_ascii_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                record,
                msg: format!("token `{tok}` is not label=value"),
            })?;
            if map.insert(k, v).is_some() {
                return Err(Error::Parse {
                    record,
                    msg: format!("duplicate field `{k}`"),
                });
            }
        }
        Ok(Self { record, map })
    }

    pub(crate) fn err(&self, msg: String) -> Error {
        Error::Parse {
            record: self.record,
            msg,
        }
    }

    fn raw(&self, label: &str) -> Result<&'a str> {
        self.map
            .get(label)
            .copied()
            .ok_or_else(|| self.err(format!("missing field `{label}`")))
    }

    pub(crate) fn int(&self, label: &str) -> Result<usize> {
        let s = self.raw(label)?;
        s.parse().map_err(|_| self.err(format!("field `{label}`: bad integer `{s}`")))
    }

    pub(crate) fn floats(&self, label: &str, len: usize) -> Result<Vec<f64>> {
        let s = self.raw(label)?;
        let vs = if s.is_empty() {
            Vec::new()
        } else {
            s.split(',')
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| self.err(format!("field `{label}`: bad number")))?
        };
        if vs.len() != len {
            return Err(self.err(format!("field `{label}`: expected {len} values, got {}", vs.len())));
        }
        Ok(vs)
    }

    pub(crate) fn codes(&self, label: &str, len: usize) -> Result<Vec<u8>> {
        let s = self.raw(label)?;
        let vs = s
            .split(',')
            .map(|t| t.parse::<u8>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| self.err(format!("field `{label}`: bad code")))?;
        if vs.len() != len {
            return Err(self.err(format!("field `{label}`: expected {len} values, got {}", vs.len())));
        }
        Ok(vs)
    }
}

fn pairs(points: &[[f64; 2]]) -> impl Iterator<Item = &f64> {
    points.iter().flat_map(|p| p.iter())
}

fn unpairs(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

pub(crate) fn camera_values(cam: &Camera) -> [f64; 5] {
    [cam.focal, cam.principal[0], cam.principal[1], cam.image_size[0], cam.image_size[1]]
}

pub(crate) fn camera_from_values(v: &[f64], fields: &Fields<'_>) -> Result<Camera> {
    Camera::new(v[0], [v[1], v[2]], [v[3], v[4]]).map_err(|e| fields.err(e.to_string()))
}

pub(crate) fn frame_record(frame: &Frame) -> Record {
    let mut r = Record::default();
    r.int("video_id", frame.video_id)
        .int("frame_id", frame.frame_id)
        .floats("cam", &camera_values(&frame.camera))
        .floats("features", &frame.features)
        .floats("gt_params", &frame.gt_params.to_flat())
        .floats("gt_2d", pairs(&frame.gt_2d.points))
        .floats("est_2d", pairs(&frame.est_2d.points))
        .floats("conf", &frame.est_2d.confidence)
        .codes("mask", frame.mask.flags.iter().map(|f| f.code()));
    r
}

pub(crate) fn parse_frame(fields: &Fields<'_>, skel: &SkeletonTemplate) -> Result<Frame> {
    let j = skel.joint_count();
    let cam = camera_from_values(&fields.floats("cam", 5)?, fields)?;
    let gt_params = PoseParams::from_flat(&fields.floats("gt_params", skel.param_dim())?, j)?;
    let gt_3d = forward_kinematics(skel, &gt_params)?;
    let conf = fields.floats("conf", j)?;
    let est_2d = Keypoints2D::new(unpairs(&fields.floats("est_2d", 2 * j)?), conf)
        .map_err(|e| fields.err(e.to_string()))?;
    let flags = fields
        .codes("mask", j)?
        .into_iter()
        .map(|c| Visibility::from_code(c).ok_or_else(|| fields.err(format!("unknown mask code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Frame {
        video_id: fields.int("video_id")?,
        frame_id: fields.int("frame_id")?,
        camera: cam,
        features: fields.floats("features", feature_dim(j))?,
        gt_params,
        gt_3d,
        gt_2d: Keypoints2D::fully_confident(unpairs(&fields.floats("gt_2d", 2 * j)?)),
        est_2d,
        mask: EventMask { flags },
    })
}

pub fn write_stream_to<W: Write>(mut w: W, videos: &[Video], config_hash: &str) -> Result<()> {
    let skel = SkeletonTemplate::default();
    let j = skel.joint_count();
    let frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    writeln!(
        w,
        "{MAGIC} {VERSION} joints={j} feature_dim={} param_dim={} videos={} frames={frames} config_hash={config_hash}",
        feature_dim(j),
        skel.param_dim(),
        videos.len(),
    )?;
    for v in videos {
        for f in &v.frames {
            writeln!(w, "{}", frame_record(f).finish())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_stream(path: &Path, videos: &[Video], config_hash: &str) -> Result<()> {
    write_stream_to(BufWriter::new(File::create(path)?), videos, config_hash)
}

pub(crate) struct Header {
    pub(crate) frames: usize,
}

pub(crate) fn parse_header(line: &str, magic: &str, skel: &SkeletonTemplate) -> Result<Header> {
    let bad = |msg: String| Error::Parse { record: 0, msg };
    let rest = line
        .strip_prefix(magic)
        .ok_or_else(|| bad(format!("missing `{magic}` header")))?;
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix(VERSION)
        .ok_or_else(|| bad("unsupported version".into()))?;
    let fields = Fields::parse(rest, 0)?;
    let j = fields.int("joints")?;
    if j != skel.joint_count() {
        return Err(bad(format!("file has {j} joints, skeleton has {}", skel.joint_count())));
    }
    if fields.int("feature_dim")? != feature_dim(j) || fields.int("param_dim")? != skel.param_dim() {
        return Err(bad("dimension header does not match the skeleton".into()));
    }
    Ok(Header {
        frames: fields.int("frames")?,
    })
}

pub fn read_stream_from<R: BufRead>(r: R) -> Result<Vec<Video>> {
    let skel = SkeletonTemplate::default();
    let mut lines = r.lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        record: 0,
        msg: "empty stream file".into(),
    })?;
    let header = parse_header(&header_line, MAGIC, &skel)?;
    let mut videos: Vec<Video> = Vec::new();
    let mut count = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        count += 1;
        let fields = Fields::parse(&line, count)?;
        let frame = parse_frame(&fields, &skel)?;
        match videos.last_mut() {
            Some(v) if v.video_id == frame.video_id => {
                if frame.frame_id != v.frames.len() {
                    return Err(fields.err(format!(
                        "frame_id {} out of sequence (expected {})",
                        frame.frame_id,
                        v.frames.len()
                    )));
                }
                v.frames.push(frame);
            }
            _ => {
                if frame.frame_id != 0 {
                    return Err(fields.err("video does not start at frame 0".into()));
                }
                videos.push(Video {
                    video_id: frame.video_id,
                    camera: frame.camera,
                    frames: vec![frame],
                });
            }
        }
    }
    if count != header.frames {
        return Err(Error::Parse {
            record: count + 1,
            msg: format!("stream truncated: header promises {} frames, found {count}", header.frames),
        });
    }
    Ok(videos)
}

pub fn read_stream(path: &Path) -> Result<Vec<Video>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    read_stream_from(BufReader::new(File::open(path)?))
}
