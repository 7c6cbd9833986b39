//! Confidence partitioning, sampling weights, spherical k-means over poses,
//! per-cluster quotas and the cross-video memory bank.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kinematics::{Camera, Keypoints2D, Pose3D};
use crate::streamgen::format::{camera_values, Record};
use crate::streamgen::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceRule {
    pub keypoint_threshold: f64,
    pub min_confident_count: usize,
}

impl Default for ConfidenceRule {
    fn default() -> Self {
        Self {
            keypoint_threshold: 0.8,
            min_confident_count: 10,
        }
    }
}

impl ConfidenceRule {
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if !(self.keypoint_threshold > 0.0 && self.keypoint_threshold < 1.0) {
            return Err(Error::Config("keypoint_threshold must lie in (0, 1)".into()));
        }
        if self.min_confident_count == 0 || self.min_confident_count >= joint_count {
            return Err(Error::Config(format!(
                "min_confident_count must lie in (0, {joint_count})"
            )));
        }
        Ok(())
    }

    pub fn keypoint_confident(&self, c: f64) -> bool {
        c > self.keypoint_threshold
    }
}

/// More than `min_confident_count` keypoints strictly above the threshold.
pub fn is_confident(conf: &[f64], rule: &ConfidenceRule) -> bool {
    conf.iter().filter(|&&c| rule.keypoint_confident(c)).count() > rule.min_confident_count
}

/// Mean keypoint confidence.
pub fn sampling_weight(conf: &[f64]) -> f64 {
    if conf.is_empty() {
        return 0.0;
    }
    conf.iter().sum::<f64>() / conf.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub video_id: usize,
    pub frame_id: usize,
    pub camera: Camera,
    pub features: Vec<f64>,
    pub est_2d: Keypoints2D,
    /// 3D pseudo-label; only used when `confident`.
    pub pseudo_3d: Pose3D,
    pub weight: f64,
    pub confident: bool,
    pub times_chosen: u64,
}

impl SampleRecord {
    pub fn from_frame(frame: &Frame, pseudo_3d: Pose3D, rule: &ConfidenceRule) -> Self {
        let conf = &frame.est_2d.confidence;
        Self {
            video_id: frame.video_id,
            frame_id: frame.frame_id,
            camera: frame.camera,
            features: frame.features.clone(),
            est_2d: frame.est_2d.clone(),
            pseudo_3d,
            weight: sampling_weight(conf),
            confident: is_confident(conf, rule),
            times_chosen: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    records: Vec<SampleRecord>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn extend<I: IntoIterator<Item = SampleRecord>>(&mut self, records: I) {
        self.records.extend(records);
    }

    /// Relative draw probability of record `i`.
    pub fn draw_weight(&self, i: usize) -> f64 {
        1.0 / (1.0 + self.records[i].times_chosen as f64)
    }

    /// Indices of `n` records drawn without replacement with probability
    /// proportional to `1 / (1 + times_chosen)`; the drawn records' counts
    /// are incremented.
    pub fn draw_indices<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        let n = n.min(self.records.len());
        if n == 0 {
            return Vec::new();
        }
        let picked = sample_weighted(rng, self.records.len(), |i| self.draw_weight(i), n)
            .expect("draw weights are positive")
            .into_vec();
        for &i in &picked {
            self.records[i].times_chosen += 1;
        }
        picked
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        self.dump_to(BufWriter::new(File::create(path)?))
    }

    /// Stream-style record lines with the bank's own columns appended.
    pub fn dump_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#otta-bank v1 records={}", self.records.len())?;
        for r in &self.records {
            let mut rec = Record::default();
            rec.int("video_id", r.video_id)
                .int("frame_id", r.frame_id)
                .floats("cam", &camera_values(&r.camera))
                .floats("features", &r.features)
                .floats("est_2d", r.est_2d.points.iter().flat_map(|p| p.iter()))
                .floats("conf", &r.est_2d.confidence)
                .floats("pseudo_3d", r.pseudo_3d.joints.iter().flat_map(|p| p.iter()))
                .floats("weight", &[r.weight])
                .int("confident", r.confident as usize)
                .int("times_chosen", r.times_chosen as usize);
            writeln!(w, "{}", rec.finish())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw `n` records (clones, with updated counts) from the bank.
pub fn bank_draw(bank: &mut MemoryBank, n: usize, seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bank.draw_indices(n, &mut rng)
        .into_iter()
        .map(|i| bank.records[i].clone())
        .collect()
}

/// Root-centred, unit-norm flattening of a pose.
pub fn pose_vector(pose: &Pose3D, index: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = pose.root_relative().into_iter().flatten().collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::ZeroNorm(index));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after every centroid update.
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

pub const KMEANS_MAX_ITERS: usize = 100;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized_mean(points: &[Vec<f64>], members: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
    let mut m = vec![0.0; points[0].len()];
    let mut any = false;
    for i in members {
        any = true;
        for (a, b) in m.iter_mut().zip(&points[i]) {
            *a += b;
        }
    }
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !any || !(norm > 1e-12) {
        return None;
    }
    Some(m.into_iter().map(|x| x / norm).collect())
}

/// Sum of cosine similarities between points and their assigned centroids.
pub fn cluster_objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| dot(p, &centroids[a]))
        .sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, cent) in centroids.iter().enumerate() {
        let s = dot(p, cent);
        if s > best_sim {
            best_sim = s;
            best = c;
        }
    }
    best
}

/// Spherical k-means on unit vectors. `k` is reduced to the point count.
pub fn spherical_kmeans_vectors(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot cluster an empty set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let dim = points[0].len();
    for p in points {
        check_dim("cluster point", dim, p.len())?;
    }
    let n = points.len();
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding on cosine distance
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                let s = centroids.iter().map(|c| dot(p, c)).fold(f64::NEG_INFINITY, f64::max);
                (1.0 - s).max(0.0)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut trace = Vec::new();
    for iter in 0..KMEANS_MAX_ITERS {
        if iter > 0 {
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
            if next == assignments {
                break;
            }
            assignments = next;
        }
        reseed_empty(points, &centroids, &mut assignments, k);
        for (c, cent) in centroids.iter_mut().enumerate() {
            if let Some(m) = normalized_mean(points, (0..n).filter(|&i| assignments[i] == c)) {
                *cent = m;
            }
        }
        trace.push(cluster_objective(points, &centroids, &assignments));
    }
    Ok(ClusterModel {
        centroids,
        assignments,
        objective_trace: trace,
    })
}

/// Move the point least similar to its centroid into each empty cluster,
/// taking it only from clusters that keep at least one member.
fn reseed_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .min_by(|&a, &b| {
                let sa = dot(&points[a], &centroids[assignments[a]]);
                let sb = dot(&points[b], &centroids[assignments[b]]);
                sa.partial_cmp(&sb).expect("finite").then(a.cmp(&b))
            });
        match far {
            Some(i) => assignments[i] = empty,
            None => return,
        }
    }
}

pub fn spherical_kmeans(poses: &[Pose3D], k: usize, seed: u64) -> Result<ClusterModel> {
    let points = poses
        .iter()
        .enumerate()
        .map(|(i, p)| pose_vector(p, i))
        .collect::<Result<Vec<_>>>()?;
    spherical_kmeans_vectors(&points, k, seed)
}

/// Largest-remainder split of `n_v` across clusters in proportion to size.
/// Ties in the remainder go to the larger cluster, then the lower index.
pub fn allocate_quota(sizes: &[usize], n_v: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut counts = vec![0usize; sizes.len()];
    if total == 0 || n_v == 0 {
        return counts;
    }
    let target = n_v.min(total);
    let mut remainders = Vec::with_capacity(sizes.len());
    for (i, &c) in sizes.iter().enumerate() {
        // exact integer arithmetic for floor and remainder
        let num = c * n_v;
        counts[i] = (num / total).min(c);
        remainders.push((num % total, i));
    }
    let mut assigned: usize = counts.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(sizes[b.1].cmp(&sizes[a.1])).then(a.1.cmp(&b.1)));
    for &(_, i) in &remainders {
        if assigned == target {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            assigned += 1;
        }
    }
    // shortfall left by capped clusters goes to the largest with room
    let mut by_size: Vec<usize> = (0..sizes.len()).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    while assigned < target {
        let mut progressed = false;
        for &i in &by_size {
            if assigned == target {
                break;
            }
            if counts[i] < sizes[i] {
                counts[i] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Uniformly random frames from the whole video.
    Uniform,
    /// Frames drawn with probability proportional to their weight.
    WeightSampled,
    /// Weight-proportional draws, balanced between confident and non-confident frames.
    Balanced,
    /// Balanced, then top-weight frames per pose cluster.
    BalancedClustered,
}

/// Split `n_v` between two subsets of sizes `a` and `b`, half each, with
/// any shortfall in one filled from the other.
pub fn balanced_split(a: usize, b: usize, n_v: usize) -> (usize, usize) {
    let n = n_v.min(a + b);
    let mut na = (n / 2 + n % 2).min(a);
    let nb = (n - na).min(b);
    na = (n - nb).min(a);
    (na, nb)
}

fn weighted_pick(weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = n.min(weights.len());
    if n == 0 {
        return Vec::new();
    }
    let floor = 1e-6;
    let mut v = sample_weighted(rng, weights.len(), |i| weights[i].max(floor), n)
        .expect("weights are positive")
        .into_vec();
    v.sort_unstable();
    v
}

/// Indices of the top-weight members of each cluster, up to its quota.
fn cluster_top_weight(
    subset: &[usize],
    poses: &[Pose3D],
    weights: &[f64],
    take: usize,
    n_c: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if take == 0 || subset.is_empty() {
        return Ok(Vec::new());
    }
    let sub_poses: Vec<Pose3D> = subset.iter().map(|&i| poses[i].clone()).collect();
    let model = spherical_kmeans(&sub_poses, n_c.max(1), seed)?;
    let quota = allocate_quota(&model.sizes(), take);
    let mut out = Vec::with_capacity(take);
    for (c, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = model.members(c).into_iter().map(|m| subset[m]).collect();
        members.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).expect("finite").then(a.cmp(&b)));
        out.extend(members.into_iter().take(q));
    }
    out.sort_unstable();
    Ok(out)
}

/// Frame indices chosen from one finished video.
pub fn select_indices(
    frames: &[Frame],
    poses: &[Pose3D],
    rule: &ConfidenceRule,
    n_v: usize,
    n_c: usize,
    seed: u64,
    strategy: SelectionStrategy,
) -> Result<Vec<usize>> {
    check_dim("predictions", frames.len(), poses.len())?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let weights: Vec<f64> = frames.iter().map(|f| sampling_weight(&f.est_2d.confidence)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..frames.len()).collect();
    let n = n_v.min(frames.len());
    let (conf, non): (Vec<usize>, Vec<usize>) = all
        .iter()
        .partition(|&&i| is_confident(&frames[i].est_2d.confidence, rule));
    let mut out = match strategy {
        SelectionStrategy::Uniform => weighted_pick(&vec![1.0; frames.len()], n, &mut rng),
        SelectionStrategy::WeightSampled => weighted_pick(&weights, n, &mut rng),
        SelectionStrategy::Balanced => {
            let (na, nb) = balanced_split(conf.len(), non.len(), n_v);
            let mut v = Vec::with_capacity(na + nb);
            for (subset, take) in [(&conf, na), (&non, nb)] {
                let w: Vec<f64> = subset.iter().map(|&i| weights[i]).collect();
                v.extend(weighted_pick(&w, take, &mut rng).into_iter().map(|k| subset[k]));
            }
            v
        }
        SelectionStrategy::BalancedClustered => {
            let (na, nb) = balanced_split(conf.len(), non.len(), n_v);
            let mut v = cluster_top_weight(&conf, poses, &weights, na, n_c, rng.random())?;
            v.extend(cluster_top_weight(&non, poses, &weights, nb, n_c, rng.random())?);
            v
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// Representative records of a finished video. `pseudo_3d[i]` is the 3D
/// pseudo-label recorded for frame `i`, also used for clustering.
#[allow(clippy::too_many_arguments)]
pub fn select_representatives(
    frames: &[Frame],
    pseudo_3d: &[Pose3D],
    rule: &ConfidenceRule,
    n_v: usize,
    n_c: usize,
    seed: u64,
    strategy: SelectionStrategy,
) -> Result<Vec<SampleRecord>> {
    let idx = select_indices(frames, pseudo_3d, rule, n_v, n_c, seed, strategy)?;
    Ok(idx
        .into_iter()
        .map(|i| SampleRecord::from_frame(&frames[i], pseudo_3d[i].clone(), rule))
        .collect())
}
