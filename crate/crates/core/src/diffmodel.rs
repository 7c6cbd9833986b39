//! The adaptable regressor (features -> pose parameters), its exact gradients,
//! Adam, the mean teacher and snapshot/restore.
//!
//! Parameters live in one flat vector laid out layer by layer (weights
//! row-major, then bias). Gradients, optimizer moments and the teacher's
//! shadow copy share that layout so every update is a flat zip.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tape};
use crate::error::{check_dim, Error, Result};
use crate::kinematics::{PoseParams, BETA_DIM, BETA_MAX, BETA_MIN};

/// Offset added to the raw depth output before the softplus, so an untrained
/// head starts about five meters from the camera.
pub const DEPTH_BIAS: f64 = 5.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OTTAMLP1";

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorState {
    joint_count: usize,
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Pose parameters in any scalar type, as decoded from the regressor head.
#[derive(Debug, Clone)]
pub struct ParamsView<R> {
    pub theta: Vec<R>,
    pub beta: Vec<R>,
    pub trans: [R; 3],
}

impl ParamsView<f64> {
    pub fn to_params(&self) -> PoseParams {
        PoseParams {
            theta: self.theta.clone(),
            beta: self.beta.clone(),
            trans: self.trans,
        }
    }
}

/// Map raw head outputs onto valid pose parameters.
pub fn decode_output<R: Real>(raw: &[R], joint_count: usize) -> ParamsView<R> {
    let t = 3 * joint_count;
    ParamsView {
        theta: raw[..t].to_vec(),
        beta: raw[t..t + BETA_DIM]
            .iter()
            .map(|&b| (b + R::cst(1.0)).clamp_to(BETA_MIN, BETA_MAX))
            .collect(),
        trans: [
            raw[t + BETA_DIM],
            raw[t + BETA_DIM + 1],
            (raw[t + BETA_DIM + 2] + R::cst(DEPTH_BIAS)).softplus(),
        ],
    }
}

/// A scalar objective of the decoded regressor output.
pub trait PoseObjective {
    fn eval<R: Real>(&self, params: &ParamsView<R>) -> R;
}

/// Activations recorded by a forward pass; `acts[0]` is the input.
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn add_scaled(&mut self, other: &Gradient, k: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            *a *= k;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| *g == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl RegressorState {
    /// Randomly initialised network with tanh hidden layers.
    pub fn new(input_dim: usize, hidden: &[usize], joint_count: usize, seed: u64) -> Result<Self> {
        let mut state = Self::zeros(input_dim, hidden, joint_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for l in 0..state.layer_count() {
            let (fan_in, fan_out) = (state.dims[l], state.dims[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for w in &mut state.params[offset..offset + fan_in * fan_out] {
                *w = normal.sample(&mut rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(state)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], joint_count: usize) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(3 * joint_count + BETA_DIM + 3);
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            joint_count,
            dims,
            params: vec![0.0; n],
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims")
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.dims.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        (start, start + self.dims[l] * self.dims[l + 1])
    }

    /// Weight matrix (row-major, `out x in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_offsets(l);
        let out = self.dims[l + 1];
        (&self.params[w..b], &self.params[b..b + out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layer_offsets(l);
        let out = self.dims[l + 1];
        let (ws, rest) = self.params[w..b + out].split_at_mut(b - w);
        (ws, rest)
    }

    pub fn forward_cached(&self, features: &[f64]) -> Result<ForwardCache> {
        check_dim("features", self.input_dim(), features.len())?;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(features.to_vec());
        let last = self.layer_count() - 1;
        for l in 0..self.layer_count() {
            let (w, b) = self.layer(l);
            let x = &acts[l];
            let n_in = self.dims[l];
            let mut y: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(i, bi)| {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    bi + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l != last {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            acts.push(y);
        }
        Ok(ForwardCache { acts })
    }

    /// Raw head outputs.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features)?.acts.pop().expect("output"))
    }

    pub fn predict(&self, features: &[f64]) -> Result<PoseParams> {
        let raw = self.forward(features)?;
        Ok(decode_output(&raw, self.joint_count).to_params())
    }

    /// Post-nonlinearity activations of hidden layer `layer_index`.
    pub fn feature_at_layer(&self, features: &[f64], layer_index: usize) -> Result<Vec<f64>> {
        let hidden = self.layer_count() - 1;
        if layer_index >= hidden {
            return Err(Error::InvalidInput(format!(
                "hidden layer {layer_index} out of range (network has {hidden})"
            )));
        }
        let mut cache = self.forward_cached(features)?;
        Ok(cache.acts.swap_remove(layer_index + 1))
    }

    /// Parameter gradient given the derivative of a scalar with respect to
    /// the raw outputs of the forward pass recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Gradient {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let n_in = self.dims[l];
            let n_out = self.dims[l + 1];
            let (wo, bo) = self.layer_offsets(l);
            let x = &cache.acts[l];
            for i in 0..n_out {
                let d = delta[i];
                grad[bo + i] = d;
                if d != 0.0 {
                    let row = &mut grad[wo + i * n_in..wo + (i + 1) * n_in];
                    for (g, xv) in row.iter_mut().zip(x) {
                        *g = d * xv;
                    }
                }
            }
            if l > 0 {
                let w = &self.params[wo..bo];
                let mut prev = vec![0.0; n_in];
                for i in 0..n_out {
                    let d = delta[i];
                    if d != 0.0 {
                        for (p, wv) in prev.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                            *p += d * wv;
                        }
                    }
                }
                // tanh'(z) = 1 - a^2
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Gradient(grad)
    }

    /// Loss value and its exact gradient with respect to every parameter.
    pub fn loss_gradient<O: PoseObjective>(&self, features: &[f64], objective: &O) -> Result<(f64, Gradient)> {
        let cache = self.forward_cached(features)?;
        let tape = Tape::new();
        let raw = tape.vars(cache.output());
        let view = decode_output(&raw, self.joint_count);
        let loss = objective.eval(&view);
        let value = loss.val();
        if !value.is_finite() {
            return Err(Error::GradientInvalid(value));
        }
        let adj = tape.gradient(loss);
        let d_out: Vec<f64> = raw.iter().map(|v| adj.wrt(*v)).collect();
        Ok((value, self.backward(&cache, &d_out)))
    }

    /// Loss value only.
    pub fn loss_value<O: PoseObjective>(&self, features: &[f64], objective: &O) -> Result<f64> {
        let raw = self.forward(features)?;
        Ok(objective.eval(&decode_output(&raw, self.joint_count)))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.joint_count as u32).to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            record: 0,
            msg: format!("checkpoint: {msg}"),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let joint_count = read_u32(&mut r)?;
        let n_dims = read_u32(&mut r)?;
        if !(2..=64).contains(&n_dims) {
            return Err(bad("implausible layer count"));
        }
        let dims: Vec<usize> = (0..n_dims).map(|_| read_u32(&mut r)).collect::<Result<_>>()?;
        let hidden = &dims[1..n_dims - 1];
        let mut state = Self::zeros(dims[0], hidden, joint_count)?;
        if state.dims != dims {
            return Err(bad("output width does not match joint count"));
        }
        for p in state.params.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated parameters"))?;
            *p = f64::from_le_bytes(b);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(state)
    }
}

/// Adam with bias correction; `beta2` and `epsilon` follow the usual defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64, beta1: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
            beta1,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_model(model: &RegressorState, learning_rate: f64, beta1: f64) -> Self {
        Self::new(model.param_count(), learning_rate, beta1)
    }
}

pub fn adam_step(params: &mut [f64], adam: &mut AdamState, grad: &Gradient) -> Result<()> {
    check_dim("gradient", params.len(), grad.0.len())?;
    check_dim("adam moments", params.len(), adam.first_moment.len())?;
    adam.step_count += 1;
    let t = adam.step_count as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2, lr, eps) = (adam.beta1, adam.beta2, adam.learning_rate, adam.epsilon);
    for (((p, m), v), g) in params
        .iter_mut()
        .zip(adam.first_moment.iter_mut())
        .zip(adam.second_moment.iter_mut())
        .zip(&grad.0)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Exponential moving average of the student's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub model: RegressorState,
    pub ema_decay: f64,
}

impl TeacherState {
    pub fn new(student: &RegressorState, ema_decay: f64) -> Self {
        Self {
            model: student.clone(),
            ema_decay,
        }
    }
}

pub fn ema_update(teacher: &mut TeacherState, student: &RegressorState) -> Result<()> {
    check_dim("teacher parameters", student.param_count(), teacher.model.param_count())?;
    let d = teacher.ema_decay;
    for (t, s) in teacher.model.params.iter_mut().zip(&student.params) {
        *t = d * *t + (1.0 - d) * s;
    }
    Ok(())
}

/// Frozen copy of a model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    model: RegressorState,
    adam: AdamState,
}

impl Snapshot {
    pub fn capture(model: &RegressorState, adam: &AdamState) -> Self {
        Self {
            model: model.clone(),
            adam: adam.clone(),
        }
    }

    pub fn restore(&self) -> (RegressorState, AdamState) {
        (self.model.clone(), self.adam.clone())
    }

    pub fn model(&self) -> &RegressorState {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Byte image of every parameter and optimizer moment.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.model.write_checkpoint(&mut out).expect("write to vec");
        out.extend_from_slice(&self.adam.step_count.to_le_bytes());
        for x in [self.adam.learning_rate, self.adam.beta1, self.adam.beta2, self.adam.epsilon] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in self.adam.first_moment.iter().chain(&self.adam.second_moment) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl PoseObjective for Constant {
        fn eval<R: Real>(&self, _: &ParamsView<R>) -> R {
            R::cst(3.5)
        }
    }

    /// Squared error on the raw theta outputs, which pass through decoding unchanged.
    struct ThetaTarget(Vec<f64>);
    impl PoseObjective for ThetaTarget {
        fn eval<R: Real>(&self, p: &ParamsView<R>) -> R {
            let mut acc = R::cst(0.0);
            for (t, y) in p.theta.iter().zip(&self.0) {
                let d = *t - R::cst(*y);
                acc = acc + d * d;
            }
            acc
        }
    }

    struct Everything;
    impl PoseObjective for Everything {
        fn eval<R: Real>(&self, p: &ParamsView<R>) -> R {
            let mut acc = R::cst(0.0);
            for (i, t) in p.theta.iter().enumerate() {
                acc = acc + (*t).sin().scale(i as f64 * 0.1 + 0.3);
            }
            for b in &p.beta {
                acc = acc + (*b - R::cst(1.0)) * (*b - R::cst(1.0));
            }
            acc + p.trans[2] * p.trans[0] + p.trans[1]
        }
    }

    #[test]
    fn zero_model_predicts_neutral_pose() {
        let m = RegressorState::zeros(30, &[64, 64], 15).unwrap();
        let p = m.predict(&[0.3; 30]).unwrap();
        assert!(p.theta.iter().all(|t| *t == 0.0));
        assert!(p.beta.iter().all(|b| *b == 1.0));
        assert_eq!(p.trans[..2], [0.0, 0.0]);
        assert!((p.trans[2] - DEPTH_BIAS.exp().ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn predict_is_pure_and_checks_dims() {
        let m = RegressorState::new(30, &[64, 64], 15, 4).unwrap();
        let f: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(m.predict(&f).unwrap(), m.predict(&f).unwrap());
        assert!(matches!(m.predict(&f[..29]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(m.output_dim(), 58);
        let p = m.predict(&f).unwrap();
        assert!(p.beta.iter().all(|b| (BETA_MIN..=BETA_MAX).contains(b)));
        assert!(p.trans[2] > 0.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = RegressorState::new(6, &[5], 2, 1).unwrap();
        let (v, g) = m.loss_gradient(&[0.1; 6], &Constant).unwrap();
        assert_eq!(v, 3.5);
        assert!(g.is_zero());
    }

    #[test]
    fn linear_model_gradient_matches_closed_form() {
        // No hidden layer: raw = W x + b, loss = |theta - y|^2.
        let mut m = RegressorState::new(4, &[], 1, 2).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0];
        let y = vec![0.1, -0.2, 0.3];
        let raw = m.forward(&x).unwrap();
        let (_, g) = m.loss_gradient(&x, &ThetaTarget(y.clone())).unwrap();
        let (w, _) = m.layer(0);
        let n_in = 4;
        for i in 0..m.output_dim() {
            let r = if i < 3 { 2.0 * (raw[i] - y[i]) } else { 0.0 };
            for (gk, xk) in g.0[i * n_in..(i + 1) * n_in].iter().zip(&x) {
                assert!((gk - r * xk).abs() < 1e-12);
            }
            let b_off = w.len() + i;
            assert!((g.0[b_off] - r).abs() < 1e-12);
        }
        // Gradient is usable for a descent step.
        let mut adam = AdamState::for_model(&m, 0.01, 0.9);
        let before = m.loss_value(&x, &ThetaTarget(y.clone())).unwrap();
        adam_step(m.params_mut(), &mut adam, &g).unwrap();
        assert!(m.loss_value(&x, &ThetaTarget(y)).unwrap() < before);
    }

    #[test]
    fn deep_gradient_matches_finite_differences() {
        let m = RegressorState::new(7, &[6, 5], 3, 11).unwrap();
        let x: Vec<f64> = (0..7).map(|i| (i as f64).cos()).collect();
        let (_, g) = m.loss_gradient(&x, &Everything).unwrap();
        let h = 1e-5;
        for i in (0..m.param_count()).step_by(7) {
            let mut p = m.clone();
            p.params[i] += h;
            let up = p.loss_value(&x, &Everything).unwrap();
            p.params[i] -= 2.0 * h;
            let dn = p.loss_value(&x, &Everything).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.0[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", g.0[i]);
        }
    }

    #[test]
    fn one_adam_step_changes_prediction() {
        let mut m = RegressorState::new(30, &[64, 64], 15, 8).unwrap();
        let f = vec![0.2; 30];
        let before = m.predict(&f).unwrap();
        let (_, g) = m.loss_gradient(&f, &ThetaTarget(vec![1.0; 45])).unwrap();
        let mut adam = AdamState::for_model(&m, 1e-3, 0.5);
        adam_step(m.params_mut(), &mut adam, &g).unwrap();
        assert_ne!(before, m.predict(&f).unwrap());
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![0.0];
        let mut adam = AdamState::new(1, 0.1, 0.9);
        adam_step(&mut p, &mut adam, &Gradient(vec![0.0])).unwrap();
        assert_eq!(p, vec![0.0]);
        assert_eq!(adam.step_count, 1);

        let mut p = vec![0.0];
        let mut adam = AdamState::new(1, 0.1, 0.9);
        adam_step(&mut p, &mut adam, &Gradient(vec![1.0])).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);

        // Hand-unrolled recurrence for two identical gradients.
        let (b1, b2, g) = (0.5, 0.999, 0.3);
        let mut p = vec![1.0];
        let mut adam = AdamState::new(1, 0.01, b1);
        adam_step(&mut p, &mut adam, &Gradient(vec![g])).unwrap();
        adam_step(&mut p, &mut adam, &Gradient(vec![g])).unwrap();
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        assert!((adam.first_moment[0] - m2).abs() < 1e-15);
        assert!((adam.second_moment[0] - v2).abs() < 1e-15);
        let step1 = 0.01 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + 1e-8);
        let step2 = 0.01 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((p[0] - (1.0 - step1 - step2)).abs() < 1e-15);

        let mut adam = AdamState::new(2, 0.1, 0.9);
        assert!(adam_step(&mut [0.0], &mut adam, &Gradient(vec![1.0])).is_err());
    }

    #[test]
    fn ema_examples() {
        let student = RegressorState::new(3, &[2], 1, 1).unwrap();
        let start = RegressorState::new(3, &[2], 1, 2).unwrap();

        let mut t = TeacherState::new(&start, 1.0);
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.model, start);

        let mut t = TeacherState::new(&start, 0.0);
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.model, student);

        let mut t = TeacherState::new(&start, 0.99);
        ema_update(&mut t, &student).unwrap();
        ema_update(&mut t, &student).unwrap();
        for ((tv, s0), s) in t.model.params().iter().zip(start.params()).zip(student.params()) {
            let once = 0.99 * s0 + 0.01 * s;
            let twice = 0.99 * once + 0.01 * s;
            assert!((tv - twice).abs() < 1e-15);
        }
    }

    #[test]
    fn snapshot_round_trip_and_isolation() {
        let mut m = RegressorState::new(30, &[64, 64], 15, 3).unwrap();
        let mut adam = AdamState::for_model(&m, 1e-3, 0.5);
        let f = vec![0.1; 30];
        let (_, g) = m.loss_gradient(&f, &ThetaTarget(vec![0.5; 45])).unwrap();
        adam_step(m.params_mut(), &mut adam, &g).unwrap();

        let snap = Snapshot::capture(&m, &adam);
        let (m2, a2) = snap.restore();
        assert_eq!(Snapshot::capture(&m2, &a2).to_bytes(), snap.to_bytes());

        for _ in 0..10 {
            let (_, g) = m.loss_gradient(&f, &ThetaTarget(vec![0.5; 45])).unwrap();
            adam_step(m.params_mut(), &mut adam, &g).unwrap();
        }
        let diverged = Snapshot::capture(&m, &adam);
        assert_ne!(diverged, snap);
        assert_ne!(diverged.to_bytes(), snap.to_bytes());
        let (m3, a3) = snap.restore();
        assert_eq!(m3, m2);
        assert_eq!(a3, a2);
    }

    #[test]
    fn feature_layers() {
        // Identity first layer: activation = tanh(x + b).
        let mut m = RegressorState::zeros(4, &[4, 3], 1).unwrap();
        {
            let (w, b) = m.layer_mut(0);
            for i in 0..4 {
                w[i * 4 + i] = 1.0;
                b[i] = 0.1 * i as f64;
            }
        }
        let x = [0.5, -0.2, 0.0, 1.5];
        let a = m.feature_at_layer(&x, 0).unwrap();
        for i in 0..4 {
            assert!((a[i] - (x[i] + 0.1 * i as f64).tanh()).abs() < 1e-15);
        }
        assert_eq!(a, m.feature_at_layer(&x, 0).unwrap());
        assert!(m.feature_at_layer(&x, 2).is_err());

        let m1 = RegressorState::new(4, &[8], 1, 1).unwrap();
        let m2 = RegressorState::new(4, &[8], 1, 2).unwrap();
        let a1 = m1.feature_at_layer(&x, 0).unwrap();
        let a2 = m2.feature_at_layer(&x, 0).unwrap();
        let dot: f64 = a1.iter().zip(&a2).map(|(p, q)| p * q).sum();
        let n1: f64 = a1.iter().map(|p| p * p).sum::<f64>().sqrt();
        let n2: f64 = a2.iter().map(|p| p * p).sum::<f64>().sqrt();
        let direct = dot / (n1 * n2);
        assert!((cosine_similarity(&a1, &a2) - direct).abs() < 1e-15);
        assert!(direct < 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RegressorState::new(30, &[64, 64], 15, 6).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = RegressorState::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let f = vec![0.4; 30];
        assert_eq!(back.predict(&f).unwrap(), m.predict(&f).unwrap());
        assert!(RegressorState::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(RegressorState::read_checkpoint(bad.as_slice()).is_err());
    }
}
