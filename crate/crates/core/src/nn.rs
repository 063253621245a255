//! Parameter storage, initialization, the Adam optimizer, a shared
//! mini-batch training loop and a finite-difference gradient checker.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// `U(-a, a)`.
    Uniform(f64),
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
}

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let value = match init {
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
            }
            Init::Uniform(a) => Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a)),
            Init::Zeros => Array2::zeros((rows, cols)),
        };
        self.entries.push(ParamEntry { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar coordinates.
    pub fn n_coords(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Checks that this set has the same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
    }
}

/// Gradients with the same layout as a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { values: params.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let c = max_norm / norm;
            for g in &mut self.values {
                g.mapv_inplace(|v| v * c);
            }
        }
        norm
    }
}

/// Affine layer `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights and biases both drawn with fan-in scaling.
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), fan_in, fan_out, Init::FanIn(fan_in), rng);
        let bias = params.add(format!("{name}.bias"), 1, fan_out, Init::FanIn(fan_in), rng);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, params: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        x.dot(params.get(self.weight)) + params.get(self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let g = &grads.values[i];
            ndarray::Zip::from(&mut entry.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Optimizer settings shared by both trainable models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.grad_clip > 0.0) {
            problems.push(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.patience == 0 {
            problems.push("patience must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean mini-batch loss of each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Mini-batch Adam with global-norm clipping and early stopping on the
/// validation loss. Batch order comes from a ChaCha8 shuffle seeded with
/// `opts.seed`, so runs are reproducible bit for bit. Returns the parameters
/// of the best validation epoch.
pub fn fit<S>(
    mut params: ParamSet,
    train: &[S],
    opts: &TrainOptions,
    mut loss_and_grad: impl FnMut(&ParamSet, &[&S]) -> (f64, Gradients),
    mut val_loss: impl FnMut(&ParamSet) -> f64,
) -> Result<(ParamSet, TrainHistory)> {
    opts.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&params, opts.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&S> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = loss_and_grad(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            grads.clip_global_norm(opts.grad_clip);
            adam.step(&mut params, &grads);
            total += loss;
            batches += 1;
        }
        let val = val_loss(&params);
        if !val.is_finite() || !params.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.train_loss.push(total / batches as f64);
        history.val_loss.push(val);
        if val < best.0 {
            best = (val, params.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares `grad` against central finite differences of `loss` on at least
/// `min_coords` coordinates (or all of them, if fewer). The first coordinate
/// of every parameter group is always included; the rest are sampled with a
/// ChaCha8 stream seeded by `seed`.
///
/// Relative error is `|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)`.
pub fn grad_check(
    params: &ParamSet,
    eps: f64,
    min_coords: usize,
    seed: u64,
    loss: impl Fn(&ParamSet) -> f64,
    grad: impl Fn(&ParamSet) -> Gradients,
) -> GradCheckReport {
    let analytic = grad(params);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (g, e) in params.entries.iter().enumerate() {
        for i in 0..e.value.len() {
            coords.push((g, i));
        }
    }
    let chosen: Vec<(usize, usize)> = if coords.len() <= min_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let firsts: Vec<(usize, usize)> = (0..params.len()).filter(|&g| !params.entries[g].value.is_empty()).map(|g| (g, 0)).collect();
        let mut rest: Vec<(usize, usize)> = coords.into_iter().filter(|&(_, i)| i != 0).collect();
        rest.shuffle(&mut rng);
        let extra = min_coords.saturating_sub(firsts.len());
        firsts.into_iter().chain(rest.into_iter().take(extra)).collect()
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: chosen.len() };
    for &(g, i) in &chosen {
        let orig = params.entries[g].value.as_slice_memory_order().expect("contiguous")[i];
        let set = |p: &mut ParamSet, v: f64| p.entries[g].value.as_slice_memory_order_mut().expect("contiguous")[i] = v;
        set(&mut probe, orig + eps);
        let up = loss(&probe);
        set(&mut probe, orig - eps);
        let down = loss(&probe);
        set(&mut probe, orig);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.values[g].as_slice_memory_order().expect("contiguous")[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn quadratic_setup() -> (ParamSet, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let id = p.add("w", 2, 2, Init::Uniform(1.0), &mut rng);
        (p, id)
    }

    fn quad_loss(p: &ParamSet, id: ParamId) -> f64 {
        p.get(id).iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
    }

    fn quad_grad(p: &ParamSet, id: ParamId) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        let w = p.get(id);
        *g.get_mut(id) = Array2::from_shape_fn(w.dim(), |(r, c)| 2.0 * (r as f64 * 2.0 + c as f64 + 1.0) * w[[r, c]]);
        g
    }

    #[test]
    fn checker_flags_corrupted_coordinate() {
        let (p, id) = quadratic_setup();
        let ok = grad_check(&p, 1e-5, 200, 0, |q| quad_loss(q, id), |q| quad_grad(q, id));
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        let bad = grad_check(&p, 1e-5, 200, 0, |q| quad_loss(q, id), |q| {
            let mut g = quad_grad(q, id);
            g.get_mut(id)[[1, 0]] *= 2.0;
            g
        });
        assert!((bad.max_rel_error - 0.5).abs() < 1e-6, "{bad:?}");
    }

    #[test]
    fn zero_gradient_uses_floor() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = p.add("w", 1, 3, Init::Zeros, &mut rng);
        let r = grad_check(&p, 1e-5, 10, 0, |q| quad_loss(q, id), |q| quad_grad(q, id));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (p, id) = quadratic_setup();
        let mut g = Gradients::zeros_like(&p);
        *g.get_mut(id) = array![[3.0, 4.0], [0.0, 0.0]];
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(g.clip_global_norm(10.0), 1.0);
    }

    #[test]
    fn fan_in_init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            p.add("w", 16, 8, Init::FanIn(16), &mut rng);
            p
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        assert!(build(3).entries()[0].value.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let (mut p, id) = quadratic_setup();
        let mut adam = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let g = quad_grad(&p, id);
            adam.step(&mut p, &g);
        }
        assert!(quad_loss(&p, id) < 1e-8);
    }

    #[test]
    fn fit_is_deterministic_and_descends() {
        let data: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut p = ParamSet::new();
            let id = p.add("c", 1, 1, Init::Zeros, &mut rng);
            let opts = TrainOptions { lr: 0.1, epochs: 50, batch_size: 8, grad_clip: 5.0, patience: 50, seed: 7 };
            fit(
                p,
                &data,
                &opts,
                |p, batch| {
                    let c = p.get(id)[[0, 0]];
                    let n = batch.len() as f64;
                    let loss = batch.iter().map(|&&x| (c - x) * (c - x)).sum::<f64>() / n;
                    let mut g = Gradients::zeros_like(p);
                    g.get_mut(id)[[0, 0]] = batch.iter().map(|&&x| 2.0 * (c - x)).sum::<f64>() / n;
                    (loss, g)
                },
                |p| (p.get(id)[[0, 0]] - 1.95).powi(2),
            )
            .unwrap()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.train_loss[10] < ha.train_loss[0]);
        assert!((a.entries()[0].value[[0, 0]] - 1.95).abs() < 0.2);
    }
}
