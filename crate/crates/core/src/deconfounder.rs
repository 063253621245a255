//! Recurrent factor model over two sources.
//!
//! A gated recurrent cell reads, at every step, the previous latent, both
//! sources' lagged covariates and the trainable input `L`, and emits the
//! latent `Z` for the next step. Independent per-source, per-treatment heads
//! predict each current covariate from the covariates' recent history and
//! `Z`, so treatments are conditionally independent given `(Z, history)` by
//! construction.
//!
//! Indexing: within a sequence of covariate rows `c_0, c_1, ...`, latent
//! `Z_tau` depends on rows `< tau` only. `Z_0` is computed from `L` alone.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::eval::conditional_independence_score;
use crate::nn::{fit, grad_check as check_gradients, GradCheckReport, Gradients, Init, Linear, ParamSet, TrainHistory, TrainOptions};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorModelConfig {
    pub d_z: usize,
    pub d_hidden: usize,
    /// Width of the trainable input `L`.
    pub d_l: usize,
    pub head_hidden: usize,
    /// Number of past covariate rows each head sees.
    pub x_lags: usize,
    /// When false, heads see covariate history only and no latent is used.
    pub use_latent: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub patience: usize,
    pub seed: u64,
    /// Keep every n-th training window.
    pub window_stride: usize,
}

impl Default for FactorModelConfig {
    fn default() -> Self {
        Self {
            d_z: 4,
            d_hidden: 32,
            d_l: 4,
            head_hidden: 16,
            x_lags: 5,
            use_latent: true,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            grad_clip: 5.0,
            patience: 10,
            seed: 0,
            window_stride: 1,
        }
    }
}

impl FactorModelConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_hidden", self.d_hidden),
            ("d_l", self.d_l),
            ("head_hidden", self.head_hidden),
            ("x_lags", self.x_lags),
            ("window_stride", self.window_stride),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if let Err(Error::InvalidConfig(m)) = self.train_options().validate() {
            problems.push(m);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    l: crate::nn::ParamId,
    cell: Linear,
    proj: Linear,
    /// `[source][treatment]`, G first.
    heads: [Vec<Head>; 2],
}

/// Trained or freshly initialized factor model.
#[derive(Debug, Clone)]
pub struct FactorModel {
    config: FactorModelConfig,
    k: usize,
    params: ParamSet,
    layout: Layout,
}

/// Serialized form of a [`FactorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCheckpoint {
    pub version: u32,
    pub config: FactorModelConfig,
    pub k: usize,
    pub params: ParamSet,
}

const SOURCES: [&str; 2] = ["g", "o"];

impl FactorModel {
    /// Seeded fan-in initialization for `k` covariates per source.
    pub fn init(config: &FactorModelConfig, k: usize) -> Result<Self> {
        config.validate()?;
        if k == 0 {
            return Err(Error::InvalidConfig("factor model needs at least one covariate".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let layout = build_layout(config, k, &mut params, &mut rng);
        Ok(Self { config: config.clone(), k, params, layout })
    }

    pub fn from_checkpoint(ck: FactorCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!("unsupported factor checkpoint version {}", ck.version)));
        }
        let fresh = Self::init(&ck.config, ck.k)?;
        if !fresh.params.same_layout(&ck.params) || !ck.params.is_finite() {
            return Err(Error::InvalidData("factor checkpoint parameters do not match its configuration".into()));
        }
        Ok(Self { params: ck.params, ..fresh })
    }

    pub fn checkpoint(&self) -> FactorCheckpoint {
        FactorCheckpoint { version: CHECKPOINT_VERSION, config: self.config.clone(), k: self.k, params: self.params.clone() }
    }

    pub fn config(&self) -> &FactorModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_covariates(&self) -> usize {
        self.k
    }

    /// Number of covariate rows before a window's last current step, which
    /// is also the trailing context used for trajectory latents.
    fn head_input_width(&self) -> usize {
        self.config.x_lags * self.k + if self.config.use_latent { self.config.d_z } else { 0 }
    }

    /// Latents `Z_0 ..= Z_n` for aligned normalized covariate rows
    /// `[n x k]` of both sources; `Z_tau` reads rows `< tau` only.
    pub fn infer_latents(&self, g: ArrayView2<f64>, o: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_pair(g, o)?;
        let n = g.nrows();
        let seq = Sequences::new(&[(g, o)], n);
        let mut tape = Tape::new();
        let zs = self.recurrence(&mut tape, &self.params, &seq, n + 1);
        let mut out = Array2::zeros((n + 1, self.config.d_z));
        for (t, z) in zs.iter().enumerate() {
            out.row_mut(t).assign(&tape.value(*z).row(0));
        }
        Ok(out)
    }

    /// One latent per row of a full series: `Z_t` is computed from the
    /// `context` rows preceding `t` (fewer near the start), matching the
    /// position of a window's last current step during training.
    pub fn infer_trajectory(&self, g: ArrayView2<f64>, o: ArrayView2<f64>, context: usize) -> Result<Array2<f64>> {
        self.check_pair(g, o)?;
        let n = g.nrows();
        let d_z = self.config.d_z;
        let mut out = Array2::zeros((n, d_z));
        if n == 0 {
            return Ok(out);
        }
        // Rows t <= context share one run from the start of the series.
        let head = (context + 1).min(n);
        let first = self.infer_latents(g.slice(s![..head - 1, ..]), o.slice(s![..head - 1, ..]))?;
        out.slice_mut(s![..head, ..]).assign(&first);
        // Later rows each restart from t - context, in batches.
        let starts: Vec<usize> = (head..n).map(|t| t - context).collect();
        for chunk in starts.chunks(256) {
            let pairs: Vec<(ArrayView2<f64>, ArrayView2<f64>)> = chunk
                .iter()
                .map(|&s0| (g.slice(s![s0..s0 + context, ..]), o.slice(s![s0..s0 + context, ..])))
                .collect();
            let seq = Sequences::new(&pairs, context);
            let mut tape = Tape::new();
            let zs = self.recurrence(&mut tape, &self.params, &seq, context + 1);
            let last = tape.value(zs[context]);
            for (b, &s0) in chunk.iter().enumerate() {
                out.row_mut(s0 + context).assign(&last.row(b));
            }
        }
        Ok(out)
    }

    /// Treatment means for one step from lagged covariates
    /// (`[c_{t-1}, ..., c_{t-x_lags}]`, flattened) and `z_t`.
    pub fn predict_treatments(&self, z_t: Option<&[f64]>, x_g: &[f64], x_o: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        let xw = self.config.x_lags * self.k;
        for x in [x_g, x_o] {
            if x.len() != xw {
                return Err(Error::ShapeMismatch { expected: format!("{xw} lagged values"), got: x.len().to_string() });
            }
        }
        let z = if self.config.use_latent {
            let z = z_t.ok_or(Error::LatentMissing)?;
            if z.len() != self.config.d_z {
                return Err(Error::ShapeMismatch { expected: format!("{} latent values", self.config.d_z), got: z.len().to_string() });
            }
            z.to_vec()
        } else {
            Vec::new()
        };
        let mut outs = Vec::new();
        for (si, x) in [x_g, x_o].into_iter().enumerate() {
            let input = Array2::from_shape_vec((1, self.head_input_width()), [x, &z[..]].concat()).expect("width");
            let preds: Vec<f64> = self.layout.heads[si]
                .iter()
                .map(|h| h.out.apply(&self.params, &h.hidden.apply(&self.params, &input).mapv(f64::tanh))[[0, 0]])
                .collect();
            outs.push(Array1::from(preds));
        }
        let o = outs.pop().expect("two sources");
        let g = outs.pop().expect("two sources");
        Ok((g, o))
    }

    /// Mean squared treatment error over both sources, all treatments and
    /// every current step of the windows.
    pub fn factor_loss(&self, windows: &[&TrajectoryWindow]) -> Result<f64> {
        self.check_windows(windows)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in windows.chunks(256) {
            let mut tape = Tape::new();
            let (loss, n) = self.loss_graph(&mut tape, &self.params, chunk);
            total += tape.scalar(loss) * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }

    fn loss_and_grad(&self, params: &ParamSet, windows: &[&TrajectoryWindow]) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let (loss, _) = self.loss_graph(&mut tape, params, windows);
        (tape.scalar(loss), tape.backward(loss, params))
    }

    /// Residuals `a - a_hat` over every current step, `[rows x 2k]` with
    /// the GCM treatments first.
    pub fn treatment_residuals(&self, windows: &[&TrajectoryWindow]) -> Result<Array2<f64>> {
        self.check_windows(windows)?;
        let mut blocks = Vec::new();
        for chunk in windows.chunks(256) {
            let mut tape = Tape::new();
            let (pred, target) = self.predictions(&mut tape, &self.params, chunk);
            blocks.push(target - tape.value(pred));
        }
        let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
    }

    /// Conditional-independence score of the treatment residuals, averaged
    /// over the two sources.
    pub fn independence_score(&self, windows: &[&TrajectoryWindow]) -> Result<f64> {
        let r = self.treatment_residuals(windows)?;
        let k = self.k;
        let g = conditional_independence_score(&r.slice(s![.., ..k]).to_owned())?;
        let o = conditional_independence_score(&r.slice(s![.., k..]).to_owned())?;
        Ok(0.5 * (g + o))
    }

    fn check_pair(&self, g: ArrayView2<f64>, o: ArrayView2<f64>) -> Result<()> {
        if g.dim() != o.dim() {
            return Err(Error::MisalignedSources(format!("GCM rows {:?} vs observation rows {:?}", g.dim(), o.dim())));
        }
        if g.ncols() != self.k {
            return Err(Error::ShapeMismatch { expected: format!("{} covariates", self.k), got: g.ncols().to_string() });
        }
        Ok(())
    }

    fn check_windows(&self, windows: &[&TrajectoryWindow]) -> Result<()> {
        let first = windows.first().ok_or(Error::EmptyInput)?;
        let (h, w) = (first.x_g.nrows(), first.a_g.nrows());
        if h < self.config.x_lags {
            return Err(Error::InvalidConfig(format!("history length {h} is shorter than x_lags {}", self.config.x_lags)));
        }
        for win in windows {
            if win.x_g.nrows() != h || win.a_g.nrows() != w || win.x_o.dim() != win.x_g.dim() || win.a_o.dim() != win.a_g.dim()
            {
                return Err(Error::ShapeMismatch { expected: format!("windows of {h}+{w} rows"), got: "mixed shapes".into() });
            }
            if win.x_g.ncols() != self.k {
                return Err(Error::ShapeMismatch { expected: format!("{} covariates", self.k), got: win.x_g.ncols().to_string() });
            }
        }
        Ok(())
    }

    /// Runs the cell for `steps` steps and returns `Z_0 .. Z_{steps-1}`.
    fn recurrence(&self, tape: &mut Tape, params: &ParamSet, seq: &Sequences, steps: usize) -> Vec<Var> {
        let b = seq.batch;
        let cfg = &self.config;
        let l_row = tape.param(params, self.layout.l);
        let l = tape.broadcast_rows(l_row, b);
        let mut h = tape.constant(Array2::zeros((b, cfg.d_hidden)));
        let mut z_prev = tape.constant(Array2::zeros((b, cfg.d_z)));
        let mut zs = Vec::with_capacity(steps);
        for tau in 0..steps {
            let lg = tape.constant(seq.lags(0, tau, cfg.x_lags + 1));
            let lo = tape.constant(seq.lags(1, tau, cfg.x_lags + 1));
            let input = tape.concat_cols(&[z_prev, lg, lo, l, h]);
            let gates = self.layout.cell.forward(tape, params, input);
            let u_pre = tape.slice_cols(gates, 0, cfg.d_hidden);
            let c_pre = tape.slice_cols(gates, cfg.d_hidden, 2 * cfg.d_hidden);
            let u = tape.sigmoid(u_pre);
            let c = tape.tanh(c_pre);
            let keep = tape.one_minus(u);
            let old = tape.mul(keep, h);
            let new = tape.mul(u, c);
            h = tape.add(old, new);
            let z = self.layout.proj.forward(tape, params, h);
            zs.push(z);
            z_prev = z;
        }
        zs
    }

    /// Head predictions over the current steps of a batch, `[w*B x 2k]`,
    /// and the matching targets.
    fn predictions(&self, tape: &mut Tape, params: &ParamSet, windows: &[&TrajectoryWindow]) -> (Var, Array2<f64>) {
        let h = windows[0].x_g.nrows();
        let w = windows[0].a_g.nrows();
        let steps = h + w;
        let pairs: Vec<(Array2<f64>, Array2<f64>)> = windows
            .iter()
            .map(|win| {
                let g = ndarray::concatenate![Axis(0), win.x_g, win.a_g];
                let o = ndarray::concatenate![Axis(0), win.x_o, win.a_o];
                (g, o)
            })
            .collect();
        let views: Vec<(ArrayView2<f64>, ArrayView2<f64>)> = pairs.iter().map(|(g, o)| (g.view(), o.view())).collect();
        let seq = Sequences::new(&views, steps);
        let zs = if self.config.use_latent { self.recurrence(tape, params, &seq, steps) } else { Vec::new() };

        let mut per_source = Vec::with_capacity(2);
        let mut targets = Vec::with_capacity(2);
        for si in 0..2 {
            let mut rows = Vec::with_capacity(w);
            let mut tg = Vec::with_capacity(w);
            for tau in h..steps {
                let x = tape.constant(seq.lags(si, tau, self.config.x_lags));
                rows.push(if self.config.use_latent { tape.concat_cols(&[x, zs[tau]]) } else { x });
                tg.push(seq.row(si, tau));
            }
            let input = tape.concat_rows(&rows);
            let outs: Vec<Var> = self.layout.heads[si]
                .iter()
                .map(|head| {
                    let pre = head.hidden.forward(tape, params, input);
                    let act = tape.tanh(pre);
                    head.out.forward(tape, params, act)
                })
                .collect();
            per_source.push(tape.concat_cols(&outs));
            let tv: Vec<ArrayView2<f64>> = tg.iter().map(|a| a.view()).collect();
            targets.push(ndarray::concatenate(Axis(0), &tv).expect("rows"));
        }
        let pred = tape.concat_cols(&per_source);
        let target = ndarray::concatenate![Axis(1), targets[0], targets[1]];
        (pred, target)
    }

    /// Returns the loss node and the number of squared terms it averages.
    fn loss_graph(&self, tape: &mut Tape, params: &ParamSet, windows: &[&TrajectoryWindow]) -> (Var, usize) {
        let (pred, target) = self.predictions(tape, params, windows);
        let n = target.len();
        let t = tape.constant(target);
        let diff = tape.sub(pred, t);
        (tape.mean_square(diff), n)
    }
}

fn build_layout(config: &FactorModelConfig, k: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Layout {
    let cell_in = config.d_z + 2 * (config.x_lags + 1) * k + config.d_l + config.d_hidden;
    let l = params.add("latent.L", 1, config.d_l, Init::Uniform(1.0), rng);
    let cell = Linear::new(params, "latent.cell", cell_in, 2 * config.d_hidden, rng);
    let proj = Linear::new(params, "latent.proj", config.d_hidden, config.d_z, rng);
    let head_in = config.x_lags * k + if config.use_latent { config.d_z } else { 0 };
    let heads = SOURCES.map(|src| {
        (0..k)
            .map(|j| Head {
                hidden: Linear::new(params, &format!("head.{src}{j}.hidden"), head_in, config.head_hidden, rng),
                out: Linear::new(params, &format!("head.{src}{j}.out"), config.head_hidden, 1, rng),
            })
            .collect()
    });
    Layout { l, cell, proj, heads }
}

/// A batch of aligned covariate sequences for both sources.
struct Sequences {
    batch: usize,
    k: usize,
    /// `[source][step]` -> `[batch x k]`.
    rows: [Vec<Array2<f64>>; 2],
}

impl Sequences {
    fn new(pairs: &[(ArrayView2<f64>, ArrayView2<f64>)], steps: usize) -> Self {
        let batch = pairs.len();
        let k = pairs.first().map_or(0, |p| p.0.ncols());
        let build = |si: usize| {
            (0..steps)
                .map(|t| {
                    let mut m = Array2::zeros((batch, k));
                    for (b, pair) in pairs.iter().enumerate() {
                        let src = if si == 0 { pair.0 } else { pair.1 };
                        m.row_mut(b).assign(&src.row(t));
                    }
                    m
                })
                .collect()
        };
        Self { batch, k, rows: [build(0), build(1)] }
    }

    fn row(&self, si: usize, t: usize) -> Array2<f64> {
        self.rows[si][t].clone()
    }

    /// `[c_{t-1}, ..., c_{t-m}]` with zeros before the first row.
    fn lags(&self, si: usize, t: usize, m: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.batch, m * self.k));
        for i in 1..=m.min(t) {
            out.slice_mut(s![.., (i - 1) * self.k..i * self.k]).assign(&self.rows[si][t - i]);
        }
        out
    }
}

/// Trains from `init_factor_model` parameters with Adam and early stopping.
pub fn train_factor_model(
    train: &[TrajectoryWindow],
    val: &[TrajectoryWindow],
    config: &FactorModelConfig,
) -> Result<(FactorModel, TrainHistory)> {
    config.validate()?;
    let first = train.first().ok_or(Error::EmptyInput)?;
    if val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let model = FactorModel::init(config, first.x_g.ncols())?;
    let train_refs: Vec<&TrajectoryWindow> = train.iter().step_by(config.window_stride).collect();
    let val_refs: Vec<&TrajectoryWindow> = val.iter().collect();
    model.check_windows(&train_refs)?;
    model.check_windows(&val_refs)?;
    let template = model.clone();
    let (params, history) = fit(
        model.params.clone(),
        &train_refs,
        &config.train_options(),
        |p, batch| {
            let owned: Vec<&TrajectoryWindow> = batch.iter().map(|w| **w).collect();
            template.loss_and_grad(p, &owned)
        },
        |p| {
            let mut m = template.clone();
            m.params = p.clone();
            m.factor_loss(&val_refs).unwrap_or(f64::NAN)
        },
    )?;
    Ok((FactorModel { params, ..model }, history))
}

/// Finite-difference check of the factor-loss gradient on `windows`.
pub fn grad_check(model: &FactorModel, windows: &[&TrajectoryWindow], epsilon: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    model.check_windows(windows)?;
    Ok(check_gradients(
        &model.params,
        epsilon,
        200,
        model.config.seed,
        |p| {
            let mut tape = Tape::new();
            let (l, _) = model.loss_graph(&mut tape, p, windows);
            tape.scalar(l)
        },
        |p| model.loss_and_grad(p, windows).1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, WindowSpec};
    use crate::synthgen::{generate, SynthConfig};

    fn small_config() -> FactorModelConfig {
        FactorModelConfig { d_z: 2, d_hidden: 5, d_l: 2, head_hidden: 3, x_lags: 2, seed: 3, ..Default::default() }
    }

    fn windows(n_loc: usize, t: usize, spec: WindowSpec) -> Vec<TrajectoryWindow> {
        let ds = generate(&SynthConfig { n_locations: n_loc, t, seed: 1, ..SynthConfig::default() }).unwrap();
        make_windows(&ds.data, &spec).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_config();
        let a = FactorModel::init(&cfg, 3).unwrap();
        let b = FactorModel::init(&cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = FactorModel::init(&FactorModelConfig { seed: 4, ..cfg.clone() }, 3).unwrap();
        assert_ne!(a.params, c.params);
        let one = FactorModel::init(&FactorModelConfig { d_z: 1, ..cfg }, 3).unwrap();
        assert_eq!(one.params.get(one.layout.proj.weight).ncols(), 1);
    }

    #[test]
    fn empty_history_gives_one_latent_from_l() {
        let m = FactorModel::init(&small_config(), 3).unwrap();
        let empty = Array2::<f64>::zeros((0, 3));
        let z = m.infer_latents(empty.view(), empty.view()).unwrap();
        assert_eq!(z.dim(), (1, 2));
        let again = m.infer_latents(empty.view(), empty.view()).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn latents_never_look_ahead() {
        let m = FactorModel::init(&small_config(), 3).unwrap();
        let g = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let o = Array2::from_shape_fn((12, 3), |(i, j)| ((i + 2 * j) as f64 * 0.21).cos());
        let base = m.infer_latents(g.view(), o.view()).unwrap();
        for t in 0..12 {
            let mut g2 = g.clone();
            g2[[t, 1]] += 0.5;
            let z = m.infer_latents(g2.view(), o.view()).unwrap();
            assert_eq!(z.slice(s![..=t, ..]), base.slice(s![..=t, ..]), "changed before {t}");
            assert_ne!(z.row(t + 1), base.row(t + 1));
        }
        let short = Array2::<f64>::zeros((11, 3));
        assert!(matches!(m.infer_latents(g.view(), short.view()), Err(Error::MisalignedSources(_))));
    }

    #[test]
    fn trajectory_matches_window_restarts() {
        let m = FactorModel::init(&small_config(), 3).unwrap();
        let g = Array2::from_shape_fn((30, 3), |(i, j)| ((i * 5 + j) as f64 * 0.13).sin());
        let o = Array2::from_shape_fn((30, 3), |(i, j)| ((i + j) as f64 * 0.29).cos());
        let ctx = 7;
        let traj = m.infer_trajectory(g.view(), o.view(), ctx).unwrap();
        for t in 0..30usize {
            let s0 = t.saturating_sub(ctx);
            let z = m.infer_latents(g.slice(s![s0..t, ..]), o.slice(s![s0..t, ..])).unwrap();
            let diff = (&z.row(t - s0) - &traj.row(t)).mapv(f64::abs).sum();
            assert!(diff < 1e-12, "row {t}");
        }
    }

    #[test]
    fn heads_are_isolated() {
        let mut m = FactorModel::init(&small_config(), 3).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let z = [0.3, -0.2];
        let (g0, o0) = m.predict_treatments(Some(&z), &x, &x).unwrap();
        assert_eq!(g0.len(), 3);
        let head = m.layout.heads[0][1];
        m.params.get_mut(head.hidden.weight).fill(0.0);
        m.params.get_mut(head.out.weight).fill(0.0);
        let (g1, o1) = m.predict_treatments(Some(&z), &x, &x).unwrap();
        assert_eq!(g1[1], m.params.get(head.out.bias)[[0, 0]]);
        assert_eq!((g1[0], g1[2]), (g0[0], g0[2]));
        assert_eq!(o1, o0);
        assert!(matches!(m.predict_treatments(None, &x, &x), Err(Error::LatentMissing)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = WindowSpec::new(4, 3, 1).unwrap();
        let ws = windows(1, 30, spec);
        let refs: Vec<&TrajectoryWindow> = ws.iter().take(5).collect();
        for use_latent in [true, false] {
            let m = FactorModel::init(&FactorModelConfig { use_latent, ..small_config() }, 3).unwrap();
            let r = grad_check(&m, &refs, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            assert!(r.checked >= 200.min(m.params.n_coords()));
        }
    }

    #[test]
    fn head_gradients_stay_within_their_head() {
        let spec = WindowSpec::new(4, 3, 1).unwrap();
        let ws = windows(1, 20, spec);
        let refs: Vec<&TrajectoryWindow> = ws.iter().take(3).collect();
        let m = FactorModel::init(&small_config(), 3).unwrap();
        // Loss on a single output column: GCM treatment 1.
        let mut tape = Tape::new();
        let (pred, target) = m.predictions(&mut tape, &m.params, &refs);
        let col = tape.slice_cols(pred, 1, 2);
        let t = tape.constant(target.slice(s![.., 1..2]).to_owned());
        let d = tape.sub(col, t);
        let loss = tape.mean_square(d);
        let grads = tape.backward(loss, &m.params);
        for (si, heads) in m.layout.heads.iter().enumerate() {
            for (j, head) in heads.iter().enumerate() {
                let norm = grads.get(head.hidden.weight).iter().map(|v| v.abs()).sum::<f64>();
                assert_eq!(norm > 0.0, si == 0 && j == 1, "head {si}/{j}");
            }
        }
    }

    #[test]
    fn loss_properties() {
        let spec = WindowSpec::new(4, 3, 1).unwrap();
        let ws = windows(2, 40, spec);
        let m = FactorModel::init(&small_config(), 3).unwrap();
        let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
        let mut rev = refs.clone();
        rev.reverse();
        let a = m.factor_loss(&refs).unwrap();
        assert!((a - m.factor_loss(&rev).unwrap()).abs() < 1e-12);
        // Residuals reproduce the loss.
        let r = m.treatment_residuals(&refs).unwrap();
        assert!((r.mapv(|v| v * v).mean().unwrap() - a).abs() < 1e-12);
        assert!(matches!(m.factor_loss(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let spec = WindowSpec::new(8, 4, 1).unwrap();
        let ws = windows(3, 120, spec);
        let (train, val) = ws.split_at(200);
        let cfg = FactorModelConfig { epochs: 12, batch_size: 32, patience: 20, ..small_config() };
        let (a, ha) = train_factor_model(train, val, &cfg).unwrap();
        let (b, hb) = train_factor_model(train, val, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
        assert!(ha.train_loss[10] < ha.train_loss[0], "{:?}", ha.train_loss);
        let ck = a.checkpoint();
        let back = FactorModel::from_checkpoint(serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap()).unwrap();
        assert_eq!(back.params, a.params);
    }
}
