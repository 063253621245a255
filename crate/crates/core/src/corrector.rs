//! Forecasts the bias delta `y_o - y_g` over the next `k` steps from the
//! current covariates of both sources and, optionally, the inferred latents,
//! and adds it to the model output.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Scaler, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::nn::{fit, grad_check as check_gradients, GradCheckReport, Gradients, Init, Linear, ParamId, ParamSet, TrainHistory, TrainOptions};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    /// Each variate's series becomes one token; tokens attend to each other.
    #[default]
    VariateAttention,
    Mlp,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    pub model_kind: CorrectorKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub patience: usize,
    pub seed: u64,
    pub use_z: bool,
    /// Keep every n-th training sample.
    pub window_stride: usize,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            model_kind: CorrectorKind::VariateAttention,
            d_model: 32,
            n_heads: 4,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            grad_clip: 5.0,
            patience: 10,
            seed: 0,
            use_z: true,
            window_stride: 1,
        }
    }
}

impl CorrectorConfig {
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
        if self.window_stride == 0 {
            problems.push("window_stride must be positive".to_string());
        }
        if self.d_model == 0 || self.n_heads == 0 {
            problems.push("d_model and n_heads must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
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

/// Per-step features `[a_g | a_o | z]` over a window's current segment,
/// `[w x d_f]` with `d_f = 2 * n_covariates + d_z * use_z`.
pub fn build_features(window: &TrajectoryWindow, z: Option<ArrayView2<f64>>, use_z: bool) -> Result<Array2<f64>> {
    let w = window.a_g.nrows();
    let mut parts = vec![window.a_g.view(), window.a_o.view()];
    if use_z {
        let z = z.ok_or(Error::LatentMissing)?;
        if z.nrows() != w {
            return Err(Error::ShapeMismatch { expected: format!("{w} latent rows"), got: z.nrows().to_string() });
        }
        parts.push(z);
    }
    Ok(ndarray::concatenate(Axis(1), &parts).expect("equal row counts"))
}

/// One training example: features and the normalized delta over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSample {
    pub features: Array2<f64>,
    pub target: Array1<f64>,
}

impl CorrectorSample {
    pub fn from_window(window: &TrajectoryWindow, z: Option<ArrayView2<f64>>, use_z: bool) -> Result<Self> {
        Ok(Self { features: build_features(window, z, use_z)?, target: window.delta_y() })
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Attention {
        /// One `[w x d_model]` embedding per variate.
        embed: Vec<Linear>,
        q: Linear,
        /// Key projection without bias: a key bias shifts every score of a
        /// query equally and cancels in the softmax.
        k: ParamId,
        v: Linear,
        ff_in: Linear,
        ff_out: Linear,
        head: Linear,
    },
    Mlp {
        hidden: Linear,
        out: Linear,
    },
    Linear {
        out: Linear,
    },
}

#[derive(Debug, Clone)]
pub struct Corrector {
    config: CorrectorConfig,
    w: usize,
    d_f: usize,
    horizon: usize,
    params: ParamSet,
    layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorCheckpoint {
    pub version: u32,
    pub config: CorrectorConfig,
    pub w: usize,
    pub d_f: usize,
    pub horizon: usize,
    pub params: ParamSet,
}

impl Corrector {
    /// Seeded initialization for `[w x d_f]` features and `horizon` outputs.
    pub fn init(config: &CorrectorConfig, w: usize, d_f: usize, horizon: usize) -> Result<Self> {
        config.validate()?;
        if w == 0 || d_f == 0 || horizon == 0 {
            return Err(Error::InvalidConfig(format!("corrector shapes must be positive (w={w}, d_f={d_f}, k={horizon})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let dm = config.d_model;
        let layout = match config.model_kind {
            CorrectorKind::VariateAttention => Layout::Attention {
                embed: (0..d_f).map(|v| Linear::new(&mut params, &format!("embed.{v}"), w, dm, &mut rng)).collect(),
                q: Linear::new(&mut params, "attn.q", dm, dm, &mut rng),
                k: params.add("attn.k.weight", dm, dm, Init::FanIn(dm), &mut rng),
                v: Linear::new(&mut params, "attn.v", dm, dm, &mut rng),
                ff_in: Linear::new(&mut params, "ff.in", dm, 2 * dm, &mut rng),
                ff_out: Linear::new(&mut params, "ff.out", 2 * dm, dm, &mut rng),
                head: Linear::new(&mut params, "head", dm, horizon, &mut rng),
            },
            CorrectorKind::Mlp => Layout::Mlp {
                hidden: Linear::new(&mut params, "mlp.hidden", w * d_f, dm, &mut rng),
                out: Linear::new(&mut params, "mlp.out", dm, horizon, &mut rng),
            },
            CorrectorKind::Linear => Layout::Linear { out: Linear::new(&mut params, "linear.out", w * d_f, horizon, &mut rng) },
        };
        Ok(Self { config: config.clone(), w, d_f, horizon, params, layout })
    }

    pub fn from_checkpoint(ck: CorrectorCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!("unsupported corrector checkpoint version {}", ck.version)));
        }
        let fresh = Self::init(&ck.config, ck.w, ck.d_f, ck.horizon)?;
        if !fresh.params.same_layout(&ck.params) || !ck.params.is_finite() {
            return Err(Error::InvalidData("corrector checkpoint parameters do not match its configuration".into()));
        }
        Ok(Self { params: ck.params, ..fresh })
    }

    pub fn checkpoint(&self) -> CorrectorCheckpoint {
        CorrectorCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            w: self.w,
            d_f: self.d_f,
            horizon: self.horizon,
            params: self.params.clone(),
        }
    }

    pub fn config(&self) -> &CorrectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_shape(&self) -> (usize, usize) {
        (self.w, self.d_f)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn check_features(&self, f: &Array2<f64>) -> Result<()> {
        if f.dim() != (self.w, self.d_f) {
            return Err(Error::ShapeMismatch {
                expected: format!("[{} x {}] features", self.w, self.d_f),
                got: format!("[{} x {}]", f.nrows(), f.ncols()),
            });
        }
        Ok(())
    }

    /// Predicted normalized delta for one feature tensor.
    pub fn predict_delta(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.predict_batch(std::slice::from_ref(features))?.row(0).to_owned())
    }

    /// `[n x horizon]` predictions for a batch of feature tensors.
    pub fn predict_batch(&self, features: &[Array2<f64>]) -> Result<Array2<f64>> {
        if features.is_empty() {
            return Err(Error::EmptyInput);
        }
        for f in features {
            self.check_features(f)?;
        }
        let refs: Vec<&Array2<f64>> = features.iter().collect();
        let mut blocks = Vec::new();
        for chunk in refs.chunks(256) {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, &self.params, chunk);
            blocks.push(tape.value(out).clone());
        }
        let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
    }

    /// Mean squared error of the predicted deltas.
    pub fn loss(&self, samples: &[CorrectorSample]) -> Result<f64> {
        let refs: Vec<&CorrectorSample> = samples.iter().collect();
        self.check_samples(&refs)?;
        let mut total = 0.0;
        let mut count = 0;
        for chunk in refs.chunks(256) {
            let mut tape = Tape::new();
            let l = self.loss_graph(&mut tape, &self.params, chunk);
            let n = chunk.len() * self.horizon;
            total += tape.scalar(l) * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }

    fn check_samples(&self, samples: &[&CorrectorSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        for s in samples {
            self.check_features(&s.features)?;
            if s.target.len() != self.horizon {
                return Err(Error::LengthMismatch { left: s.target.len(), right: self.horizon });
            }
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, params: &ParamSet, batch: &[&Array2<f64>]) -> Var {
        let b = batch.len();
        match &self.layout {
            Layout::Attention { embed, q, k, v, ff_in, ff_out, head } => {
                // Token v of sample i is the length-w series of variate v.
                let tokens: Vec<Var> = embed
                    .iter()
                    .enumerate()
                    .map(|(vi, lin)| {
                        let series = Array2::from_shape_fn((b, self.w), |(i, t)| batch[i][[t, vi]]);
                        let x = tape.constant(series);
                        lin.forward(tape, params, x)
                    })
                    .collect();
                let x = tape.interleave_rows(&tokens);
                let qv = q.forward(tape, params, x);
                let wk = tape.param(params, *k);
                let kv = tape.matmul(x, wk);
                let vv = v.forward(tape, params, x);
                let att = tape.attention(qv, kv, vv, self.d_f, self.config.n_heads);
                let x = tape.add(x, att);
                let hid = ff_in.forward(tape, params, x);
                let hid = tape.tanh(hid);
                let ff = ff_out.forward(tape, params, hid);
                let x = tape.add(x, ff);
                let pooled = tape.group_mean(x, self.d_f);
                head.forward(tape, params, pooled)
            }
            Layout::Mlp { hidden, out } => {
                let x = tape.constant(self.flatten(batch));
                let h = hidden.forward(tape, params, x);
                let h = tape.tanh(h);
                out.forward(tape, params, h)
            }
            Layout::Linear { out } => {
                let x = tape.constant(self.flatten(batch));
                out.forward(tape, params, x)
            }
        }
    }

    fn flatten(&self, batch: &[&Array2<f64>]) -> Array2<f64> {
        let width = self.w * self.d_f;
        let mut out = Array2::zeros((batch.len(), width));
        for (i, f) in batch.iter().enumerate() {
            out.row_mut(i).assign(&Array1::from_iter(f.iter().copied()));
        }
        out
    }

    fn loss_graph(&self, tape: &mut Tape, params: &ParamSet, samples: &[&CorrectorSample]) -> Var {
        let feats: Vec<&Array2<f64>> = samples.iter().map(|s| &s.features).collect();
        let pred = self.forward(tape, params, &feats);
        let target = Array2::from_shape_fn((samples.len(), self.horizon), |(i, j)| samples[i].target[j]);
        let t = tape.constant(target);
        let d = tape.sub(pred, t);
        tape.mean_square(d)
    }

    fn loss_and_grad(&self, params: &ParamSet, samples: &[&CorrectorSample]) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let l = self.loss_graph(&mut tape, params, samples);
        (tape.scalar(l), tape.backward(l, params))
    }
}

/// Trains a fresh corrector with Adam and early stopping on `val`.
pub fn train_corrector(
    train: &[CorrectorSample],
    val: &[CorrectorSample],
    config: &CorrectorConfig,
) -> Result<(Corrector, TrainHistory)> {
    config.validate()?;
    let first = train.first().ok_or(Error::EmptyInput)?;
    if val.is_empty() {
        return Err(Error::EmptyInput);
    }
    if train.iter().chain(val).any(|s| !s.target.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let (w, d_f) = first.features.dim();
    let model = Corrector::init(config, w, d_f, first.target.len())?;
    let train_refs: Vec<&CorrectorSample> = train.iter().step_by(config.window_stride).collect();
    model.check_samples(&train_refs)?;
    model.check_samples(&val.iter().collect::<Vec<_>>())?;
    let template = model.clone();
    let (params, history) = fit(
        model.params.clone(),
        &train_refs,
        &config.train_options(),
        |p, batch| {
            let owned: Vec<&CorrectorSample> = batch.iter().map(|s| **s).collect();
            template.loss_and_grad(p, &owned)
        },
        |p| {
            let mut m = template.clone();
            m.params = p.clone();
            m.loss(val).unwrap_or(f64::NAN)
        },
    )?;
    Ok((Corrector { params, ..model }, history))
}

/// Finite-difference check of the delta-loss gradient on `samples`.
pub fn grad_check(model: &Corrector, samples: &[CorrectorSample], epsilon: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let refs: Vec<&CorrectorSample> = samples.iter().collect();
    model.check_samples(&refs)?;
    Ok(check_gradients(
        &model.params,
        epsilon,
        200,
        model.config.seed,
        |p| {
            let mut tape = Tape::new();
            let l = model.loss_graph(&mut tape, p, &refs);
            tape.scalar(l)
        },
        |p| model.loss_and_grad(p, &refs).1,
    ))
}

/// Corrected outcome over the horizon. `y_g_raw`, `delta_pred` and
/// `y_corrected` are normalized; `y_corrected_native` is in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub y_g_raw: Vec<f64>,
    pub delta_pred: Vec<f64>,
    pub y_corrected: Vec<f64>,
    pub y_corrected_native: Vec<f64>,
    pub y_obs: Option<Vec<f64>>,
}

/// Adds the predicted delta to the normalized model output and maps the
/// result to native units with the observation scaler, clamping at zero
/// there when `clip_nonnegative` is set.
pub fn apply_correction(
    y_g: &[f64],
    delta: &[f64],
    obs_scaler: &Scaler,
    clip_nonnegative: bool,
) -> Result<CorrectionResult> {
    if y_g.len() != delta.len() {
        return Err(Error::LengthMismatch { left: y_g.len(), right: delta.len() });
    }
    let y_corrected: Vec<f64> = y_g.iter().zip(delta).map(|(a, b)| a + b).collect();
    let y_corrected_native = y_corrected
        .iter()
        .map(|&v| {
            let n = obs_scaler.denormalize(v);
            if clip_nonnegative {
                n.max(0.0)
            } else {
                n
            }
        })
        .collect();
    Ok(CorrectionResult { y_g_raw: y_g.to_vec(), delta_pred: delta.to_vec(), y_corrected, y_corrected_native, y_obs: None })
}
