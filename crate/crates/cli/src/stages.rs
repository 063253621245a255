//! Pipeline stages. Each stage reads earlier artifacts from the run
//! directory, writes its own and records them in the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dbc_core::baselines::{
    linear_scaling, quantile_delta_mapping, quantile_mapping, variance_scaling, CalibrationPair, ScalingMode,
};
use dbc_core::corrector::{apply_correction, train_corrector, Corrector, CorrectorCheckpoint, CorrectorSample};
use dbc_core::data::{
    load_dataset, make_windows_strided, split_dataset, DatasetSplit, NormStats, Source, Transform, TrajectoryWindow,
    TwoSourceDataset,
};
use dbc_core::deconfounder::{train_factor_model, FactorCheckpoint, FactorModel};
use dbc_core::eval::{box_stats, mae, mse, qq_points, z_recovery};
use dbc_core::synthgen::{generate as synth_generate, read_matrix_csv, write_matrix_csv, write_synthetic};
use ndarray::{concatenate, s, Array2, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, PipelineConfig};
use crate::error::{io_err, parse_err, CliError, Result};
use crate::run::RunDir;

pub const BASELINE_METHODS: [&str; 4] = ["linear_scaling", "variance_scaling", "quantile_mapping", "quantile_delta_mapping"];

/// Row labels of the comparison report, in display order.
pub const REPORT_LABELS: [&str; 6] = [
    "raw_gcm",
    "linear_scaling",
    "variance_scaling",
    "quantile_mapping",
    "quantile_delta_mapping",
    "deconfounding_bc",
];

pub const REPORT_FILE: &str = "report.json";
const QQ_POINTS: usize = 100;
const PARTITIONS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMetrics {
    pub best_epoch: usize,
    pub val_treatment_mse: f64,
    pub test_treatment_mse: f64,
    pub test_independence_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub aligned_mse: f64,
    pub true_variance: f64,
    /// `aligned_mse / true_variance`.
    pub unexplained_fraction: f64,
    pub raw_mse: Option<f64>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Normalized-space MSE against observations.
    pub normalized_mse_raw_gcm: f64,
    pub normalized_mse_deconfounding_bc: f64,
    /// Largest `|(y_corrected - y_g_raw) - delta_pred|` over the test rows.
    pub additivity_max_abs_error: f64,
    pub factor: Option<FactorMetrics>,
    pub latent_recovery: Option<RecoveryMetrics>,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub run: RunDir,
    pub quiet: bool,
}

impl Ctx {
    pub fn open(cfg: PipelineConfig, quiet: bool) -> Result<Self> {
        let run = RunDir::open(&cfg)?;
        Ok(Self { cfg: cfg.resolved(), run, quiet })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn dataset(&self, stage: &'static str) -> Result<TwoSourceDataset> {
        match &self.cfg.dataset {
            DatasetSource::Synthetic(_) => {
                self.run.require(stage, "generate")?;
                Ok(load_dataset(&self.run.path("data/manifest.json"))?)
            }
            DatasetSource::Manifest(p) => Ok(load_dataset(p)?),
        }
    }

    /// Recomputes the recorded split and checks it against `split.json`.
    fn split(&self, stage: &'static str) -> Result<DatasetSplit> {
        self.run.require(stage, "split")?;
        let ds = self.dataset(stage)?;
        let sp = split_dataset(&ds, self.cfg.split.fractions(), self.cfg.split_mode())?;
        let recorded: SplitRecord = read_json(&self.run.path("split.json"))?;
        if recorded != split_record(&sp) {
            return Err(dbc_core::Error::InvalidData("split.json does not match the dataset; rerun split".into()).into());
        }
        Ok(sp)
    }

    fn factor_model(&self, stage: &'static str) -> Result<FactorModel> {
        self.run.require(stage, "train-factor")?;
        let ck: FactorCheckpoint = read_json(&self.run.path("factor/checkpoint.json"))?;
        Ok(FactorModel::from_checkpoint(ck)?)
    }

    fn latent_context(&self) -> usize {
        self.cfg.window.h + self.cfg.window.w - 1
    }
}

fn part<'a>(sp: &'a DatasetSplit, name: &str) -> &'a TwoSourceDataset {
    match name {
        "train" => &sp.train,
        "val" => &sp.val,
        _ => &sp.test,
    }
}

fn split_record(sp: &DatasetSplit) -> SplitRecord {
    let ids = |d: &TwoSourceDataset| d.locations().iter().map(|l| l.id.clone()).collect();
    SplitRecord {
        train: ids(&sp.train),
        val: ids(&sp.val),
        test: ids(&sp.test),
        norm_stats: sp.train.norm_stats().clone(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path)(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>], t: &[i64]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let csv_err = |e: csv::Error| parse_err(path)(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for (ts, row) in t.iter().zip(rows) {
        let mut rec = vec![ts.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Normalized covariate columns of both sources for one location.
fn covariates(ds: &TwoSourceDataset, loc: usize) -> (Array2<f64>, Array2<f64>) {
    let cov = ds.covariate_indices();
    (
        ds.normalized(loc, Source::G).select(Axis(1), &cov),
        ds.normalized(loc, Source::O).select(Axis(1), &cov),
    )
}

fn latent_path(run: &RunDir, partition: &str, id: &str) -> PathBuf {
    run.path(&format!("latents/{partition}/z_{id}.csv"))
}

/// Inferred latents of every location of a partition, keyed by position.
fn read_latents(ctx: &Ctx, ds: &TwoSourceDataset, partition: &str) -> Result<Vec<Array2<f64>>> {
    ds.locations()
        .iter()
        .map(|loc| {
            let path = latent_path(&ctx.run, partition, &loc.id);
            let (t, z) = read_matrix_csv(&path)?;
            if t != loc.gcm.timestamps() {
                return Err(dbc_core::Error::MisalignedSources(format!("{} vs location {}", path.display(), loc.id)).into());
            }
            Ok(z)
        })
        .collect()
}

fn samples(windows: &[TrajectoryWindow], latents: Option<&[Array2<f64>]>, use_z: bool) -> Result<Vec<CorrectorSample>> {
    windows
        .iter()
        .map(|w| {
            let z = latents.map(|l| l[w.location].slice(s![w.current_start()..=w.anchor_t, ..]));
            Ok(CorrectorSample::from_window(w, z, use_z)?)
        })
        .collect()
}

/// Future rows of the non-overlapping test windows, per location.
fn test_rows(ds: &TwoSourceDataset, ctx: &Ctx) -> Result<(Vec<TrajectoryWindow>, Vec<Vec<usize>>)> {
    let spec = ctx.cfg.window;
    let windows = make_windows_strided(ds, &spec, spec.k)?;
    let mut rows = vec![Vec::new(); ds.locations().len()];
    for w in &windows {
        rows[w.location].extend(w.anchor_t + 1..=w.anchor_t + spec.k);
    }
    Ok((windows, rows))
}

pub fn generate(ctx: &mut Ctx) -> Result<()> {
    let DatasetSource::Synthetic(sc) = &ctx.cfg.dataset else {
        return Err(CliError::Usage("generate needs a synthetic dataset source".into()));
    };
    ctx.note(format!("generating {} locations x {} steps", sc.n_locations, sc.t));
    let ds = synth_generate(sc)?;
    let files = write_synthetic(&ds, &ctx.run.path("data"))?;
    ctx.run.record("generate", &files)
}

pub fn split(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset("split")?;
    let sp = split_dataset(&ds, ctx.cfg.split.fractions(), ctx.cfg.split_mode())?;
    let rec = split_record(&sp);
    ctx.note(format!("split: {} train, {} val, {} test", rec.train.len(), rec.val.len(), rec.test.len()));
    let file = write_json(&ctx.run.path("split.json"), &rec)?;
    ctx.run.record("split", &[file])
}

pub fn train_factor(ctx: &mut Ctx) -> Result<()> {
    let sp = ctx.split("train-factor")?;
    let (spec, stride) = (ctx.cfg.window, ctx.cfg.factor.window_stride);
    let train = make_windows_strided(&sp.train, &spec, stride)?;
    let val = make_windows_strided(&sp.val, &spec, stride)?;
    let test = make_windows_strided(&sp.test, &spec, stride)?;
    ctx.note(format!("train-factor: {} train / {} val windows", train.len(), val.len()));
    let config = dbc_core::deconfounder::FactorModelConfig { window_stride: 1, ..ctx.cfg.factor.clone() };
    let (mut model, history) = train_factor_model(&train, &val, &config)?;
    // Keep the configured stride in the checkpoint.
    let mut ck = model.checkpoint();
    ck.config.window_stride = ctx.cfg.factor.window_stride;
    model = FactorModel::from_checkpoint(ck.clone())?;
    let val_refs: Vec<&TrajectoryWindow> = val.iter().collect();
    let test_refs: Vec<&TrajectoryWindow> = test.iter().collect();
    let metrics = FactorMetrics {
        best_epoch: history.best_epoch,
        val_treatment_mse: model.factor_loss(&val_refs)?,
        test_treatment_mse: model.factor_loss(&test_refs)?,
        test_independence_score: model.independence_score(&test_refs)?,
    };
    ctx.note(format!(
        "train-factor: test treatment mse {:.5}, independence score {:.4}",
        metrics.test_treatment_mse, metrics.test_independence_score
    ));
    let files = [
        write_json(&ctx.run.path("factor/checkpoint.json"), &ck)?,
        write_json(&ctx.run.path("factor/history.json"), &history)?,
        write_json(&ctx.run.path("factor/metrics.json"), &metrics)?,
    ];
    ctx.run.record("train-factor", &files)
}

pub fn infer_z(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.factor_model("infer-z")?;
    if !model.config().use_latent {
        return Err(CliError::ConfigInvalid("infer-z needs factor.use_latent".into()));
    }
    let sp = ctx.split("infer-z")?;
    let context = ctx.latent_context();
    let mut files = Vec::new();
    let mut test_z = Vec::new();
    for name in PARTITIONS {
        let ds = part(&sp, name);
        for (li, loc) in ds.locations().iter().enumerate() {
            let (g, o) = covariates(ds, li);
            let z = model.infer_trajectory(g.view(), o.view(), context)?;
            let path = latent_path(&ctx.run, name, &loc.id);
            fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(&path))?;
            write_matrix_csv(&path, "z", loc.gcm.timestamps(), &z)?;
            files.push(path);
            if name == "test" {
                test_z.push(z);
            }
        }
    }
    ctx.note(format!("infer-z: wrote {} latent files", files.len()));
    if let DatasetSource::Synthetic(_) = ctx.cfg.dataset {
        let rec = latent_recovery(ctx, &sp.test, &test_z, context)?;
        ctx.note(format!("infer-z: latent recovery {:.5} ({:.3} of variance)", rec.aligned_mse, rec.unexplained_fraction));
        files.push(write_json(&ctx.run.path("latents/metrics.json"), &rec)?);
    }
    ctx.run.record("infer-z", &files)
}

/// Pools test locations, dropping the first `context` rows of each, and
/// compares against the generator's latents after affine alignment.
fn latent_recovery(ctx: &Ctx, test: &TwoSourceDataset, inferred: &[Array2<f64>], context: usize) -> Result<RecoveryMetrics> {
    let mut zi = Vec::new();
    let mut zt = Vec::new();
    for (loc, z) in test.locations().iter().zip(inferred) {
        let path = ctx.run.path(&format!("data/true_z_{}.csv", loc.id));
        let (t, truth) = read_matrix_csv(&path)?;
        let index: BTreeMap<i64, usize> = t.iter().enumerate().map(|(i, &ts)| (ts, i)).collect();
        let rows = loc
            .gcm
            .timestamps()
            .iter()
            .map(|ts| index.get(ts).copied())
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| dbc_core::Error::MisalignedSources(format!("{} lacks rows of {}", path.display(), loc.id)))?;
        let skip = context.min(rows.len());
        zi.push(z.slice(s![skip.., ..]).to_owned());
        zt.push(truth.select(Axis(0), &rows[skip..]));
    }
    let vi: Vec<_> = zi.iter().map(|a| a.view()).collect();
    let vt: Vec<_> = zt.iter().map(|a| a.view()).collect();
    let zi = concatenate(Axis(0), &vi).map_err(|e| dbc_core::Error::InvalidData(e.to_string()))?;
    let zt = concatenate(Axis(0), &vt).map_err(|e| dbc_core::Error::InvalidData(e.to_string()))?;
    let r = z_recovery(&zi, &zt)?;
    Ok(RecoveryMetrics {
        aligned_mse: r.aligned_mse,
        true_variance: r.true_variance,
        unexplained_fraction: r.aligned_mse / r.true_variance,
        raw_mse: r.raw_mse,
        rows: zi.nrows(),
    })
}

pub fn train_corrector_stage(ctx: &mut Ctx) -> Result<()> {
    let use_z = ctx.cfg.corrector.use_z;
    ctx.run.require("train-corrector", "train-factor")?;
    if use_z {
        ctx.run.require("train-corrector", "infer-z")?;
    }
    let sp = ctx.split("train-corrector")?;
    let (spec, stride) = (ctx.cfg.window, ctx.cfg.corrector.window_stride);
    let build = |ds: &TwoSourceDataset, name: &str| -> Result<Vec<CorrectorSample>> {
        let windows = make_windows_strided(ds, &spec, stride)?;
        let latents = if use_z { Some(read_latents(ctx, ds, name)?) } else { None };
        samples(&windows, latents.as_deref(), use_z)
    };
    let train = build(&sp.train, "train")?;
    let val = build(&sp.val, "val")?;
    ctx.note(format!("train-corrector: {} train / {} val samples", train.len(), val.len()));
    let config = dbc_core::corrector::CorrectorConfig { window_stride: 1, ..ctx.cfg.corrector.clone() };
    let (model, history) = train_corrector(&train, &val, &config)?;
    let mut ck = model.checkpoint();
    ck.config.window_stride = stride;
    ctx.note(format!("train-corrector: best epoch {}, val loss {:.5}", history.best_epoch, history.val_loss[history.best_epoch]));
    let files = [
        write_json(&ctx.run.path("corrector/checkpoint.json"), &ck)?,
        write_json(&ctx.run.path("corrector/history.json"), &history)?,
    ];
    ctx.run.record("train-corrector", &files)
}

pub fn correct(ctx: &mut Ctx) -> Result<()> {
    ctx.run.require("correct", "train-corrector")?;
    let ck: CorrectorCheckpoint = read_json(&ctx.run.path("corrector/checkpoint.json"))?;
    let use_z = ck.config.use_z;
    let model = Corrector::from_checkpoint(ck)?;
    if use_z {
        ctx.run.require("correct", "infer-z")?;
    }
    let sp = ctx.split("correct")?;
    let test = &sp.test;
    let (windows, _) = test_rows(test, ctx)?;
    let latents = if use_z { Some(read_latents(ctx, test, "test")?) } else { None };
    let samples = samples(&windows, latents.as_deref(), use_z)?;
    let features: Vec<Array2<f64>> = samples.into_iter().map(|s| s.features).collect();
    let deltas = model.predict_batch(&features)?;
    let scaler = test.outcome_scaler(Source::O);
    let clip = test.outcome_meta().is_nonnegative();
    let mut per_loc: Vec<(Vec<i64>, Vec<Vec<f64>>)> = vec![(Vec::new(), Vec::new()); test.locations().len()];
    for (w, delta) in windows.iter().zip(deltas.rows()) {
        let res = apply_correction(w.y_g.as_slice().expect("contiguous"), delta.as_slice().expect("contiguous"), &scaler, clip)?;
        let ts = test.locations()[w.location].gcm.timestamps();
        let (t, rows) = &mut per_loc[w.location];
        for j in 0..res.y_g_raw.len() {
            t.push(ts[w.anchor_t + 1 + j]);
            rows.push(vec![res.y_g_raw[j], res.delta_pred[j], res.y_corrected[j], w.y_o[j]]);
        }
    }
    let mut files = Vec::new();
    for (loc, (t, rows)) in test.locations().iter().zip(&per_loc) {
        let path = ctx.run.path(&format!("corrected/{}.csv", loc.id));
        files.push(write_table(&path, &["t", "y_g_raw", "delta_pred", "y_corrected", "y_obs"], rows, t)?);
    }
    ctx.note(format!("correct: {} windows over {} locations", windows.len(), files.len()));
    ctx.run.record("correct", &files)
}

/// Native-unit test rows: model output, observations and their timestamps.
struct NativeRows {
    gcm: Vec<f64>,
    obs: Vec<f64>,
    /// (location index, timestamps) blocks in output order.
    blocks: Vec<(usize, Vec<i64>)>,
}

fn native_rows(ds: &TwoSourceDataset, rows: &[Vec<usize>]) -> NativeRows {
    let y = ds.outcome_index();
    let mut out = NativeRows { gcm: Vec::new(), obs: Vec::new(), blocks: Vec::new() };
    for (li, (loc, r)) in ds.locations().iter().zip(rows).enumerate() {
        out.gcm.extend(r.iter().map(|&i| loc.gcm.values()[[i, y]]));
        out.obs.extend(r.iter().map(|&i| loc.obs.values()[[i, y]]));
        out.blocks.push((li, r.iter().map(|&i| loc.gcm.timestamps()[i]).collect()));
    }
    out
}

fn pooled_outcome(ds: &TwoSourceDataset, source: Source) -> Vec<f64> {
    let y = ds.outcome_index();
    ds.locations().iter().flat_map(|l| l.series(source).values().column(y).to_vec()).collect()
}

/// Runs one baseline over the test rows, calibrated on the pooled training
/// partition. Ratio variants are used for log-transformed outcomes.
fn run_baseline(ctx: &Ctx, sp: &DatasetSplit, method: &str) -> Result<(Vec<f64>, Vec<PathBuf>)> {
    let (_, rows) = test_rows(&sp.test, ctx)?;
    let nr = native_rows(&sp.test, &rows);
    let cal = CalibrationPair::new(pooled_outcome(&sp.train, Source::G), pooled_outcome(&sp.train, Source::O))?;
    let mode = match sp.train.outcome_meta().transform {
        Transform::Log1pZscore => ScalingMode::Multiplicative,
        _ => ScalingMode::Additive,
    };
    let b = &ctx.cfg.baselines;
    let pred = match method {
        "linear_scaling" => linear_scaling(&cal, &nr.gcm, mode)?,
        "variance_scaling" => variance_scaling(&cal, &nr.gcm)?,
        "quantile_mapping" => quantile_mapping(&cal, &nr.gcm, b.n_quantiles)?,
        "quantile_delta_mapping" => {
            quantile_delta_mapping(cal.model(), cal.obs(), &nr.gcm, mode, b.n_quantiles, b.trace_offset)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown baseline method {other:?}; expected one of {}",
                BASELINE_METHODS.join(", ")
            )))
        }
    };
    let mut files = Vec::new();
    let mut at = 0;
    for (li, t) in &nr.blocks {
        let n = t.len();
        let rows: Vec<Vec<f64>> = (at..at + n).map(|i| vec![nr.gcm[i], pred[i], nr.obs[i]]).collect();
        let id = &sp.test.locations()[*li].id;
        let path = ctx.run.path(&format!("baselines/{method}/{id}.csv"));
        files.push(write_table(&path, &["t", "y_g_raw", "y_corrected", "y_obs"], &rows, t)?);
        at += n;
    }
    Ok((pred, files))
}

pub fn baseline(ctx: &mut Ctx, method: &str) -> Result<()> {
    let sp = ctx.split("baseline")?;
    let (pred, files) = run_baseline(ctx, &sp, method)?;
    ctx.note(format!("baseline {method}: {} rows", pred.len()));
    ctx.run.record(&format!("baseline:{method}"), &files)
}

fn entry(pred: &[f64], target: &[f64]) -> Result<MetricEntry> {
    Ok(MetricEntry { mse: mse(pred, target)?, mae: mae(pred, target)?, n: pred.len() })
}

pub fn evaluate(ctx: &mut Ctx) -> Result<()> {
    ctx.run.require("evaluate", "correct")?;
    let sp = ctx.split("evaluate")?;
    let test = &sp.test;
    let (_, rows) = test_rows(test, ctx)?;
    let nr = native_rows(test, &rows);

    // Deconfounded correction, read back from the corrected files.
    let scaler = test.outcome_scaler(Source::O);
    let clip = test.outcome_meta().is_nonnegative();
    let (mut dbc, mut norm_raw, mut norm_dbc, mut norm_obs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut additivity: f64 = 0.0;
    for (li, t) in &nr.blocks {
        let id = &test.locations()[*li].id;
        let path = ctx.run.path(&format!("corrected/{id}.csv"));
        let (ct, v) = read_matrix_csv(&path)?;
        if &ct != t || v.ncols() != 4 {
            return Err(dbc_core::Error::InvalidData(format!("{} does not match the test rows; rerun correct", path.display())).into());
        }
        for r in v.rows() {
            let (g, d, c, o) = (r[0], r[1], r[2], r[3]);
            additivity = additivity.max(((c - g) - d).abs());
            norm_raw.push(g);
            norm_dbc.push(c);
            norm_obs.push(o);
            let native = scaler.denormalize(c);
            dbc.push(if clip { native.max(0.0) } else { native });
        }
    }

    let mut preds: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    preds.insert("raw_gcm", nr.gcm.clone());
    for m in BASELINE_METHODS {
        let (pred, files) = run_baseline(ctx, &sp, m)?;
        ctx.run.record(&format!("baseline:{m}"), &files)?;
        preds.insert(m, pred);
    }
    preds.insert("deconfounding_bc", dbc);

    let mut report = BTreeMap::new();
    let mut files = Vec::new();
    for label in REPORT_LABELS {
        let pred = &preds[label];
        report.insert(label.to_string(), entry(pred, &nr.obs)?);
        let qq = qq_points(pred, &nr.obs, QQ_POINTS)?;
        let qq_rows: Vec<Vec<f64>> = qq.iter().map(|&(a, b)| vec![a, b]).collect();
        let idx: Vec<i64> = (0..qq_rows.len() as i64).collect();
        files.push(write_table(&ctx.run.path(&format!("evaluation/qq_{label}.csv")), &["i", "predicted", "observed"], &qq_rows, &idx)?);
        let bp = box_stats(pred)?;
        let bo = box_stats(&nr.obs)?;
        let box_rows = vec![
            vec![bp.min, bp.q25, bp.median, bp.q75, bp.max],
            vec![bo.min, bo.q25, bo.median, bo.q75, bo.max],
        ];
        files.push(write_table(
            &ctx.run.path(&format!("evaluation/box_{label}.csv")),
            &["series", "min", "q25", "median", "q75", "max"],
            &box_rows,
            &[0, 1],
        )?);
    }
    let factor = ctx.run.has_stage("train-factor").then(|| read_json(&ctx.run.path("factor/metrics.json"))).transpose()?;
    let recovery_path = ctx.run.path("latents/metrics.json");
    let latent_recovery = (ctx.run.has_stage("infer-z") && recovery_path.is_file())
        .then(|| read_json(&recovery_path))
        .transpose()?;
    let diag = Diagnostics {
        normalized_mse_raw_gcm: mse(&norm_raw, &norm_obs)?,
        normalized_mse_deconfounding_bc: mse(&norm_dbc, &norm_obs)?,
        additivity_max_abs_error: additivity,
        factor,
        latent_recovery,
    };
    files.push(write_json(&ctx.run.path("evaluation/diagnostics.json"), &diag)?);
    files.push(write_json(&ctx.run.path(REPORT_FILE), &report)?);
    ctx.note(format!(
        "evaluate: deconfounding_bc mse {:.5} vs raw {:.5}",
        report["deconfounding_bc"].mse, report["raw_gcm"].mse
    ));
    ctx.run.record("evaluate", &files)
}

/// Markdown comparison table of `report.json`.
pub fn render_report(report: &BTreeMap<String, MetricEntry>) -> String {
    let mut out = String::from("| Method | MSE | MAE | n |\n|---|---|---|---|\n");
    let known = REPORT_LABELS.iter().map(|s| s.to_string());
    let extra = report.keys().filter(|k| !REPORT_LABELS.contains(&k.as_str())).cloned();
    for label in known.chain(extra) {
        if let Some(e) = report.get(&label) {
            out.push_str(&format!("| {label} | {:.6} | {:.6} | {} |\n", e.mse, e.mae, e.n));
        }
    }
    out
}

pub fn report(ctx: &mut Ctx) -> Result<String> {
    ctx.run.require("report", "evaluate")?;
    let report: BTreeMap<String, MetricEntry> = read_json(&ctx.run.path(REPORT_FILE))?;
    let text = render_report(&report);
    let path = ctx.run.path("report.md");
    fs::write(&path, &text).map_err(io_err(&path))?;
    ctx.run.record("report", &[path])?;
    Ok(text)
}

/// Every stage in order. `infer-z` is skipped when the factor model has no
/// latent.
pub fn pipeline(ctx: &mut Ctx) -> Result<String> {
    if matches!(ctx.cfg.dataset, DatasetSource::Synthetic(_)) {
        generate(ctx)?;
    }
    split(ctx)?;
    train_factor(ctx)?;
    if ctx.cfg.factor.use_latent {
        infer_z(ctx)?;
    }
    train_corrector_stage(ctx)?;
    correct(ctx)?;
    evaluate(ctx)?;
    report(ctx)
}
