//! Two-source autoregressive data with a known latent confounder.
//!
//! Per location and step `t`:
//!
//! ```text
//! Z_t   = tanh(sum_i alpha_i * Z_{t-i}) + e_z
//! A^s_t = tanh(sum_i B^s_i A^s_{t-i} + gamma * C^s Z_t) + e_a
//! Y^s_t = f^s . A^s_t + h^s . A^s_{t-1} + gamma * g^s . Z_t + e_y
//! ```
//!
//! for both sources `s` in {G, O}, which share `Z`. The covariate process is
//! also the treatment process: its history plays the role of `X` and its
//! current value the role of `A`. Coefficients are drawn once from stream 0
//! of a ChaCha8 generator seeded with `seed`; every location then jitters
//! them multiplicatively with its own stream `location + 1`, so generation
//! order does not matter.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Location, Source, SourceSeries, Transform, TwoSourceDataset, VariableMeta};
use crate::error::{Error, Result};

/// Companion-matrix spectral radius every autoregression must respect.
pub const STABILITY_BOUND: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_locations: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k_treatments: usize,
    /// Autoregressive order.
    pub p: usize,
    /// Latent confounder dimension.
    pub r: usize,
    /// Confounding strength in `[0, 1]`.
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Range of the real roots of each covariate's lag polynomial.
    pub covariate_roots: (f64, f64),
    /// Real roots of each latent component's lag polynomial. The first `p`
    /// are used; missing ones are zero.
    pub latent_roots: Vec<f64>,
    /// Standard deviation of the latent innovation `e_z`.
    pub latent_noise_std: f64,
    /// Scale of the latent loadings `C`: magnitudes are uniform on
    /// `[a/2, 3a/2]` with random signs, so every treatment is confounded.
    pub latent_loading: f64,
    /// Scale of the outcome's latent loadings `g`.
    pub outcome_loading: f64,
    /// Relative standard deviation of per-location coefficient jitter. The
    /// latent lag polynomial is not jittered.
    pub location_jitter: f64,
    /// Steps simulated and discarded before the first emitted row.
    pub burn_in: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_locations: 500,
            t: 3650,
            k_treatments: 3,
            p: 5,
            r: 1,
            gamma: 1.0,
            noise_std: 0.1,
            seed: 0,
            covariate_roots: (0.2, 0.4),
            latent_roots: vec![0.9, 0.9, 0.9, 0.1, 0.0],
            latent_noise_std: 0.0004,
            latent_loading: 3.0,
            outcome_loading: 10.0,
            location_jitter: 0.1,
            burn_in: 100,
        }
    }
}

impl SynthConfig {
    /// Collects every violated invariant into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_locations == 0 {
            problems.push("n_locations must be positive".to_string());
        }
        if self.t <= self.p {
            problems.push(format!("T ({}) must exceed p ({})", self.t, self.p));
        }
        if self.k_treatments == 0 {
            problems.push("k_treatments must be at least 1".to_string());
        }
        if self.p == 0 {
            problems.push("p must be at least 1".to_string());
        }
        if self.r == 0 {
            problems.push("r must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            problems.push(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            problems.push(format!("noise_std must be positive, got {}", self.noise_std));
        }
        let (lo, hi) = self.covariate_roots;
        if !(lo <= hi && lo > -1.0 && hi < 1.0) {
            problems.push(format!("covariate_roots must be an ordered range inside (-1, 1), got ({lo}, {hi})"));
        }
        if self.latent_roots.iter().any(|r| !(r.abs() < 1.0)) {
            problems.push("latent_roots must lie inside (-1, 1)".to_string());
        }
        if !(self.latent_noise_std > 0.0 && self.latent_noise_std.is_finite()) {
            problems.push(format!("latent_noise_std must be positive, got {}", self.latent_noise_std));
        }
        if !(self.latent_loading >= 0.0) || !(self.outcome_loading >= 0.0) {
            problems.push("latent_loading and outcome_loading must be nonnegative".to_string());
        }
        if !(self.location_jitter >= 0.0) {
            problems.push("location_jitter must be nonnegative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub data: TwoSourceDataset,
    /// Ground-truth confounder per location, `[T x r]`.
    pub true_z: Vec<Array2<f64>>,
}

/// Coefficients of one source.
#[derive(Debug, Clone)]
struct SourceCoefs {
    /// Lag polynomial roots, `[k x p]`.
    roots: Array2<f64>,
    /// Lag-1 cross-covariate coupling, zero diagonal.
    coupling: Array2<f64>,
    /// Latent loadings `[k x r]`.
    c: Array2<f64>,
    f: Array1<f64>,
    h: Array1<f64>,
    g: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Coefs {
    /// Latent lag polynomial roots, `[r x p]`.
    latent_roots: Array2<f64>,
    gcm: SourceCoefs,
    obs: SourceCoefs,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn base_coefs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Coefs {
    let (k, p, r) = (cfg.k_treatments, cfg.p, cfg.r);
    let latent_roots = Array2::from_shape_fn((r, p), |(_, i)| cfg.latent_roots.get(i).copied().unwrap_or(0.0));
    let mut source = |obs: bool| {
        let roots = Array2::from_shape_simple_fn((k, p), || uniform(rng, cfg.covariate_roots.0, cfg.covariate_roots.1));
        let coupling = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 0.0 } else { 0.05 * normal(rng) });
        let a = cfg.latent_loading;
        let c = Array2::from_shape_simple_fn((k, r), || random_sign(rng) * uniform(rng, 0.5 * a, 1.5 * a));
        let f = Array1::from_shape_simple_fn(k, || uniform(rng, -1.0, 1.0));
        let h = Array1::from_shape_simple_fn(k, || uniform(rng, -0.5, 0.5));
        // Observations respond to the confounder more strongly than the
        // model does, so the bias depends on it.
        let b = cfg.outcome_loading;
        let g = if obs {
            Array1::from_shape_simple_fn(r, || random_sign(rng) * uniform(rng, 0.5 * b, 1.5 * b))
        } else {
            Array1::from_shape_simple_fn(r, || uniform(rng, -0.5 * b, 0.5 * b))
        };
        SourceCoefs { roots, coupling, c, f, h, g }
    };
    let gcm = source(false);
    let obs = source(true);
    Coefs { latent_roots, gcm, obs }
}

fn jitter(rng: &mut ChaCha8Rng, m: &Array2<f64>, rel: f64) -> Array2<f64> {
    m.mapv(|v| v * (1.0 + rel * normal(rng)))
}

fn jitter1(rng: &mut ChaCha8Rng, m: &Array1<f64>, rel: f64) -> Array1<f64> {
    m.mapv(|v| v * (1.0 + rel * normal(rng)))
}

/// Coefficients `a_1..a_p` of `prod_i (1 - r_i L)`, sign-flipped so that
/// `x_t = sum_i a_i x_{t-i}`.
fn lag_coefficients(roots: &[f64]) -> Vec<f64> {
    let mut poly = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= r * c;
        }
        poly = next;
    }
    poly[1..].iter().map(|c| -c).collect()
}

/// Spectral radius of the companion matrix of `x_t = sum_i B_i x_{t-i}`.
pub fn companion_radius(lags: &[Array2<f64>]) -> f64 {
    let k = lags[0].nrows();
    let p = lags.len();
    let mut m = DMatrix::<f64>::zeros(k * p, k * p);
    for (i, b) in lags.iter().enumerate() {
        for r in 0..k {
            for c in 0..k {
                m[(r, i * k + c)] = b[[r, c]];
            }
        }
    }
    for i in k..k * p {
        m[(i, i - k)] = 1.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Builds lag matrices from per-row roots plus lag-1 coupling and rescales
/// them into the stability bound.
fn stable_lags(roots: &Array2<f64>, coupling: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    let (k, p) = roots.dim();
    let mut lags = vec![Array2::zeros((k, k)); p];
    for row in 0..k {
        let coefs = lag_coefficients(roots.row(row).as_slice().expect("contiguous row"));
        for (i, a) in coefs.into_iter().enumerate() {
            lags[i][[row, row]] = a;
        }
    }
    lags[0] += coupling;
    let rho = companion_radius(&lags);
    if rho > STABILITY_BOUND {
        let s = STABILITY_BOUND / rho;
        for (i, b) in lags.iter_mut().enumerate() {
            *b *= s.powi(i as i32 + 1);
        }
        let after = companion_radius(&lags);
        if after > STABILITY_BOUND + 1e-9 {
            return Err(Error::UnstableConfig { radius: after, bound: STABILITY_BOUND });
        }
    }
    Ok(lags)
}

fn clamp_roots(m: Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v.clamp(-STABILITY_BOUND, STABILITY_BOUND))
}

struct SimulatedLocation {
    gcm: Array2<f64>,
    obs: Array2<f64>,
    z: Array2<f64>,
}

fn simulate_location(cfg: &SynthConfig, base: &Coefs, loc: usize) -> Result<SimulatedLocation> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(loc as u64 + 1);
    let j = cfg.location_jitter;
    let (k, r) = (cfg.k_treatments, cfg.r);
    let n = cfg.t + cfg.burn_in;
    let sd = cfg.noise_std;

    // The latent dynamics are shared by all locations: jittering a
    // near-unit-root polynomial under tanh can tip single locations into a
    // large-amplitude orbit.
    let latent_roots = clamp_roots(base.latent_roots.clone());
    let latent_lags: Vec<Vec<f64>> =
        latent_roots.rows().into_iter().map(|row| lag_coefficients(row.as_slice().expect("row"))).collect();
    // The latent polynomial is built from its roots, so its companion
    // radius is the largest root magnitude; repeated roots make the
    // eigenvalue route inexact.
    let rho = latent_roots.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if rho > STABILITY_BOUND + 1e-9 {
        return Err(Error::UnstableConfig { radius: rho, bound: STABILITY_BOUND });
    }

    let mut z = Array2::<f64>::zeros((n, r));
    for t in 0..n {
        for c in 0..r {
            let mut s = 0.0;
            for (i, a) in latent_lags[c].iter().enumerate() {
                if t > i {
                    s += a * z[[t - 1 - i, c]];
                }
            }
            z[[t, c]] = s.tanh() + cfg.latent_noise_std * normal(&mut rng);
        }
    }

    let mut run_source = |coefs: &SourceCoefs| -> Result<Array2<f64>> {
        let roots = clamp_roots(jitter(&mut rng, &coefs.roots, j));
        let coupling = jitter(&mut rng, &coefs.coupling, j);
        let lags = stable_lags(&roots, &coupling)?;
        let c = jitter(&mut rng, &coefs.c, j);
        let f = jitter1(&mut rng, &coefs.f, j);
        let h = jitter1(&mut rng, &coefs.h, j);
        let g = jitter1(&mut rng, &coefs.g, j);
        let mut out = Array2::<f64>::zeros((n, k + 1));
        for t in 0..n {
            let zt = z.row(t);
            let mut drive = c.dot(&zt) * cfg.gamma;
            for (i, b) in lags.iter().enumerate() {
                if t > i {
                    drive += &b.dot(&out.slice(ndarray::s![t - 1 - i, ..k]));
                }
            }
            for m in 0..k {
                out[[t, m]] = drive[m].tanh() + sd * normal(&mut rng);
            }
            let a_t = out.slice(ndarray::s![t, ..k]).to_owned();
            let mut y = f.dot(&a_t) + cfg.gamma * g.dot(&zt) + sd * normal(&mut rng);
            if t > 0 {
                y += h.dot(&out.slice(ndarray::s![t - 1, ..k]));
            }
            out[[t, k]] = y;
        }
        Ok(out)
    };
    let gcm = run_source(&base.gcm)?;
    let obs = run_source(&base.obs)?;
    let keep = ndarray::s![cfg.burn_in.., ..];
    Ok(SimulatedLocation { gcm: gcm.slice(keep).to_owned(), obs: obs.slice(keep).to_owned(), z: z.slice(keep).to_owned() })
}

/// Variable metadata of generated data: covariates `a1..ak`, outcome `y`.
pub fn synthetic_meta(k: usize) -> Vec<VariableMeta> {
    let mut meta: Vec<VariableMeta> = (1..=k).map(|i| VariableMeta::covariate(format!("a{i}"))).collect();
    meta.push(VariableMeta::outcome("y", Transform::Zscore));
    meta
}

pub fn location_id(i: usize) -> String {
    format!("{i:04}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let base = base_coefs(cfg, &mut rng);
    let mut locations = Vec::with_capacity(cfg.n_locations);
    let mut true_z = Vec::with_capacity(cfg.n_locations);
    for loc in 0..cfg.n_locations {
        let sim = simulate_location(cfg, &base, loc)?;
        let gcm = SourceSeries::with_index(Source::G, sim.gcm)?;
        let obs = SourceSeries::with_index(Source::O, sim.obs)?;
        locations.push(Location::new(location_id(loc), gcm, obs)?);
        true_z.push(sim.z);
    }
    let data = TwoSourceDataset::new(locations, synthetic_meta(cfg.k_treatments))?;
    Ok(SyntheticDataset { data, true_z })
}

/// Writes `true_z_<loc>.csv` (columns `t, z1..zr`) for every location into
/// `dir` and returns the paths.
pub fn export_ground_truth(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (loc, z) in ds.data.locations().iter().zip(&ds.true_z) {
        let path = dir.join(format!("true_z_{}.csv", loc.id));
        write_matrix_csv(&path, "z", loc.gcm.timestamps(), z)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a matrix written by [`export_ground_truth`] (or any `t, ...` CSV
/// of numbers); returns timestamps and values.
pub fn read_ground_truth(path: &Path) -> Result<(Vec<i64>, Array2<f64>)> {
    read_matrix_csv(path)
}

/// Writes the dataset files, the manifest and the ground-truth latents.
pub fn write_synthetic(ds: &SyntheticDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = write_dataset(dir, &ds.data)?;
    files.extend(export_ground_truth(ds, dir)?);
    Ok(files)
}

/// `t` column plus `<prefix>1..<prefix>n` value columns.
pub fn write_matrix_csv(path: &Path, prefix: &str, t: &[i64], values: &Array2<f64>) -> Result<()> {
    if t.len() != values.nrows() {
        return Err(Error::LengthMismatch { left: t.len(), right: values.nrows() });
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=values.ncols()).map(|i| format!("{prefix}{i}")));
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    for (ts, row) in t.iter().zip(values.rows()) {
        let mut rec = vec![ts.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<i64>, Array2<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let ncols = reader.headers().map_err(|e| Error::parse(path, e))?.len();
    if ncols < 2 {
        return Err(Error::parse(path, "expected a t column and at least one value column"));
    }
    let mut t = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let bad = |c: &str| Error::parse(path, format!("row {}: bad value {c:?}", row + 1));
        t.push(rec[0].parse::<i64>().map_err(|_| bad(&rec[0]))?);
        for c in 1..ncols {
            let v: f64 = rec[c].parse().map_err(|_| bad(&rec[c]))?;
            if !v.is_finite() {
                return Err(bad(&rec[c]));
            }
            data.push(v);
        }
    }
    let values = Array2::from_shape_vec((t.len(), ncols - 1), data).map_err(|e| Error::parse(path, e))?;
    Ok((t, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { n_locations: 3, t: 200, seed, ..SynthConfig::default() }
    }

    #[test]
    fn lag_polynomial_expansion() {
        // (1 - 0.5L)(1 - 0.2L) = 1 - 0.7L + 0.1L^2
        let a = lag_coefficients(&[0.5, 0.2]);
        assert!((a[0] - 0.7).abs() < 1e-15 && (a[1] + 0.1).abs() < 1e-15);
        let lags: Vec<Array2<f64>> = a.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
        assert!((companion_radius(&lags) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unstable_lags_are_rescaled() {
        let roots = Array2::from_elem((2, 3), 0.9);
        let coupling = Array2::from_shape_vec((2, 2), vec![0.0, 0.3, 0.3, 0.0]).unwrap();
        let lags = stable_lags(&roots, &coupling).unwrap();
        assert!(companion_radius(&lags) <= STABILITY_BOUND + 1e-9);
    }

    #[test]
    fn shapes_follow_config() {
        let ds = generate(&SynthConfig { n_locations: 2, t: 10, r: 2, p: 3, ..small(1) }).unwrap();
        assert_eq!(ds.data.locations().len(), 2);
        assert_eq!(ds.data.locations()[0].gcm.values().dim(), (10, 4));
        assert_eq!(ds.true_z[1].dim(), (10, 2));
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        assert_eq!(generate(&small(7)).unwrap(), generate(&small(7)).unwrap());
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(8)).unwrap();
        let first = |d: &SyntheticDataset| d.data.locations()[0].gcm.values().iter().take(100).cloned().collect::<Vec<_>>();
        assert!(first(&a).iter().zip(first(&b)).all(|(x, y)| x != &y));
    }

    #[test]
    fn locations_do_not_depend_on_count() {
        let two = generate(&SynthConfig { n_locations: 2, ..small(3) }).unwrap();
        let three = generate(&small(3)).unwrap();
        assert_eq!(two.data.locations()[1], three.data.locations()[1]);
        assert_eq!(two.true_z[1], three.true_z[1]);
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let cfg = SynthConfig { t: 3, p: 5, gamma: 2.0, r: 0, ..small(0) };
        let msg = generate(&cfg).unwrap_err().to_string();
        assert!(msg.contains("T (3)") && msg.contains("gamma") && msg.contains("r must"), "{msg}");
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(2)).unwrap();
        let files = export_ground_truth(&ds, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let (t, z) = read_ground_truth(&files[0]).unwrap();
        assert_eq!(t.len(), 200);
        assert_eq!(z, ds.true_z[0]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = generate(&SynthConfig { n_locations: 1, ..small(2) }).unwrap();
        let file = tempfile::NamedTempFile::new().unwrap();
        // A regular file cannot be used as a directory.
        let err = export_ground_truth(&ds, &file.path().join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
