//! Classical bias-correction baselines, all operating in native units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::EmpiricalQuantiles;

/// Guard for divisions by calibration moments and quantiles.
pub const EPS: f64 = 1e-8;

/// Trace offset added before ratio mappings of zero-inflated variables.
pub const PRECIP_TRACE_OFFSET: f64 = 1e-6;

/// Historical model output paired with observations over the same period.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPair {
    model_train: Vec<f64>,
    obs_train: Vec<f64>,
}

impl CalibrationPair {
    pub fn new(model_train: Vec<f64>, obs_train: Vec<f64>) -> Result<Self> {
        if model_train.is_empty() || obs_train.is_empty() {
            return Err(Error::EmptyInput);
        }
        if model_train.iter().chain(&obs_train).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("calibration data must be finite".into()));
        }
        Ok(Self { model_train, obs_train })
    }

    pub fn model(&self) -> &[f64] {
        &self.model_train
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs_train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    Additive,
    Multiplicative,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation (divisor `n`).
fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Shifts (or rescales) model output so its calibration mean matches the
/// observed mean.
pub fn linear_scaling(cal: &CalibrationPair, model_eval: &[f64], mode: ScalingMode) -> Result<Vec<f64>> {
    let mm = mean(&cal.model_train);
    let mo = mean(&cal.obs_train);
    match mode {
        ScalingMode::Additive => {
            let shift = mo - mm;
            Ok(model_eval.iter().map(|v| v + shift).collect())
        }
        ScalingMode::Multiplicative => {
            if mm <= EPS {
                return Err(Error::DegenerateMean(mm));
            }
            let factor = mo / mm;
            Ok(model_eval.iter().map(|v| v * factor).collect())
        }
    }
}

/// Matches calibration mean and standard deviation.
pub fn variance_scaling(cal: &CalibrationPair, model_eval: &[f64]) -> Result<Vec<f64>> {
    let (mm, sm) = (mean(&cal.model_train), pop_std(&cal.model_train));
    let (mo, so) = (mean(&cal.obs_train), pop_std(&cal.obs_train));
    if sm <= EPS {
        return Err(Error::DegenerateStd(sm));
    }
    let ratio = so / sm;
    Ok(model_eval.iter().map(|v| (v - mm) * ratio + mo).collect())
}

/// Empirical quantile mapping `F_o^-1(F_m(v))` on an `n_quantiles` grid.
/// Values beyond the model table receive the additive correction of the
/// nearest edge quantile.
pub fn quantile_mapping(cal: &CalibrationPair, model_eval: &[f64], n_quantiles: usize) -> Result<Vec<f64>> {
    if n_quantiles < 2 {
        return Err(Error::InvalidConfig(format!("n_quantiles must be at least 2, got {n_quantiles}")));
    }
    let qm = EmpiricalQuantiles::new(&cal.model_train)?.table(n_quantiles);
    let qo = EmpiricalQuantiles::new(&cal.obs_train)?.table(n_quantiles);
    let (_, m_lo) = qm.first();
    let (_, m_hi) = qm.last();
    let lo_shift = qo.first().1 - m_lo;
    let hi_shift = qo.last().1 - m_hi;
    Ok(model_eval
        .iter()
        .map(|&v| {
            if v < m_lo {
                v + lo_shift
            } else if v > m_hi {
                v + hi_shift
            } else {
                qo.quantile(qm.cdf(v))
            }
        })
        .collect())
}

/// Quantile delta mapping: maps each projected value through the observed
/// quantile at its own non-exceedance probability while preserving the
/// model's change relative to its historical quantile.
///
/// `trace_offset` is added to every series before the multiplicative
/// mapping and removed afterwards.
pub fn quantile_delta_mapping(
    model_hist: &[f64],
    obs_hist: &[f64],
    model_proj: &[f64],
    kind: ScalingMode,
    n_quantiles: usize,
    trace_offset: f64,
) -> Result<Vec<f64>> {
    if n_quantiles < 2 {
        return Err(Error::InvalidConfig(format!("n_quantiles must be at least 2, got {n_quantiles}")));
    }
    let off = match kind {
        ScalingMode::Additive => 0.0,
        ScalingMode::Multiplicative => trace_offset,
    };
    let shift = |v: &[f64]| v.iter().map(|x| x + off).collect::<Vec<_>>();
    let (hist, obs, proj) = (shift(model_hist), shift(obs_hist), shift(model_proj));
    let qh = EmpiricalQuantiles::new(&hist)?.table(n_quantiles);
    let qo = EmpiricalQuantiles::new(&obs)?.table(n_quantiles);
    let qp = EmpiricalQuantiles::new(&proj)?.table(n_quantiles);
    if kind == ScalingMode::Multiplicative {
        if let Some(&bad) = qh.values().iter().find(|&&q| q <= EPS) {
            return Err(Error::DegenerateQuantile(bad));
        }
    }
    let raw: Vec<f64> = proj
        .iter()
        .map(|&v| {
            let tau = qp.cdf(v);
            let (o, h) = (qo.quantile(tau), qh.quantile(tau));
            match kind {
                ScalingMode::Additive => v + (o - h),
                ScalingMode::Multiplicative => v * (o / h),
            }
        })
        .collect();
    Ok(rearrange(&proj, raw).into_iter().map(|v| v - off).collect())
}

/// Monotone rearrangement: hands the sorted outputs to the inputs in rank
/// order, averaging over tied inputs. Leaves already monotone maps intact.
/// The delta-preserving map can bend backwards where the historical
/// quantiles rise faster than the projection's.
fn rearrange(inputs: &[f64], outputs: Vec<f64>) -> Vec<f64> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&a, &b| inputs[a].total_cmp(&inputs[b]));
    let mut sorted = outputs;
    sorted.sort_by(f64::total_cmp);
    let mut out = vec![0.0; inputs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && inputs[order[end]] == inputs[order[start]] {
            end += 1;
        }
        let mean = sorted[start..end].iter().sum::<f64>() / (end - start) as f64;
        for &i in &order[start..end] {
            out[i] = mean;
        }
        start = end;
    }
    out
}
