//! Two-source data model: per-location GCM and observation series, variable
//! metadata, normalization statistics, trajectory windows and splits.

mod io;
mod split;
mod window;

pub use io::{load_dataset, read_source_csv, write_dataset, write_source_csv, DatasetManifest, LocationEntry};
pub use split::{split_dataset, DatasetSplit, Fractions, SplitMode};
pub use window::{make_windows, make_windows_strided, TrajectoryWindow, WindowSpec};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the comparison a series comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Global climate model output.
    G,
    /// Observations or reanalysis.
    O,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::G => "G",
            Source::O => "O",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Covariate,
    Outcome,
}

/// Per-variable normalization transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Zscore,
    /// `log1p` followed by z-scoring; used for heavy-tailed, nonnegative
    /// variables such as precipitation.
    Log1pZscore,
    None,
}

impl Transform {
    fn forward(self, v: f64) -> f64 {
        match self {
            Transform::Log1pZscore => v.ln_1p(),
            Transform::Zscore | Transform::None => v,
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Log1pZscore => v.exp_m1(),
            Transform::Zscore | Transform::None => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub transform: Transform,
}

impl VariableMeta {
    pub fn covariate(name: impl Into<String>) -> Self {
        Self { name: name.into(), unit: String::new(), kind: VariableKind::Covariate, transform: Transform::Zscore }
    }

    pub fn outcome(name: impl Into<String>, transform: Transform) -> Self {
        Self { name: name.into(), unit: String::new(), kind: VariableKind::Outcome, transform }
    }

    /// Precipitation-like variables are clamped at zero in native units.
    pub fn is_nonnegative(&self) -> bool {
        self.transform == Transform::Log1pZscore
    }
}

/// Checks the metadata invariants: unique names, exactly one outcome.
pub fn validate_meta(meta: &[VariableMeta]) -> Result<usize> {
    if meta.len() < 2 {
        return Err(Error::InvalidData("need at least one covariate and one outcome variable".into()));
    }
    for (i, m) in meta.iter().enumerate() {
        if m.name.is_empty() || m.name == "t" {
            return Err(Error::InvalidData(format!("invalid variable name {:?}", m.name)));
        }
        if meta[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::InvalidData(format!("duplicate variable name {:?}", m.name)));
        }
    }
    let outcomes: Vec<usize> =
        meta.iter().enumerate().filter(|(_, m)| m.kind == VariableKind::Outcome).map(|(i, _)| i).collect();
    match outcomes.as_slice() {
        [i] => Ok(*i),
        _ => Err(Error::InvalidData(format!("expected exactly one outcome variable, found {}", outcomes.len()))),
    }
}

/// One source's multivariate series at one location, in native units.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSeries {
    source: Source,
    values: Array2<f64>,
    timestamps: Vec<i64>,
}

impl SourceSeries {
    pub fn new(source: Source, values: Array2<f64>, timestamps: Vec<i64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidData("series must have at least one step".into()));
        }
        if values.nrows() != timestamps.len() {
            return Err(Error::InvalidData(format!(
                "{} rows but {} timestamps",
                values.nrows(),
                timestamps.len()
            )));
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite value at row {r}, column {c}")));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData("timestamps must be strictly increasing".into()));
        }
        Ok(Self { source, values, timestamps })
    }

    /// Series with timestamps `0..T`.
    pub fn with_index(source: Source, values: Array2<f64>) -> Result<Self> {
        let t = (0..values.nrows() as i64).collect();
        Self::new(source, values, t)
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(
            self.source,
            self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            self.timestamps[start..end].to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub id: String,
    pub gcm: SourceSeries,
    pub obs: SourceSeries,
}

impl Location {
    pub fn new(id: impl Into<String>, gcm: SourceSeries, obs: SourceSeries) -> Result<Self> {
        let id = id.into();
        if gcm.source() != Source::G || obs.source() != Source::O {
            return Err(Error::InvalidData(format!("location {id}: sources must be (G, O)")));
        }
        if gcm.timestamps() != obs.timestamps() {
            return Err(Error::MisalignedSources(format!("location {id}: GCM and observation timestamps differ")));
        }
        if gcm.n_vars() != obs.n_vars() {
            return Err(Error::MisalignedSources(format!("location {id}: column counts differ")));
        }
        Ok(Self { id, gcm, obs })
    }

    pub fn len(&self) -> usize {
        self.gcm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gcm.is_empty()
    }

    pub fn series(&self, source: Source) -> &SourceSeries {
        match source {
            Source::G => &self.gcm,
            Source::O => &self.obs,
        }
    }
}

/// Mean and standard deviation of one transformed variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-source, per-variable normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub gcm: Vec<NormStat>,
    pub obs: Vec<NormStat>,
}

impl NormStats {
    pub fn stat(&self, source: Source, var: usize) -> NormStat {
        match source {
            Source::G => self.gcm[var],
            Source::O => self.obs[var],
        }
    }
}

/// Maps one variable between native units and normalized space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub transform: Transform,
    pub stat: NormStat,
}

impl Scaler {
    pub fn normalize(&self, v: f64) -> f64 {
        match self.transform {
            Transform::None => v,
            t => (t.forward(v) - self.stat.mean) / self.stat.std,
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        match self.transform {
            Transform::None => v,
            t => t.inverse(v * self.stat.std + self.stat.mean),
        }
    }
}

/// Aligned GCM and observation series for a set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSourceDataset {
    locations: Vec<Location>,
    meta: Vec<VariableMeta>,
    outcome: usize,
    norm_stats: NormStats,
}

impl TwoSourceDataset {
    /// Builds a dataset whose normalization statistics come from its own
    /// values. Splitting replaces them with training-partition statistics.
    pub fn new(locations: Vec<Location>, meta: Vec<VariableMeta>) -> Result<Self> {
        Self::check(&locations, &meta)?;
        let norm_stats = compute_norm_stats(&locations, &meta)?;
        Self::with_stats(locations, meta, norm_stats)
    }

    /// Builds a dataset that normalizes with externally supplied statistics.
    pub fn with_stats(locations: Vec<Location>, meta: Vec<VariableMeta>, norm_stats: NormStats) -> Result<Self> {
        let outcome = Self::check(&locations, &meta)?;
        if norm_stats.gcm.len() != meta.len() || norm_stats.obs.len() != meta.len() {
            return Err(Error::InvalidData("normalization statistics do not match the variable count".into()));
        }
        if norm_stats.gcm.iter().chain(&norm_stats.obs).any(|s| !(s.std > 0.0) || !s.mean.is_finite()) {
            return Err(Error::InvalidData("normalization statistics need finite means and positive stds".into()));
        }
        Ok(Self { locations, meta, outcome, norm_stats })
    }

    fn check(locations: &[Location], meta: &[VariableMeta]) -> Result<usize> {
        let outcome = validate_meta(meta)?;
        if locations.is_empty() {
            return Err(Error::InvalidData("dataset has no locations".into()));
        }
        for loc in locations {
            if loc.gcm.n_vars() != meta.len() {
                return Err(Error::InvalidData(format!(
                    "location {}: {} columns but {} variables in metadata",
                    loc.id,
                    loc.gcm.n_vars(),
                    meta.len()
                )));
            }
        }
        Ok(outcome)
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn meta(&self) -> &[VariableMeta] {
        &self.meta
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    pub fn outcome_index(&self) -> usize {
        self.outcome
    }

    pub fn outcome_meta(&self) -> &VariableMeta {
        &self.meta[self.outcome]
    }

    /// Column indices of the non-outcome variables, in metadata order.
    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.meta.len()).filter(|&i| i != self.outcome).collect()
    }

    pub fn n_covariates(&self) -> usize {
        self.meta.len() - 1
    }

    pub fn scaler(&self, source: Source, var: usize) -> Scaler {
        Scaler { transform: self.meta[var].transform, stat: self.norm_stats.stat(source, var) }
    }

    pub fn outcome_scaler(&self, source: Source) -> Scaler {
        self.scaler(source, self.outcome)
    }

    /// Normalized copy of one location's series for `source`.
    pub fn normalized(&self, loc: usize, source: Source) -> Array2<f64> {
        let values = self.locations[loc].series(source).values();
        let mut out = values.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let scaler = self.scaler(source, j);
            col.mapv_inplace(|v| scaler.normalize(v));
        }
        out
    }

    /// Outcome column of one location in native units.
    pub fn outcome_series(&self, loc: usize, source: Source) -> ArrayView1<'_, f64> {
        self.locations[loc].series(source).values().column(self.outcome)
    }
}

fn compute_norm_stats(locations: &[Location], meta: &[VariableMeta]) -> Result<NormStats> {
    let per_source = |source: Source| -> Result<Vec<NormStat>> {
        meta.iter()
            .enumerate()
            .map(|(j, m)| {
                if m.transform == Transform::None {
                    return Ok(NormStat { mean: 0.0, std: 1.0 });
                }
                let mut n = 0usize;
                let mut sum = 0.0;
                for loc in locations {
                    for &v in loc.series(source).values().column(j) {
                        if m.transform == Transform::Log1pZscore && v <= -1.0 {
                            return Err(Error::InvalidData(format!(
                                "variable {} has value {v} outside the log1p domain",
                                m.name
                            )));
                        }
                        sum += m.transform.forward(v);
                        n += 1;
                    }
                }
                let mean = sum / n as f64;
                let mut ss = 0.0;
                for loc in locations {
                    for &v in loc.series(source).values().column(j) {
                        let d = m.transform.forward(v) - mean;
                        ss += d * d;
                    }
                }
                let std = (ss / n as f64).sqrt();
                if !(std > 0.0) || !std.is_finite() {
                    return Err(Error::InvalidData(format!(
                        "variable {} ({}) has zero variance in the reference partition",
                        m.name,
                        source.tag()
                    )));
                }
                Ok(NormStat { mean, std })
            })
            .collect()
    };
    Ok(NormStats { gcm: per_source(Source::G)?, obs: per_source(Source::O)? })
}
