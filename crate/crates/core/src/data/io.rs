//! CSV and manifest ingestion.
//!
//! Each (location, source) pair is one CSV file: a header of `t` followed by
//! the variable names, then one row per step. A JSON manifest lists the
//! variables, the outcome name and the per-location file pairs; file paths
//! are resolved relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Location, Source, SourceSeries, TwoSourceDataset, VariableKind, VariableMeta};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEntry {
    pub id: String,
    pub gcm: PathBuf,
    pub obs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub outcome: String,
    pub variables: Vec<VariableMeta>,
    pub locations: Vec<LocationEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::parse(path, format!("unsupported manifest version {}", manifest.version)));
        }
        let outcome = super::validate_meta(&manifest.variables)?;
        if manifest.variables[outcome].name != manifest.outcome {
            return Err(Error::InvalidData(format!(
                "manifest outcome {:?} does not match the variable marked as outcome ({:?})",
                manifest.outcome, manifest.variables[outcome].name
            )));
        }
        Ok(manifest)
    }
}

pub fn read_source_csv(path: &Path, source: Source, meta: &[VariableMeta]) -> Result<SourceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("t") {
        return Err(Error::parse(path, "first column must be `t`"));
    }
    // Map every metadata variable to its CSV column.
    let columns: Vec<usize> = meta
        .iter()
        .map(|m| {
            headers
                .iter()
                .position(|h| h == m.name)
                .ok_or_else(|| Error::parse(path, format!("missing column {:?}", m.name)))
        })
        .collect::<Result<_>>()?;

    let mut t = Vec::new();
    let mut data = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let ts = record.get(0).unwrap_or("");
        t.push(ts.parse::<i64>().map_err(|_| Error::parse(path, format!("row {}: bad time index {ts:?}", row + 1)))?);
        for (m, &c) in meta.iter().zip(&columns) {
            let cell = record.get(c).unwrap_or("");
            let missing = || Error::MissingValue {
                file: path.display().to_string(),
                row: row + 1,
                column: m.name.clone(),
            };
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                return Err(missing());
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: bad number {cell:?}", row + 1)))?;
            if !v.is_finite() {
                return Err(missing());
            }
            data.push(v);
        }
    }
    let values = Array2::from_shape_vec((t.len(), meta.len()), data).map_err(|e| Error::parse(path, e))?;
    SourceSeries::new(source, values, t)
}

/// Writes values with shortest round-trip formatting.
pub fn write_source_csv(path: &Path, series: &SourceSeries, meta: &[VariableMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(meta.iter().map(|m| m.name.clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (ts, row) in series.timestamps().iter().zip(series.values().rows()) {
        let mut rec = vec![ts.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(manifest_path: &Path) -> Result<TwoSourceDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let locations = manifest
        .locations
        .iter()
        .map(|entry| {
            let gcm = read_source_csv(&base.join(&entry.gcm), Source::G, &manifest.variables)?;
            let obs = read_source_csv(&base.join(&entry.obs), Source::O, &manifest.variables)?;
            Location::new(entry.id.clone(), gcm, obs)
        })
        .collect::<Result<Vec<_>>>()?;
    TwoSourceDataset::new(locations, manifest.variables)
}

/// Writes `loc_<id>_G.csv`, `loc_<id>_O.csv` and `manifest.json` into `dir`.
/// Returns every file written, manifest last.
pub fn write_dataset(dir: &Path, dataset: &TwoSourceDataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for loc in dataset.locations() {
        let g = PathBuf::from(format!("loc_{}_G.csv", loc.id));
        let o = PathBuf::from(format!("loc_{}_O.csv", loc.id));
        write_source_csv(&dir.join(&g), &loc.gcm, dataset.meta())?;
        write_source_csv(&dir.join(&o), &loc.obs, dataset.meta())?;
        written.push(dir.join(&g));
        written.push(dir.join(&o));
        entries.push(LocationEntry { id: loc.id.clone(), gcm: g, obs: o });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        outcome: dataset.outcome_meta().name.clone(),
        variables: dataset.meta().to_vec(),
        locations: entries,
    };
    debug_assert_eq!(
        manifest.variables.iter().filter(|m| m.kind == VariableKind::Outcome).count(),
        1
    );
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Transform;
    use ndarray::array;

    fn meta() -> Vec<VariableMeta> {
        vec![VariableMeta::covariate("hum"), VariableMeta::outcome("prate", Transform::Log1pZscore)]
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SourceSeries::new(Source::G, array![[0.1, 1.0 / 3.0], [0.25, 2.0], [1e-7, 0.0]], vec![10, 11, 12])
            .unwrap();
        let o = SourceSeries::new(Source::O, array![[0.2, 0.5], [0.3, 1.5], [0.1, 3.25]], vec![10, 11, 12]).unwrap();
        let ds = TwoSourceDataset::new(vec![Location::new("sa", g, o).unwrap()], meta()).unwrap();
        let files = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(files.len(), 3);
        let back = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_value_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "t,hum,prate\n0,1.0,2.0\n1,,3.0\n").unwrap();
        let err = read_source_csv(&p, Source::G, &meta()).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 2, .. }), "{err}");
        fs::write(&p, "t,hum,prate\n0,1.0,NaN\n").unwrap();
        assert!(matches!(read_source_csv(&p, Source::G, &meta()), Err(Error::MissingValue { .. })));
    }

    #[test]
    fn columns_matched_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "t,prate,hum\n0,2.0,1.0\n1,3.0,4.0\n").unwrap();
        let s = read_source_csv(&p, Source::O, &meta()).unwrap();
        assert_eq!(s.values(), &array![[1.0, 2.0], [4.0, 3.0]]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_source_csv(Path::new("/nonexistent/x.csv"), Source::G, &meta()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
