use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Location, TwoSourceDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl Fractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::BadFractions(format!(
                "every fraction must be positive, got ({}, {}, {})",
                self.train, self.val, self.test
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Boundaries `(c1, c2)` partitioning `n` items as `[0,c1) [c1,c2) [c2,n)`.
    pub fn cut_points(&self, n: usize) -> (usize, usize) {
        let c1 = (self.train * n as f64).round() as usize;
        let c2 = ((self.train + self.val) * n as f64).round() as usize;
        (c1.min(n), c2.min(n).max(c1.min(n)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SplitMode {
    /// Shuffle whole locations with `seed`.
    ByLocation { seed: u64 },
    /// Cut every series chronologically.
    ByTime,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: TwoSourceDataset,
    pub val: TwoSourceDataset,
    pub test: TwoSourceDataset,
}

/// Partitions `dataset` and re-derives normalization statistics from the
/// training part, which are then shared by all three parts.
pub fn split_dataset(dataset: &TwoSourceDataset, fractions: Fractions, mode: SplitMode) -> Result<DatasetSplit> {
    fractions.validate()?;
    let meta = dataset.meta().to_vec();
    let (train, val, test): (Vec<Location>, Vec<Location>, Vec<Location>) = match mode {
        SplitMode::ByLocation { seed } => {
            let n = dataset.locations().len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (c1, c2) = fractions.cut_points(n);
            if c1 == 0 || c2 == c1 || c2 == n {
                return Err(Error::BadFractions(format!("{n} locations cannot fill all three partitions")));
            }
            let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.locations()[i].clone()).collect::<Vec<_>>();
            (pick(&order[..c1]), pick(&order[c1..c2]), pick(&order[c2..]))
        }
        SplitMode::ByTime => {
            let mut parts = (Vec::new(), Vec::new(), Vec::new());
            for loc in dataset.locations() {
                let n = loc.len();
                let (c1, c2) = fractions.cut_points(n);
                if c1 == 0 || c2 == c1 || c2 == n {
                    return Err(Error::BadFractions(format!(
                        "location {}: {n} steps cannot fill all three partitions",
                        loc.id
                    )));
                }
                let cut = |a: usize, b: usize| -> Result<Location> {
                    Location::new(loc.id.clone(), loc.gcm.slice(a, b)?, loc.obs.slice(a, b)?)
                };
                parts.0.push(cut(0, c1)?);
                parts.1.push(cut(c1, c2)?);
                parts.2.push(cut(c2, n)?);
            }
            parts
        }
    };
    let train = TwoSourceDataset::new(train, meta.clone())?;
    let stats = train.norm_stats().clone();
    let val = TwoSourceDataset::with_stats(val, meta.clone(), stats.clone())?;
    let test = TwoSourceDataset::with_stats(test, meta, stats)?;
    Ok(DatasetSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, SourceSeries, Transform, VariableMeta};
    use ndarray::Array2;
    use std::collections::HashSet;

    fn dataset(n_loc: usize, t: usize) -> TwoSourceDataset {
        let locs = (0..n_loc)
            .map(|l| {
                let g = Array2::from_shape_fn((t, 2), |(i, j)| ((i * 7 + j * 3 + l) % 11) as f64 + l as f64);
                let o = Array2::from_shape_fn((t, 2), |(i, j)| ((i * 5 + j + 2 * l) % 13) as f64 * 0.5);
                Location::new(
                    format!("loc{l}"),
                    SourceSeries::with_index(Source::G, g).unwrap(),
                    SourceSeries::with_index(Source::O, o).unwrap(),
                )
                .unwrap()
            })
            .collect();
        TwoSourceDataset::new(locs, vec![VariableMeta::covariate("a"), VariableMeta::outcome("y", Transform::Zscore)])
            .unwrap()
    }

    #[test]
    fn by_location_500_is_400_50_50_partition() {
        let ds = dataset(500, 20);
        let sp = split_dataset(&ds, Fractions::default(), SplitMode::ByLocation { seed: 3 }).unwrap();
        assert_eq!(
            (sp.train.locations().len(), sp.val.locations().len(), sp.test.locations().len()),
            (400, 50, 50)
        );
        let ids: HashSet<&str> = [&sp.train, &sp.val, &sp.test]
            .iter()
            .flat_map(|d| d.locations().iter().map(|l| l.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 500);
        assert_eq!(sp.val.norm_stats(), sp.train.norm_stats());
        assert_eq!(sp.test.norm_stats(), sp.train.norm_stats());
        let again = split_dataset(&ds, Fractions::default(), SplitMode::ByLocation { seed: 3 }).unwrap();
        assert_eq!(again.train.locations(), sp.train.locations());
    }

    #[test]
    fn zero_fraction_rejected() {
        let ds = dataset(10, 20);
        let f = Fractions { train: 1.0, val: 0.0, test: 0.0 };
        assert!(matches!(split_dataset(&ds, f, SplitMode::ByTime), Err(Error::BadFractions(_))));
        let f = Fractions { train: 0.5, val: 0.2, test: 0.2 };
        assert!(matches!(split_dataset(&ds, f, SplitMode::ByTime), Err(Error::BadFractions(_))));
    }

    #[test]
    fn by_time_cuts_at_80_and_90() {
        assert_eq!(Fractions::default().cut_points(100), (80, 90));
        let ds = dataset(2, 100);
        let sp = split_dataset(&ds, Fractions::default(), SplitMode::ByTime).unwrap();
        assert_eq!(sp.train.locations()[0].len(), 80);
        assert_eq!(sp.val.locations()[0].gcm.timestamps()[0], 80);
        assert_eq!(sp.test.locations()[1].gcm.timestamps()[0], 90);
        assert_eq!(sp.test.locations()[1].len(), 10);
    }

    #[test]
    fn training_columns_are_standardized() {
        let ds = dataset(30, 40);
        let sp = split_dataset(&ds, Fractions::default(), SplitMode::ByLocation { seed: 9 }).unwrap();
        for source in [Source::G, Source::O] {
            for var in 0..2 {
                let vals: Vec<f64> = (0..sp.train.locations().len())
                    .flat_map(|l| sp.train.normalized(l, source).column(var).to_vec())
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                assert!(mean.abs() < 1e-8);
                assert!((std - 1.0).abs() < 1e-6);
            }
        }
    }
}
