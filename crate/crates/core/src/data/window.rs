use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Source, TwoSourceDataset};
use crate::error::{Error, Result};

/// History, current and future lengths of a trajectory window, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { h: 36, w: 12, k: 3 }
    }
}

impl WindowSpec {
    pub fn new(h: usize, w: usize, k: usize) -> Result<Self> {
        let spec = Self { h, w, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(format!(
                "window lengths must be positive (h={}, w={}, k={})",
                self.h, self.w, self.k
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.h + self.w + self.k
    }

    /// Number of windows a series of length `t` yields.
    pub fn count(&self, t: usize) -> usize {
        (t + 1).saturating_sub(self.span())
    }
}

/// One training sample. With anchor `t` (last current step), history covers
/// `[t-h-w+1, t-w]`, current covers `[t-w+1, t]` and future `[t+1, t+k]`.
/// All values are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub location: usize,
    pub anchor_t: usize,
    pub x_g: Array2<f64>,
    pub x_o: Array2<f64>,
    pub a_g: Array2<f64>,
    pub a_o: Array2<f64>,
    pub y_g: Array1<f64>,
    pub y_o: Array1<f64>,
}

impl TrajectoryWindow {
    /// Bias delta `y_o - y_g` over the horizon.
    pub fn delta_y(&self) -> Array1<f64> {
        &self.y_o - &self.y_g
    }

    pub fn covariates(&self, source: Source) -> (&Array2<f64>, &Array2<f64>) {
        match source {
            Source::G => (&self.x_g, &self.a_g),
            Source::O => (&self.x_o, &self.a_o),
        }
    }

    /// Index of the first current step in the location series.
    pub fn current_start(&self) -> usize {
        self.anchor_t + 1 - self.a_g.nrows()
    }
}

/// All windows of every location, ordered by (location, anchor).
pub fn make_windows(dataset: &TwoSourceDataset, spec: &WindowSpec) -> Result<Vec<TrajectoryWindow>> {
    make_windows_strided(dataset, spec, 1)
}

/// Like [`make_windows`] but keeps every `stride`-th anchor per location.
pub fn make_windows_strided(
    dataset: &TwoSourceDataset,
    spec: &WindowSpec,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    spec.validate()?;
    if stride == 0 {
        return Err(Error::InvalidConfig("window stride must be positive".into()));
    }
    let cov = dataset.covariate_indices();
    let outcome = dataset.outcome_index();
    let mut out = Vec::new();
    for (li, loc) in dataset.locations().iter().enumerate() {
        if loc.gcm.timestamps() != loc.obs.timestamps() {
            return Err(Error::MisalignedSources(format!("location {}", loc.id)));
        }
        let t_len = loc.len();
        if t_len < spec.span() {
            return Err(Error::SeriesTooShort { needed: spec.span(), got: t_len });
        }
        let g = dataset.normalized(li, Source::G);
        let o = dataset.normalized(li, Source::O);
        let gc = g.select(ndarray::Axis(1), &cov);
        let oc = o.select(ndarray::Axis(1), &cov);
        let first = spec.h + spec.w - 1;
        let last = t_len - spec.k - 1;
        for t in (first..=last).step_by(stride) {
            let hist = (t + 1 - spec.h - spec.w)..(t + 1 - spec.w);
            let cur = (t + 1 - spec.w)..(t + 1);
            let fut = (t + 1)..(t + 1 + spec.k);
            out.push(TrajectoryWindow {
                location: li,
                anchor_t: t,
                x_g: gc.slice(s![hist.clone(), ..]).to_owned(),
                x_o: oc.slice(s![hist, ..]).to_owned(),
                a_g: gc.slice(s![cur.clone(), ..]).to_owned(),
                a_o: oc.slice(s![cur, ..]).to_owned(),
                y_g: g.slice(s![fut.clone(), outcome]).to_owned(),
                y_o: o.slice(s![fut, outcome]).to_owned(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Location, SourceSeries, Transform, VariableMeta};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn dataset(t: usize, n_loc: usize) -> TwoSourceDataset {
        let locs = (0..n_loc)
            .map(|l| {
                let g = Array2::from_shape_fn((t, 3), |(i, j)| (i * 3 + j + l) as f64 + 0.5 * (i as f64).sin());
                let o = Array2::from_shape_fn((t, 3), |(i, j)| 2.0 * (i + j) as f64 + (l as f64) + (i as f64).cos());
                Location::new(
                    l.to_string(),
                    SourceSeries::with_index(Source::G, g).unwrap(),
                    SourceSeries::with_index(Source::O, o).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let meta = vec![
            VariableMeta::covariate("a1"),
            VariableMeta::covariate("a2"),
            VariableMeta::outcome("y", Transform::Zscore),
        ];
        TwoSourceDataset::new(locs, meta).unwrap()
    }

    #[test]
    fn ten_steps_yield_four_windows() {
        // Anchors t = 4, 5, 6, 7 (history needs 3 + 2 steps, future 2).
        let ds = dataset(10, 2);
        let spec = WindowSpec::new(3, 2, 2).unwrap();
        let ws = make_windows(&ds, &spec).unwrap();
        assert_eq!(ws.len(), 8);
        let anchors: Vec<usize> = ws.iter().filter(|w| w.location == 0).map(|w| w.anchor_t).collect();
        assert_eq!(anchors, vec![4, 5, 6, 7]);
        assert_eq!(ws[0].x_g.dim(), (3, 2));
        assert_eq!(ws[0].a_g.dim(), (2, 2));
        assert_eq!(ws[0].y_g.len(), 2);
    }

    #[test]
    fn exact_and_short_lengths() {
        let spec = WindowSpec::new(3, 2, 2).unwrap();
        assert_eq!(make_windows(&dataset(7, 1), &spec).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&dataset(6, 1), &spec),
            Err(Error::SeriesTooShort { needed: 7, got: 6 })
        ));
    }

    #[test]
    fn window_layout_is_contiguous_and_denormalizes() {
        let ds = dataset(12, 1);
        let spec = WindowSpec::new(3, 2, 2).unwrap();
        let ws = make_windows(&ds, &spec).unwrap();
        let raw = ds.locations()[0].gcm.values();
        let raw_o = ds.locations()[0].obs.values();
        for w in &ws {
            let t = w.anchor_t;
            for (r, ti) in (t - 4..=t - 2).enumerate() {
                for (c, &var) in [0usize, 1].iter().enumerate() {
                    let back = ds.scaler(Source::G, var).denormalize(w.x_g[[r, c]]);
                    assert!((back - raw[[ti, var]]).abs() < 1e-10);
                }
            }
            for (r, ti) in (t - 1..=t).enumerate() {
                let back = ds.scaler(Source::O, 1).denormalize(w.a_o[[r, 1]]);
                assert!((back - raw_o[[ti, 1]]).abs() < 1e-10);
            }
            for (r, ti) in (t + 1..=t + 2).enumerate() {
                let back = ds.outcome_scaler(Source::G).denormalize(w.y_g[r]);
                assert!((back - raw[[ti, 2]]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(t in 1usize..60, h in 1usize..8, w in 1usize..8, k in 1usize..8) {
            let spec = WindowSpec { h, w, k };
            // Brute force: every anchor whose full layout fits in [0, t).
            let brute = (0..t).filter(|&a| a + 1 >= h + w && a + k < t).count();
            prop_assert_eq!(spec.count(t), brute);
            if t >= h + w + k && t >= 2 {
                let ds = dataset(t, 1);
                prop_assert_eq!(make_windows(&ds, &spec).unwrap().len(), brute);
            }
        }
    }
}
