//! Metrics and diagnostics.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{probability_grid, EmpiricalQuantiles};

/// Ridge added to the normal equations when the plain latent fit is singular.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self { label: label.into(), mse: mse(pred, target)?, mae: mae(pred, target)?, n: pred.len() })
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Paired quantiles of `a` and `b` at probabilities `(j - 0.5) / n_points`.
pub fn qq_points(a: &[f64], b: &[f64], n_points: usize) -> Result<Vec<(f64, f64)>> {
    if n_points < 2 {
        return Err(Error::InvalidConfig(format!("n_points must be at least 2, got {n_points}")));
    }
    let qa = EmpiricalQuantiles::new(a)?;
    let qb = EmpiricalQuantiles::new(b)?;
    Ok(probability_grid(n_points).into_iter().map(|p| (qa.quantile(p), qb.quantile(p))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

pub fn box_stats(a: &[f64]) -> Result<BoxStats> {
    let q = EmpiricalQuantiles::new(a)?;
    Ok(BoxStats { min: q.min(), q25: q.quantile(0.25), median: q.quantile(0.5), q75: q.quantile(0.75), max: q.max() })
}

/// Latent recovery after affine alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRecovery {
    /// Held-out MSE after fitting `z_true ~ z_inferred * W + b` on the first
    /// half of the rows.
    pub aligned_mse: f64,
    /// Plain MSE over all rows; only meaningful when the dimensions match.
    pub raw_mse: Option<f64>,
    /// Variance of `z_true` over the held-out rows, averaged over columns.
    pub true_variance: f64,
}

/// Affine-aligned held-out MSE between inferred and true latents.
pub fn z_recovery_error(z_inferred: &Array2<f64>, z_true: &Array2<f64>) -> Result<f64> {
    Ok(z_recovery(z_inferred, z_true)?.aligned_mse)
}

pub fn z_recovery(z_inferred: &Array2<f64>, z_true: &Array2<f64>) -> Result<LatentRecovery> {
    let (t, dz) = z_inferred.dim();
    let r = z_true.ncols();
    if z_true.nrows() != t {
        return Err(Error::LengthMismatch { left: t, right: z_true.nrows() });
    }
    if t <= dz + 1 || r == 0 {
        return Err(Error::SeriesTooShort { needed: dz + 2, got: t });
    }
    let n_fit = t / 2;
    let design = |rows: std::ops::Range<usize>| {
        DMatrix::from_fn(rows.len(), dz + 1, |i, j| if j < dz { z_inferred[[rows.start + i, j]] } else { 1.0 })
    };
    let x_fit = design(0..n_fit);
    let xtx = x_fit.transpose() * &x_fit;
    let chol = xtx.clone().cholesky().or_else(|| {
        let ridge = xtx + DMatrix::identity(dz + 1, dz + 1) * RIDGE;
        ridge.cholesky()
    });
    let chol = chol.ok_or(Error::RankDeficient)?;
    let x_eval = design(n_fit..t);
    let mut sq = 0.0;
    let mut var = 0.0;
    for c in 0..r {
        let y_fit = DVector::from_fn(n_fit, |i, _| z_true[[i, c]]);
        let coef = chol.solve(&(x_fit.transpose() * y_fit));
        if coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient);
        }
        let pred = &x_eval * coef;
        let held: Vec<f64> = (n_fit..t).map(|i| z_true[[i, c]]).collect();
        let mean = held.iter().sum::<f64>() / held.len() as f64;
        for (p, y) in pred.iter().zip(&held) {
            sq += (p - y) * (p - y);
            var += (y - mean) * (y - mean);
        }
    }
    let denom = ((t - n_fit) * r) as f64;
    let raw_mse = (dz == r).then(|| {
        z_inferred.iter().zip(z_true.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (t * r) as f64
    });
    Ok(LatentRecovery { aligned_mse: sq / denom, raw_mse, true_variance: var / denom })
}

/// Mean absolute off-diagonal Pearson correlation between residual columns.
pub fn conditional_independence_score(residuals: &Array2<f64>) -> Result<f64> {
    let (n, k) = residuals.dim();
    if n < 30 {
        return Err(Error::SeriesTooShort { needed: 30, got: n });
    }
    if k < 2 {
        return Err(Error::InvalidData(format!("need at least 2 residual columns, got {k}")));
    }
    let mut centered = Vec::with_capacity(k);
    for (j, col) in residuals.columns().into_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
        let ss = c.iter().map(|v| v * v).sum::<f64>();
        if ss <= f64::EPSILON * f64::EPSILON * n as f64 {
            return Err(Error::DegenerateColumn(j));
        }
        centered.push((c, ss.sqrt()));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let (a, na) = &centered[i];
            let (b, nb) = &centered[j];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += (dot / (na * nb)).abs().min(1.0);
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{concatenate, Axis};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(rng))
    }

    #[test]
    fn point_metrics() {
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mae(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 1.5);
        assert_eq!(mae(&[3.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(mse(&[1.0, -4.0], &[1.0, -4.0]).unwrap(), 0.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn qq_probabilities_and_shift() {
        let a: Vec<f64> = (1..=100).map(f64::from).collect();
        let pts = qq_points(&a, &a, 4).unwrap();
        // Probabilities 0.125, 0.375, 0.625, 0.875; value j sits at (j - 0.5) / 100.
        let expect = [13.0, 38.0, 63.0, 88.0];
        for ((qa, qb), e) in pts.iter().zip(expect) {
            assert!((qa - e).abs() < 1e-12 && qa == qb);
        }
        let b: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
        for (qa, qb) in qq_points(&a, &b, 17).unwrap() {
            assert!((qb - qa - 3.0).abs() < 1e-12);
        }
        assert!(matches!(qq_points(&[], &a, 4), Err(Error::EmptyInput)));
    }

    #[test]
    fn five_number_summary() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.min, b.q25, b.median, b.q75, b.max), (1.0, 1.75, 3.0, 4.25, 5.0));
        let c = box_stats(&[2.5; 7]).unwrap();
        assert!([c.min, c.q25, c.median, c.q75, c.max].iter().all(|&v| v == 2.5));
        let s = box_stats(&[-1.0]).unwrap();
        assert_eq!((s.min, s.median, s.max), (-1.0, -1.0, -1.0));
    }

    #[test]
    fn latent_recovery_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = normal_matrix(&mut rng, 400, 1);
        assert!(z_recovery_error(&z, &z).unwrap() < 1e-20);
        let scaled = z.mapv(|v| 2.0 * v + 1.0);
        assert!(z_recovery_error(&scaled, &z).unwrap() < 1e-20);
        // Two-dimensional inference mixing the truth with an unrelated column.
        let other = normal_matrix(&mut rng, 400, 1);
        let mixed = concatenate![Axis(1), &z * 0.5 + &other, &other * -1.0 + 4.0];
        assert!(z_recovery_error(&mixed, &z).unwrap() < 1e-16);
    }

    #[test]
    fn independent_noise_recovers_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = normal_matrix(&mut rng, 20_000, 1);
        let noise = normal_matrix(&mut rng, 20_000, 3);
        let rec = z_recovery(&noise, &z).unwrap();
        assert!((rec.aligned_mse - rec.true_variance).abs() < 0.03 * rec.true_variance, "{rec:?}");
        assert!(rec.raw_mse.is_none());
    }

    #[test]
    fn singular_fit_uses_ridge() {
        let z = Array2::from_shape_fn((50, 1), |(i, _)| (i as f64).sin());
        let flat = Array2::from_elem((50, 2), 1.0);
        let err = z_recovery_error(&flat, &z).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn independence_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = normal_matrix(&mut rng, 10_000, 3);
        assert!(conditional_independence_score(&r).unwrap() < 0.03);
        let col = normal_matrix(&mut rng, 100, 1);
        let dup = concatenate![Axis(1), col, col];
        assert!((conditional_independence_score(&dup).unwrap() - 1.0).abs() < 1e-12);
        let mut constant = normal_matrix(&mut rng, 100, 2);
        constant.column_mut(1).fill(4.0);
        assert!(matches!(conditional_independence_score(&constant), Err(Error::DegenerateColumn(1))));
        assert!(conditional_independence_score(&normal_matrix(&mut rng, 29, 3)).is_err());
    }

    proptest! {
        #[test]
        fn mse_dominates_squared_mae(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let (m2, m1) = (mse(&p, &t).unwrap(), mae(&p, &t).unwrap());
            prop_assert!(m2 >= m1 * m1 - 1e-9 * m2.max(1.0));
        }

        #[test]
        fn qq_ignores_order(mut a in prop::collection::vec(-10.0f64..10.0, 1..40), mut b in prop::collection::vec(-10.0f64..10.0, 1..40), n in 2usize..30) {
            let before = qq_points(&a, &b, n).unwrap();
            a.reverse();
            let half = b.len() / 2;
            b.rotate_left(half);
            prop_assert_eq!(before, qq_points(&a, &b, n).unwrap());
        }

        #[test]
        fn recovery_invariant_to_invertible_maps(seed in 0u64..1000, s in 0.2f64..5.0, shift in -5.0f64..5.0, mix in -0.9f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_matrix(&mut rng, 120, 1);
            let inferred = concatenate![Axis(1), &z + &normal_matrix(&mut rng, 120, 1) * 0.3, normal_matrix(&mut rng, 120, 1)];
            let base = z_recovery_error(&inferred, &z).unwrap();
            let c0 = inferred.column(0).to_owned();
            let c1 = inferred.column(1).to_owned();
            let moved = ndarray::stack![Axis(1), &c0 * s + &c1 * mix + shift, &c1 - &c0 * mix];
            prop_assert!((z_recovery_error(&moved, &z).unwrap() - base).abs() < 1e-8);
        }
    }
}
