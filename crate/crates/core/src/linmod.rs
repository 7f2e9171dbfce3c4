//! Ordinary least squares, delta-method intervals for coefficient products and
//! Benjamini–Hochberg adjustment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Relative tolerance on the R diagonal below which a design column is treated as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub residual_variance: f64,
    pub dof: usize,
    pub names: Vec<String>,
    pub residuals: DVector<f64>,
}

impl LinearFit {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].max(0.0).sqrt()
    }

    /// Two-sided t-test p-value for coefficient `j` being zero.
    pub fn p_value(&self, j: usize) -> f64 {
        let se = self.se(j);
        let b = self.coefficients[j];
        if se == 0.0 {
            return if b == 0.0 { 1.0 } else { 0.0 };
        }
        let t = StudentsT::new(0.0, 1.0, self.dof as f64).expect("dof > 0");
        2.0 * t.cdf(-(b / se).abs())
    }

    pub fn fitted(&self, design: &DMatrix<f64>) -> DVector<f64> {
        design * &self.coefficients
    }
}

/// Least-squares fit via Householder QR.
///
/// `design` must already contain the intercept column when one is wanted.
/// `names` labels the design columns (used in error messages and lookups).
pub fn ols_fit(design: &DMatrix<f64>, response: &DVector<f64>, names: &[String]) -> Result<LinearFit> {
    let (n, k) = design.shape();
    if response.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, response has {}", response.len())));
    }
    if names.len() != k {
        return Err(Error::Dimension(format!("{k} design columns but {} names", names.len())));
    }
    if n <= k {
        return Err(Error::insufficient("observations for least squares (n > k)", k + 1, n));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(j) = (0..k).find(|&j| !(r[(j, j)].abs() > RANK_TOLERANCE * max_diag)) {
        return Err(Error::Collinear { column: names[j].clone() });
    }
    let qty = qr.q().tr_mul(response);
    let coefficients =
        r.solve_upper_triangular(&qty).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let residuals = response - design * &coefficients;
    let dof = n - k;
    let residual_variance = residuals.norm_squared() / dof as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numerical("triangular inverse failed".into()))?;
    let mut covariance = &r_inv * r_inv.transpose() * residual_variance;
    // Symmetrize away rounding asymmetry.
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }
    Ok(LinearFit { coefficients, covariance, residual_variance, dof, names: names.to_vec(), residuals })
}

/// Normal-theory interval and p-value for a point estimate with known se.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p: f64,
}

impl Interval {
    pub fn normal(estimate: f64, se: f64, level: f64) -> Interval {
        let z = normal_quantile(0.5 + level / 2.0);
        let p = if se > 0.0 {
            2.0 * standard_normal().cdf(-(estimate / se).abs())
        } else if estimate == 0.0 {
            1.0
        } else {
            0.0
        };
        Interval { estimate, se, ci_lo: estimate - z * se, ci_hi: estimate + z * se, p }
    }

    pub fn zero() -> Interval {
        Interval { estimate: 0.0, se: 0.0, ci_lo: 0.0, ci_hi: 0.0, p: 1.0 }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

pub fn normal_quantile(prob: f64) -> f64 {
    standard_normal().inverse_cdf(prob)
}

/// First-order delta-method interval for the product `a·b` of two estimates
/// from independent fits: `se² = b²·se_a² + a²·se_b²`.
pub fn delta_product_interval(a: f64, se_a: f64, b: f64, se_b: f64, level: f64) -> Result<Interval> {
    if !(se_a >= 0.0 && se_b >= 0.0) {
        return Err(Error::Domain(format!("standard errors must be nonnegative ({se_a}, {se_b})")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("interval level {level} outside (0, 1)")));
    }
    let se = (b * b * se_a * se_a + a * a * se_b * se_b).sqrt();
    Ok(Interval::normal(a * b, se, level))
}

/// Benjamini–Hochberg step-up adjusted p-values (q-values), in input order.
pub fn bh_adjust(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {bad} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(pvalues[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("v{j}")).collect()
    }

    #[test]
    fn exact_fit() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let design = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let y = DVector::from_iterator(10, x.iter().map(|v| 2.0 * v));
        let fit = ols_fit(&design, &y, &names(2)).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.residual_variance < 1e-24);
        assert_eq!(fit.dof, 8);
    }

    #[test]
    fn constant_response_has_zero_slope() {
        let design = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { (i * i) as f64 });
        let y = DVector::from_element(6, 1.0);
        let fit = ols_fit(&design, &y, &names(2)).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let design = DMatrix::from_fn(50, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
        let y = DVector::from_fn(50, |_, _| rng.random::<f64>());
        let fit = ols_fit(&design, &y, &names(3)).unwrap();
        // Normal-equations oracle: X'r = 0.
        let xtr = design.tr_mul(&fit.residuals);
        assert!(xtr.amax() < 1e-8, "{xtr}");
        // Covariance symmetric PSD.
        let eig = fit.covariance.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn collinear_column_is_named() {
        let design = DMatrix::from_fn(8, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 3.0 * i as f64 - 1.0,
        });
        let y = DVector::from_fn(8, |i, _| (i % 3) as f64);
        match ols_fit(&design, &y, &names(3)).unwrap_err() {
            Error::Collinear { column } => assert_eq!(column, "v2"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let design = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(matches!(ols_fit(&design, &y, &names(2)), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn delta_examples() {
        let zero = delta_product_interval(0.0, 0.0, 3.0, 0.0, 0.95).unwrap();
        assert_eq!(zero.se, 0.0);
        assert_eq!(zero.p, 1.0);
        let d = delta_product_interval(1.0, 0.1, 2.0, 0.2, 0.95).unwrap();
        assert!((d.se - 0.08f64.sqrt()).abs() < 1e-15);
        assert!((d.ci_hi - 2.0 - 1.959963984540054 * d.se).abs() < 1e-9);
        assert!(delta_product_interval(1.0, -0.1, 2.0, 0.2, 0.95).is_err());
        assert!(delta_product_interval(1.0, 0.1, 2.0, 0.2, 1.0).is_err());
    }

    #[test]
    fn bh_examples() {
        assert_eq!(
            bh_adjust(&[0.01, 0.02, 0.03]).unwrap().iter().map(|q| (q * 1e12).round() / 1e12).collect::<Vec<_>>(),
            vec![0.03; 3]
        );
        assert_eq!(bh_adjust(&[0.2]).unwrap(), vec![0.2]);
        assert_eq!(bh_adjust(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0; 3]);
        assert!(bh_adjust(&[0.5, 1.2]).is_err());
        // Textbook example with unsorted input.
        let q = bh_adjust(&[0.04, 0.001, 0.03, 0.5]).unwrap();
        let expected = [0.04 * 4.0 / 3.0, 0.004, 0.04 * 4.0 / 3.0, 0.5];
        for (a, b) in q.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn bh_monotone_and_dominates(ps in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let q = bh_adjust(&ps).unwrap();
            let mut order: Vec<usize> = (0..ps.len()).collect();
            order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
            for w in order.windows(2) {
                prop_assert!(q[w[0]] <= q[w[1]] + 1e-15);
            }
            for (qi, pi) in q.iter().zip(&ps) {
                prop_assert!(*qi >= *pi - 1e-15 && *qi <= 1.0);
            }
        }

        #[test]
        fn delta_symmetric(a in -5.0f64..5.0, sa in 0.0f64..2.0, b in -5.0f64..5.0, sb in 0.0f64..2.0) {
            let x = delta_product_interval(a, sa, b, sb, 0.95).unwrap();
            let y = delta_product_interval(b, sb, a, sa, 0.95).unwrap();
            prop_assert!((x.se - y.se).abs() <= 1e-12 * (1.0 + x.se));
            prop_assert!((x.estimate - y.estimate).abs() <= 1e-12);
        }

        #[test]
        fn ols_scale_equivariance(seed in 0u64..1000, c in prop_oneof![0.01f64..0.5, 2.0f64..50.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let design = DMatrix::from_fn(30, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
            let y = DVector::from_fn(30, |_, _| rng.random::<f64>());
            let fit = ols_fit(&design, &y, &names(3)).unwrap();
            let mut scaled = design.clone();
            scaled.column_mut(2).scale_mut(c);
            let fit2 = ols_fit(&scaled, &y, &names(3)).unwrap();
            prop_assert!((fit2.coefficients[2] * c - fit.coefficients[2]).abs() < 1e-10);
            let diff = (fit.fitted(&design) - fit2.fitted(&scaled)).amax();
            prop_assert!(diff < 1e-10);
        }
    }
}
