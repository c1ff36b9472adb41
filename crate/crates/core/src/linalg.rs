//! Small weighted linear least-squares solver shared by the fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a design counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    /// Covariance `(Xᵀ W X)⁻¹` in the original (unscaled) parameters.
    pub covariance: DMatrix<f64>,
    /// Weighted residual sum of squares.
    pub chi2: f64,
    pub residuals: Vec<f64>,
}

impl LinearFit {
    pub fn std_error(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len()).map(|i| self.std_error(i)).collect()
    }
}

/// Minimizes `Σ w_i (y_i - Σ_j X_ij c_j)²`.
///
/// Columns are scaled to unit norm before the SVD so polynomial designs in
/// large abscissae stay well conditioned.
pub fn weighted_least_squares(design: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> Result<LinearFit> {
    let (n, p) = design.shape();
    assert_eq!(n, y.len());
    assert_eq!(n, weights.len());
    if n < p {
        return Err(Error::InsufficientPoints { needed: p, got: n });
    }

    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = design.clone();
    for (i, s) in sw.iter().enumerate() {
        a.row_mut(i).scale_mut(*s);
    }
    let mut scale = vec![1.0; p];
    for (j, sc) in scale.iter_mut().enumerate() {
        let norm = a.column(j).norm();
        if norm > 0.0 {
            *sc = norm;
            a.column_mut(j).unscale_mut(norm);
        }
    }
    let b = DVector::from_iterator(n, y.iter().zip(&sw).map(|(y, s)| y * s));

    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::RankDeficient(format!(
            "singular values span [{smin:e}, {smax:e}]"
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let inv_s = svd.singular_values.map(|s| 1.0 / s);
    let utb = u.transpose() * &b;
    let scaled_coef = v_t.transpose() * utb.component_mul(&inv_s);
    let v = v_t.transpose();
    let v_scaled = DMatrix::from_fn(p, p, |i, j| v[(i, j)] * inv_s[j]);
    let scaled_cov = &v_scaled * v_scaled.transpose();

    let coefficients: Vec<f64> = (0..p).map(|j| scaled_coef[j] / scale[j]).collect();
    let covariance = DMatrix::from_fn(p, p, |i, j| scaled_cov[(i, j)] / (scale[i] * scale[j]));

    let mut chi2 = 0.0;
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let fit: f64 = (0..p).map(|j| design[(i, j)] * coefficients[j]).sum();
            let r = y[i] - fit;
            chi2 += weights[i] * r * r;
            r
        })
        .collect();

    Ok(LinearFit {
        coefficients,
        covariance,
        chi2,
        residuals,
    })
}

/// Vandermonde design `[1, x, x², ...]` of the given degree.
pub fn polynomial_design(xs: &[f64], degree: usize) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), degree + 1, |i, j| xs[i].powi(j as i32))
}

pub fn polynomial_value(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

pub fn polynomial_slope(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (j, c)| acc * x + j as f64 * c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_cubic() {
        let xs: Vec<f64> = (0..20).map(|i| 3.0 * i as f64).collect();
        let truth = [0.5, -2.0, 0.03, 1e-4];
        let ys: Vec<f64> = xs.iter().map(|&x| polynomial_value(&truth, x)).collect();
        let fit = weighted_least_squares(&polynomial_design(&xs, 3), &ys, &vec![1.0; xs.len()]).unwrap();
        for (c, t) in fit.coefficients.iter().zip(truth) {
            assert!((c - t).abs() < 1e-9 * t.abs().max(1.0));
        }
        assert!(fit.chi2 < 1e-12);
    }

    #[test]
    fn straight_line_covariance() {
        // unit weights, x = 0,1,2 -> (XᵀX)⁻¹ = [[5/6, -1/2], [-1/2, 1/2]]
        let xs = [0.0, 1.0, 2.0];
        let fit = weighted_least_squares(&polynomial_design(&xs, 1), &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        assert!((fit.covariance[(0, 0)] - 5.0 / 6.0).abs() < 1e-12);
        assert!((fit.covariance[(0, 1)] + 0.5).abs() < 1e-12);
        assert!((fit.covariance[(1, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let xs = [2.0, 2.0, 2.0];
        let err = weighted_least_squares(&polynomial_design(&xs, 1), &[1.0; 3], &[1.0; 3]);
        assert!(matches!(err, Err(Error::RankDeficient(_))));
        let err = weighted_least_squares(&polynomial_design(&xs[..1], 1), &[1.0], &[1.0]);
        assert!(matches!(err, Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn slope_of_polynomial() {
        let c = [1.0, 2.0, 3.0, 4.0];
        assert!((polynomial_slope(&c, 2.0) - (2.0 + 12.0 + 48.0)).abs() < 1e-12);
    }
}
