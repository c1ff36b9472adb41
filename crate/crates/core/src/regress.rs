//! Response-curve regression: Taylor fits in the per-bin power, weighted
//! total least squares for the linear response, conversion of slopes into
//! quantum efficiencies, and the polarization (cos 4φ) fit of efficiencies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{polynomial_design, polynomial_slope, weighted_least_squares};

/// Relative convergence target of the iterative fits.
pub const WTLS_TOL: f64 = 1e-12;
pub const WTLS_MAX_ITER: usize = 100;
/// Default relative uncertainty of the reference power meter.
pub const POWER_REL_ERR: f64 = 0.05;

/// A value with its one-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    /// Whether `target` lies within `k` standard deviations.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.sigma
    }
}

/// One measured point of a response curve. Powers are in nW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponsePoint {
    pub power: f64,
    pub power_err: f64,
    pub gamma: f64,
    pub gamma_err: f64,
    pub order: usize,
    /// Negative response caused by sampling noise.
    #[serde(default)]
    pub flagged: bool,
}

/// Response values of one detector mode at one polarization setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub mode: String,
    /// Half-wave-plate angle in degrees.
    pub angle_deg: f64,
    pub bins: usize,
    pub points: Vec<ResponsePoint>,
}

impl ResponseCurve {
    /// Builds a curve with points sorted by power.
    pub fn new(mode: impl Into<String>, angle_deg: f64, bins: usize, mut points: Vec<ResponsePoint>) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("curve needs at least one bin"));
        }
        for p in &points {
            if !(p.power >= 0.0) || !p.gamma.is_finite() || !p.gamma_err.is_finite() || !(p.power_err >= 0.0) {
                return Err(invalid(format!("invalid response point {p:?}")));
            }
        }
        points.sort_by(|a, b| a.power.total_cmp(&b.power));
        Ok(Self {
            mode: mode.into(),
            angle_deg,
            bins,
            points,
        })
    }

    /// Per-bin powers `P/N`, their errors, responses, and response errors.
    pub fn columns(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.bins as f64;
        let x = self.points.iter().map(|p| p.power / n).collect();
        let sx = self.points.iter().map(|p| p.power_err / n).collect();
        let y = self.points.iter().map(|p| p.gamma).collect();
        let sy = self.points.iter().map(|p| p.gamma_err).collect();
        (x, sx, y, sy)
    }

    pub fn flagged_indices(&self) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.flagged)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mean photon number `χ P`.
pub fn power_to_photons(power_nw: f64, chi_per_nw: f64) -> Result<f64> {
    if !(power_nw >= 0.0) {
        return Err(invalid(format!("power {power_nw} must be >= 0")));
    }
    if !(chi_per_nw > 0.0) {
        return Err(invalid(format!("conversion factor {chi_per_nw} must be > 0")));
    }
    Ok(chi_per_nw * power_nw)
}

/// Polynomial expansion of the response in `P/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

/// Ratios of the quadratic and cubic coefficients to the linear one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityRatios {
    pub quadratic: Estimate,
    pub cubic: Estimate,
}

impl TaylorFit {
    pub fn coefficient(&self, t: usize) -> Estimate {
        Estimate::new(self.coefficients[t], self.std_errors[t])
    }

    /// Nonlinearity ratios with errors propagated through the full covariance.
    pub fn ratios(&self) -> Result<NonlinearityRatios> {
        let (r2, r3) = nonlinearity_ratios(&self.coefficients)?;
        let c1 = self.coefficients[1];
        let ratio_sigma = |t: usize| {
            let ct = self.coefficients[t];
            let (j1, jt) = (-ct / (c1 * c1), 1.0 / c1);
            let cov = &self.covariance;
            (j1 * j1 * cov[1][1] + jt * jt * cov[t][t] + 2.0 * j1 * jt * cov[1][t])
                .max(0.0)
                .sqrt()
        };
        Ok(NonlinearityRatios {
            quadratic: Estimate::new(r2, ratio_sigma(2)),
            cubic: Estimate::new(r3, ratio_sigma(3)),
        })
    }
}

fn effective_weights(sy: &[f64], sx: &[f64], slopes: Option<&[f64]>) -> Result<Vec<f64>> {
    let var: Vec<f64> = sy
        .iter()
        .zip(sx)
        .enumerate()
        .map(|(i, (sy, sx))| {
            let d = slopes.map_or(0.0, |s| s[i]);
            sy * sy + d * d * sx * sx
        })
        .collect();
    if var.iter().all(|v| *v == 0.0) {
        return Ok(vec![1.0; var.len()]);
    }
    if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("point with zero uncertainty among uncertain points"));
    }
    Ok(var.iter().map(|v| 1.0 / v).collect())
}

/// Weighted polynomial least squares of `Γ` against `P/N` up to `order`.
///
/// Weights use the effective variance `σ_Γ² + (dΓ/dx)² σ_x²`, refined with
/// the current fit until the coefficients settle; with zero power errors
/// this is the plain `1/σ_Γ²` weighting. If every point is exact the fit is
/// unweighted.
pub fn taylor_fit(curve: &ResponseCurve, order: usize) -> Result<TaylorFit> {
    if order > 3 {
        return Err(invalid(format!("Taylor order {order} above 3")));
    }
    let (x, sx, y, sy) = curve.columns();
    if x.len() < order + 1 {
        return Err(Error::InsufficientPoints {
            needed: order + 1,
            got: x.len(),
        });
    }
    let design = polynomial_design(&x, order);
    let has_x_err = sx.iter().any(|s| *s > 0.0);

    let mut weights = if sy.iter().all(|s| *s > 0.0) || sy.iter().all(|s| *s == 0.0) {
        effective_weights(&sy, &sx, None)?
    } else {
        vec![1.0; x.len()]
    };
    let mut fit = weighted_least_squares(&design, &y, &weights)?;
    let mut iterations = 1;
    if has_x_err {
        while iterations < WTLS_MAX_ITER {
            let slopes: Vec<f64> = x.iter().map(|&xi| polynomial_slope(&fit.coefficients, xi)).collect();
            weights = effective_weights(&sy, &sx, Some(&slopes))?;
            let next = weighted_least_squares(&design, &y, &weights)?;
            iterations += 1;
            let settled = next
                .coefficients
                .iter()
                .zip(&fit.coefficients)
                .zip(next.std_errors())
                .all(|((a, b), s)| (a - b).abs() <= WTLS_TOL * (a.abs().max(s)));
            fit = next;
            if settled {
                break;
            }
        }
    }
    let p = order + 1;
    let mut covariance = vec![vec![0.0; p]; p];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = fit.covariance[(i, j)];
        }
    }
    Ok(TaylorFit {
        std_errors: fit.std_errors(),
        coefficients: fit.coefficients,
        covariance,
        chi2: fit.chi2,
        dof: x.len() - p,
        iterations,
    })
}

/// `(Γ̃⁽²⁾/Γ̃⁽¹⁾, Γ̃⁽³⁾/Γ̃⁽¹⁾)` of an order-3 expansion.
pub fn nonlinearity_ratios(coeffs: &[f64]) -> Result<(f64, f64)> {
    if coeffs.len() < 4 {
        return Err(invalid("nonlinearity ratios need an order-3 expansion"));
    }
    let c1 = coeffs[1];
    if c1 == 0.0 || !c1.is_finite() {
        return Err(Error::VanishingLinear);
    }
    Ok((coeffs[2] / c1, coeffs[3] / c1))
}

/// Straight-line fit with errors in both variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: Estimate,
    /// `None` for fits constrained through the origin.
    pub intercept: Option<Estimate>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl LineFit {
    pub fn reduced_chi2(&self) -> Option<f64> {
        (self.dof > 0).then(|| self.chi2 / self.dof as f64)
    }

    pub fn intercept_consistent_with_zero(&self, k: f64) -> bool {
        self.intercept.is_none_or(|b| b.value.abs() <= k * b.sigma)
    }
}

fn check_columns(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> Result<()> {
    let n = x.len();
    if y.len() != n || sx.len() != n || sy.len() != n {
        return Err(invalid("column lengths differ"));
    }
    if n == 0 {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    if x.iter().chain(y).chain(sx).chain(sy).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite input"));
    }
    if sx.iter().chain(sy).any(|s| *s < 0.0) {
        return Err(invalid("negative uncertainty"));
    }
    Ok(())
}

/// Errors-in-variables objective `Σ (y - a x)² / (σ_y² + a² σ_x²)`.
fn origin_objective(a: f64, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let r = y[i] - a * x[i];
            r * r / (sy[i] * sy[i] + a * a * sx[i] * sx[i])
        })
        .sum()
}

/// Analytic second derivative of [`origin_objective`].
fn origin_curvature(a: f64, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let r = y[i] - a * x[i];
            let (num, dnum, ddnum) = (r * r, -2.0 * x[i] * r, 2.0 * x[i] * x[i]);
            let vx = sx[i] * sx[i];
            let (den, dden, ddden) = (sy[i] * sy[i] + a * a * vx, 2.0 * a * vx, 2.0 * vx);
            (ddnum * den - num * ddden) / (den * den) - 2.0 * dden * (dnum * den - num * dden) / (den * den * den)
        })
        .sum()
}

/// Weighted total least squares for `y = a x`.
///
/// Iterates York's fixed point for a line through the origin until
/// `|Δa/a| < 1e-12`; `σ_a² = 2 / S''(a)` from the curvature of the objective.
/// When no point carries any uncertainty the fit reduces to ordinary least
/// squares with the residual scatter as error.
pub fn wtls_through_origin(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> Result<LineFit> {
    check_columns(x, y, sx, sy)?;
    let n = x.len();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return Err(invalid("all abscissae are zero"));
    }
    let mut a = x.iter().zip(y).map(|(x, y)| x * y).sum::<f64>() / sxx;

    if sx.iter().chain(sy).all(|s| *s == 0.0) {
        let chi2: f64 = x.iter().zip(y).map(|(x, y)| (y - a * x).powi(2)).sum();
        let sigma = if n > 1 {
            (chi2 / (n - 1) as f64 / sxx).sqrt()
        } else {
            0.0
        };
        return Ok(LineFit {
            slope: Estimate::new(a, sigma),
            intercept: None,
            chi2,
            dof: n - 1,
            iterations: 0,
        });
    }

    let mut iterations = 0;
    loop {
        if iterations == WTLS_MAX_ITER {
            return Err(Error::NoConvergence(WTLS_MAX_ITER));
        }
        iterations += 1;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let (vx, vy) = (sx[i] * sx[i], sy[i] * sy[i]);
            let d = vy + a * a * vx;
            if !(d > 0.0) {
                return Err(invalid(format!("point {i} has zero effective variance")));
            }
            let w = 1.0 / d;
            let beta = w * (x[i] * vy + a * y[i] * vx);
            num += w * beta * y[i];
            den += w * beta * x[i];
        }
        let next = num / den;
        let done = (next - a).abs() <= WTLS_TOL * next.abs().max(f64::MIN_POSITIVE);
        a = next;
        if done {
            break;
        }
    }
    let curvature = origin_curvature(a, x, y, sx, sy);
    if !(curvature > 0.0) {
        return Err(Error::NoConvergence(iterations));
    }
    Ok(LineFit {
        slope: Estimate::new(a, (2.0 / curvature).sqrt()),
        intercept: None,
        chi2: origin_objective(a, x, y, sx, sy),
        dof: n - 1,
        iterations,
    })
}

/// Through-origin WTLS fit of `Γ` against `P/N`; the slope is `η̃`.
pub fn wtls_line_through_origin(curve: &ResponseCurve) -> Result<LineFit> {
    if curve.points.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let (x, sx, y, sy) = curve.columns();
    wtls_through_origin(&x, &y, &sx, &sy)
}

/// York's weighted total least squares for `y = a x + b`, with York's
/// parameter standard errors.
pub fn wtls_free(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> Result<LineFit> {
    check_columns(x, y, sx, sy)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    let all_exact = sx.iter().chain(sy).all(|s| *s == 0.0);
    let (sx, sy): (Vec<f64>, Vec<f64>) = if all_exact {
        (vec![0.0; n], vec![1.0; n])
    } else {
        (sx.to_vec(), sy.to_vec())
    };

    // ordinary least squares start
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::RankDeficient("all abscissae coincide".into()));
    }
    let mut b = x.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;

    let mut iterations = 0;
    let (mut w, mut beta, mut xbar, mut ybar);
    loop {
        if iterations == WTLS_MAX_ITER {
            return Err(Error::NoConvergence(WTLS_MAX_ITER));
        }
        iterations += 1;
        w = Vec::with_capacity(n);
        for i in 0..n {
            let d = sy[i] * sy[i] + b * b * sx[i] * sx[i];
            if !(d > 0.0) {
                return Err(invalid(format!("point {i} has zero effective variance")));
            }
            w.push(1.0 / d);
        }
        let sw: f64 = w.iter().sum();
        xbar = (0..n).map(|i| w[i] * x[i]).sum::<f64>() / sw;
        ybar = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / sw;
        beta = (0..n)
            .map(|i| w[i] * ((x[i] - xbar) * sy[i] * sy[i] + b * (y[i] - ybar) * sx[i] * sx[i]))
            .collect::<Vec<_>>();
        let num: f64 = (0..n).map(|i| w[i] * beta[i] * (y[i] - ybar)).sum();
        let den: f64 = (0..n).map(|i| w[i] * beta[i] * (x[i] - xbar)).sum();
        let next = num / den;
        let done = (next - b).abs() <= WTLS_TOL * next.abs().max(f64::MIN_POSITIVE);
        b = next;
        if done {
            break;
        }
    }
    let a = ybar - b * xbar;
    let sw: f64 = w.iter().sum();
    let adj: Vec<f64> = (0..n).map(|i| xbar + beta[i]).collect();
    let adj_mean = (0..n).map(|i| w[i] * adj[i]).sum::<f64>() / sw;
    let su: f64 = (0..n).map(|i| w[i] * (adj[i] - adj_mean).powi(2)).sum();
    let mut var_b = 1.0 / su;
    let mut var_a = 1.0 / sw + adj_mean * adj_mean * var_b;
    let chi2: f64 = (0..n).map(|i| w[i] * (y[i] - b * x[i] - a).powi(2)).sum();
    if all_exact && n > 2 {
        let s2 = chi2 / (n - 2) as f64;
        var_a *= s2;
        var_b *= s2;
    } else if all_exact {
        var_a = 0.0;
        var_b = 0.0;
    }
    Ok(LineFit {
        slope: Estimate::new(b, var_b.sqrt()),
        intercept: Some(Estimate::new(a, var_a.sqrt())),
        chi2,
        dof: n - 2,
        iterations,
    })
}

/// Free-intercept WTLS fit of `Γ` against `P/N`; the intercept is `ν̃`.
pub fn wtls_line_free(curve: &ResponseCurve) -> Result<LineFit> {
    let (x, sx, y, sy) = curve.columns();
    wtls_free(&x, &y, &sx, &sy)
}

/// `η = η̃ / χ` with first-order propagation of both uncertainties.
pub fn efficiency_from_slope(eta_tilde: f64, sigma_eta_tilde: f64, chi: f64, sigma_chi: f64) -> Result<Estimate> {
    if !(chi > 0.0) {
        return Err(invalid(format!("conversion factor {chi} must be > 0")));
    }
    let eta = eta_tilde / chi;
    let sigma = ((sigma_eta_tilde / chi).powi(2) + (eta_tilde * sigma_chi / (chi * chi)).powi(2)).sqrt();
    Ok(Estimate::new(eta, sigma))
}

/// Efficiency measured at one half-wave-plate angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePoint {
    pub angle_deg: f64,
    pub eta: f64,
    pub sigma: f64,
}

/// Fit of `η(φ) = (η_max - η_min)/2 · cos 4(φ + φ₀) + (η_max + η_min)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationFit {
    pub eta_max: Estimate,
    pub eta_min: Estimate,
    /// Offset angle in degrees, folded into (-45°, 45°].
    pub phi0_deg: f64,
    /// `None` when the amplitude vanishes and the offset is undetermined.
    pub phi0_sigma_deg: Option<f64>,
    /// Zero modulation amplitude; `phi0_deg` is then set to 0.
    pub degenerate: bool,
    /// Covariance of the linearized parameters `(A, B, D)` of
    /// `A cos 4φ + B sin 4φ + D`.
    pub covariance: [[f64; 3]; 3],
    pub chi2: f64,
    pub dof: usize,
}

impl PolarizationFit {
    pub fn predict(&self, angle_deg: f64) -> f64 {
        let amp = (self.eta_max.value - self.eta_min.value) / 2.0;
        let mid = (self.eta_max.value + self.eta_min.value) / 2.0;
        amp * (4.0 * (angle_deg + self.phi0_deg).to_radians()).cos() + mid
    }
}

/// Folds an angle (degrees) into (-45°, 45°].
pub fn fold_phi0(phi: f64) -> f64 {
    let r = phi.rem_euclid(90.0);
    if r > 45.0 {
        r - 90.0
    } else {
        r
    }
}

/// Linearized cosine fit of efficiency against polarization angle.
///
/// Points with positive `sigma` are weighted by `1/σ²`; if every sigma is
/// zero the fit is unweighted and the covariance is scaled by the residual
/// variance.
pub fn cosine_efficiency_fit(points: &[AnglePoint]) -> Result<PolarizationFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.angle_deg.rem_euclid(90.0)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() > 1 && (distinct[0] + 90.0 - distinct[distinct.len() - 1]).abs() < 1e-9 {
        distinct.pop();
    }
    if distinct.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} distinct angles modulo 90°",
            distinct.len()
        )));
    }
    let unweighted = points.iter().all(|p| p.sigma == 0.0);
    if !unweighted && points.iter().any(|p| !(p.sigma > 0.0)) {
        return Err(invalid("mixture of zero and nonzero efficiency errors"));
    }
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let t = 4.0 * points[i].angle_deg.to_radians();
        match j {
            0 => t.cos(),
            1 => t.sin(),
            _ => 1.0,
        }
    });
    let y: Vec<f64> = points.iter().map(|p| p.eta).collect();
    let w: Vec<f64> = points
        .iter()
        .map(|p| if unweighted { 1.0 } else { 1.0 / (p.sigma * p.sigma) })
        .collect();
    let fit = weighted_least_squares(&design, &y, &w)?;
    let mut cov = [[0.0; 3]; 3];
    let s2 = if unweighted {
        if n > 3 {
            fit.chi2 / (n - 3) as f64
        } else {
            0.0
        }
    } else {
        1.0
    };
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = fit.covariance[(i, j)] * s2;
        }
    }
    let (a, b, d) = (fit.coefficients[0], fit.coefficients[1], fit.coefficients[2]);
    let r = a.hypot(b);
    let quad = |j: [f64; 3]| -> f64 {
        let mut s = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                s += j[p] * cov[p][q] * j[q];
            }
        }
        s.max(0.0).sqrt()
    };
    let degenerate = r <= 1e-10 * d.abs().max(f64::MIN_POSITIVE);
    let (eta_max, eta_min, phi0, phi0_sigma) = if degenerate {
        let sd = quad([0.0, 0.0, 1.0]);
        (Estimate::new(d, sd), Estimate::new(d, sd), 0.0, None)
    } else {
        let (ua, ub) = (a / r, b / r);
        let phi0 = fold_phi0(-(b.atan2(a)).to_degrees() / 4.0);
        let dtheta = [-b / (r * r), a / (r * r), 0.0];
        (
            Estimate::new(d + r, quad([ua, ub, 1.0])),
            Estimate::new(d - r, quad([-ua, -ub, 1.0])),
            phi0,
            Some(quad(dtheta).to_degrees() / 4.0),
        )
    };
    Ok(PolarizationFit {
        eta_max,
        eta_min,
        phi0_deg: phi0,
        phi0_sigma_deg: phi0_sigma,
        degenerate,
        covariance: cov,
        chi2: fit.chi2,
        dof: n - 3,
    })
}
