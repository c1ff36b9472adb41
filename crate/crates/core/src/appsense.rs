//! Applications of a calibrated detector: sensing the transmittance
//! statistics of a fluctuating loss channel, balanced homodyne click
//! detection, and click quasiprobabilities from unbalanced homodyning.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::click_model::{
    binomial_pmf, coherent_click_distribution, joint_coherent_click_distribution, linear_gamma, sample_joint_events,
    CoherentInput, DetectorModel, JointClickHistogram, JointDistribution,
};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::linalg::{polynomial_design, weighted_least_squares};
use crate::moments::sampling_kernel;
use crate::povm::{click_distribution_for_photon_statistics, displaced_fock_number_distribution, PovmDiagonal};
use crate::regress::Estimate;

/// Absolute accuracy requested from numerical integration.
pub const QUADRATURE_TOL: f64 = 1e-12;
/// Allowed normalization defect of a transmittance distribution.
pub const NORMALIZATION_TOL: f64 = 1e-10;
/// Default degree of the extrapolation polynomial in `|α|²`.
pub const DEFAULT_EXPANSION_DEGREE: usize = 4;

/// Probability distribution of the channel's intensity transmittance on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransmittanceModel {
    Delta {
        eta0: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Log-normal in `η`, truncated to (0, 1] and renormalized.
    TruncatedLogNormal {
        mu: f64,
        sigma: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
    /// Piecewise-linear density through the given nodes.
    Tabulated {
        eta: Vec<f64>,
        density: Vec<f64>,
    },
}

fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    quadrature::double_exponential::integrate(f, a, b, QUADRATURE_TOL).integral
}

impl TransmittanceModel {
    pub fn validate(&self) -> Result<()> {
        use TransmittanceModel::*;
        let ok = match self {
            Delta { eta0 } => (0.0..=1.0).contains(eta0),
            Uniform { lo, hi } => 0.0 <= *lo && lo < hi && *hi <= 1.0,
            TruncatedLogNormal { mu, sigma } => mu.is_finite() && *sigma > 0.0 && sigma.is_finite(),
            Beta { a, b } => *a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite(),
            Tabulated { eta, density } => {
                eta.len() >= 2
                    && eta.len() == density.len()
                    && eta.windows(2).all(|w| w[0] < w[1])
                    && eta[0] >= 0.0
                    && eta[eta.len() - 1] <= 1.0
                    && density.iter().all(|d| *d >= 0.0 && d.is_finite())
            }
        };
        if !ok {
            return Err(invalid(format!("invalid transmittance model {self:?}")));
        }
        if let Tabulated { .. } = self {
            let z = self.raw_mass();
            if (z - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Unnormalized { sum: z });
            }
        }
        Ok(())
    }

    /// Unnormalized density of the continuous parametric kinds.
    fn shape(&self, eta: f64) -> f64 {
        match self {
            TransmittanceModel::TruncatedLogNormal { mu, sigma } => {
                if eta <= 0.0 {
                    return 0.0;
                }
                let z = (eta.ln() - mu) / sigma;
                (-0.5 * z * z).exp() / (eta * sigma * (2.0 * PI).sqrt())
            }
            TransmittanceModel::Beta { a, b } => {
                if eta <= 0.0 || eta >= 1.0 {
                    return 0.0;
                }
                ((a - 1.0) * eta.ln() + (b - 1.0) * (-eta).ln_1p()).exp()
            }
            _ => unreachable!("shape only defined for parametric continuous kinds"),
        }
    }

    /// Integral of the density as given (tabulated kinds are not rescaled).
    fn raw_mass(&self) -> f64 {
        match self {
            TransmittanceModel::Delta { .. } | TransmittanceModel::Uniform { .. } => 1.0,
            TransmittanceModel::Tabulated { eta, density } => eta
                .windows(2)
                .zip(density.windows(2))
                .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
                .sum(),
            _ => integrate(|x| self.shape(x), 0.0, 1.0),
        }
    }

    /// Integral of the normalized density over [0, 1], by quadrature for continuous kinds.
    pub fn normalization(&self) -> f64 {
        match self {
            TransmittanceModel::TruncatedLogNormal { .. } | TransmittanceModel::Beta { .. } => {
                let z = self.raw_mass();
                integrate(|x| self.shape(x) / z, 0.0, 1.0)
            }
            TransmittanceModel::Uniform { lo, hi } => integrate(|_| 1.0 / (hi - lo), *lo, *hi),
            _ => self.raw_mass(),
        }
    }

    /// `E[g(η)]` under the model.
    pub fn expectation<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        self.validate()?;
        Ok(match self {
            TransmittanceModel::Delta { eta0 } => g(*eta0),
            TransmittanceModel::Uniform { lo, hi } => integrate(&g, *lo, *hi) / (hi - lo),
            TransmittanceModel::Tabulated { eta, density } => eta
                .windows(2)
                .zip(density.windows(2))
                .map(|(x, d)| {
                    let slope = (d[1] - d[0]) / (x[1] - x[0]);
                    integrate(|t| (d[0] + slope * (t - x[0])) * g(t), x[0], x[1])
                })
                .sum(),
            _ => {
                let z = self.raw_mass();
                integrate(|x| self.shape(x) * g(x), 0.0, 1.0) / z
            }
        })
    }

    /// Raw moment `<η^j>`.
    pub fn raw_moment(&self, j: i32) -> Result<f64> {
        match self {
            TransmittanceModel::Delta { eta0 } => Ok(eta0.powi(j)),
            _ => self.expectation(|x| x.powi(j)),
        }
    }
}

/// Moment `∫ P(η) exp(-η η_det |α|²/N) dη` seen through a turbulent channel.
pub fn turbulence_moment(alpha_sq: f64, eta_det: f64, bins: usize, model: &TransmittanceModel) -> Result<f64> {
    check_detector(eta_det, bins)?;
    if !(alpha_sq >= 0.0) || !alpha_sq.is_finite() {
        return Err(invalid(format!("|alpha|^2 = {alpha_sq} must be finite and >= 0")));
    }
    model.validate()?;
    let c = eta_det * alpha_sq / bins as f64;
    match model {
        TransmittanceModel::Delta { eta0 } => Ok((-eta0 * c).exp()),
        TransmittanceModel::Uniform { lo, hi } => {
            if c == 0.0 {
                Ok(1.0)
            } else {
                // (e^{-c lo} - e^{-c hi}) / (c (hi - lo)) without cancellation
                Ok((-c * lo).exp() * -(-c * (hi - lo)).exp_m1() / (c * (hi - lo)))
            }
        }
        _ => model.expectation(|x| (-x * c).exp()),
    }
}

/// Click distribution of a coherent probe after the turbulent channel.
///
/// The per-`k` integrals are rescaled to unit sum; the integrand sums to one
/// pointwise, so the rescaling removes only quadrature error.
pub fn turbulent_click_distribution(
    alpha_sq: f64,
    eta_det: f64,
    bins: usize,
    model: &TransmittanceModel,
) -> Result<Vec<f64>> {
    check_detector(eta_det, bins)?;
    let c = eta_det * alpha_sq / bins as f64;
    let mut dist = (0..=bins)
        .map(|k| {
            model.expectation(|x| {
                let p = (-x * c).exp();
                binomial_pmf(bins, p, -(-x * c).exp_m1())[k]
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Unnormalized { sum: total });
    }
    dist.iter_mut().for_each(|v| *v /= total);
    Ok(dist)
}

fn check_detector(eta_det: f64, bins: usize) -> Result<()> {
    if !(eta_det > 0.0 && eta_det <= 1.0) {
        return Err(invalid(format!("detector efficiency {eta_det} outside (0, 1]")));
    }
    if bins == 0 {
        return Err(invalid("detector needs at least one bin"));
    }
    Ok(())
}

/// A measured moment at one probe intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingPoint {
    pub alpha_sq: f64,
    pub moment: f64,
    pub sigma: f64,
}

/// Transmittance moments recovered by extrapolating to `|α|² = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmittanceMoments {
    pub mean: Estimate,
    pub second: Estimate,
    pub variance: Estimate,
    pub mean_second_covariance: f64,
    /// Constant term of the fit, ideally 1.
    pub intercept: Estimate,
    /// Intercept more than 5σ away from 1.
    pub intercept_flag: bool,
    /// Variance below zero by more than 3σ.
    pub variance_flag: bool,
    pub degree: usize,
}

/// [`extract_transmittance_moments_with_degree`] at the default degree.
pub fn extract_transmittance_moments(
    points: &[SensingPoint],
    eta_det: f64,
    bins: usize,
) -> Result<TransmittanceMoments> {
    extract_transmittance_moments_with_degree(points, eta_det, bins, DEFAULT_EXPANSION_DEGREE)
}

/// Weighted polynomial fit `m(x) ≈ Σ a_j x^j` in `x = |α|²`, read out as
/// `<η> = -a₁ N/η_det` and `<η²> = 2 a₂ N²/η_det²`.
///
/// Terms above second order are fitted (not discarded) so that they do not
/// bias `a₁` and `a₂`; `degree = 2` gives the bare second-order expansion.
pub fn extract_transmittance_moments_with_degree(
    points: &[SensingPoint],
    eta_det: f64,
    bins: usize,
    degree: usize,
) -> Result<TransmittanceMoments> {
    check_detector(eta_det, bins)?;
    if degree < 2 {
        return Err(invalid("expansion degree must be at least 2"));
    }
    if points.len() < degree + 1 {
        return Err(Error::InsufficientPoints {
            needed: degree + 1,
            got: points.len(),
        });
    }
    let unweighted = points.iter().all(|p| p.sigma == 0.0);
    if !unweighted && points.iter().any(|p| !(p.sigma > 0.0)) {
        return Err(invalid("mixture of zero and nonzero moment errors"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.alpha_sq).collect();
    let y: Vec<f64> = points.iter().map(|p| p.moment).collect();
    let w: Vec<f64> = points
        .iter()
        .map(|p| if unweighted { 1.0 } else { 1.0 / (p.sigma * p.sigma) })
        .collect();
    let fit = weighted_least_squares(&polynomial_design(&x, degree), &y, &w)?;
    let dof = points.len() - degree - 1;
    let s2 = if unweighted {
        if dof > 0 {
            fit.chi2 / dof as f64
        } else {
            0.0
        }
    } else {
        1.0
    };
    let cov = |i: usize, j: usize| fit.covariance[(i, j)] * s2;
    let (a1, a2) = (fit.coefficients[1], fit.coefficients[2]);
    let k = bins as f64 / eta_det;
    let mean = Estimate::new(-a1 * k, k * cov(1, 1).sqrt());
    let second = Estimate::new(2.0 * a2 * k * k, 2.0 * k * k * cov(2, 2).sqrt());
    let mean_second_covariance = -2.0 * k * k * k * cov(1, 2);
    // var = 2 a₂ k² - a₁² k²
    let (j1, j2) = (-2.0 * a1 * k * k, 2.0 * k * k);
    let var_sigma = (j1 * j1 * cov(1, 1) + j2 * j2 * cov(2, 2) + 2.0 * j1 * j2 * cov(1, 2))
        .max(0.0)
        .sqrt();
    let variance = Estimate::new(second.value - mean.value * mean.value, var_sigma);
    let intercept = Estimate::new(fit.coefficients[0], cov(0, 0).sqrt());
    Ok(TransmittanceMoments {
        intercept_flag: (intercept.value - 1.0).abs() > 5.0 * intercept.sigma,
        variance_flag: variance.value < -3.0 * variance.sigma,
        mean,
        second,
        variance,
        mean_second_covariance,
        intercept,
        degree,
    })
}

/// Nonlinear quadrature `N (m_A - m_B)` from the first moments of both modes.
///
/// The error comes from the per-event spread of `N (K_A - K_B)`, so the
/// correlation between the modes is included.
pub fn quadrature_mean_distribution(dist: &JointDistribution, events: u64) -> Result<Estimate> {
    if dist.bins_a != dist.bins_b {
        return Err(invalid(format!(
            "quadrature needs equal bin counts, got {} and {}",
            dist.bins_a, dist.bins_b
        )));
    }
    let n = dist.bins_a;
    let nf = n as f64;
    let m_a = dist
        .marginal_a()
        .0
        .iter()
        .enumerate()
        .map(|(k, c)| sampling_kernel(n, k, 1) * c)
        .sum::<f64>();
    let m_b = dist
        .marginal_b()
        .0
        .iter()
        .enumerate()
        .map(|(k, c)| sampling_kernel(n, k, 1) * c)
        .sum::<f64>();
    let mean = nf * (m_a - m_b);
    let sigma = if events >= 2 {
        let term = |k_a: usize, k_b: usize| {
            let z = nf * (sampling_kernel(n, k_a, 1) - sampling_kernel(n, k_b, 1)) - mean;
            dist.get(k_a, k_b) * z * z
        };
        // paired (i, j) + (j, i) terms keep the sum invariant under mode exchange
        let mut acc = 0.0;
        for i in 0..=n {
            acc += term(i, i);
            for j in i + 1..=n {
                acc += term(i, j) + term(j, i);
            }
        }
        (acc / (events - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Estimate::new(mean, sigma))
}

pub fn quadrature_mean(joint: &JointClickHistogram) -> Result<Estimate> {
    quadrature_mean_distribution(&joint.frequencies()?, joint.total())
}

/// Output amplitudes `((s + L e^{iφ})/√2, (s - L e^{iφ})/√2)` of the 50:50 mixer.
pub fn homodyne_amplitudes(signal: Complex64, lo: Complex64, phase: f64) -> (Complex64, Complex64) {
    let l = lo * Complex64::from_polar(1.0, phase);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    ((signal + l) * r, (signal - l) * r)
}

/// Exact joint click statistics of balanced homodyning a coherent signal.
pub fn balanced_homodyne_distribution(
    signal: Complex64,
    lo: Complex64,
    phase: f64,
    det_a: &DetectorModel,
    det_b: &DetectorModel,
) -> Result<JointDistribution> {
    det_a.validate()?;
    det_b.validate()?;
    let (a, b) = homodyne_amplitudes(signal, lo, phase);
    let gamma_a = linear_gamma(&CoherentInput::horizontal(a.norm_sqr())?, det_a);
    let gamma_b = linear_gamma(&CoherentInput::horizontal(b.norm_sqr())?, det_b);
    joint_coherent_click_distribution(gamma_a, det_a.bins, gamma_b, det_b.bins)
}

/// Seeded joint histogram of a balanced homodyne click measurement.
pub fn balanced_homodyne_simulate(
    signal: Complex64,
    lo: Complex64,
    phase: f64,
    det_a: &DetectorModel,
    det_b: &DetectorModel,
    events: u64,
    seed: u64,
) -> Result<JointClickHistogram> {
    let dist = balanced_homodyne_distribution(signal, lo, phase, det_a, det_b)?;
    sample_joint_events(&dist, events, seed)
}

/// One evaluated point of the click quasiprobability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiprobPoint {
    pub alpha: Complex64,
    pub s: f64,
    pub value: f64,
}

/// `P_N(α; s) = 2/(π(1-s)) Σ_k [(η(1-s) - 2)/(η(1-s))]^k c_k`.
pub fn quasiprob_point(clicks: &[f64], eta_det: f64, s: f64, alpha: Complex64) -> Result<QuasiprobPoint> {
    if !(s < 1.0) {
        return Err(invalid(format!("ordering parameter s = {s} must be < 1")));
    }
    if !(eta_det > 0.0) {
        return Err(invalid(format!("detector efficiency {eta_det} must be > 0")));
    }
    let sum: f64 = clicks.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Unnormalized { sum });
    }
    let e = eta_det * (1.0 - s);
    let ratio = (e - 2.0) / e;
    let series = clicks.iter().rev().fold(0.0, |acc, c| acc * ratio + c);
    Ok(QuasiprobPoint {
        alpha,
        s,
        value: 2.0 / (PI * (1.0 - s)) * series,
    })
}

/// Signal state for a quasiprobability scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScanState {
    Coherent { re: f64, im: f64 },
    Fock { m: usize },
}

/// Rectangular grid of local-oscillator amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub re_min: f64,
    pub re_max: f64,
    pub re_steps: usize,
    pub im_min: f64,
    pub im_max: f64,
    pub im_steps: usize,
}

impl ScanGrid {
    pub fn square(half_width: f64, steps: usize) -> Self {
        Self {
            re_min: -half_width,
            re_max: half_width,
            re_steps: steps,
            im_min: -half_width,
            im_max: half_width,
            im_steps: steps,
        }
    }

    pub fn len(&self) -> usize {
        self.re_steps * self.im_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis(min: f64, max: f64, steps: usize, i: usize) -> f64 {
        if steps <= 1 {
            min
        } else {
            min + (max - min) * i as f64 / (steps - 1) as f64
        }
    }

    /// Amplitude at flat index `i` (real part major).
    pub fn point(&self, i: usize) -> Complex64 {
        let (ir, ii) = (i / self.im_steps, i % self.im_steps);
        Complex64::new(
            Self::axis(self.re_min, self.re_max, self.re_steps, ir),
            Self::axis(self.im_min, self.im_max, self.im_steps, ii),
        )
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.re_min, self.re_max, self.im_min, self.im_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.re_steps == 0 || self.im_steps == 0 {
            return Err(invalid(format!("invalid scan grid {self:?}")));
        }
        Ok(())
    }
}

/// Detector and ordering settings of a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub eta_det: f64,
    pub bins: usize,
    #[serde(default)]
    pub dark: f64,
    pub s: f64,
    pub n_max: usize,
}

/// Click statistics of the signal displaced by `-α`.
fn displaced_clicks(
    state: &ScanState,
    alpha: Complex64,
    settings: &ScanSettings,
    povm: Option<&PovmDiagonal>,
) -> Result<Vec<f64>> {
    match *state {
        ScanState::Coherent { re, im } => {
            let d = (Complex64::new(re, im) - alpha).norm_sqr();
            let gamma = settings.eta_det * d / settings.bins as f64 + settings.dark;
            Ok(coherent_click_distribution(gamma, settings.bins)?.0)
        }
        ScanState::Fock { m } => {
            let photons = displaced_fock_number_distribution(m, alpha.norm_sqr(), settings.n_max, 1e-12)?;
            click_distribution_for_photon_statistics(&photons, povm.expect("povm built for Fock scans"), 1e-12)
        }
    }
}

/// Evaluates the click quasiprobability on every grid point, in grid order.
pub fn quasiprob_scan(
    state: &ScanState,
    grid: &ScanGrid,
    settings: &ScanSettings,
    exec: Exec,
) -> Result<Vec<QuasiprobPoint>> {
    grid.validate()?;
    check_detector(settings.eta_det, settings.bins)?;
    let povm = match state {
        ScanState::Fock { .. } => Some(PovmDiagonal::new(
            settings.bins,
            settings.eta_det,
            settings.dark,
            settings.n_max,
        )?),
        ScanState::Coherent { .. } => None,
    };
    exec.map_indexed(grid.len(), |i| {
        let alpha = grid.point(i);
        let clicks = displaced_clicks(state, alpha, settings, povm.as_ref())?;
        quasiprob_point(&clicks, settings.eta_det, settings.s, alpha)
    })
    .into_iter()
    .collect()
}

/// Writes a scan as CSV with columns `re,im,s,value`.
pub fn write_scan_csv<W: Write>(points: &[QuasiprobPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["re", "im", "s", "value"])?;
    for p in points {
        w.write_record([
            p.alpha.re.to_string(),
            p.alpha.im.to_string(),
            p.s.to_string(),
            format!("{:e}", p.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_model::ClickDistribution;
    use std::f64::consts::FRAC_2_PI;

    fn exact_points(model: &TransmittanceModel, eta_det: f64, bins: usize, c_max: f64, n: usize) -> Vec<SensingPoint> {
        (0..n)
            .map(|i| {
                let c = c_max * i as f64 / (n - 1) as f64;
                let alpha_sq = c * bins as f64 / eta_det;
                SensingPoint {
                    alpha_sq,
                    moment: turbulence_moment(alpha_sq, eta_det, bins, model).unwrap(),
                    sigma: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn turbulence_examples() {
        let d = TransmittanceModel::Delta { eta0: 0.6 };
        let m = turbulence_moment(5.0, 0.3, 8, &d).unwrap();
        assert!((m - (-0.6f64 * 0.3 * 5.0 / 8.0).exp()).abs() < 1e-15);

        let u = TransmittanceModel::Uniform { lo: 0.0, hi: 1.0 };
        let c: f64 = 0.3 * 20.0 / 8.0;
        let m = turbulence_moment(20.0, 0.3, 8, &u).unwrap();
        assert!((m - (1.0 - (-c).exp()) / c).abs() < 1e-14);

        for model in [
            d,
            u,
            TransmittanceModel::Beta { a: 2.0, b: 5.0 },
            TransmittanceModel::TruncatedLogNormal { mu: -0.5, sigma: 0.4 },
        ] {
            assert_eq!(turbulence_moment(0.0, 0.5, 4, &model).unwrap(), 1.0);
        }
    }

    #[test]
    fn quadrature_matches_uniform_closed_form() {
        // tabulated flat density on [0, 1] takes the quadrature path
        let tab = TransmittanceModel::Tabulated {
            eta: vec![0.0, 0.5, 1.0],
            density: vec![1.0; 3],
        };
        let u = TransmittanceModel::Uniform { lo: 0.0, hi: 1.0 };
        for alpha_sq in [0.0, 0.5, 3.0, 40.0] {
            let a = turbulence_moment(alpha_sq, 0.8, 4, &tab).unwrap();
            let b = turbulence_moment(alpha_sq, 0.8, 4, &u).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_normalization() {
        for model in [
            TransmittanceModel::Uniform { lo: 0.2, hi: 0.7 },
            TransmittanceModel::Beta { a: 2.0, b: 5.0 },
            TransmittanceModel::Beta { a: 0.5, b: 0.8 },
            TransmittanceModel::TruncatedLogNormal { mu: -0.3, sigma: 0.5 },
        ] {
            assert!((model.normalization() - 1.0).abs() < NORMALIZATION_TOL, "{model:?}");
        }
        // beta(2, 5) mean is 2/7
        let beta = TransmittanceModel::Beta { a: 2.0, b: 5.0 };
        assert!((beta.raw_moment(1).unwrap() - 2.0 / 7.0).abs() < 1e-12);
        let bad = TransmittanceModel::Tabulated {
            eta: vec![0.0, 1.0],
            density: vec![1.0, 2.0],
        };
        assert!(matches!(
            turbulence_moment(1.0, 0.5, 2, &bad),
            Err(Error::Unnormalized { .. })
        ));
        assert!(TransmittanceModel::Uniform { lo: 0.5, hi: 0.2 }.validate().is_err());
    }

    #[test]
    fn turbulence_is_monotone() {
        for model in [
            TransmittanceModel::Delta { eta0: 0.4 },
            TransmittanceModel::Uniform { lo: 0.0, hi: 1.0 },
            TransmittanceModel::Beta { a: 1.5, b: 3.0 },
            TransmittanceModel::TruncatedLogNormal { mu: -1.0, sigma: 0.7 },
        ] {
            let vals: Vec<f64> = (0..40)
                .map(|i| turbulence_moment(i as f64 * 0.5, 0.3, 8, &model).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn turbulent_clicks_have_the_moment() {
        let model = TransmittanceModel::Beta { a: 2.0, b: 3.0 };
        let c = turbulent_click_distribution(12.0, 0.6, 8, &model).unwrap();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = crate::moments::single_moment_value(&ClickDistribution(c), 1).unwrap();
        assert!((m - turbulence_moment(12.0, 0.6, 8, &model).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn extraction_delta_and_lossless() {
        for eta0 in [0.3, 0.7, 1.0] {
            let model = TransmittanceModel::Delta { eta0 };
            let pts = exact_points(&model, 0.3, 8, 0.3, 16);
            let r = extract_transmittance_moments(&pts, 0.3, 8).unwrap();
            assert!((r.mean.value - eta0).abs() <= 0.01 * eta0);
            assert!((r.second.value - eta0 * eta0).abs() <= 0.01 * eta0 * eta0);
            assert!((r.intercept.value - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn extraction_uniform() {
        let model = TransmittanceModel::Uniform { lo: 0.0, hi: 1.0 };
        let pts = exact_points(&model, 0.5, 8, 0.5, 16);
        let r = extract_transmittance_moments(&pts, 0.5, 8).unwrap();
        assert!((r.mean.value - 0.5).abs() <= 0.02 * 0.5);
        assert!((r.second.value - 1.0 / 3.0).abs() <= 0.02 / 3.0);
        assert!(!r.variance_flag);
    }

    #[test]
    fn bare_quadratic_is_biased() {
        // second-order truncation shifts <η²> by about -c_max/2 relative
        let model = TransmittanceModel::Delta { eta0: 1.0 };
        let pts = exact_points(&model, 0.3, 8, 0.3, 16);
        let r = extract_transmittance_moments_with_degree(&pts, 0.3, 8, 2).unwrap();
        assert!((r.second.value - 1.0).abs() > 0.05);
    }

    #[test]
    fn extraction_errors() {
        let pts = exact_points(&TransmittanceModel::Delta { eta0: 0.5 }, 0.3, 8, 0.3, 4);
        assert!(matches!(
            extract_transmittance_moments(&pts, 0.3, 8),
            Err(Error::InsufficientPoints { .. })
        ));
        assert!(extract_transmittance_moments_with_degree(&pts, 0.0, 8, 2).is_err());
        let same: Vec<_> = (0..6).map(|_| pts[1]).collect();
        assert!(matches!(
            extract_transmittance_moments(&same, 0.3, 8),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn quadrature_examples() {
        let sym = JointClickHistogram::new(2, 2, vec![3, 1, 4, 1, 5, 9, 4, 9, 2]).unwrap();
        assert_eq!(quadrature_mean(&sym).unwrap().value, 0.0);

        let (ga, gb, n): (f64, f64, usize) = (0.4, 1.3, 6);
        let d = joint_coherent_click_distribution(ga, n, gb, n).unwrap();
        let x = quadrature_mean_distribution(&d, 1000).unwrap();
        let expect = n as f64 * ((-ga).exp() - (-gb).exp());
        assert!((x.value - expect).abs() < 1e-12);

        let mut counts = vec![0; 16];
        counts[3] = 10; // k_a = 0, k_b = N
        let extreme = JointClickHistogram::new(3, 3, counts).unwrap();
        let x = quadrature_mean(&extreme).unwrap();
        assert_eq!((x.value, x.sigma), (3.0, 0.0));

        let bad = JointClickHistogram::new(2, 3, vec![1; 12]).unwrap();
        assert!(quadrature_mean(&bad).is_err());
    }

    #[test]
    fn quadrature_is_antisymmetric() {
        let d = joint_coherent_click_distribution(0.2, 8, 0.9, 8).unwrap();
        let h = sample_joint_events(&d, 50_000, 5).unwrap();
        let x = quadrature_mean(&h).unwrap();
        let y = quadrature_mean(&h.swapped()).unwrap();
        assert_eq!(x.value, -y.value);
        assert_eq!(x.sigma, y.sigma);
    }

    #[test]
    fn quadrature_error_matches_scatter() {
        let det = DetectorModel::uniform(8, 0.5, 0.0).unwrap();
        let lo = Complex64::new(2.0, 0.0);
        let signal = Complex64::new(1.0, 0.5);
        let exact =
            quadrature_mean_distribution(&balanced_homodyne_distribution(signal, lo, 0.3, &det, &det).unwrap(), 2)
                .unwrap()
                .value;
        let xs: Vec<f64> = (0..200)
            .map(|seed| {
                let h = balanced_homodyne_simulate(signal, lo, 0.3, &det, &det, 2_000, seed).unwrap();
                quadrature_mean(&h).unwrap().value
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        let h = balanced_homodyne_simulate(signal, lo, 0.3, &det, &det, 2_000, 999).unwrap();
        let predicted = quadrature_mean(&h).unwrap().sigma;
        assert!((sd / predicted - 1.0).abs() < 0.2, "{sd} vs {predicted}");
        assert!((mean - exact).abs() < 4.0 * sd / (xs.len() as f64).sqrt());
    }

    #[test]
    fn homodyne_limits() {
        let det = DetectorModel::uniform(8, 0.6, 0.0).unwrap();
        let lo = Complex64::new(1.5, -0.5);
        let phase = 0.7;
        let l = lo * Complex64::from_polar(1.0, phase);
        let n = 8.0;

        let d = balanced_homodyne_distribution(l, lo, phase, &det, &det).unwrap();
        let ga = 0.6 * (2.0 * l).norm_sqr() / 2.0 / n;
        let x = quadrature_mean_distribution(&d, 10).unwrap().value;
        assert!((x - n * ((-ga).exp() - 1.0)).abs() < 1e-12);
        assert!(x <= 0.0);

        let d = balanced_homodyne_distribution(-l, lo, phase, &det, &det).unwrap();
        let x = quadrature_mean_distribution(&d, 10).unwrap().value;
        assert!((x - n * (1.0 - (-ga).exp())).abs() < 1e-12);

        let z = Complex64::new(0.0, 0.0);
        let h = balanced_homodyne_simulate(z, z, phase, &det, &det, 100, 1).unwrap();
        assert_eq!(quadrature_mean(&h).unwrap().value, 0.0);
    }

    #[test]
    fn quasiprob_examples() {
        let a = Complex64::new(0.0, 0.0);
        let v = quasiprob_point(&[1.0, 0.0, 0.0], 0.7, 0.0, a).unwrap();
        assert!((v.value - FRAC_2_PI).abs() < 1e-15);
        for eta in [0.1, 0.5, 1.0] {
            let mut c = vec![0.0; 9];
            c[0] = 1.0 - eta;
            c[1] = eta;
            let v = quasiprob_point(&c, eta, 0.0, a).unwrap();
            assert!((v.value + FRAC_2_PI).abs() < 1e-10);
        }
        assert!(quasiprob_point(&[1.0], 0.5, 1.0, a).is_err());
        assert!(quasiprob_point(&[1.0], 0.0, 0.0, a).is_err());
        assert!(quasiprob_point(&[0.5], 0.5, 0.0, a).is_err());
    }

    #[test]
    fn odd_bin_counts_can_go_negative_for_coherent_light() {
        // with N odd the binomial generating function (1 - 2(1-p)/η)^N
        // changes sign once 1 - p > η/2
        let d = coherent_click_distribution(5.0, 1).unwrap();
        let v = quasiprob_point(&d.0, 1.0, 0.0, Complex64::new(0.0, 0.0)).unwrap();
        assert!(v.value < 0.0);
    }

    #[test]
    fn coherent_scans_are_nonnegative_for_even_bins() {
        let settings = ScanSettings {
            eta_det: 0.5,
            bins: 8,
            dark: 1e-3,
            s: 0.0,
            n_max: 100,
        };
        let state = ScanState::Coherent { re: 0.7, im: -0.4 };
        let pts = quasiprob_scan(&state, &ScanGrid::square(6.0, 41), &settings, Exec::default()).unwrap();
        assert!(pts.iter().all(|p| p.value >= -1e-10));
    }

    #[test]
    fn coherent_scan_peaks_at_amplitude() {
        let settings = ScanSettings {
            eta_det: 0.6,
            bins: 8,
            dark: 0.0,
            s: 0.0,
            n_max: 100,
        };
        let state = ScanState::Coherent { re: 0.5, im: -0.25 };
        // grid radius kept below where the generating function reaches -1
        let grid = ScanGrid::square(1.5, 25);
        let pts = quasiprob_scan(&state, &grid, &settings, Exec::default()).unwrap();
        let best = pts.iter().max_by(|a, b| a.value.total_cmp(&b.value)).unwrap();
        let step = 3.0 / 24.0;
        assert!((best.alpha.re - 0.5).abs() <= step && (best.alpha.im + 0.25).abs() <= step);
    }

    #[test]
    fn vacuum_scan_is_radially_symmetric() {
        let settings = ScanSettings {
            eta_det: 0.8,
            bins: 4,
            dark: 0.0,
            s: 0.0,
            n_max: 100,
        };
        let grid = ScanGrid::square(2.0, 21);
        let pts = quasiprob_scan(
            &ScanState::Coherent { re: 0.0, im: 0.0 },
            &grid,
            &settings,
            Exec::default(),
        )
        .unwrap();
        for p in &pts {
            let mirror = pts
                .iter()
                .find(|q| (q.alpha.re - p.alpha.im).abs() < 1e-12 && (q.alpha.im + p.alpha.re).abs() < 1e-12)
                .unwrap();
            assert!((p.value - mirror.value).abs() < 1e-12);
        }
        let fock0 = quasiprob_scan(&ScanState::Fock { m: 0 }, &grid, &settings, Exec::default()).unwrap();
        for (a, b) in pts.iter().zip(&fock0) {
            assert!((a.value - b.value).abs() < 1e-10);
        }
    }

    #[test]
    fn single_photon_origin_is_negative() {
        for bins in [1, 8] {
            for eta in [0.1, 0.5, 1.0] {
                let settings = ScanSettings {
                    eta_det: eta,
                    bins,
                    dark: 0.0,
                    s: 0.0,
                    n_max: 100,
                };
                let grid = ScanGrid {
                    re_min: 0.0,
                    re_max: 0.0,
                    re_steps: 1,
                    im_min: 0.0,
                    im_max: 0.0,
                    im_steps: 1,
                };
                let pts = quasiprob_scan(&ScanState::Fock { m: 1 }, &grid, &settings, Exec::Sequential).unwrap();
                assert!((pts[0].value + FRAC_2_PI).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scan_order_is_independent_of_policy() {
        let settings = ScanSettings {
            eta_det: 0.4,
            bins: 6,
            dark: 0.0,
            s: -0.2,
            n_max: 80,
        };
        let grid = ScanGrid::square(1.0, 9);
        let a = quasiprob_scan(&ScanState::Fock { m: 2 }, &grid, &settings, Exec::Sequential).unwrap();
        let b = quasiprob_scan(&ScanState::Fock { m: 2 }, &grid, &settings, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_scan_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("re,im,s,value\n"));
        assert_eq!(text.lines().count(), 82);
    }
}
