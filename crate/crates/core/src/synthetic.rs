//! Synthetic measurement series with known ground truth.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::click_model::{coherent_click_distribution, sample_counts, ClickHistogram, CoherentInput};
use crate::error::{invalid, Result};
use crate::moments::{gamma_from_moment, sample_single_moment, single_moment_value};
use crate::regress::{AnglePoint, ResponseCurve, ResponsePoint};

/// Powers of an attenuator sweep: `start · 10^(i·step_db/10)`.
pub fn attenuator_powers(start_nw: f64, step_db: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| start_nw * 10f64.powf(i as f64 * step_db / 10.0))
        .collect()
}

/// Linearly polarized input after a half-wave plate at `angle_deg`.
pub fn hwp_input(mean_photons: f64, angle_deg: f64) -> Result<CoherentInput> {
    let t = 2.0 * angle_deg.to_radians();
    CoherentInput::new(mean_photons * t.cos().powi(2), mean_photons * t.sin().powi(2))
}

/// Detector whose per-bin response is `η̃ P/N + ν` (η̃ per nW).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDetector {
    pub bins: usize,
    pub eta_tilde: f64,
    pub dark: f64,
}

impl LinearDetector {
    pub fn gamma(&self, power_nw: f64) -> f64 {
        self.eta_tilde * power_nw / self.bins as f64 + self.dark
    }
}

/// Noise-free curve: responses from exact moments of order `order`.
pub fn exact_response_curve(
    det: &LinearDetector,
    powers: &[f64],
    order: usize,
    power_rel_err: f64,
) -> Result<ResponseCurve> {
    let points = powers
        .iter()
        .map(|&p| {
            let dist = coherent_click_distribution(det.gamma(p), det.bins)?;
            let m = single_moment_value(&dist, order)?;
            Ok(ResponsePoint {
                power: p,
                power_err: power_rel_err * p,
                gamma: -m.ln() / order as f64,
                gamma_err: 0.0,
                order,
                flagged: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ResponseCurve::new("A", 0.0, det.bins, points)
}

/// Sampled curve: `events` clicks per power, power readings scattered by
/// `power_noise` (relative) and assigned the error `power_rel_err · P_read`.
pub fn sampled_response_curve<R: Rng + ?Sized>(
    det: &LinearDetector,
    powers: &[f64],
    order: usize,
    events: u64,
    power_noise: f64,
    power_rel_err: f64,
    rng: &mut R,
) -> Result<ResponseCurve> {
    let mut points = Vec::with_capacity(powers.len());
    for &p in powers {
        let dist = coherent_click_distribution(det.gamma(p), det.bins)?;
        let hist = ClickHistogram::new(sample_counts(&dist.0, events, rng)?)?;
        let g = gamma_from_moment(&sample_single_moment(&hist, order)?)?;
        let z: f64 = rng.sample(StandardNormal);
        let read = (p * (1.0 + power_noise * z)).max(0.0);
        points.push(ResponsePoint {
            power: read,
            power_err: power_rel_err * read,
            gamma: g.gamma,
            gamma_err: g.gamma_err,
            order,
            flagged: g.negative,
        });
    }
    ResponseCurve::new("A", 0.0, det.bins, points)
}

/// `η(φ) = (η_max - η_min)/2 · cos 4(φ + φ₀) + (η_max + η_min)/2`.
pub fn cosine_efficiency(eta_max: f64, eta_min: f64, phi0_deg: f64, angle_deg: f64) -> f64 {
    (eta_max - eta_min) / 2.0 * (4.0 * (angle_deg + phi0_deg).to_radians()).cos() + (eta_max + eta_min) / 2.0
}

/// `count` plate angles evenly spaced over [0°, 180°].
pub fn sweep_angles(count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..count).map(|i| i as f64 * 180.0 / (count - 1) as f64).collect(),
    }
}

/// Efficiencies along a sweep; with `rel_noise > 0` each value is scattered
/// by that relative standard deviation, which is also its reported error.
pub fn polarization_sweep<R: Rng + ?Sized>(
    eta_max: f64,
    eta_min: f64,
    phi0_deg: f64,
    angles: &[f64],
    rel_noise: f64,
    rng: &mut R,
) -> Result<Vec<AnglePoint>> {
    if !(rel_noise >= 0.0) {
        return Err(invalid("relative noise must be >= 0"));
    }
    Ok(angles
        .iter()
        .map(|&a| {
            let eta = cosine_efficiency(eta_max, eta_min, phi0_deg, a);
            let sigma = rel_noise * eta;
            let z: f64 = if rel_noise > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            AnglePoint {
                angle_deg: a,
                eta: eta + sigma * z,
                sigma,
            }
        })
        .collect())
}
