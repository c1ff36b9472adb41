//! End-to-end workflows: simulate a dataset, calibrate response curves,
//! fit polarization sweeps, and run the two application pipelines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::appsense::{
    extract_transmittance_moments_with_degree, quasiprob_scan, turbulence_moment, turbulent_click_distribution,
    QuasiprobPoint, ScanSettings, ScanState, SensingPoint, TransmittanceModel, TransmittanceMoments,
};
use crate::click_model::{
    coherent_click_distribution, linear_gamma, product_distribution, sample_counts, ClickHistogram, DetectorModel,
};
use crate::config::{
    AtmosphereConfig, CalibrationConfig, InterceptMode, PhaseScanConfig, PovmConfig, RunConfig, SimulateConfig,
};
use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::exec::{stream_rng, Exec};
use crate::moments::{gamma_from_moment, sample_single_moment};
use crate::povm::PovmDiagonal;
use crate::regress::{
    cosine_efficiency_fit, efficiency_from_slope, power_to_photons, taylor_fit, wtls_line_free,
    wtls_line_through_origin, AnglePoint, Estimate, LineFit, NonlinearityRatios, PolarizationFit, ResponseCurve,
    ResponsePoint, TaylorFit,
};
use crate::synthetic::{attenuator_powers, hwp_input};

/// Intercept significance (in σ) below which the origin refit is used.
pub const INTERCEPT_SIGMAS: f64 = 3.0;

/// Simulated click-count dataset for every configured mode, angle and power.
///
/// Work unit `(angle, power)` draws from stream `angle_index · steps + power_index`.
pub fn simulate_dataset(sim: &SimulateConfig, chi: f64, seed: u64, exec: Exec) -> Result<Dataset> {
    let powers = attenuator_powers(sim.power_start_nw, sim.power_step_db, sim.power_steps);
    let detectors = sim
        .modes
        .iter()
        .map(|m| DetectorModel::new(m.bins, m.eta_h, m.eta_v, m.dark))
        .collect::<Result<Vec<_>>>()?;
    let joint = sim.joint && sim.modes.len() == 2;
    let steps = powers.len();
    let units = exec.map_indexed(sim.angles_deg.len() * steps, |u| -> Result<Vec<Record>> {
        let (angle, power) = (sim.angles_deg[u / steps], powers[u % steps]);
        let mut rng = stream_rng(seed, u as u64);
        let photons = power_to_photons(power, chi)?;
        let dists = sim
            .modes
            .iter()
            .zip(&detectors)
            .map(|(m, d)| {
                coherent_click_distribution(linear_gamma(&hwp_input(photons, angle + m.phi0_deg)?, d), m.bins)
            })
            .collect::<Result<Vec<_>>>()?;
        let z: f64 = rng.sample(StandardNormal);
        let read = (power * (1.0 + sim.power_noise * z)).max(0.0);
        let record = |mode: String, bins_a: usize, bins_b: usize, counts: Vec<u64>| Record {
            mode,
            angle_deg: angle,
            power_nw: read,
            power_err_nw: None,
            bins_a,
            bins_b,
            events: sim.events,
            counts,
        };
        if joint {
            let dist = product_distribution(&dists[0], &dists[1]);
            let counts = sample_counts(&dist.probs, sim.events, &mut rng)?;
            let label = format!("{}+{}", sim.modes[0].label, sim.modes[1].label);
            Ok(vec![record(label, sim.modes[0].bins, sim.modes[1].bins, counts)])
        } else {
            sim.modes
                .iter()
                .zip(&dists)
                .map(|(m, d)| {
                    Ok(record(
                        m.label.clone(),
                        m.bins,
                        0,
                        sample_counts(&d.0, sim.events, &mut rng)?,
                    ))
                })
                .collect()
        }
    });
    let mut records = Vec::new();
    for u in units {
        records.extend(u?);
    }
    Dataset::new(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Angle(f64);

impl Eq for Angle {}

impl PartialOrd for Angle {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Angle {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Response curves per `(mode, angle)`, sorted by mode label then angle.
pub fn dataset_curves(
    dataset: &Dataset,
    cal: &CalibrationConfig,
    expected_bins: &BTreeMap<String, usize>,
) -> Result<Vec<ResponseCurve>> {
    let mut groups: BTreeMap<(String, Angle), (usize, Vec<ResponsePoint>)> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        for (index, (label, bins)) in r.modes().into_iter().enumerate() {
            if let Some(&want) = expected_bins.get(label) {
                if want != bins {
                    return Err(Error::Schema {
                        line: i + 1,
                        message: format!("mode {label} has {bins} bins, config expects {want}"),
                    });
                }
            }
            let hist = r.histogram(index)?;
            let g = gamma_from_moment(&sample_single_moment(&hist, cal.order)?).map_err(|e| Error::Schema {
                line: i + 1,
                message: format!("mode {label}: {e}"),
            })?;
            let point = ResponsePoint {
                power: r.power_nw,
                power_err: r.power_err_nw.unwrap_or(cal.power_rel_err * r.power_nw),
                gamma: g.gamma,
                gamma_err: g.gamma_err,
                order: g.order,
                flagged: g.negative,
            };
            groups
                .entry((label.to_string(), Angle(r.angle_deg)))
                .or_insert_with(|| (bins, Vec::new()))
                .1
                .push(point);
        }
    }
    groups
        .into_iter()
        .map(|((mode, angle), (bins, points))| ResponseCurve::new(mode, angle.0, bins, points))
        .collect()
}

/// `H` for plate angles ≡ 0 (mod 90°), `V` for ≡ 45°, otherwise the angle.
pub fn polarization_label(angle_deg: f64) -> String {
    let r = angle_deg.rem_euclid(90.0);
    if r < 1e-9 || 90.0 - r < 1e-9 {
        "H".into()
    } else if (r - 45.0).abs() < 1e-9 {
        "V".into()
    } else {
        format!("{angle_deg}deg")
    }
}

/// Calibration result of one response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    /// `mode^polarization`, e.g. `A^H`.
    pub label: String,
    pub curve: ResponseCurve,
    pub free_fit: Option<LineFit>,
    pub origin_fit: Option<LineFit>,
    /// Whether the free intercept was within 3σ of zero.
    pub intercept_consistent: Option<bool>,
    /// Slope per nW of the adopted line fit.
    pub eta_tilde: Estimate,
    /// Intercept of the adopted fit; absent when it was fixed at zero.
    pub nu_tilde: Option<Estimate>,
    pub taylor: Option<TaylorFit>,
    pub ratios: Option<NonlinearityRatios>,
    /// Dimensionless efficiency `η̃/χ`, including the χ uncertainty.
    pub eta: Estimate,
    pub chi: Estimate,
    pub flagged: Vec<usize>,
    pub notes: Vec<String>,
}

pub fn calibrate_curve(curve: &ResponseCurve, cal: &CalibrationConfig) -> Result<CurveReport> {
    let n = curve.points.len();
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    let mut notes = Vec::new();
    let free_fit = match cal.intercept {
        InterceptMode::Zero => None,
        InterceptMode::Free => Some(wtls_line_free(curve)?),
        InterceptMode::Auto if n < 3 => {
            notes.push("free-intercept fit skipped: fewer than 3 points".into());
            None
        }
        InterceptMode::Auto => Some(wtls_line_free(curve)?),
    };
    let intercept_consistent = free_fit.map(|f| f.intercept_consistent_with_zero(INTERCEPT_SIGMAS));
    let use_free = match cal.intercept {
        InterceptMode::Free => true,
        InterceptMode::Zero => false,
        InterceptMode::Auto => intercept_consistent == Some(false),
    };
    let origin_fit = if use_free && cal.intercept == InterceptMode::Free {
        None
    } else {
        Some(wtls_line_through_origin(curve)?)
    };
    let adopted = if use_free { free_fit } else { origin_fit }.expect("adopted fit exists");
    if use_free {
        notes.push("intercept differs from zero; free-intercept slope adopted".into());
    }

    let (taylor, ratios) = if cal.max_order == 0 || n < cal.max_order + 1 {
        if cal.max_order > 0 {
            notes.push(format!("Taylor fit of order {} skipped: {n} points", cal.max_order));
        }
        (None, None)
    } else {
        match taylor_fit(curve, cal.max_order) {
            Ok(t) => {
                let r = if cal.max_order == 3 {
                    match t.ratios() {
                        Ok(r) => Some(r),
                        Err(e) => {
                            notes.push(format!("nonlinearity ratios unavailable: {e}"));
                            None
                        }
                    }
                } else {
                    None
                };
                (Some(t), r)
            }
            Err(e) => {
                notes.push(format!("Taylor fit failed: {e}"));
                (None, None)
            }
        }
    };

    let eta = efficiency_from_slope(adopted.slope.value, adopted.slope.sigma, cal.chi, cal.chi_err)?;
    let flagged = curve.flagged_indices();
    if !flagged.is_empty() {
        notes.push(format!("{} point(s) with negative response", flagged.len()));
    }
    Ok(CurveReport {
        label: format!("{}^{}", curve.mode, polarization_label(curve.angle_deg)),
        curve: curve.clone(),
        free_fit,
        origin_fit,
        intercept_consistent,
        eta_tilde: adopted.slope,
        nu_tilde: adopted.intercept,
        taylor,
        ratios,
        eta,
        chi: Estimate::new(cal.chi, cal.chi_err),
        flagged,
        notes,
    })
}

/// Calibrates every `(mode, angle)` curve of a dataset, in sorted order.
pub fn run_calibration(dataset: &Dataset, cfg: &RunConfig, exec: Exec) -> Result<Vec<CurveReport>> {
    let curves = dataset_curves(dataset, &cfg.calibration, &cfg.bins)?;
    exec.map_slice(&curves, |c| {
        calibrate_curve(c, &cfg.calibration).map_err(|e| match e {
            Error::InsufficientPoints { needed, got } => Error::InvalidInput(format!(
                "curve {}^{}: insufficient points (need {needed}, got {got})",
                c.mode,
                polarization_label(c.angle_deg)
            )),
            other => other,
        })
    })
    .into_iter()
    .collect()
}

/// Cosine fit of one mode's efficiency (in percent) against plate angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationReport {
    pub mode: String,
    /// Efficiencies in percent; errors exclude the common χ scale error.
    pub points: Vec<AnglePoint>,
    pub fit: PolarizationFit,
}

/// Groups calibrated curves by mode and fits `η(φ)` for each.
pub fn polarization_fits(reports: &[CurveReport], cal: &CalibrationConfig) -> Result<Vec<PolarizationReport>> {
    let mut by_mode: BTreeMap<&str, Vec<AnglePoint>> = BTreeMap::new();
    for r in reports {
        by_mode.entry(r.curve.mode.as_str()).or_default().push(AnglePoint {
            angle_deg: r.curve.angle_deg,
            eta: 100.0 * r.eta_tilde.value / cal.chi,
            sigma: 100.0 * r.eta_tilde.sigma / cal.chi,
        });
    }
    by_mode
        .into_iter()
        .map(|(mode, points)| {
            let fit = cosine_efficiency_fit(&points).map_err(|e| Error::InvalidInput(format!("mode {mode}: {e}")))?;
            Ok(PolarizationReport {
                mode: mode.to_string(),
                points,
                fit,
            })
        })
        .collect()
}

pub fn run_polarization_sweep(
    dataset: &Dataset,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<(Vec<CurveReport>, Vec<PolarizationReport>)> {
    let reports = run_calibration(dataset, cfg, exec)?;
    let fits = polarization_fits(&reports, &cfg.calibration)?;
    Ok((reports, fits))
}

/// Transmittance-moment sensing result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereReport {
    pub model: TransmittanceModel,
    pub eta_det: f64,
    pub bins: usize,
    pub events: u64,
    pub points: Vec<SensingPoint>,
    pub moments: TransmittanceMoments,
    /// `<η>` and `<η²>` of the model itself.
    pub model_mean: f64,
    pub model_second: f64,
}

/// Probe series `c_i = c_max (i+1)/points`, measured exactly or by sampling.
///
/// Sampled point `i` draws from stream `i`.
pub fn run_atmosphere(cfg: &AtmosphereConfig, seed: Option<u64>, exec: Exec) -> Result<AtmosphereReport> {
    let seed = match (cfg.events, seed) {
        (0, _) => 0,
        (_, Some(s)) => s,
        (_, None) => return Err(Error::Config("sampled atmosphere run needs a seed".into())),
    };
    cfg.model.validate()?;
    let points = exec
        .map_indexed(cfg.points, |i| -> Result<SensingPoint> {
            let c = cfg.c_max * (i + 1) as f64 / cfg.points as f64;
            let alpha_sq = c * cfg.bins as f64 / cfg.eta_det;
            if cfg.events == 0 {
                return Ok(SensingPoint {
                    alpha_sq,
                    moment: turbulence_moment(alpha_sq, cfg.eta_det, cfg.bins, &cfg.model)?,
                    sigma: 0.0,
                });
            }
            let dist = turbulent_click_distribution(alpha_sq, cfg.eta_det, cfg.bins, &cfg.model)?;
            let counts = sample_counts(&dist, cfg.events, &mut stream_rng(seed, i as u64))?;
            let m = sample_single_moment(&ClickHistogram::new(counts)?, 1)?;
            Ok(SensingPoint {
                alpha_sq,
                moment: m.value,
                sigma: m.std_error,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let moments = extract_transmittance_moments_with_degree(&points, cfg.eta_det, cfg.bins, cfg.degree)?;
    Ok(AtmosphereReport {
        model: cfg.model.clone(),
        eta_det: cfg.eta_det,
        bins: cfg.bins,
        events: cfg.events,
        points,
        moments,
        model_mean: cfg.model.raw_moment(1)?,
        model_second: cfg.model.raw_moment(2)?,
    })
}

/// Extremes of a quasiprobability scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub state: ScanState,
    pub s: f64,
    pub points: usize,
    pub min_value: f64,
    pub min_at: Complex64,
    pub max_value: f64,
    pub max_at: Complex64,
}

pub fn run_phase_scan(cfg: &PhaseScanConfig, n_max: usize, exec: Exec) -> Result<(Vec<QuasiprobPoint>, ScanSummary)> {
    let settings = ScanSettings {
        eta_det: cfg.eta_det,
        bins: cfg.bins,
        dark: cfg.dark,
        s: cfg.s,
        n_max,
    };
    let points = quasiprob_scan(&cfg.state, &cfg.grid, &settings, exec)?;
    let min = points
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("grid is nonempty");
    let max = points
        .iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("grid is nonempty");
    let summary = ScanSummary {
        state: cfg.state,
        s: cfg.s,
        points: points.len(),
        min_value: min.value,
        min_at: min.alpha,
        max_value: max.value,
        max_at: max.alpha,
    };
    Ok((points, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmSummary {
    pub bins: usize,
    pub eta: f64,
    pub dark: f64,
    pub n_max: usize,
    pub completeness_defect: f64,
}

pub fn run_povm(cfg: &PovmConfig, n_max: usize) -> Result<(PovmDiagonal, PovmSummary)> {
    let povm = PovmDiagonal::new(cfg.bins, cfg.eta, cfg.dark, n_max)?;
    let summary = PovmSummary {
        bins: cfg.bins,
        eta: cfg.eta,
        dark: cfg.dark,
        n_max,
        completeness_defect: povm.completeness_defect(),
    };
    Ok((povm, summary))
}
