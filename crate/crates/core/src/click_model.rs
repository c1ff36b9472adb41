//! Detector models and click-count distributions for coherent light.
//!
//! A click-counting detector splits the incident field over `N` bins, each
//! watched by an on/off detector. For a coherent input every bin fails to
//! click with probability `p = exp(-Γ)` where `Γ` is the response to the
//! per-bin intensity, so the number of clicks is binomial. Unequal splitting
//! or unequal bin efficiencies give a Poisson-binomial law instead.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::stream_rng;

/// Tolerance used when checking that a distribution sums to one.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Transmittance and efficiency of a single bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinResponse {
    /// Intensity transmittance `|t_i|²` into this bin.
    pub transmittance: f64,
    pub efficiency: f64,
}

/// Linear-response model of a click-counting detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub bins: usize,
    pub eta_h: f64,
    pub eta_v: f64,
    /// Dark-count contribution per bin, added inside the response.
    pub dark: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bin: Option<Vec<BinResponse>>,
}

impl DetectorModel {
    pub fn new(bins: usize, eta_h: f64, eta_v: f64, dark: f64) -> Result<Self> {
        let model = Self {
            bins,
            eta_h,
            eta_v,
            dark,
            per_bin: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Polarization-insensitive detector with efficiency `eta`.
    pub fn uniform(bins: usize, eta: f64, dark: f64) -> Result<Self> {
        Self::new(bins, eta, eta, dark)
    }

    pub fn with_per_bin(mut self, per_bin: Vec<BinResponse>) -> Result<Self> {
        self.per_bin = Some(per_bin);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(invalid("detector needs at least one bin"));
        }
        for (name, eta) in [("eta_h", self.eta_h), ("eta_v", self.eta_v)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(invalid(format!("{name} = {eta} outside [0, 1]")));
            }
        }
        if !(self.dark >= 0.0) || !self.dark.is_finite() {
            return Err(invalid(format!("dark = {} must be finite and >= 0", self.dark)));
        }
        if let Some(per_bin) = &self.per_bin {
            if per_bin.len() != self.bins {
                return Err(invalid(format!(
                    "per-bin table has {} entries for {} bins",
                    per_bin.len(),
                    self.bins
                )));
            }
            let mut total = 0.0;
            for (i, b) in per_bin.iter().enumerate() {
                if !(0.0..=1.0).contains(&b.transmittance) || !(0.0..=1.0).contains(&b.efficiency) {
                    return Err(invalid(format!("bin {i} has values outside [0, 1]")));
                }
                total += b.transmittance;
            }
            if total > 1.0 + 1e-12 {
                return Err(invalid(format!("bin transmittances sum to {total} > 1")));
            }
        }
        Ok(())
    }
}

/// Mean photon numbers of a coherent input in the two polarizations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoherentInput {
    pub mean_photons_h: f64,
    pub mean_photons_v: f64,
}

impl CoherentInput {
    pub fn new(mean_photons_h: f64, mean_photons_v: f64) -> Result<Self> {
        for n in [mean_photons_h, mean_photons_v] {
            if !(n >= 0.0) || !n.is_finite() {
                return Err(invalid(format!("mean photon number {n} must be finite and >= 0")));
            }
        }
        Ok(Self {
            mean_photons_h,
            mean_photons_v,
        })
    }

    pub fn horizontal(n: f64) -> Result<Self> {
        Self::new(n, 0.0)
    }

    pub fn total(&self) -> f64 {
        self.mean_photons_h + self.mean_photons_v
    }
}

/// Click probabilities over `k = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickDistribution(pub Vec<f64>);

impl ClickDistribution {
    pub fn bins(&self) -> usize {
        self.0.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn mean_clicks(&self) -> f64 {
        self.0.iter().enumerate().map(|(k, c)| k as f64 * c).sum()
    }

    /// Single-mode distribution viewed as a joint grid with a trivial second mode.
    pub fn to_joint(&self) -> JointDistribution {
        JointDistribution {
            bins_a: self.bins(),
            bins_b: 0,
            probs: self.0.clone(),
        }
    }
}

/// Joint click probabilities, row-major over `(k_a, k_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub bins_a: usize,
    pub bins_b: usize,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(bins_a: usize, bins_b: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != (bins_a + 1) * (bins_b + 1) {
            return Err(invalid(format!(
                "grid of {} entries does not match ({} + 1) x ({} + 1)",
                probs.len(),
                bins_a,
                bins_b
            )));
        }
        Ok(Self { bins_a, bins_b, probs })
    }

    pub fn get(&self, k_a: usize, k_b: usize) -> f64 {
        self.probs[k_a * (self.bins_b + 1) + k_b]
    }

    pub fn marginal_a(&self) -> ClickDistribution {
        let w = self.bins_b + 1;
        ClickDistribution(self.probs.chunks(w).map(|row| row.iter().sum()).collect())
    }

    pub fn marginal_b(&self) -> ClickDistribution {
        let w = self.bins_b + 1;
        let mut out = vec![0.0; w];
        for row in self.probs.chunks(w) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        ClickDistribution(out)
    }

    /// Joint grid with the modes exchanged.
    pub fn swapped(&self) -> Self {
        let mut probs = Vec::with_capacity(self.probs.len());
        for k_b in 0..=self.bins_b {
            for k_a in 0..=self.bins_a {
                probs.push(self.get(k_a, k_b));
            }
        }
        Self {
            bins_a: self.bins_b,
            bins_b: self.bins_a,
            probs,
        }
    }
}

/// Recorded click counts for one mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl ClickHistogram {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(invalid("histogram needs at least one entry"));
        }
        let total = counts.iter().sum();
        Ok(Self { counts, total })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bins(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn frequencies(&self) -> Result<ClickDistribution> {
        if self.total == 0 {
            return Err(Error::EmptyHistogram);
        }
        let c = self.total as f64;
        Ok(ClickDistribution(self.counts.iter().map(|&n| n as f64 / c).collect()))
    }

    pub fn to_joint(&self) -> JointClickHistogram {
        JointClickHistogram {
            bins_a: self.bins(),
            bins_b: 0,
            counts: self.counts.clone(),
            total: self.total,
        }
    }

    /// Same frequencies with every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            counts: self.counts.iter().map(|c| c * factor).collect(),
            total: self.total * factor,
        }
    }
}

/// Recorded joint click counts, row-major over `(k_a, k_b)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointClickHistogram {
    bins_a: usize,
    bins_b: usize,
    counts: Vec<u64>,
    total: u64,
}

impl JointClickHistogram {
    pub fn new(bins_a: usize, bins_b: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != (bins_a + 1) * (bins_b + 1) {
            return Err(invalid(format!(
                "grid of {} counts does not match ({} + 1) x ({} + 1)",
                counts.len(),
                bins_a,
                bins_b
            )));
        }
        let total = counts.iter().sum();
        Ok(Self {
            bins_a,
            bins_b,
            counts,
            total,
        })
    }

    pub fn bins_a(&self) -> usize {
        self.bins_a
    }

    pub fn bins_b(&self) -> usize {
        self.bins_b
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, k_a: usize, k_b: usize) -> u64 {
        self.counts[k_a * (self.bins_b + 1) + k_b]
    }

    pub fn frequencies(&self) -> Result<JointDistribution> {
        if self.total == 0 {
            return Err(Error::EmptyHistogram);
        }
        let c = self.total as f64;
        Ok(JointDistribution {
            bins_a: self.bins_a,
            bins_b: self.bins_b,
            probs: self.counts.iter().map(|&n| n as f64 / c).collect(),
        })
    }

    pub fn marginal_a(&self) -> ClickHistogram {
        let w = self.bins_b + 1;
        let counts: Vec<u64> = self.counts.chunks(w).map(|row| row.iter().sum()).collect();
        ClickHistogram {
            counts,
            total: self.total,
        }
    }

    pub fn marginal_b(&self) -> ClickHistogram {
        let w = self.bins_b + 1;
        let mut counts = vec![0u64; w];
        for row in self.counts.chunks(w) {
            for (o, c) in counts.iter_mut().zip(row) {
                *o += c;
            }
        }
        ClickHistogram {
            counts,
            total: self.total,
        }
    }

    pub fn swapped(&self) -> Self {
        let mut counts = Vec::with_capacity(self.counts.len());
        for k_b in 0..=self.bins_b {
            for k_a in 0..=self.bins_a {
                counts.push(self.get(k_a, k_b));
            }
        }
        Self {
            bins_a: self.bins_b,
            bins_b: self.bins_a,
            counts,
            total: self.total,
        }
    }
}

/// Linear response `η_H n_H / N + η_V n_V / N + ν`.
pub fn linear_gamma(input: &CoherentInput, model: &DetectorModel) -> f64 {
    let n = model.bins as f64;
    model.eta_h * input.mean_photons_h / n + model.eta_v * input.mean_photons_v / n + model.dark
}

/// Binomial click distribution with no-click probability `exp(-gamma)` per bin.
///
/// `gamma = +inf` is allowed and puts all mass on `k = N`.
pub fn coherent_click_distribution(gamma: f64, bins: usize) -> Result<ClickDistribution> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("response {gamma} must be >= 0")));
    }
    let p = (-gamma).exp();
    let q = -(-gamma).exp_m1();
    Ok(ClickDistribution(binomial_pmf(bins, p, q)))
}

/// `C(N,k) p^(N-k) q^k` for `k = 0..=N`, `q = 1 - p` supplied separately
/// so callers can keep precision near `p = 1`.
pub(crate) fn binomial_pmf(bins: usize, p: f64, q: f64) -> Vec<f64> {
    let mut coeff = 1.0_f64;
    (0..=bins)
        .map(|k| {
            if k > 0 {
                coeff = coeff * (bins - k + 1) as f64 / k as f64;
            }
            coeff * p.powi((bins - k) as i32) * q.powi(k as i32)
        })
        .collect()
}

/// Exact distribution of the number of clicking bins when bin `i` stays
/// silent with probability `no_click[i]`.
///
/// Built bin by bin with the `O(N²)` convolution recurrence; all terms are
/// nonnegative so there is no cancellation.
pub fn poisson_binomial_click_distribution(no_click: &[f64]) -> Result<ClickDistribution> {
    let mut dist = vec![0.0; no_click.len() + 1];
    dist[0] = 1.0;
    for (i, &p) in no_click.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("no-click probability {p} of bin {i} outside [0, 1]")));
        }
        let q = 1.0 - p;
        for k in (1..=i + 1).rev() {
            dist[k] = dist[k] * p + dist[k - 1] * q;
        }
        dist[0] *= p;
    }
    Ok(ClickDistribution(dist))
}

/// Per-bin no-click probabilities `exp(-(η_i |t_i|² n + ν))` of an unequally split detector.
pub fn unequal_bin_no_click_probs(input: &CoherentInput, model: &DetectorModel) -> Result<Vec<f64>> {
    let per_bin = model.per_bin.as_ref().ok_or(Error::MissingPerBin)?;
    let n = input.total();
    Ok(per_bin
        .iter()
        .map(|b| (-(b.efficiency * b.transmittance * n + model.dark)).exp())
        .collect())
}

/// Product of two binomial click distributions.
pub fn joint_coherent_click_distribution(
    gamma_a: f64,
    bins_a: usize,
    gamma_b: f64,
    bins_b: usize,
) -> Result<JointDistribution> {
    let a = coherent_click_distribution(gamma_a, bins_a)?;
    let b = coherent_click_distribution(gamma_b, bins_b)?;
    Ok(product_distribution(&a, &b))
}

pub fn product_distribution(a: &ClickDistribution, b: &ClickDistribution) -> JointDistribution {
    let probs = a.0.iter().flat_map(|pa| b.0.iter().map(move |pb| pa * pb)).collect();
    JointDistribution {
        bins_a: a.bins(),
        bins_b: b.bins(),
        probs,
    }
}

/// Draws `events` outcomes from `probs` with conditional binomials.
///
/// Costs `O(len)` binomial draws regardless of the event count.
pub fn sample_counts<R: Rng + ?Sized>(probs: &[f64], events: u64, rng: &mut R) -> Result<Vec<u64>> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Unnormalized { sum });
    }
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = events;
    let mut mass = 1.0_f64;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let frac = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, frac)
            .map_err(|e| invalid(format!("binomial draw: {e}")))?
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass -= p;
    }
    Ok(counts)
}

/// Seeded multinomial histogram of `events` single-mode outcomes.
pub fn sample_events(dist: &ClickDistribution, events: u64, seed: u64) -> Result<ClickHistogram> {
    let mut rng = stream_rng(seed, 0);
    ClickHistogram::new(sample_counts(&dist.0, events, &mut rng)?)
}

/// Seeded multinomial histogram of `events` joint outcomes.
pub fn sample_joint_events(dist: &JointDistribution, events: u64, seed: u64) -> Result<JointClickHistogram> {
    let mut rng = stream_rng(seed, 0);
    JointClickHistogram::new(dist.bins_a, dist.bins_b, sample_counts(&dist.probs, events, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn linear_gamma_examples() {
        let m = DetectorModel::new(8, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(linear_gamma(&CoherentInput::default(), &m), 0.0);
        assert_eq!(linear_gamma(&CoherentInput::horizontal(8.0).unwrap(), &m), 1.0);
        let m = DetectorModel::new(8, 0.298, 0.187, 0.0).unwrap();
        let g = linear_gamma(&CoherentInput::new(8.0, 8.0).unwrap(), &m);
        assert!((g - 0.485).abs() < 1e-15);
    }

    #[test]
    fn model_validation() {
        assert!(DetectorModel::new(0, 0.5, 0.5, 0.0).is_err());
        assert!(DetectorModel::new(4, 1.2, 0.5, 0.0).is_err());
        assert!(DetectorModel::new(4, 0.5, 0.5, -1e-3).is_err());
        let m = DetectorModel::uniform(2, 1.0, 0.0).unwrap();
        let bad = vec![
            BinResponse {
                transmittance: 0.7,
                efficiency: 1.0,
            },
            BinResponse {
                transmittance: 0.7,
                efficiency: 1.0,
            },
        ];
        assert!(m.clone().with_per_bin(bad).is_err());
        assert!(m
            .with_per_bin(vec![BinResponse {
                transmittance: 0.5,
                efficiency: 1.0
            }])
            .is_err());
        assert!(CoherentInput::new(-1.0, 0.0).is_err());
        assert!(CoherentInput::new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn coherent_examples() {
        close(
            &coherent_click_distribution(0.0, 3).unwrap().0,
            &[1.0, 0.0, 0.0, 0.0],
            0.0,
        );
        close(&coherent_click_distribution(LN_2, 1).unwrap().0, &[0.5, 0.5], 1e-15);
        close(
            &coherent_click_distribution(LN_2, 2).unwrap().0,
            &[0.25, 0.5, 0.25],
            1e-15,
        );
        assert!(coherent_click_distribution(-0.1, 2).is_err());
    }

    #[test]
    fn infinite_response_collapses_to_all_click() {
        let d = coherent_click_distribution(f64::INFINITY, 4).unwrap();
        close(&d.0, &[0.0, 0.0, 0.0, 0.0, 1.0], 0.0);
    }

    #[test]
    fn poisson_binomial_examples() {
        close(
            &poisson_binomial_click_distribution(&[1.0, 1.0, 1.0]).unwrap().0,
            &[1.0, 0.0, 0.0, 0.0],
            0.0,
        );
        // enumerate the four outcomes: (silent, silent) = 0.5*0.25, ...
        let oracle = [0.5 * 0.25, 0.5 * 0.25 + 0.5 * 0.75, 0.5 * 0.75];
        close(
            &poisson_binomial_click_distribution(&[0.5, 0.25]).unwrap().0,
            &oracle,
            1e-15,
        );
        assert!(poisson_binomial_click_distribution(&[0.5, 1.5]).is_err());
    }

    #[test]
    fn unequal_bin_probs() {
        let m = DetectorModel::uniform(2, 1.0, 0.0)
            .unwrap()
            .with_per_bin(vec![
                BinResponse {
                    transmittance: 0.6,
                    efficiency: 1.0,
                },
                BinResponse {
                    transmittance: 0.4,
                    efficiency: 1.0,
                },
            ])
            .unwrap();
        let p = unequal_bin_no_click_probs(&CoherentInput::horizontal(1.0).unwrap(), &m).unwrap();
        close(&p, &[(-0.6f64).exp(), (-0.4f64).exp()], 1e-15);
        let p0 = unequal_bin_no_click_probs(&CoherentInput::default(), &m).unwrap();
        close(&p0, &[1.0, 1.0], 0.0);
        assert!(matches!(
            unequal_bin_no_click_probs(&CoherentInput::default(), &DetectorModel::uniform(2, 1.0, 0.0).unwrap()),
            Err(Error::MissingPerBin)
        ));
    }

    #[test]
    fn balanced_per_bin_matches_equal_bins() {
        let n = 5;
        let (eta, nu, photons) = (0.4, 1e-3, 3.7);
        let m = DetectorModel::uniform(n, eta, nu)
            .unwrap()
            .with_per_bin(vec![
                BinResponse {
                    transmittance: 1.0 / n as f64,
                    efficiency: eta
                };
                n
            ])
            .unwrap();
        let input = CoherentInput::horizontal(photons).unwrap();
        let p = unequal_bin_no_click_probs(&input, &m).unwrap();
        let expected = (-linear_gamma(&input, &m)).exp();
        for pi in p {
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_examples() {
        let j = joint_coherent_click_distribution(0.0, 3, 0.0, 2).unwrap();
        assert_eq!(j.get(0, 0), 1.0);
        assert_eq!(j.probs.iter().sum::<f64>(), 1.0);
        let j = joint_coherent_click_distribution(LN_2, 1, LN_2, 1).unwrap();
        close(&j.probs, &[0.25; 4], 1e-15);
        let j = joint_coherent_click_distribution(0.3, 4, 1.1, 6).unwrap();
        close(
            &j.marginal_a().0,
            &coherent_click_distribution(0.3, 4).unwrap().0,
            1e-15,
        );
        close(
            &j.marginal_b().0,
            &coherent_click_distribution(1.1, 6).unwrap().0,
            1e-15,
        );
    }

    #[test]
    fn sampler_examples() {
        let delta = ClickDistribution(vec![1.0, 0.0, 0.0]);
        assert_eq!(sample_events(&delta, 1000, 3).unwrap().counts(), &[1000, 0, 0]);
        assert_eq!(sample_events(&delta, 0, 3).unwrap().counts(), &[0, 0, 0]);
        assert!(matches!(
            sample_events(&ClickDistribution(vec![0.5, 0.4]), 10, 0),
            Err(Error::Unnormalized { .. })
        ));

        let dist = ClickDistribution(vec![0.25, 0.5, 0.25]);
        let c = 1_000_000u64;
        let h = sample_events(&dist, c, 11).unwrap();
        assert_eq!(h.total(), c);
        for (n, p) in h.counts().iter().zip(&dist.0) {
            let sd = (c as f64 * p * (1.0 - p)).sqrt();
            assert!((*n as f64 - c as f64 * p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let d = joint_coherent_click_distribution(0.4, 8, 0.9, 8).unwrap();
        let a = sample_joint_events(&d, 100_000, 42).unwrap();
        let b = sample_joint_events(&d, 100_000, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_joint_events(&d, 100_000, 43).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.total(), 100_000);
    }

    proptest! {
        #[test]
        fn coherent_is_normalized_with_binomial_mean(gamma in 0.0f64..20.0, bins in 1usize..40) {
            let d = coherent_click_distribution(gamma, bins).unwrap();
            prop_assert!(d.0.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!((d.0.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mean = bins as f64 * -(-gamma).exp_m1();
            prop_assert!((d.mean_clicks() - mean).abs() <= 1e-12);
        }

        #[test]
        fn equal_poisson_binomial_is_binomial(gamma in 0.0f64..10.0, bins in 1usize..=16) {
            let p = (-gamma).exp();
            let pb = poisson_binomial_click_distribution(&vec![p; bins]).unwrap();
            let b = coherent_click_distribution(gamma, bins).unwrap();
            for (x, y) in pb.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() <= 1e-14);
            }
        }

        #[test]
        fn poisson_binomial_normalized(p in proptest::collection::vec(0.0f64..=1.0, 1..64)) {
            let d = poisson_binomial_click_distribution(&p).unwrap();
            prop_assert!(d.0.iter().all(|c| (0.0..=1.0 + 1e-15).contains(c)));
            prop_assert!((d.0.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
