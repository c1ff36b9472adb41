//! Fock-basis POVM of a calibrated click-counting detector.
//!
//! For a linear response `Γ = η n̂/N + ν` the normally ordered click
//! operators are diagonal in the photon-number basis. Expanding
//! `(1 - e^{-Γ})^k` and using `:e^{-λ n̂}: = (1 - λ)^n̂` gives
//!
//! ```text
//! <n|Π_k|n> = C(N,k) Σ_j C(k,j) (-1)^j e^{-(N-k+j)ν} (1 - (N-k+j)η/N)^n
//! ```
//!
//! Two-mode POVMs factorize into products of these single-mode tables and
//! are never materialized.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::click_model::binomial_pmf;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_N_MAX: usize = 100;

/// Diagonal POVM elements, `table[k][n] = <n|Π_k|n>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmDiagonal {
    pub bins: usize,
    pub eta: f64,
    pub dark: f64,
    pub n_max: usize,
    table: Vec<Vec<f64>>,
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn check_params(bins: usize, eta: f64, dark: f64) -> Result<()> {
    if bins == 0 {
        return Err(invalid("detector needs at least one bin"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid(format!("efficiency {eta} outside [0, 1]")));
    }
    if !(dark >= 0.0) || !dark.is_finite() {
        return Err(invalid(format!("dark contribution {dark} must be finite and >= 0")));
    }
    Ok(())
}

/// `<n|Π_k|n>` for `n = 0..=n_max` from the closed normal-order expansion.
///
/// The alternating sum cancels to roughly `C(N,k)·C(k,k/2)` units of
/// roundoff, so this route is only accurate for small detectors; the table
/// in [`PovmDiagonal`] uses the stable occupancy recurrence instead and this
/// function serves as the independent cross-check.
pub fn closed_form_diagonal(bins: usize, k: usize, eta: f64, dark: f64, n_max: usize) -> Result<Vec<f64>> {
    check_params(bins, eta, dark)?;
    if k > bins {
        return Err(invalid(format!("click number {k} above bin count {bins}")));
    }
    let nf = bins as f64;
    let prefactor = binomial(bins, k);
    // per-j constant factor and base of the n-th power
    let terms: Vec<(f64, f64)> = (0..=k)
        .map(|j| {
            let silent = (bins - k + j) as f64;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            (
                prefactor * sign * binomial(k, j) * (-silent * dark).exp(),
                1.0 - silent * eta / nf,
            )
        })
        .collect();
    Ok((0..=n_max)
        .map(|n| compensated_sum(terms.iter().map(|(c, base)| c * base.powi(n as i32))))
        .collect())
}

/// Stable evaluation of the full table.
///
/// Photons are absorbed one at a time: with probability `η` a photon lands
/// in one of the `N` bins uniformly, so the number `j` of excited bins is a
/// Markov chain (`j → j` w.p. `1 - η + jη/N`, `j → j+1` w.p. `(N-j)η/N`).
/// Each of the `N - j` unexcited bins then fires a dark count with
/// probability `1 - e^{-ν}`. Every term is nonnegative, so no cancellation
/// occurs for any `N`. By inclusion-exclusion this is exactly the closed
/// normal-order expression.
#[allow(clippy::needless_range_loop)] // n indexes table columns
fn occupancy_table(bins: usize, eta: f64, dark: f64, n_max: usize) -> Vec<Vec<f64>> {
    let nf = bins as f64;
    let q = -(-dark).exp_m1();
    let dark_pmf: Vec<Vec<f64>> = (0..=bins).map(|free| binomial_pmf(free, 1.0 - q, q)).collect();
    let mut table = vec![vec![0.0; n_max + 1]; bins + 1];
    let mut occ = vec![0.0; bins + 1];
    occ[0] = 1.0;
    for n in 0..=n_max {
        if n > 0 {
            let mut next = vec![0.0; bins + 1];
            for (j, p) in occ.iter().enumerate() {
                next[j] += p * (1.0 - eta + j as f64 * eta / nf);
                if j < bins {
                    next[j + 1] += p * (bins - j) as f64 * eta / nf;
                }
            }
            occ = next;
        }
        for (j, p) in occ.iter().enumerate() {
            for (d, pd) in dark_pmf[bins - j].iter().enumerate() {
                table[j + d][n] += p * pd;
            }
        }
    }
    table
}

/// `<n|Π_k|n>` for `n = 0..=n_max`.
pub fn povm_diagonal(bins: usize, k: usize, eta: f64, dark: f64, n_max: usize) -> Result<Vec<f64>> {
    check_params(bins, eta, dark)?;
    if k > bins {
        return Err(invalid(format!("click number {k} above bin count {bins}")));
    }
    Ok(occupancy_table(bins, eta, dark, n_max).swap_remove(k))
}

impl PovmDiagonal {
    pub fn new(bins: usize, eta: f64, dark: f64, n_max: usize) -> Result<Self> {
        check_params(bins, eta, dark)?;
        Ok(Self {
            bins,
            eta,
            dark,
            n_max,
            table: occupancy_table(bins, eta, dark, n_max),
        })
    }

    pub fn entry(&self, k: usize, n: usize) -> f64 {
        self.table[k][n]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.table[k]
    }

    /// `max_n |Σ_k <n|Π_k|n> - 1|`.
    pub fn completeness_defect(&self) -> f64 {
        (0..=self.n_max)
            .map(|n| (compensated_sum(self.table.iter().map(|row| row[n])) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Table as CSV: one row per click number `k`, one column per photon number `n`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((0..=self.n_max).map(|n| format!("n{n}")));
        w.write_record(&header)?;
        for (k, row) in self.table.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn completeness_defect(povm: &PovmDiagonal) -> f64 {
    povm.completeness_defect()
}

/// Photon-number probabilities `p(0..=n_max)` and the mass beyond `n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonDistribution {
    pub probs: Vec<f64>,
    pub tail: f64,
}

impl PhotonDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("photon distribution needs at least one entry"));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(invalid("photon probabilities must be finite and >= 0"));
        }
        let sum = compensated_sum(probs.iter().copied());
        if sum > 1.0 + 1e-12 {
            return Err(Error::Unnormalized { sum });
        }
        Ok(Self {
            tail: (1.0 - sum).max(0.0),
            probs,
        })
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn fock(n: usize, n_max: usize) -> Result<Self> {
        if n > n_max {
            return Err(invalid(format!("Fock index {n} above truncation {n_max}")));
        }
        let mut probs = vec![0.0; n_max + 1];
        probs[n] = 1.0;
        Self::new(probs)
    }

    /// Poissonian statistics of a coherent state.
    pub fn poisson(mean: f64, n_max: usize) -> Result<Self> {
        if !(mean >= 0.0) || !mean.is_finite() {
            return Err(invalid(format!("mean photon number {mean} must be finite and >= 0")));
        }
        if mean == 0.0 {
            return Self::fock(0, n_max);
        }
        let ln_mean = mean.ln();
        let mut ln_fact = 0.0;
        let probs = (0..=n_max)
            .map(|n| {
                if n > 0 {
                    ln_fact += (n as f64).ln();
                }
                (n as f64 * ln_mean - mean - ln_fact).exp()
            })
            .collect();
        Self::new(probs)
    }
}

/// Click statistics `c_k = Σ_n p(n) <n|Π_k|n>` of a Fock-diagonal state.
///
/// Fails when the photon distribution's truncated tail exceeds `tail_tol`;
/// the result then under-counts by at most that tail.
pub fn click_distribution_for_photon_statistics(
    p: &PhotonDistribution,
    povm: &PovmDiagonal,
    tail_tol: f64,
) -> Result<Vec<f64>> {
    if p.n_max() > povm.n_max {
        return Err(invalid(format!(
            "photon distribution truncated at {} but POVM only at {}",
            p.n_max(),
            povm.n_max
        )));
    }
    if p.tail > tail_tol {
        return Err(Error::Truncation {
            tail: p.tail,
            tolerance: tail_tol,
        });
    }
    Ok((0..=povm.bins)
        .map(|k| compensated_sum(p.probs.iter().enumerate().map(|(n, pn)| pn * povm.entry(k, n))))
        .collect())
}

/// Generalized Laguerre polynomial `L_k^{(a)}(x)` by the three-term recurrence.
fn laguerre(k: usize, a: f64, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 1.0 + a - x);
    if k == 0 {
        return prev;
    }
    for i in 1..k {
        let i = i as f64;
        let next = ((2.0 * i + 1.0 + a - x) * cur - (i + a) * prev) / (i + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Photon statistics `|<n|D(α)|m>|²` of a displaced Fock state.
///
/// Only `|α|²` matters. Fails when more than `tail_tol` probability lies
/// above `n_max`.
pub fn displaced_fock_number_distribution(
    m: usize,
    alpha_sq: f64,
    n_max: usize,
    tail_tol: f64,
) -> Result<PhotonDistribution> {
    if !(alpha_sq >= 0.0) || !alpha_sq.is_finite() {
        return Err(invalid(format!("|alpha|^2 = {alpha_sq} must be finite and >= 0")));
    }
    let dist = if alpha_sq == 0.0 {
        if m > n_max {
            PhotonDistribution {
                probs: vec![0.0; n_max + 1],
                tail: 1.0,
            }
        } else {
            PhotonDistribution::fock(m, n_max)?
        }
    } else {
        let top = n_max.max(m);
        let mut ln_fact = vec![0.0; top + 1];
        for i in 1..=top {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let ln_x = alpha_sq.ln();
        let probs: Vec<f64> = (0..=n_max)
            .map(|n| {
                let (lo, hi) = if n >= m { (m, n) } else { (n, m) };
                let lag = laguerre(lo, (hi - lo) as f64, alpha_sq);
                if lag == 0.0 {
                    return 0.0;
                }
                let ln_p = ln_fact[lo] - ln_fact[hi] + (hi - lo) as f64 * ln_x - alpha_sq + 2.0 * lag.abs().ln();
                ln_p.exp()
            })
            .collect();
        let sum = compensated_sum(probs.iter().copied());
        PhotonDistribution {
            tail: (1.0 - sum).max(0.0),
            probs,
        }
    };
    if dist.tail > tail_tol {
        return Err(Error::Truncation {
            tail: dist.tail,
            tolerance: tail_tol,
        });
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_model::coherent_click_distribution;
    use nalgebra::DMatrix;

    #[test]
    fn ideal_on_off_detector() {
        let row = povm_diagonal(1, 1, 1.0, 0.0, 10).unwrap();
        assert_eq!(row[0], 0.0);
        assert!(row[1..].iter().all(|v| *v == 1.0));
        assert_eq!(PovmDiagonal::new(1, 1.0, 0.0, 50).unwrap().completeness_defect(), 0.0);
    }

    #[test]
    fn no_click_element() {
        let (bins, eta, nu) = (5, 0.3, 2e-3);
        let row = povm_diagonal(bins, 0, eta, nu, 30).unwrap();
        for (n, v) in row.iter().enumerate() {
            let expect = (-(bins as f64) * nu).exp() * (1.0f64 - eta).powi(n as i32);
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn vacuum_never_clicks_without_dark_counts() {
        for bins in [1, 3, 8] {
            for eta in [0.1, 0.7, 1.0] {
                let p = PovmDiagonal::new(bins, eta, 0.0, 5).unwrap();
                for k in 0..=bins {
                    assert_eq!(p.entry(k, 0), if k == 0 { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn zero_efficiency_is_blind() {
        let p = PovmDiagonal::new(4, 0.0, 0.0, 20).unwrap();
        assert!(p.row(0).iter().all(|v| *v == 1.0));
        assert_eq!(p.completeness_defect(), 0.0);
    }

    #[test]
    fn matches_closed_form() {
        for bins in [1, 2, 4, 8] {
            for eta in [0.161, 0.298, 0.75, 1.0] {
                for nu in [0.0, 1e-3, 0.05] {
                    let p = PovmDiagonal::new(bins, eta, nu, 60).unwrap();
                    for k in 0..=bins {
                        let closed = closed_form_diagonal(bins, k, eta, nu, 60).unwrap();
                        for (n, c) in closed.iter().enumerate() {
                            assert!((p.entry(k, n) - c).abs() < 1e-12, "N={bins} η={eta} ν={nu} n={n} k={k}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn large_detectors_stay_normalized() {
        let p = PovmDiagonal::new(64, 0.9, 1e-3, 200).unwrap();
        assert!(p.completeness_defect() < 1e-12);
        assert!(p.table.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn completeness_and_positivity() {
        for bins in [1, 4, 8] {
            for eta in [0.161, 0.298, 1.0] {
                for nu in [0.0, 1e-3] {
                    let p = PovmDiagonal::new(bins, eta, nu, 100).unwrap();
                    assert!(p.completeness_defect() <= 1e-10);
                    assert!(p.table.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn no_click_strictly_decreasing() {
        let p = PovmDiagonal::new(8, 0.4, 0.0, 100).unwrap();
        assert!(p.row(0).windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_photon_clicks_once() {
        for bins in [1, 4, 8] {
            let eta = 0.37;
            let p = PovmDiagonal::new(bins, eta, 0.0, 10).unwrap();
            let c =
                click_distribution_for_photon_statistics(&PhotonDistribution::fock(1, 10).unwrap(), &p, 0.0).unwrap();
            assert!((c[0] - (1.0 - eta)).abs() < 1e-15);
            assert!((c[1] - eta).abs() < 1e-15);
            assert!(c[2..].iter().all(|v| v.abs() < 1e-15));
            let mean: f64 = c.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
            assert!((mean - eta).abs() < 1e-14);
        }
        let p = PovmDiagonal::new(3, 0.5, 0.0, 4).unwrap();
        let c = click_distribution_for_photon_statistics(&PhotonDistribution::fock(0, 4).unwrap(), &p, 0.0).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn coherent_cross_check() {
        for bins in [1, 4, 8] {
            for alpha_sq in [0.0, 0.5, 3.0, 12.0, 20.0] {
                let (eta, nu) = (0.298, 1e-3);
                let p = PovmDiagonal::new(bins, eta, nu, 100).unwrap();
                let photons = PhotonDistribution::poisson(alpha_sq, 100).unwrap();
                assert!(photons.tail < 1e-12);
                let c = click_distribution_for_photon_statistics(&photons, &p, 1e-12).unwrap();
                let exact = coherent_click_distribution(eta * alpha_sq / bins as f64 + nu, bins).unwrap();
                for (a, b) in c.iter().zip(&exact.0) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn truncation_errors() {
        let p = PovmDiagonal::new(2, 0.5, 0.0, 10).unwrap();
        let heavy = PhotonDistribution::poisson(8.0, 10).unwrap();
        assert!(matches!(
            click_distribution_for_photon_statistics(&heavy, &p, 1e-12),
            Err(Error::Truncation { .. })
        ));
        let long = PhotonDistribution::fock(0, 20).unwrap();
        assert!(click_distribution_for_photon_statistics(&long, &p, 1e-12).is_err());
        assert!(matches!(
            displaced_fock_number_distribution(1, 30.0, 20, 1e-12),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn displaced_fock_special_cases() {
        let d = displaced_fock_number_distribution(3, 0.0, 10, 0.0).unwrap();
        assert_eq!(d.probs[3], 1.0);
        assert_eq!(d.probs.iter().sum::<f64>(), 1.0);

        let d = displaced_fock_number_distribution(0, 2.5, 60, 1e-12).unwrap();
        let p = PhotonDistribution::poisson(2.5, 60).unwrap();
        for (a, b) in d.probs.iter().zip(&p.probs) {
            assert!((a - b).abs() < 1e-15);
        }

        let e = (-1.0f64).exp();
        let d = displaced_fock_number_distribution(1, 1.0, 64, 1e-12).unwrap();
        assert!(d.probs[1].abs() < 1e-16);
        assert!((d.probs[0] - e).abs() < 1e-15);
        assert!((d.probs[2] - 0.5 * e).abs() < 1e-15);
    }

    /// Brute force: exponentiate the truncated generator `α(a† - a)`.
    fn displacement_oracle(alpha: f64, dim: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(dim, dim);
        for n in 1..dim {
            let s = (n as f64).sqrt();
            g[(n, n - 1)] = alpha * s;
            g[(n - 1, n)] = -alpha * s;
        }
        g.exp()
    }

    #[test]
    fn displaced_fock_matches_matrix_exponential() {
        for (m, alpha) in [(1usize, 1.0f64), (2, 0.7), (4, 1.6), (0, 2.0)] {
            let dmat = displacement_oracle(alpha, 120);
            let d = displaced_fock_number_distribution(m, alpha * alpha, 64, 1e-10).unwrap();
            for n in 0..=40 {
                let oracle = dmat[(n, m)].powi(2);
                assert!(
                    (d.probs[n] - oracle).abs() < 1e-12,
                    "m={m} n={n}: {} vs {oracle}",
                    d.probs[n]
                );
            }
        }
    }
}
