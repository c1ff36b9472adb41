//! Normally ordered click moments sampled from click statistics, their
//! standard errors, and the response values they imply.

use serde::{Deserialize, Serialize};

use crate::click_model::{ClickDistribution, ClickHistogram, JointClickHistogram, JointDistribution};
use crate::error::{invalid, Error, Result};

/// A sampled moment `<:m_A^{l_A} m_B^{l_B}:>` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub orders: (usize, usize),
    pub events: u64,
}

/// Response value derived from one moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// First-order propagation of the moment's standard error.
    pub gamma_err: f64,
    pub order: usize,
    /// Set when sampling noise pushed the moment above one, giving a negative response.
    pub negative: bool,
}

/// `C(N-k, l) / C(N, l)`, zero for `k > N - l`.
pub fn sampling_kernel(bins: usize, k: usize, l: usize) -> f64 {
    if k + l > bins {
        return 0.0;
    }
    (0..l).map(|i| (bins - k - i) as f64 / (bins - i) as f64).product()
}

fn check_orders(dist: &JointDistribution, l_a: usize, l_b: usize) -> Result<()> {
    if l_a > dist.bins_a || l_b > dist.bins_b {
        return Err(Error::OrderOutOfRange {
            l_a,
            l_b,
            bins_a: dist.bins_a,
            bins_b: dist.bins_b,
        });
    }
    Ok(())
}

fn kernels(dist: &JointDistribution, l_a: usize, l_b: usize) -> (Vec<f64>, Vec<f64>) {
    let ka = (0..=dist.bins_a)
        .map(|k| sampling_kernel(dist.bins_a, k, l_a))
        .collect();
    let kb = (0..=dist.bins_b)
        .map(|k| sampling_kernel(dist.bins_b, k, l_b))
        .collect();
    (ka, kb)
}

/// Moment of a (normalized) joint click distribution by the sampling formula.
pub fn moment_value(dist: &JointDistribution, l_a: usize, l_b: usize) -> Result<f64> {
    check_orders(dist, l_a, l_b)?;
    let (ka, kb) = kernels(dist, l_a, l_b);
    let mut sum = 0.0;
    for (k_a, wa) in ka.iter().enumerate().take(dist.bins_a - l_a + 1) {
        for (k_b, wb) in kb.iter().enumerate().take(dist.bins_b - l_b + 1) {
            sum += wa * wb * dist.get(k_a, k_b);
        }
    }
    Ok(sum)
}

/// Single-mode moment `<:m^l:>`.
pub fn single_moment_value(dist: &ClickDistribution, l: usize) -> Result<f64> {
    moment_value(&dist.to_joint(), l, 0)
}

/// Per-event standard deviation of the sampling kernel about `mean`.
fn kernel_spread(dist: &JointDistribution, l_a: usize, l_b: usize, mean: f64) -> f64 {
    let (ka, kb) = kernels(dist, l_a, l_b);
    let mut acc = 0.0;
    for (k_a, wa) in ka.iter().enumerate() {
        for (k_b, wb) in kb.iter().enumerate() {
            let d = wa * wb - mean;
            acc += dist.get(k_a, k_b) * d * d;
        }
    }
    acc.sqrt()
}

/// Moment and the standard error it would carry if `dist` were the
/// frequencies of `events` recorded outcomes.
pub fn moment_from_distribution(
    dist: &JointDistribution,
    l_a: usize,
    l_b: usize,
    events: u64,
) -> Result<MomentEstimate> {
    if events < 2 {
        return Err(Error::TooFewEvents { needed: 2, got: events });
    }
    let value = moment_value(dist, l_a, l_b)?;
    let std_error = kernel_spread(dist, l_a, l_b, value) / ((events - 1) as f64).sqrt();
    Ok(MomentEstimate {
        value,
        std_error,
        orders: (l_a, l_b),
        events,
    })
}

/// Sampled moment of a recorded joint histogram.
///
/// Histograms with a single event carry no spread estimate; their
/// `std_error` is reported as zero.
pub fn sample_moment(hist: &JointClickHistogram, l_a: usize, l_b: usize) -> Result<MomentEstimate> {
    let dist = hist.frequencies()?;
    let value = moment_value(&dist, l_a, l_b)?;
    let std_error = if hist.total() >= 2 {
        kernel_spread(&dist, l_a, l_b, value) / ((hist.total() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MomentEstimate {
        value,
        std_error,
        orders: (l_a, l_b),
        events: hist.total(),
    })
}

pub fn sample_single_moment(hist: &ClickHistogram, l: usize) -> Result<MomentEstimate> {
    sample_moment(&hist.to_joint(), l, 0)
}

/// Standard error of the sampled moment.
pub fn moment_std_error(hist: &JointClickHistogram, l_a: usize, l_b: usize) -> Result<f64> {
    if hist.total() < 2 {
        return Err(Error::TooFewEvents {
            needed: 2,
            got: hist.total(),
        });
    }
    Ok(sample_moment(hist, l_a, l_b)?.std_error)
}

/// `Γ = -ln(m) / l` with first-order error propagation.
///
/// Joint moments with both orders nonzero mix two responses and are rejected.
pub fn gamma_from_moment(m: &MomentEstimate) -> Result<GammaEstimate> {
    let (l_a, l_b) = m.orders;
    if l_a != 0 && l_b != 0 {
        return Err(invalid("response extraction needs a single-mode moment"));
    }
    let l = l_a.max(l_b);
    if l == 0 {
        return Err(invalid("moment order 0 carries no response information"));
    }
    if !(m.value > 0.0) {
        return Err(Error::NonPositiveMoment(m.value));
    }
    let lf = l as f64;
    let gamma = -m.value.ln() / lf;
    Ok(GammaEstimate {
        gamma,
        gamma_err: m.std_error / (lf * m.value),
        order: l,
        negative: gamma < 0.0,
    })
}

/// Bin-averaged response `-(1/N) ln <:m^N:>` of a single-mode distribution.
///
/// For unequal bins this is the mean of the per-bin responses.
pub fn averaged_gamma(dist: &ClickDistribution) -> Result<f64> {
    let n = dist.bins();
    let m = single_moment_value(dist, n)?;
    if !(m > 0.0) {
        return Err(Error::NonPositiveMoment(m));
    }
    Ok(-m.ln() / n as f64)
}

pub fn averaged_gamma_unequal_bins(hist: &ClickHistogram) -> Result<f64> {
    averaged_gamma(&hist.frequencies()?)
}
