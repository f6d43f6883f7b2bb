//! Logistic and mixture-of-logistics distributions.
//!
//! Scalar functions here operate on a single timestep; [`tape`] holds the
//! same densities expressed as graph operations so they can be
//! differentiated with respect to both the sample and the parameters.

pub mod tape;

use crate::autodiff::{log1mexp, logsumexp, softplus};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Lower bound applied to network-produced log-scales.
pub const LOG_SCALE_MIN: f64 = -7.0;

/// Logistic location and log-scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticParams {
    pub mu: f64,
    pub log_s: f64,
}

impl LogisticParams {
    pub fn new(mu: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "logistic needs finite mu and s > 0, got mu={mu}, s={s}"
            )));
        }
        Ok(LogisticParams { mu, log_s: s.ln() })
    }

    pub fn scale(&self) -> f64 {
        self.log_s.exp()
    }
}

/// `ln L(x | μ, s)` in its softplus form, finite whenever `|x − μ| / s ≤ 500`.
pub fn logistic_log_density(x: f64, p: LogisticParams) -> Result<f64> {
    if !x.is_finite() || !p.mu.is_finite() || !p.log_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite logistic density input: x={x}, {p:?}"
        )));
    }
    Ok(log_density_unchecked(x, p.mu, p.log_s))
}

#[inline]
fn log_density_unchecked(x: f64, mu: f64, log_s: f64) -> f64 {
    let z = (x - mu) * (-log_s).exp();
    -z - log_s - 2.0 * softplus(-z)
}

/// Reparameterised draw `μ + s·ln(u / (1 − u))` for `u` in the open unit interval.
pub fn logistic_sample(p: LogisticParams, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "logistic_sample needs 0 < u < 1, got {u}"
        )));
    }
    Ok(p.mu + p.scale() * (u / (1.0 - u)).ln())
}

/// Differential entropy in nats: `ln s + 2`.
pub fn logistic_entropy(p: LogisticParams) -> f64 {
    p.log_s + 2.0
}

/// Logistic CDF.
pub fn logistic_cdf(x: f64, p: LogisticParams) -> f64 {
    crate::autodiff::sigmoid((x - p.mu) * (-p.log_s).exp())
}

/// Per-timestep mixture of `K` logistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOfLogistics {
    logits: Vec<f64>,
    mus: Vec<f64>,
    log_ss: Vec<f64>,
}

impl MixtureOfLogistics {
    pub fn new(logits: Vec<f64>, mus: Vec<f64>, log_ss: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.len() != mus.len() || logits.len() != log_ss.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture needs K >= 1 matching components, got {}/{}/{}",
                logits.len(),
                mus.len(),
                log_ss.len()
            )));
        }
        if logits.iter().chain(&mus).chain(&log_ss).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mixture parameter".into()));
        }
        Ok(MixtureOfLogistics {
            logits,
            mus,
            log_ss,
        })
    }

    pub fn single(p: LogisticParams) -> Self {
        MixtureOfLogistics {
            logits: vec![0.0],
            mus: vec![p.mu],
            log_ss: vec![p.log_s],
        }
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn component(&self, k: usize) -> LogisticParams {
        LogisticParams {
            mu: self.mus[k],
            log_s: self.log_ss[k],
        }
    }

    /// Mixture weights `softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    fn log_weights(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    /// `Σ_k π_k μ_k`.
    pub fn mean(&self) -> f64 {
        self.weights().iter().zip(&self.mus).map(|(w, m)| w * m).sum()
    }
}

/// `ln Σ_k π_k L(x | μ_k, s_k)`.
pub fn mol_log_density(x: f64, m: &MixtureOfLogistics) -> f64 {
    let terms: Vec<f64> = m
        .log_weights()
        .iter()
        .enumerate()
        .map(|(k, lw)| lw + log_density_unchecked(x, m.mus[k], m.log_ss[k]))
        .collect();
    logsumexp(&terms)
}

/// Uniform quantisation grid on `[-1, 1]` with `2^bit_depth` bin centres.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscretizationSpec {
    pub bit_depth: u32,
}

impl DiscretizationSpec {
    pub fn new(bit_depth: u32) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!(
                "bit depth must be in 1..=16, got {bit_depth}"
            )));
        }
        Ok(DiscretizationSpec { bit_depth })
    }

    pub fn bins(&self) -> usize {
        1usize << self.bit_depth
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / (self.bins() - 1) as f64
    }

    pub fn center(&self, index: usize) -> f64 {
        -1.0 + index as f64 * self.bin_width()
    }

    /// Index of the nearest bin centre (values outside the domain clamp).
    pub fn nearest(&self, x: f64) -> usize {
        let i = ((x.clamp(-1.0, 1.0) + 1.0) / self.bin_width()).round();
        (i as usize).min(self.bins() - 1)
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.center(self.nearest(x))
    }

    /// Bin index of `x`, which must sit on a bin centre.
    pub fn index_of(&self, x: f64) -> Result<usize> {
        let i = self.nearest(x);
        if (self.center(i) - x).abs() > 1e-9 * self.bin_width() || !x.is_finite() {
            return Err(Error::OffGrid {
                value: x,
                bits: self.bit_depth,
            });
        }
        Ok(i)
    }
}

/// Which CDF difference a bin uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinEdge {
    Lowest,
    Interior,
    Highest,
}

/// Log mass of one logistic component over a bin, with the edge bins open
/// to ±∞. Uses `ln(σ(a) − σ(b)) = −softplus(−a) − softplus(b) + ln(1 − e^{b−a})`.
pub(crate) fn logistic_bin_log_mass(
    center: f64,
    half_width: f64,
    edge: BinEdge,
    mu: f64,
    log_s: f64,
) -> f64 {
    let inv_s = (-log_s).exp();
    let a = (center + half_width - mu) * inv_s;
    let b = (center - half_width - mu) * inv_s;
    match edge {
        BinEdge::Lowest => -softplus(-a),
        BinEdge::Highest => -softplus(b),
        BinEdge::Interior => -softplus(-a) - softplus(b) + log1mexp(2.0 * half_width * inv_s),
    }
}

/// Log probability mass of the bin centred at `x`.
pub fn discretized_mol_log_prob(
    x: f64,
    m: &MixtureOfLogistics,
    d: &DiscretizationSpec,
) -> Result<f64> {
    let i = d.index_of(x)?;
    let edge = match i {
        0 => BinEdge::Lowest,
        i if i == d.bins() - 1 => BinEdge::Highest,
        _ => BinEdge::Interior,
    };
    let hw = 0.5 * d.bin_width();
    let terms: Vec<f64> = m
        .log_weights()
        .iter()
        .enumerate()
        .map(|(k, lw)| lw + logistic_bin_log_mass(x, hw, edge, m.mus[k], m.log_ss[k]))
        .collect();
    Ok(logsumexp(&terms))
}

/// Component by inverse CDF on the weights, then a logistic draw; exactly two
/// uniforms are consumed per call. The result is clamped to `[-1, 1]` when a
/// discretisation is given.
pub fn mol_sample(
    m: &MixtureOfLogistics,
    rng: &mut RngStream,
    domain: Option<&DiscretizationSpec>,
) -> f64 {
    let u_comp = rng.uniform_open();
    let u_val = rng.uniform_open();
    mol_sample_with(m, u_comp, u_val, domain.is_some())
}

/// [`mol_sample`] with the two uniforms supplied.
pub fn mol_sample_with(m: &MixtureOfLogistics, u_comp: f64, u_val: f64, clamp: bool) -> f64 {
    let w = m.weights();
    let mut acc = 0.0;
    let mut k = w.len() - 1;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u_comp < acc {
            k = i;
            break;
        }
    }
    let x = m.mus[k] + m.log_ss[k].exp() * (u_val / (1.0 - u_val)).ln();
    if clamp {
        x.clamp(-1.0, 1.0)
    } else {
        x
    }
}

#[cfg(test)]
mod tests;
