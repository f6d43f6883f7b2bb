//! Densities as graph operations, broadcasting over rank-matched tensors.

use super::DiscretizationSpec;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Elementwise `ln L(x | μ, e^{log_s})`.
pub fn logistic_log_density(g: &mut Graph, x: Var, mu: Var, log_s: Var) -> Result<Var> {
    let neg_log_s = g.neg(log_s);
    let inv_s = g.exp(neg_log_s);
    let centered = g.sub(x, mu)?;
    let z = g.mul(centered, inv_s)?;
    let neg_z = g.neg(z);
    let sp = g.softplus(neg_z);
    let two_sp = g.scale(sp, 2.0);
    let a = g.sub(neg_z, log_s)?;
    g.sub(a, two_sp)
}

/// `ln softmax(logits)` along `axis`.
pub fn log_softmax(g: &mut Graph, logits: Var, axis: usize) -> Result<Var> {
    let lse = g.logsumexp(logits, axis)?;
    g.sub(logits, lse)
}

/// Mixture log-density with components laid out along `axis`; `x` has size
/// 1 on that axis. The result keeps `axis` with size 1.
pub fn mol_log_density(
    g: &mut Graph,
    x: Var,
    logits: Var,
    mus: Var,
    log_ss: Var,
    axis: usize,
) -> Result<Var> {
    let log_w = log_softmax(g, logits, axis)?;
    let comp = logistic_log_density(g, x, mus, log_ss)?;
    let weighted = g.add(comp, log_w)?;
    g.logsumexp(weighted, axis)
}

/// Discretised mixture log-mass of the bins centred at `x` (`[B, 1, T]`, all
/// on the grid of `spec`), with mixture parameters `[B, K, T]`.
pub fn discretized_mol_log_prob(
    g: &mut Graph,
    x: &Tensor,
    logits: Var,
    mus: Var,
    log_ss: Var,
    spec: &DiscretizationSpec,
) -> Result<Var> {
    let hw = 0.5 * spec.bin_width();
    let last = spec.bins() - 1;
    let n = x.len();
    let (mut not_high, mut not_low, mut interior) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, &v) in x.data().iter().enumerate() {
        let idx = spec.index_of(v)?;
        not_high[i] = f64::from(u8::from(idx != last));
        not_low[i] = f64::from(u8::from(idx != 0));
        interior[i] = not_high[i] * not_low[i];
    }
    let shape = x.shape().to_vec();
    let not_high = g.constant(Tensor::new(shape.clone(), not_high)?);
    let not_low = g.constant(Tensor::new(shape.clone(), not_low)?);
    let interior = g.constant(Tensor::new(shape, interior)?);
    let x_hi = g.constant(x.map(|v| v + hw));
    let x_lo = g.constant(x.map(|v| v - hw));

    let neg_log_s = g.neg(log_ss);
    let inv_s = g.exp(neg_log_s);
    let da = g.sub(x_hi, mus)?;
    let a = g.mul(da, inv_s)?;
    let db = g.sub(x_lo, mus)?;
    let b = g.mul(db, inv_s)?;

    // ln σ(a) and ln(1 − σ(b))
    let neg_a = g.neg(a);
    let sp_a = g.softplus(neg_a);
    let log_cdf_hi = g.neg(sp_a);
    let sp_b = g.softplus(b);
    let log_sf_lo = g.neg(sp_b);
    let width_over_s = g.scale(inv_s, 2.0 * hw);
    let gap = g.log1mexp(width_over_s);

    let t1 = g.mul(log_cdf_hi, not_high)?;
    let t2 = g.mul(log_sf_lo, not_low)?;
    let t3 = g.mul(gap, interior)?;
    let s12 = g.add(t1, t2)?;
    let log_mass = g.add(s12, t3)?;

    let log_w = log_softmax(g, logits, 1)?;
    let weighted = g.add(log_mass, log_w)?;
    g.logsumexp(weighted, 1)
}
