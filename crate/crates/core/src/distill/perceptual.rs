//! Perceptual loss on the features of a frozen phone classifier.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::harness::classifier::PhoneClassifier;
use crate::params::Binding;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualMode {
    /// Mean squared difference of feature maps.
    Feature,
    /// Mean squared difference of time-normalised channel Gram matrices.
    Gram,
}

/// `[B, C, T] → [B, C, C]`, `F·Fᵀ / T` over positions clear of the padding.
fn gram(g: &mut Graph, f: Var, skip: usize) -> Result<Var> {
    let t = g.shape(f)[2];
    let valid = g.slice(f, 2, skip, t - skip)?;
    let ft = g.transpose_last(valid)?;
    let gm = g.matmul(valid, ft)?;
    Ok(g.scale(gm, 1.0 / (t - skip) as f64))
}

/// Perceptual distance between `x_gen` (on the tape) and a reference with
/// the same shape. The classifier is used frozen.
pub fn perceptual_loss(
    g: &mut Graph,
    x_gen: Var,
    y_ref: &Tensor,
    classifier: &PhoneClassifier,
    mode: PerceptualMode,
) -> Result<Var> {
    classifier.ensure_trained()?;
    if g.shape(x_gen) != y_ref.shape() {
        return Err(Error::ShapeMismatch {
            op: "perceptual_loss",
            left: g.shape(x_gen).to_vec(),
            right: y_ref.shape().to_vec(),
        });
    }
    let skip = classifier.warmup();
    if mode == PerceptualMode::Gram && y_ref.shape()[2] <= skip {
        return Err(Error::InvalidArgument(format!(
            "gram perceptual loss needs more than {skip} samples"
        )));
    }
    let yv = g.constant(y_ref.clone());
    let fg = classifier.features(g, x_gen, Binding::Frozen)?;
    let fr = classifier.features(g, yv, Binding::Frozen)?;
    let mut total: Option<Var> = None;
    for (a, b) in fg.into_iter().zip(fr) {
        let (a, b) = match mode {
            PerceptualMode::Feature => (a, b),
            PerceptualMode::Gram => (gram(g, a, skip)?, gram(g, b, skip)?),
        };
        let d = g.sub(a, b)?;
        let d2 = g.square(d);
        let m = g.mean(d2);
        total = Some(match total {
            None => m,
            Some(acc) => g.add(acc, m)?,
        });
    }
    Ok(total.expect("classifier has at least one layer"))
}
