//! Training objective and the per-domain anchoring loop.

mod train;

use anchor_nn::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::Discriminator;
use crate::data::{DomainImage, DomainKind};
use crate::prior::{LatentCode, LatentKind, LatentSpec};
use crate::{AnchorError, Result};

pub use train::{train_domain, TrainingConfig, TrainingReport, TRACE_FILE};

/// Coefficients of the reconstruction, latent and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_latent: f64,
    pub lambda_adv: f64,
}

impl LossWeights {
    pub const LATENT: f64 = 0.005;
    pub const ADV: f64 = 0.01;

    /// Reconstruction weight 1 for class maps and 10 for continuous domains.
    pub fn for_kind(kind: DomainKind) -> Self {
        let lambda_rec = if kind.is_categorical() { 1.0 } else { 10.0 };
        Self {
            lambda_rec,
            lambda_latent: Self::LATENT,
            lambda_adv: Self::ADV,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_latent", self.lambda_latent),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AnchorError::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn latent_target<T: Scalar>(spec: &LatentSpec, mean: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    match spec.kind {
        LatentKind::Z => Ok(None),
        LatentKind::WPlus => {
            let m =
                mean.ok_or_else(|| AnchorError::Contract("the W+ latent loss needs the mean latent".into()))?;
            if m.numel() != spec.num_slots * spec.dim {
                return Err(AnchorError::Spec(format!(
                    "mean latent {:?} does not match {spec:?}",
                    m.shape()
                )));
            }
            Ok(Some(m.clone().reshape(&[spec.num_slots * spec.dim])))
        }
    }
}

/// Batch mean of `|code - target|`, where the target is w̄ for W+ and the
/// origin for Z. The norm is not squared.
pub fn latent_loss_batch<T: Scalar>(
    codes: &Tensor<T>,
    spec: &LatentSpec,
    mean: Option<&Tensor<T>>,
) -> Result<T> {
    let width = spec.num_slots * spec.dim;
    if codes.numel() == 0 || !codes.numel().is_multiple_of(width) {
        return Err(AnchorError::Spec(format!(
            "latent batch {:?} does not match {spec:?}",
            codes.shape()
        )));
    }
    let target = latent_target(spec, mean)?;
    let n = codes.numel() / width;
    let total = codes.data().chunks(width).fold(T::zero(), |acc, row| {
        let sq = row.iter().enumerate().fold(T::zero(), |s, (i, &v)| {
            let d = v - target.as_ref().map_or(T::zero(), |t| t.data()[i]);
            s + d * d
        });
        acc + sq.sqrt()
    });
    Ok(total / T::lit(n as f64))
}

pub fn latent_loss<T: Scalar>(code: &LatentCode<T>, mean: Option<&LatentCode<T>>) -> Result<T> {
    latent_loss_batch(&code.values, &code.spec, mean.map(|m| &m.values))
}

/// Graph form of [`latent_loss_batch`] on `codes[n, num_slots, dim]`.
pub fn latent_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    codes: Var,
    spec: &LatentSpec,
    mean: Option<&Tensor<T>>,
) -> Result<Var> {
    let n = g.shape(codes)[0];
    let flat = g.reshape(codes, &[n, spec.num_slots * spec.dim]);
    let diff = match latent_target(spec, mean)? {
        Some(t) => {
            let neg = g.input(t.map(|v| -v));
            g.add_suffix(flat, neg)
        }
        None => flat,
    };
    let sq = g.square(diff);
    let per = g.sum_last(sq, &[n]);
    let norm = g.sqrt(per);
    Ok(g.mean(norm))
}

fn check_target<T: Scalar>(pred_shape: &[usize], target: &DomainImage<T>, kind: DomainKind) -> Result<()> {
    if target.kind != kind {
        return Err(AnchorError::Domain(format!(
            "target of kind {} scored as {kind}",
            target.kind
        )));
    }
    let expected = [kind.network_channels(), target.height(), target.width()];
    if pred_shape != expected {
        return Err(AnchorError::Domain(format!(
            "prediction {pred_shape:?} does not match target {expected:?}"
        )));
    }
    Ok(())
}

/// Mean squared error for continuous domains, mean per-pixel cross-entropy
/// of logits for categorical ones. `prediction` is `(C, H, W)`.
pub fn reconstruction_loss<T: Scalar>(
    prediction: &Tensor<T>,
    target: &DomainImage<T>,
    kind: DomainKind,
) -> Result<T> {
    check_target(prediction.shape(), target, kind)?;
    let mut g = Graph::new();
    let s = prediction.shape();
    let p = g.input(prediction.clone().reshape(&[1, s[0], s[1], s[2]]));
    let t = target
        .pixels
        .clone()
        .reshape(&[1, target.pixels.dim(0), s[1], s[2]]);
    let l = reconstruction_graph(&mut g, p, &t, kind);
    Ok(g.value(l).data()[0])
}

/// Graph form of [`reconstruction_loss`] for `pred[n, C, H, W]` against
/// stored targets `[n, stored_channels, H, W]`.
pub fn reconstruction_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &Tensor<T>,
    kind: DomainKind,
) -> Var {
    match kind {
        DomainKind::Continuous { .. } => {
            let t = g.input(targets.clone());
            let d = g.sub(pred, t);
            let sq = g.square(d);
            g.mean(sq)
        }
        DomainKind::Categorical { .. } => {
            let idx: Vec<usize> = targets.data().iter().map(|v| v.as_f64() as usize).collect();
            g.softmax_cross_entropy(pred, &idx)
        }
    }
}

/// `-E[log sigmoid(D(fake))]` on logits.
pub fn adversarial_generator_graph<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let neg = g.scale(fake_logits, -T::one());
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// `-E[log sigmoid(D(real))] - E[log(1 - sigmoid(D(fake)))]` on logits.
pub fn adversarial_discriminator_graph<T: Scalar>(
    g: &mut Graph<T>,
    real_logits: Var,
    fake_logits: Var,
) -> Var {
    let real = adversarial_generator_graph(g, real_logits);
    let sp = g.softplus(fake_logits);
    let fake = g.mean(sp);
    g.add(real, fake)
}

/// `(generator_term, discriminator_term)` for RGB batches `[n, 3, H, W]`.
pub fn adversarial_losses<T: Scalar>(
    disc: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(T, T)> {
    for (name, x) in [("real", real), ("generated", fake)] {
        if x.shape().len() != 4 || x.dim(1) != 3 {
            return Err(AnchorError::Domain(format!(
                "{name} batch {:?} is not RGB",
                x.shape()
            )));
        }
    }
    adversarial_from_logits(&disc.score(real), &disc.score(fake))
}

/// Both adversarial terms from precomputed logits.
pub fn adversarial_from_logits<T: Scalar>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> Result<(T, T)> {
    if !real_logits.all_finite() || !fake_logits.all_finite() {
        return Err(AnchorError::Training {
            step: 0,
            reason: "non-finite discriminator score".into(),
        });
    }
    let mut g = Graph::new();
    let r = g.input(real_logits.clone());
    let f = g.input(fake_logits.clone());
    let gen = adversarial_generator_graph(&mut g, f);
    let dis = adversarial_discriminator_graph(&mut g, r, f);
    Ok((g.value(gen).data()[0], g.value(dis).data()[0]))
}

/// `λ_rec·rec + λ_latent·latent + λ_adv·adv`.
pub fn total_loss<T: Scalar>(rec: T, latent: T, adv: T, weights: &LossWeights) -> Result<T> {
    if !(rec.is_finite() && latent.is_finite() && adv.is_finite()) {
        return Err(AnchorError::Training {
            step: 0,
            reason: format!("non-finite loss component (rec {rec}, latent {latent}, adv {adv})"),
        });
    }
    Ok(T::lit(weights.lambda_rec) * rec
        + T::lit(weights.lambda_latent) * latent
        + T::lit(weights.lambda_adv) * adv)
}

#[cfg(test)]
mod tests;
