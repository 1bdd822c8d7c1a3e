//! Inference: cross-domain translation, sampling and anchoring diagnostics.

use std::collections::BTreeMap;

use anchor_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapters::{export, DomainAdapter};
use crate::data::{DomainImage, DomainKind};
use crate::prior::{FeatureMap, GeneratorPrior, LatentCode, LatentKind};
use crate::{AnchorError, Result};

const CHUNK: usize = 32;

/// Fails unless every adapter was trained against `prior`.
pub fn check_bound<T: Scalar>(prior: &GeneratorPrior<T>, adapters: &[&DomainAdapter<T>]) -> Result<()> {
    for a in adapters {
        if a.prior_fingerprint != prior.fingerprint() {
            return Err(AnchorError::FingerprintMismatch {
                expected: prior.fingerprint().to_string(),
                found: a.prior_fingerprint.clone(),
            });
        }
    }
    Ok(())
}

/// `R_dst(G_feat(E_src(x)))`, exported in `dst`'s value model.
pub fn translate<T: Scalar>(
    x: &DomainImage<T>,
    src: &DomainAdapter<T>,
    dst: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<DomainImage<T>> {
    check_bound(prior, &[src, dst])?;
    let f = prior.generate_features(&src.encode(x)?)?;
    dst.regress_image(&f)
}

/// Translation within one domain.
pub fn reconstruct<T: Scalar>(
    x: &DomainImage<T>,
    adapter: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<DomainImage<T>> {
    translate(x, adapter, adapter, prior)
}

/// Anchored features `[n, C_f, H_f, W_f]` of a set of `src` images.
pub fn anchor_features<T: Scalar>(
    xs: &[DomainImage<T>],
    src: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<Tensor<T>> {
    check_bound(prior, &[src])?;
    let mut parts = Vec::new();
    for chunk in xs.chunks(CHUNK) {
        for x in chunk {
            src.check_image(x)?;
        }
        let inputs: Vec<Tensor<T>> = chunk.iter().map(|x| x.network_input()).collect();
        let codes = src.encode_batch(&Tensor::stack(&inputs.iter().collect::<Vec<_>>()));
        parts.push(prior.features_batch(&codes)?);
    }
    let items: Vec<Tensor<T>> = parts
        .iter()
        .flat_map(|p| (0..p.dim(0)).map(|i| p.slice0(i)))
        .collect();
    if items.is_empty() {
        let [c, h, w] = prior.feature_shape();
        return Ok(Tensor::zeros(&[0, c, h, w]));
    }
    Ok(Tensor::stack(&items.iter().collect::<Vec<_>>()))
}

/// Batched [`translate`] for evaluation.
pub fn translate_many<T: Scalar>(
    xs: &[DomainImage<T>],
    src: &DomainAdapter<T>,
    dst: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<Vec<DomainImage<T>>> {
    check_bound(prior, &[src, dst])?;
    let f = anchor_features(xs, src, prior)?;
    let mut out = Vec::with_capacity(xs.len());
    for start in (0..xs.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(xs.len());
        let items: Vec<Tensor<T>> = (start..end).map(|i| f.slice0(i)).collect();
        let pred = dst
            .regressor
            .apply(&Tensor::stack(&items.iter().collect::<Vec<_>>()));
        for i in 0..end - start {
            out.push(DomainImage::new(
                dst.domain_id.clone(),
                export(&pred.slice0(i), dst.kind),
                dst.kind,
            )?);
        }
    }
    Ok(out)
}

/// Outputs of every domain decoded from one shared feature map.
#[derive(Clone, Debug)]
pub struct MultiDomainSample<T> {
    pub features: FeatureMap<T>,
    /// The prior's own image, `ToRGB(f)`.
    pub rgb: DomainImage<T>,
    pub outputs: BTreeMap<String, DomainImage<T>>,
}

pub fn sample_multidomain<T: Scalar>(
    prior: &GeneratorPrior<T>,
    adapters: &[&DomainAdapter<T>],
    seed: u64,
) -> Result<MultiDomainSample<T>> {
    check_bound(prior, adapters)?;
    let features = prior.generate_features(&prior.sample_latent(seed)?)?;
    let rgb = prior.to_rgb(&features)?;
    let outputs = adapters
        .iter()
        .map(|a| Ok((a.domain_id.clone(), a.regress_image(&features)?)))
        .collect::<Result<_>>()?;
    Ok(MultiDomainSample {
        features,
        rgb,
        outputs,
    })
}

/// W+ slots `[start, end)` to overwrite with a fresh latent drawn from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub start: usize,
    pub end: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self, num_slots: usize) -> Result<()> {
        if self.start >= self.end || self.end > num_slots {
            return Err(AnchorError::Spec(format!(
                "mix range [{}, {}) must satisfy 0 <= start < end <= {num_slots}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// The last `ceil(num_slots / 2)` slots.
    pub fn late(num_slots: usize, seed: u64) -> Self {
        Self {
            start: num_slots / 2,
            end: num_slots,
            seed,
        }
    }
}

/// `code` with the slots of `mix` replaced by the mapped latent of `mix.seed`.
pub fn mix_code<T: Scalar>(
    code: &LatentCode<T>,
    prior: &GeneratorPrior<T>,
    mix: &MixSpec,
) -> Result<LatentCode<T>> {
    let spec = prior.spec();
    if spec.kind != LatentKind::WPlus {
        return Err(AnchorError::Unsupported("slot mixing needs a W+ prior".into()));
    }
    mix.validate(spec.num_slots)?;
    if code.spec != spec {
        return Err(AnchorError::Spec(format!(
            "latent {:?} does not match the prior's {spec:?}",
            code.spec
        )));
    }
    let fresh = prior.sample_latent(mix.seed)?;
    let mut values = code.values.clone();
    let (a, b) = (mix.start * spec.dim, mix.end * spec.dim);
    values.data_mut()[a..b].copy_from_slice(&fresh.values.data()[a..b]);
    LatentCode::new(values, spec)
}

/// Appearance variant of `x`: encode, replace the mixed slots, decode through
/// `dst` (or the prior's ToRGB when `dst` is `None`).
pub fn multimodal_sample<T: Scalar>(
    x: &DomainImage<T>,
    src: &DomainAdapter<T>,
    dst: Option<&DomainAdapter<T>>,
    prior: &GeneratorPrior<T>,
    mix: &MixSpec,
) -> Result<DomainImage<T>> {
    check_bound(prior, &[src])?;
    if let Some(d) = dst {
        check_bound(prior, &[d])?;
    }
    let code = mix_code(&src.encode(x)?, prior, mix)?;
    let f = prior.generate_features(&code)?;
    match dst {
        Some(d) => d.regress_image(&f),
        None => prior.to_rgb(&f),
    }
}

/// Feeds `x` through `chain[0] -> chain[1] -> ...`, returning every intermediate output.
pub fn progressive_translate<T: Scalar>(
    x: &DomainImage<T>,
    chain: &[&DomainAdapter<T>],
    prior: &GeneratorPrior<T>,
) -> Result<Vec<DomainImage<T>>> {
    if chain.len() < 2 {
        return Err(AnchorError::Contract(format!(
            "a chain needs at least 2 adapters, got {}",
            chain.len()
        )));
    }
    let mut outputs: Vec<DomainImage<T>> = Vec::with_capacity(chain.len() - 1);
    for (index, pair) in chain.windows(2).enumerate() {
        let input = outputs.last().unwrap_or(x);
        let y = translate(input, pair[0], pair[1], prior).map_err(|e| AnchorError::Chain {
            index,
            source: Box::new(e),
        })?;
        outputs.push(y);
    }
    Ok(outputs)
}

fn rms_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    (sq / a.len() as f64).sqrt()
}

/// Distance between the anchored features of two images: the Euclidean norm
/// divided by the square root of the element count.
pub fn semantic_distance<T: Scalar>(
    x_a: &DomainImage<T>,
    adapter_a: &DomainAdapter<T>,
    x_b: &DomainImage<T>,
    adapter_b: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<f64> {
    check_bound(prior, &[adapter_a, adapter_b])?;
    let fa = prior.generate_features(&adapter_a.encode(x_a)?)?;
    let fb = prior.generate_features(&adapter_b.encode(x_b)?)?;
    Ok(rms_distance(fa.values.data(), fb.values.data()))
}

/// Pairwise [`semantic_distance`] matrix between two image sets.
pub fn distance_matrix<T: Scalar>(
    xs_a: &[DomainImage<T>],
    adapter_a: &DomainAdapter<T>,
    xs_b: &[DomainImage<T>],
    adapter_b: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<Vec<Vec<f64>>> {
    let fa = anchor_features(xs_a, adapter_a, prior)?;
    let fb = anchor_features(xs_b, adapter_b, prior)?;
    let per: usize = prior.feature_shape().iter().product();
    Ok(fa
        .data()
        .chunks(per)
        .map(|ra| fb.data().chunks(per).map(|rb| rms_distance(ra, rb)).collect())
        .collect())
}

/// Fraction of rows whose smallest entry sits on the diagonal. Ties go to
/// the lower column.
pub fn nearest_match_accuracy(d: &[Vec<f64>]) -> f64 {
    let hits = d
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v < row[best] { j } else { best });
            best == *i
        })
        .count();
    hits as f64 / d.len().max(1) as f64
}

/// Fraction of domain-A items whose own partner is the nearest domain-B item
/// in anchored feature space.
pub fn retrieval_diagnostic<T: Scalar>(
    pairs: &[(DomainImage<T>, DomainImage<T>)],
    adapter_a: &DomainAdapter<T>,
    adapter_b: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(AnchorError::Contract(format!(
            "retrieval needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let (xa, xb): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    Ok(nearest_match_accuracy(&distance_matrix(
        &xa, adapter_a, &xb, adapter_b, prior,
    )?))
}

/// Checks that an exported image satisfies its kind's value contract.
pub fn check_export<T: Scalar>(img: &DomainImage<T>, kind: DomainKind) -> Result<()> {
    if img.kind != kind {
        return Err(AnchorError::Domain(format!("expected {kind}, got {}", img.kind)));
    }
    img.check()
}
