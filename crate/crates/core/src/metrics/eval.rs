use anchor_nn::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    correspondence, fid_proxy, kid_proxy, ssim, EvalReport, FeatureExtractor, GaussianStats, SSIM_WINDOW,
};
use crate::adapters::DomainAdapter;
use crate::data::{DomainImage, DomainKind};
use crate::prior::GeneratorPrior;
use crate::translation::{distance_matrix, nearest_match_accuracy, translate_many};
use crate::{AnchorError, Result};

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores `src -> dst` translation on paired images `(x_src, y_dst)`.
///
/// Rows: `miou` and `miou_shuffled` for class maps, `mse`, `ssim` and
/// `lpips_proxy` for continuous outputs, `fid_proxy` and `kid_proxy` when an
/// extractor is given, then `retrieval`, `semantic_distance_true` and
/// `semantic_distance_mismatched`. The shuffled baseline pairs each target
/// with the translation of a randomly permuted input.
pub fn evaluate_translation<T: Scalar>(
    pairs: &[(DomainImage<T>, DomainImage<T>)],
    src: &DomainAdapter<T>,
    dst: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
    extractor: Option<&FeatureExtractor>,
    seed: u64,
) -> Result<EvalReport> {
    let n = pairs.len();
    if n < 2 {
        return Err(AnchorError::Contract(format!(
            "evaluation needs at least 2 pairs, got {n}"
        )));
    }
    let (xs, ys): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let preds = translate_many(&xs, src, dst, prior)?;
    let hash = &dst.config_hash;
    let proxy = extractor.map_or("none".to_string(), |e| e.fingerprint()[..12].to_string());
    let mut report = EvalReport::new(format!(
        "{} -> {}; proxy metrics from the in-repo extractor ({proxy}), not Inception/LPIPS",
        src.domain_id, dst.domain_id
    ));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    match dst.kind {
        DomainKind::Categorical { .. } => {
            let miou = mean(
                preds
                    .iter()
                    .zip(&ys)
                    .map(|(p, y)| correspondence(p, y, None).map(|c| c.iou.unwrap_or(0.0)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let shuffled = mean(
                (0..n)
                    .map(|i| correspondence(&preds[perm[i]], &ys[i], None).map(|c| c.iou.unwrap_or(0.0)))
                    .collect::<Result<Vec<_>>>()?,
            );
            report.push("miou", miou, n, hash);
            report.push("miou_shuffled", shuffled, n, hash);
        }
        DomainKind::Continuous { .. } => {
            let cs = preds
                .iter()
                .zip(&ys)
                .map(|(p, y)| correspondence(p, y, extractor))
                .collect::<Result<Vec<_>>>()?;
            report.push("mse", mean(cs.iter().filter_map(|c| c.mse)), n, hash);
            if ys[0].height() >= SSIM_WINDOW && ys[0].width() >= SSIM_WINDOW {
                report.push(
                    "ssim",
                    mean(
                        preds
                            .iter()
                            .zip(&ys)
                            .map(|(p, y)| ssim(p, y))
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    n,
                    hash,
                );
            }
            if extractor.is_some() {
                report.push(
                    "lpips_proxy",
                    mean(cs.iter().filter_map(|c| c.feature_distance)),
                    n,
                    hash,
                );
            }
        }
    }
    if let Some(e) = extractor {
        let (ep, ey) = (e.embed(&preds)?, e.embed(&ys)?);
        report.push(
            "fid_proxy",
            fid_proxy(
                &GaussianStats::from_embeddings(&ep)?,
                &GaussianStats::from_embeddings(&ey)?,
            )?,
            n,
            hash,
        );
        report.push("kid_proxy", kid_proxy(&ep, &ey)?, n, hash);
    }
    let d = distance_matrix(&xs, src, &ys, dst, prior)?;
    report.push("retrieval", nearest_match_accuracy(&d), n, hash);
    report.push("semantic_distance_true", mean((0..n).map(|i| d[i][i])), n, hash);
    report.push(
        "semantic_distance_mismatched",
        mean((0..n).map(|i| d[i][(i + 1) % n])),
        n,
        hash,
    );
    Ok(report)
}
