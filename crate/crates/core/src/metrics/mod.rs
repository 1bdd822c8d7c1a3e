//! Evaluation metrics and the finite-difference gradient oracle.
//!
//! Distributional scores use the in-repo [`FeatureExtractor`] instead of an
//! external embedding network, so every such number is a proxy.

mod eval;
mod extractor;

use anchor_nn::{Scalar, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{DomainImage, DomainKind};
use crate::{AnchorError, Result};

pub use eval::evaluate_translation;
pub use extractor::{display_planes, ExtractorConfig, FeatureExtractor, EXTRACTOR_FORMAT};

/// Eigenvalues of a PSD matrix may come out negative by this much, relative to
/// the largest magnitude, before the square root is declared failed.
pub const EIGEN_CLAMP: f64 = 1e-6;

/// Polynomial-kernel MMD is estimated over blocks of at most this many samples per side.
pub const KID_BLOCK: usize = 1000;

pub const SSIM_WINDOW: usize = 7;

/// Mean and covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Statistics of the rows of `embeddings`, with the unbiased covariance.
    pub fn from_embeddings(embeddings: &DMatrix<f64>) -> Result<Self> {
        let n = embeddings.nrows();
        if n < 2 {
            return Err(AnchorError::Contract(format!(
                "need at least 2 embeddings, got {n}"
            )));
        }
        let mean = embeddings.row_mean().transpose();
        let mut centered = embeddings.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(AnchorError::Numerical("non-finite covariance".into()));
    }
    Ok(SymmetricEigen::new(sym))
}

/// Square roots of eigenvalues, clamping small negatives to zero.
fn clamped_sqrt(values: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = values.amax().max(1.0);
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v.sqrt())
            } else if v >= -EIGEN_CLAMP * scale {
                Ok(0.0)
            } else {
                Err(AnchorError::Numerical(format!(
                    "matrix square root met eigenvalue {v:e}"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn fid_proxy(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(AnchorError::Contract(format!(
            "embedding dims differ: {d} vs {}",
            b.mean.len()
        )));
    }
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), and the inner matrix is symmetric.
    let ea = sym_eigen(&a.cov)?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&clamped_sqrt(&ea.eigenvalues)?)
        * ea.eigenvectors.transpose();
    let inner = &root_a * &b.cov * &root_a;
    let cross = clamped_sqrt(&sym_eigen(&inner)?.eigenvalues)?.sum();
    let diff = &a.mean - &b.mean;
    Ok(diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

fn mmd2_unbiased(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        t
    };
    let cross: f64 = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| poly_kernel(x, y)))
        .sum();
    within(a) / (n * (n - 1.0)) + within(b) / (m * (m - 1.0)) - 2.0 * cross / (n * m)
}

/// Unbiased squared MMD with the kernel `(x.y / d + 1)^3`, averaged over blocks.
pub fn kid_proxy(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(AnchorError::Contract(format!(
            "need at least 2 embeddings per side, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(AnchorError::Contract(format!(
            "embedding dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let rows =
        |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let blocks = ra
        .len()
        .max(rb.len())
        .div_ceil(KID_BLOCK)
        .min(ra.len() / 2)
        .min(rb.len() / 2)
        .max(1);
    let chunk = |v: &[Vec<f64>], k: usize| -> Vec<Vec<f64>> {
        let (lo, hi) = (k * v.len() / blocks, (k + 1) * v.len() / blocks);
        v[lo..hi].to_vec()
    };
    let total: f64 = (0..blocks)
        .map(|k| mmd2_unbiased(&chunk(&ra, k), &chunk(&rb, k)))
        .sum();
    Ok(total / blocks as f64)
}

/// Mean structural similarity over all 7x7 windows and channels, computed on
/// values remapped from `[-1, 1]` to `[0, 1]`.
pub fn ssim<T: Scalar>(x: &DomainImage<T>, y: &DomainImage<T>) -> Result<f64> {
    if x.kind.is_categorical() || y.kind.is_categorical() {
        return Err(AnchorError::Contract("ssim needs continuous images".into()));
    }
    if x.pixels.shape() != y.pixels.shape() {
        return Err(AnchorError::Contract(format!(
            "shapes differ: {:?} vs {:?}",
            x.pixels.shape(),
            y.pixels.shape()
        )));
    }
    let (c, h, w) = (x.pixels.dim(0), x.height(), x.width());
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(AnchorError::Contract(format!(
            "ssim needs at least {win}x{win} images"
        )));
    }
    let remap = |v: T| (v.as_f64() + 1.0) * 0.5;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let np = (win * win) as f64;
    let (xd, yd) = (x.pixels.data(), y.pixels.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = ch * h * w;
        for oy in 0..=h - win {
            for ox in 0..=w - win {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let i = plane + (oy + dy) * w + ox + dx;
                        let (a, b) = (remap(xd[i]), remap(yd[i]));
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / np, sy / np);
                // Sample covariances over the window.
                let vx = (sxx - np * mx * mx) / (np - 1.0);
                let vy = (syy - np * my * my) / (np - 1.0);
                let cxy = (sxy - np * mx * my) / (np - 1.0);
                total +=
                    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean class-wise IoU; classes absent from both maps are skipped.
/// Two empty maps score 1.
pub fn mean_iou(prediction: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(AnchorError::Contract(format!(
            "maps differ in size: {} vs {}",
            prediction.len(),
            target.len()
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in prediction.iter().zip(target) {
        if p >= classes || t >= classes {
            return Err(AnchorError::Contract(format!(
                "class index outside [0, {classes})"
            )));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&k| union[k] > 0)
        .map(|k| inter[k] as f64 / union[k] as f64)
        .collect();
    if present.is_empty() {
        return Ok(1.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// IoU of the non-zero classes taken together as one foreground mask.
pub fn foreground_iou(prediction: &[usize], target: &[usize]) -> Result<f64> {
    let p: Vec<usize> = prediction.iter().map(|&c| (c != 0) as usize).collect();
    let t: Vec<usize> = target.iter().map(|&c| (c != 0) as usize).collect();
    if p.len() != t.len() {
        return Err(AnchorError::Contract("maps differ in size".into()));
    }
    let inter = p.iter().zip(&t).filter(|(a, b)| **a == 1 && **b == 1).count();
    let union = p.iter().zip(&t).filter(|(a, b)| **a == 1 || **b == 1).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Paired agreement between a prediction and its ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub iou: Option<f64>,
    /// Euclidean distance between extractor embeddings.
    pub feature_distance: Option<f64>,
    pub mse: Option<f64>,
}

pub fn correspondence<T: Scalar>(
    prediction: &DomainImage<T>,
    target: &DomainImage<T>,
    extractor: Option<&FeatureExtractor>,
) -> Result<Correspondence> {
    if prediction.kind != target.kind {
        return Err(AnchorError::Contract(format!(
            "kinds differ: {} vs {}",
            prediction.kind, target.kind
        )));
    }
    if prediction.pixels.shape() != target.pixels.shape() {
        return Err(AnchorError::Contract(
            "prediction and target shapes differ".into(),
        ));
    }
    match prediction.kind {
        DomainKind::Categorical { classes } => Ok(Correspondence {
            iou: Some(mean_iou(
                &prediction.class_indices(),
                &target.class_indices(),
                classes,
            )?),
            ..Default::default()
        }),
        DomainKind::Continuous { .. } => {
            let mse = prediction
                .pixels
                .data()
                .iter()
                .zip(target.pixels.data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
                / prediction.pixels.numel() as f64;
            let feature_distance = match extractor {
                Some(e) => {
                    let emb = e.embed(&[prediction.clone(), target.clone()])?;
                    Some((emb.row(0) - emb.row(1)).norm())
                }
                None => None,
            };
            Ok(Correspondence {
                iou: None,
                feature_distance,
                mse: Some(mse),
            })
        }
    }
}

/// Settings of [`finite_difference_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Coordinates whose analytic and numeric gradients are both below this
    /// magnitude are skipped, since their ratio measures only rounding noise.
    pub abs_floor: f64,
    /// Checks an evenly spaced subset of at most this many coordinates.
    pub max_coords: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            abs_floor: 1e-9,
            max_coords: None,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central differences of `f` against its analytic gradient at `params`.
///
/// `f` returns the value and, when asked, the gradient. The relative error
/// per coordinate is `|g_fd - g| / (|g_fd| + |g| + 1e-12)`.
pub fn finite_difference_check_with<F>(mut f: F, params: &Tensor<f64>, options: FdOptions) -> Result<FdReport>
where
    F: FnMut(&Tensor<f64>, bool) -> (f64, Option<Tensor<f64>>),
{
    let (v0, grad) = f(params, true);
    let grad = grad.ok_or_else(|| AnchorError::Contract("function returned no gradient".into()))?;
    if !v0.is_finite() || !grad.all_finite() {
        return Err(AnchorError::Numerical(
            "non-finite value or gradient at the base point".into(),
        ));
    }
    if grad.shape() != params.shape() {
        return Err(AnchorError::Contract(format!(
            "gradient {:?} vs params {:?}",
            grad.shape(),
            params.shape()
        )));
    }
    let n = params.numel();
    let stride = options.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for i in (0..n).step_by(stride) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + options.epsilon;
        let (up, _) = f(&probe, false);
        probe.data_mut()[i] = orig - options.epsilon;
        let (dn, _) = f(&probe, false);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !dn.is_finite() {
            return Err(AnchorError::Numerical(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        let numeric = (up - dn) / (2.0 * options.epsilon);
        let analytic = grad.data()[i];
        report.checked += 1;
        if numeric.abs() < options.abs_floor && analytic.abs() < options.abs_floor {
            continue;
        }
        let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs() + 1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// [`finite_difference_check_with`] at default options, returning the maximum relative error.
pub fn finite_difference_check<F>(f: F, params: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>, bool) -> (f64, Option<Tensor<f64>>),
{
    Ok(finite_difference_check_with(
        f,
        params,
        FdOptions {
            epsilon,
            ..FdOptions::default()
        },
    )?
    .max_rel_error)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: String,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64, n: usize, config_hash: &str) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            value,
            n,
            config_hash: config_hash.to_string(),
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "# {}\n{:<width$}  {:>14}  {:>6}  config\n",
            self.header, "metric", "value", "N"
        );
        for r in &self.rows {
            let hash = &r.config_hash[..r.config_hash.len().min(12)];
            out.push_str(&format!(
                "{:<width$}  {:>14.6}  {:>6}  {hash}\n",
                r.metric, r.value, r.n
            ));
        }
        out
    }
}
