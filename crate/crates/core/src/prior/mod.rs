//! The frozen generator prior `G = ToRGB ∘ G_feat` and its latent space.

mod net;
mod pretrain;

use std::path::Path;

use anchor_nn::{Bound, Graph, ParamSet, Scalar, Tensor, Var};
use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensor_digest, Checkpoint};
use crate::data::{DomainImage, DomainKind};
use crate::error::IoContext;
use crate::{AnchorError, Result};

use net::Arch;
pub use net::Backend;
pub use pretrain::{pretrain_generator, write_sample_grid, PretrainConfig, PretrainReport};

pub const PRIOR_FORMAT: &str = "anchor-prior/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Z,
    WPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub kind: LatentKind,
    pub dim: usize,
    pub num_slots: usize,
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_slots == 0 {
            return Err(AnchorError::Spec(format!(
                "latent spec needs dim, slots >= 1, got {self:?}"
            )));
        }
        if self.kind == LatentKind::Z && self.num_slots != 1 {
            return Err(AnchorError::Spec(format!(
                "a Z latent has one slot, got {}",
                self.num_slots
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.num_slots, self.dim]
    }
}

/// One latent point, stored `(num_slots, dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Tensor<T>,
    pub spec: LatentSpec,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Tensor<T>, spec: LatentSpec) -> Result<Self> {
        if values.shape() != spec.shape() {
            return Err(AnchorError::Spec(format!(
                "latent of shape {:?} does not match {:?}",
                values.shape(),
                spec.shape()
            )));
        }
        if !values.all_finite() {
            return Err(AnchorError::Numerical("non-finite latent code".into()));
        }
        Ok(Self { values, spec })
    }

    /// Splits a `(n, num_slots, dim)` batch into codes.
    pub fn unbatch(batch: &Tensor<T>, spec: LatentSpec) -> Result<Vec<Self>> {
        (0..batch.dim(0))
            .map(|i| Self::new(batch.slice0(i), spec))
            .collect()
    }

    pub fn batch(codes: &[Self]) -> Tensor<T> {
        Tensor::stack(&codes.iter().map(|c| &c.values).collect::<Vec<_>>())
    }
}

/// Pre-ToRGB activations `(C_f, H_f, W_f)` of one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub source: Option<LatentCode<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub backend: Backend,
    /// Output side length; a power of two of at least 8.
    pub resolution: usize,
    pub latent_dim: usize,
    /// Channels per stage from 4x4 up to `resolution`; the last entry is C_f.
    pub channels: Vec<usize>,
    /// Fully connected layers after pixel normalization in the mapping head.
    pub mapping_layers: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Style,
            resolution: 64,
            latent_dim: 64,
            channels: vec![128, 128, 64, 64, 32],
            mapping_layers: 2,
            seed: 0,
        }
    }
}

impl PriorConfig {
    /// Smaller 32x32 generator used by tests and quick runs.
    pub fn compact() -> Self {
        Self {
            resolution: 32,
            channels: vec![64, 64, 32, 32],
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnchorError::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return bad(format!(
                "generator resolution {} must be a power of two >= 8",
                self.resolution
            ));
        }
        if self.channels.len() != self.stages() {
            return bad(format!(
                "resolution {} needs {} channel entries (4x4 up), got {}",
                self.resolution,
                self.stages(),
                self.channels.len()
            ));
        }
        if self.latent_dim == 0 || self.channels.contains(&0) {
            return bad("latent dim and channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn latent_spec(&self) -> LatentSpec {
        match self.backend {
            Backend::Style => LatentSpec {
                kind: LatentKind::WPlus,
                dim: self.latent_dim,
                num_slots: 2 * self.stages() - 1,
            },
            Backend::Plain => LatentSpec {
                kind: LatentKind::Z,
                dim: self.latent_dim,
                num_slots: 1,
            },
        }
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [
            *self.channels.last().expect("validated"),
            self.resolution,
            self.resolution,
        ]
    }
}

/// How a prior came to be, recorded in its checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub steps: usize,
    pub train_images: usize,
    pub final_d_loss: Option<f64>,
    pub final_g_loss: Option<f64>,
    pub mean_latent_samples: usize,
    pub note: String,
}

/// Standard normal latent of shape `(num_slots, dim)`, deterministic per seed.
pub fn sample_gaussian<T: Scalar>(spec: &LatentSpec, seed: u64) -> Result<LatentCode<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode::new(Tensor::randn(&spec.shape(), 1.0, &mut rng), *spec)
}

/// A frozen generator. Parameters are only reachable read-only and are
/// bound as constants, so nothing downstream can update them.
#[derive(Clone, Debug)]
pub struct GeneratorPrior<T> {
    config: PriorConfig,
    params: ParamSet<T>,
    arch: Arch,
    mean_latent: Option<LatentCode<T>>,
    provenance: Provenance,
    fingerprint: String,
}

impl<T: Scalar> GeneratorPrior<T> {
    /// Randomly initialized prior from `config.seed`.
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let arch = Arch::build(&config, &mut params, &mut rng);
        let mut prior = Self {
            config,
            params,
            arch,
            mean_latent: None,
            provenance: Provenance::default(),
            fingerprint: String::new(),
        };
        prior.refresh_fingerprint();
        Ok(prior)
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn spec(&self) -> LatentSpec {
        self.config.latent_spec()
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.config.feature_shape()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub(crate) fn set_provenance(&mut self, p: Provenance) {
        self.provenance = p;
    }

    pub fn mean_latent(&self) -> Option<&LatentCode<T>> {
        self.mean_latent.as_ref()
    }

    /// Content hash of configuration, weights and mean latent.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn compute_fingerprint(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mean = self.mean_latent.as_ref().map(|m| ("mean_latent", &m.values));
        tensor_digest(&format!("{PRIOR_FORMAT}{config}"), self.params.iter().chain(mean))
    }

    fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.compute_fingerprint();
    }

    /// Binds the weights as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Mapping head on `z[n, dim]`; the identity for a Z prior.
    pub fn map_graph(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Var {
        self.arch.map(g, b, z)
    }

    /// `G_feat` on latents `[n, num_slots, dim]`, giving `[n, C_f, H_f, W_f]`.
    pub fn features_graph(&self, g: &mut Graph<T>, b: &Bound, codes: Var) -> Var {
        self.arch.features(g, b, codes, &self.spec())
    }

    /// ToRGB head on `[n, C_f, H_f, W_f]`.
    pub fn to_rgb_graph(&self, g: &mut Graph<T>, b: &Bound, f: Var) -> Var {
        self.arch.to_rgb(g, b, f)
    }

    /// Mapped latents for `z[n, dim]`, replicated over every slot.
    pub fn codes_from_z(&self, z: &Tensor<T>) -> Tensor<T> {
        let spec = self.spec();
        let n = z.dim(0);
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let zv = g.input(z.clone());
        let w = self.map_graph(&mut g, &b, zv);
        let w = g.value(w).data();
        let mut out = Vec::with_capacity(n * spec.num_slots * spec.dim);
        for row in w.chunks(spec.dim) {
            for _ in 0..spec.num_slots {
                out.extend_from_slice(row);
            }
        }
        Tensor::new(&[n, spec.num_slots, spec.dim], out)
    }

    /// Latent for `seed`: a Gaussian draw, mapped into W+ for a style prior.
    pub fn sample_latent(&self, seed: u64) -> Result<LatentCode<T>> {
        let spec = self.spec();
        let z = sample_gaussian::<T>(
            &LatentSpec {
                kind: LatentKind::Z,
                dim: spec.dim,
                num_slots: 1,
            },
            seed,
        )?;
        match spec.kind {
            LatentKind::Z => Ok(LatentCode {
                values: z.values,
                spec,
            }),
            LatentKind::WPlus => {
                let codes = self.codes_from_z(&z.values);
                LatentCode::new(codes.reshape(&spec.shape()), spec)
            }
        }
    }

    /// Batch of `n` latents `[n, num_slots, dim]` from `rng`.
    pub fn sample_codes<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let spec = self.spec();
        let z = Tensor::randn(&[n, spec.dim], 1.0, rng);
        match spec.kind {
            LatentKind::Z => z.reshape(&[n, 1, spec.dim]),
            LatentKind::WPlus => self.codes_from_z(&z),
        }
    }

    /// Empirical mean of `n_samples` mapped latents drawn from `seed`, stored as w̄.
    ///
    /// The first draw equals `sample_latent(seed)`.
    pub fn estimate_mean_latent(&mut self, n_samples: usize, seed: u64) -> Result<LatentCode<T>> {
        let spec = self.spec();
        if spec.kind != LatentKind::WPlus {
            return Err(AnchorError::Unsupported(
                "a Z prior regularizes toward the origin and has no mean latent".into(),
            ));
        }
        if n_samples == 0 {
            return Err(AnchorError::Config(
                "mean latent needs at least one sample".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0f64; spec.dim];
        let mut left = n_samples;
        while left > 0 {
            let n = left.min(1024);
            let z = Tensor::<T>::randn(&[n, spec.dim], 1.0, &mut rng);
            let mut g = Graph::new();
            let b = self.bind(&mut g);
            let zv = g.input(z);
            let w = self.map_graph(&mut g, &b, zv);
            for row in g.value(w).data().chunks(spec.dim) {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
            }
            left -= n;
        }
        let mean: Vec<T> = acc.iter().map(|a| T::lit(a / n_samples as f64)).collect();
        let replicated: Vec<T> = (0..spec.num_slots).flat_map(|_| mean.iter().copied()).collect();
        let code = LatentCode::new(Tensor::new(&spec.shape(), replicated), spec)?;
        self.mean_latent = Some(code.clone());
        self.provenance.mean_latent_samples = n_samples;
        self.refresh_fingerprint();
        Ok(code)
    }

    fn check_code(&self, code: &LatentCode<T>) -> Result<()> {
        if code.spec != self.spec() || code.values.shape() != self.spec().shape() {
            return Err(AnchorError::Spec(format!(
                "latent {:?} does not match the prior's {:?}",
                code.values.shape(),
                self.spec()
            )));
        }
        Ok(())
    }

    /// `G_feat` for a batch `[n, num_slots, dim]`.
    pub fn features_batch(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = self.spec();
        if codes.shape().len() != 3 || codes.shape()[1..] != spec.shape() {
            return Err(AnchorError::Spec(format!(
                "latent batch {:?} does not match {:?}",
                codes.shape(),
                spec
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let c = g.input(codes.clone());
        let f = self.features_graph(&mut g, &b, c);
        Ok(g.value(f).clone())
    }

    pub fn generate_features(&self, code: &LatentCode<T>) -> Result<FeatureMap<T>> {
        self.check_code(code)?;
        let f =
            self.features_batch(
                &code
                    .values
                    .clone()
                    .reshape(&[1, code.spec.num_slots, code.spec.dim]),
            )?;
        Ok(FeatureMap {
            values: f.slice0(0),
            source: Some(code.clone()),
        })
    }

    /// ToRGB for a batch `[n, C_f, H_f, W_f]`.
    pub fn to_rgb_batch(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        if f.shape().len() != 4 || f.shape()[1..] != self.feature_shape() {
            return Err(AnchorError::Spec(format!(
                "feature batch {:?} does not match {:?}",
                f.shape(),
                self.feature_shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let fv = g.input(f.clone());
        let x = self.to_rgb_graph(&mut g, &b, fv);
        Ok(g.value(x).clone())
    }

    pub fn to_rgb(&self, f: &FeatureMap<T>) -> Result<DomainImage<T>> {
        let [c, h, w] = self.feature_shape();
        if f.values.shape() != [c, h, w] {
            return Err(AnchorError::Spec(format!(
                "feature map {:?} does not match {:?}",
                f.values.shape(),
                [c, h, w]
            )));
        }
        let x = self.to_rgb_batch(&f.values.clone().reshape(&[1, c, h, w]))?;
        DomainImage::new("rgb", x.slice0(0), DomainKind::Continuous { channels: 3 })
    }

    /// The unsplit generator `G(code)`, evaluated as one graph.
    pub fn generate(&self, code: &LatentCode<T>) -> Result<DomainImage<T>> {
        self.check_code(code)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let c = g.input(
            code.values
                .clone()
                .reshape(&[1, code.spec.num_slots, code.spec.dim]),
        );
        let f = self.features_graph(&mut g, &b, c);
        let x = self.to_rgb_graph(&mut g, &b, f);
        DomainImage::new(
            "rgb",
            g.value(x).slice0(0),
            DomainKind::Continuous { channels: 3 },
        )
    }

    /// Grid of feature channels, each min-max normalized; constant channels are mid-gray.
    pub fn feature_channel_grid(&self, code: &LatentCode<T>, channels: &[usize]) -> Result<GrayImage> {
        let [cf, h, w] = self.feature_shape();
        if channels.is_empty() {
            return Err(AnchorError::Spec("no feature channels requested".into()));
        }
        if let Some(&c) = channels.iter().find(|&&c| c >= cf) {
            return Err(AnchorError::Spec(format!(
                "channel {c} out of range for {cf} feature channels"
            )));
        }
        let f = self.generate_features(code)?;
        let cols = (channels.len() as f64).sqrt().ceil() as usize;
        let rows = channels.len().div_ceil(cols);
        const GUTTER: usize = 1;
        let (gw, gh) = (cols * (w + GUTTER) - GUTTER, rows * (h + GUTTER) - GUTTER);
        let mut grid = GrayImage::new(gw as u32, gh as u32);
        for (cell, &c) in channels.iter().enumerate() {
            let plane = &f.values.data()[c * h * w..(c + 1) * h * w];
            let lo = plane.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
            let hi = plane.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let (oy, ox) = ((cell / cols) * (h + GUTTER), (cell % cols) * (w + GUTTER));
            for y in 0..h {
                for x in 0..w {
                    let v = if hi > lo {
                        (plane[y * w + x].as_f64() - lo) / (hi - lo)
                    } else {
                        0.5
                    };
                    grid.put_pixel(
                        (ox + x) as u32,
                        (oy + y) as u32,
                        image::Luma([(v * 255.0).round() as u8]),
                    );
                }
            }
        }
        Ok(grid)
    }

    pub fn dump_feature_channels(
        &self,
        code: &LatentCode<T>,
        channels: &[usize],
        path: &Path,
    ) -> Result<GrayImage> {
        let grid = self.feature_channel_grid(code, channels)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        grid.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| AnchorError::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        Ok(grid)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::json!({
            "config": self.config,
            "latent_spec": self.spec(),
            "fingerprint": self.fingerprint,
            "provenance": self.provenance,
        });
        let mut ck = Checkpoint::new(PRIOR_FORMAT, meta);
        ck.push_set("g.", &self.params);
        if let Some(m) = &self.mean_latent {
            ck.push("mean_latent", m.values.clone());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a prior from a checkpoint and verifies its recorded fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let bad = |reason: String| AnchorError::Format {
            what: PRIOR_FORMAT.into(),
            reason,
        };
        let config: PriorConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let provenance: Provenance = serde_json::from_value(ck.meta["provenance"].clone())
            .map_err(|e| bad(format!("provenance: {e}")))?;
        let mut prior = Self::new(config)?;
        ck.fill_set("g.", &mut prior.params)?;
        if let Ok(m) = ck.tensor("mean_latent") {
            prior.mean_latent = Some(LatentCode::new(m.clone(), prior.spec())?);
        }
        prior.provenance = provenance;
        prior.refresh_fingerprint();
        let recorded = ck.meta["fingerprint"].as_str().unwrap_or_default();
        // Narrowing an f64 checkpoint to f32 legitimately changes the weights.
        let narrowed = ck.stored_dtype == "f64" && T::DTYPE == "f32";
        if !narrowed && recorded != prior.fingerprint {
            return Err(AnchorError::FingerprintMismatch {
                expected: recorded.to_string(),
                found: prior.fingerprint,
            });
        }
        Ok(prior)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, PRIOR_FORMAT)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            AnchorError::Format { reason, .. } => AnchorError::Corruption {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
