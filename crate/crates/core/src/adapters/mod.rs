//! Per-domain encoder, regressor and discriminator.

mod nets;

use std::path::Path;

use anchor_nn::{Bound, Graph, Mode, ParamSet, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{DomainImage, DomainKind};
use crate::prior::{FeatureMap, GeneratorPrior, LatentCode, LatentKind, LatentSpec};
use crate::{AnchorError, Result};

pub use nets::{DiscriminatorNet, EncoderNet, RegressorNet, REGRESSOR_WIDTHS};

pub const ADAPTER_FORMAT: &str = "anchor-adapter/1";

/// Architecture knobs shared by the three networks of an adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Side length of the domain's images.
    pub resolution: usize,
    /// Base channel count of the encoder pyramid.
    pub encoder_width: usize,
    /// Multiplier on the regressor's hidden widths.
    pub regressor_width: f64,
    /// Hidden regressor layers; the output projection comes on top.
    pub regressor_hidden: usize,
    pub discriminator_width: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            encoder_width: 16,
            regressor_width: 0.25,
            regressor_hidden: REGRESSOR_WIDTHS.len(),
            discriminator_width: 16,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnchorError::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return bad(format!(
                "adapter resolution {} must be a power-of-two multiple of the 16 px minimum stage",
                self.resolution
            ));
        }
        if self.encoder_width == 0 || self.discriminator_width == 0 {
            return bad("network widths must be positive".into());
        }
        if !(self.regressor_width > 0.0 && self.regressor_width.is_finite()) {
            return bad(format!(
                "regressor width factor {} must be positive",
                self.regressor_width
            ));
        }
        if self.regressor_hidden == 0 || self.regressor_hidden > REGRESSOR_WIDTHS.len() {
            return bad(format!(
                "regressor hidden layers must be in 1..={}",
                REGRESSOR_WIDTHS.len()
            ));
        }
        Ok(())
    }

    pub fn regressor_widths(&self) -> Vec<usize> {
        REGRESSOR_WIDTHS[..self.regressor_hidden]
            .iter()
            .map(|&c| ((c as f64 * self.regressor_width).round() as usize).max(4))
            .collect()
    }
}

/// Image encoder `E`: domain image to latent code.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub params: ParamSet<T>,
    pub net: EncoderNet,
    /// Added to the head outputs: w̄ for a W+ prior, zero for Z.
    pub offset: Tensor<T>,
    pub in_channels: usize,
}

impl<T: Scalar> Encoder<T> {
    /// Codes `[n, num_slots, dim]` for network inputs `x[n, C, R, R]`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let raw = self.net.forward(g, b, x);
        let off = g.input(self.offset.clone());
        g.add_suffix(raw, off)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }
}

/// Feature regressor `R`: pre-ToRGB features to domain values or logits.
#[derive(Clone, Debug)]
pub struct Regressor<T> {
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    pub net: RegressorNet,
    pub out_channels: usize,
}

impl<T: Scalar> Regressor<T> {
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        f: Var,
        mode: Mode,
        updates: &mut Vec<anchor_nn::BnUpdate<T>>,
    ) -> Var {
        self.net.forward(g, b, &self.buffers, f, mode, updates)
    }

    /// Eval-mode output for a feature batch `[n, C_f, H_f, W_f]`.
    pub fn apply(&self, f: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let fv = g.input(f.clone());
        let y = self.forward(&mut g, &b, fv, Mode::Eval, &mut Vec::new());
        g.value(y).clone()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn num_layers(&self) -> usize {
        self.net.num_layers()
    }
}

/// Realism critic `D` over RGB images.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamSet<T>,
    pub net: DiscriminatorNet,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(resolution: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = DiscriminatorNet::build(&mut params, resolution, width, &mut rng);
        Self { params, net }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        self.net.forward(g, b, x)
    }

    /// Logits `[n]` for images `[n, 3, R, R]`.
    pub fn score(&self, x: &Tensor<T>) -> Tensor<T> {
        nets::score(&self.net, &self.params, x)
    }
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds an encoder whose output matches `spec`, offset by `mean_latent`.
pub fn build_encoder<T: Scalar>(
    kind: DomainKind,
    spec: LatentSpec,
    mean_latent: Option<&LatentCode<T>>,
    config: &AdapterConfig,
) -> Result<Encoder<T>> {
    config.validate()?;
    kind.validate()?;
    spec.validate()?;
    let mut params = ParamSet::new();
    let in_c = kind.network_channels();
    let net = EncoderNet::build(
        &mut params,
        in_c,
        config.resolution,
        config.encoder_width,
        spec,
        &mut seeded(config.seed, 1),
    );
    let offset = match (spec.kind, mean_latent) {
        (LatentKind::WPlus, Some(m)) => m.values.clone().reshape(&[spec.num_slots * spec.dim]),
        (LatentKind::WPlus, None) => {
            return Err(AnchorError::Contract(
                "a W+ encoder needs the prior's mean latent".into(),
            ))
        }
        (LatentKind::Z, _) => Tensor::zeros(&[spec.num_slots * spec.dim]),
    };
    Ok(Encoder {
        params,
        net,
        offset,
        in_channels: in_c,
    })
}

/// Builds a regressor from `feature_channels` at `feature_size` to the data resolution.
pub fn build_regressor<T: Scalar>(
    kind: DomainKind,
    feature_channels: usize,
    feature_size: usize,
    config: &AdapterConfig,
) -> Result<Regressor<T>> {
    config.validate()?;
    kind.validate()?;
    if config.resolution < feature_size || !config.resolution.is_multiple_of(feature_size) {
        return Err(AnchorError::Config(format!(
            "data resolution {} is not a power-of-two multiple of the feature size {feature_size}",
            config.resolution
        )));
    }
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    let out_c = kind.network_channels();
    let net = RegressorNet::build(
        &mut params,
        &mut buffers,
        feature_channels,
        out_c,
        &config.regressor_widths(),
        config.resolution / feature_size,
        &mut seeded(config.seed, 2),
    );
    Ok(Regressor {
        params,
        buffers,
        net,
        out_channels: out_c,
    })
}

/// Everything one domain contributes to a registry.
#[derive(Clone, Debug)]
pub struct DomainAdapter<T> {
    pub domain_id: String,
    pub kind: DomainKind,
    pub config: AdapterConfig,
    pub spec: LatentSpec,
    pub feature_shape: [usize; 3],
    pub encoder: Encoder<T>,
    pub regressor: Regressor<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub prior_fingerprint: String,
    pub config_hash: String,
}

impl<T: Scalar> DomainAdapter<T> {
    /// Freshly initialized adapter for `prior`.
    pub fn new(
        domain_id: &str,
        kind: DomainKind,
        prior: &GeneratorPrior<T>,
        config: &AdapterConfig,
    ) -> Result<Self> {
        let spec = prior.spec();
        let [cf, hf, _] = prior.feature_shape();
        let encoder = build_encoder(kind, spec, prior.mean_latent(), config)?;
        let regressor = build_regressor(kind, cf, hf, config)?;
        let discriminator = Some(Discriminator::new(
            prior.resolution(),
            config.discriminator_width,
            config.seed ^ 0xd15c,
        ));
        Ok(Self {
            domain_id: domain_id.to_string(),
            kind,
            config: config.clone(),
            spec,
            feature_shape: prior.feature_shape(),
            encoder,
            regressor,
            discriminator,
            prior_fingerprint: prior.fingerprint().to_string(),
            config_hash: String::new(),
        })
    }

    /// Encoder plus regressor parameters.
    pub fn num_parameters(&self) -> usize {
        self.encoder.num_parameters() + self.regressor.num_parameters()
    }

    pub fn check_image(&self, x: &DomainImage<T>) -> Result<()> {
        let r = self.config.resolution;
        if x.kind != self.kind {
            return Err(AnchorError::Domain(format!(
                "domain `{}` expects {} images, got {}",
                self.domain_id, self.kind, x.kind
            )));
        }
        if x.pixels.shape() != [self.kind.stored_channels(), r, r] {
            return Err(AnchorError::Domain(format!(
                "domain `{}` expects {}x{r} images, got {:?}",
                self.domain_id,
                r,
                x.pixels.shape()
            )));
        }
        x.check()
    }

    /// Latent batch `[n, num_slots, dim]` for network inputs `[n, C, R, R]`.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let b = self.encoder.params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let c = self.encoder.forward(&mut g, &b, xv);
        g.value(c).clone()
    }

    pub fn encode(&self, x: &DomainImage<T>) -> Result<LatentCode<T>> {
        self.check_image(x)?;
        let input = x.network_input();
        let s = input.shape().to_vec();
        let codes = self.encode_batch(&input.reshape(&[1, s[0], s[1], s[2]]));
        let code = LatentCode::new(codes.slice0(0), self.spec)?;
        Ok(code)
    }

    /// Raw regressor output `(C, R, R)`: values for continuous domains, logits otherwise.
    pub fn regress(&self, f: &FeatureMap<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.feature_shape;
        if f.values.shape() != [c, h, w] {
            return Err(AnchorError::Spec(format!(
                "feature map {:?} does not match {:?}",
                f.values.shape(),
                self.feature_shape
            )));
        }
        Ok(self
            .regressor
            .apply(&f.values.clone().reshape(&[1, c, h, w]))
            .slice0(0))
    }

    /// Regressed image in export form: clamped values or argmax class maps.
    pub fn regress_image(&self, f: &FeatureMap<T>) -> Result<DomainImage<T>> {
        let out = self.regress(f)?;
        DomainImage::new(self.domain_id.clone(), export(&out, self.kind), self.kind)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::json!({
            "domain_id": self.domain_id,
            "kind": self.kind,
            "config": self.config,
            "latent_spec": self.spec,
            "feature_shape": self.feature_shape,
            "prior_fingerprint": self.prior_fingerprint,
            "config_hash": self.config_hash,
            "has_discriminator": self.discriminator.is_some(),
        });
        let mut ck = Checkpoint::new(ADAPTER_FORMAT, meta);
        ck.push_set("enc.", &self.encoder.params);
        ck.push("enc_offset", self.encoder.offset.clone());
        ck.push_set("reg.", &self.regressor.params);
        ck.push_set("reg_buf.", &self.regressor.buffers);
        if let Some(d) = &self.discriminator {
            ck.push_set("disc.", &d.params);
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let bad = |reason: String| AnchorError::Format {
            what: ADAPTER_FORMAT.into(),
            reason,
        };
        let field = |name: &str| {
            ck.meta
                .get(name)
                .cloned()
                .ok_or_else(|| bad(format!("missing {name}")))
        };
        let parse_err = |e: serde_json::Error| bad(e.to_string());
        let domain_id: String = serde_json::from_value(field("domain_id")?).map_err(parse_err)?;
        let kind: DomainKind = serde_json::from_value(field("kind")?).map_err(parse_err)?;
        let config: AdapterConfig = serde_json::from_value(field("config")?).map_err(parse_err)?;
        let spec: LatentSpec = serde_json::from_value(field("latent_spec")?).map_err(parse_err)?;
        let feature_shape: [usize; 3] = serde_json::from_value(field("feature_shape")?).map_err(parse_err)?;
        let prior_fingerprint: String =
            serde_json::from_value(field("prior_fingerprint")?).map_err(parse_err)?;
        let config_hash: String = serde_json::from_value(field("config_hash")?).map_err(parse_err)?;
        let has_disc: bool = serde_json::from_value(field("has_discriminator")?).map_err(parse_err)?;

        let offset = ck.tensor("enc_offset")?.clone();
        let mean = LatentCode::new(offset.clone().reshape(&spec.shape()), spec)?;
        let mut encoder = build_encoder(kind, spec, Some(&mean), &config)?;
        ck.fill_set("enc.", &mut encoder.params)?;
        let mut regressor = build_regressor(kind, feature_shape[0], feature_shape[1], &config)?;
        ck.fill_set("reg.", &mut regressor.params)?;
        ck.fill_set("reg_buf.", &mut regressor.buffers)?;
        let discriminator = if has_disc {
            let mut d = Discriminator::new(feature_shape[1], config.discriminator_width, 0);
            ck.fill_set("disc.", &mut d.params)?;
            Some(d)
        } else {
            None
        };
        Ok(Self {
            domain_id,
            kind,
            config,
            spec,
            feature_shape,
            encoder,
            regressor,
            discriminator,
            prior_fingerprint,
            config_hash,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, ADAPTER_FORMAT)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            AnchorError::Format { reason, .. } => AnchorError::Corruption {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Export form of a raw regressor output `(C, H, W)`.
///
/// Continuous values are clamped to `[-1, 1]`; logits become class indices
/// by argmax, with ties resolved toward the lower class.
pub fn export<T: Scalar>(out: &Tensor<T>, kind: DomainKind) -> Tensor<T> {
    let (c, h, w) = (out.dim(0), out.dim(1), out.dim(2));
    match kind {
        DomainKind::Continuous { .. } => out.map(|v| v.max(-T::one()).min(T::one())),
        DomainKind::Categorical { .. } => {
            let plane = h * w;
            let d = out.data();
            let idx = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[k * plane + p] > d[best * plane + p] {
                            best = k;
                        }
                    }
                    T::lit(best as f64)
                })
                .collect();
            Tensor::new(&[1, h, w], idx)
        }
    }
}

#[cfg(test)]
mod tests;
