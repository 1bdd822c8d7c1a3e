use std::path::Path;

use anchor_nn::layers::he_std;
use anchor_nn::{Adam, Bound, Conv2d, Graph, Linear, ParamSet, Scalar, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensor_digest, Checkpoint};
use crate::data::io::PALETTE;
use crate::data::{
    generate_scene, render_domain, DomainImage, DomainKind, RenderKind, SceneConfig, ShapeKind,
};
use crate::{AnchorError, Result};

pub const EXTRACTOR_FORMAT: &str = "anchor-extractor/1";

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub resolution: usize,
    pub width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Scenes are drawn from seeds `seed_start..seed_start + samples`.
    pub seed_start: u64,
    pub samples: usize,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            width: 16,
            steps: 400,
            batch: 16,
            lr: 2e-3,
            seed_start: 9_000_000,
            samples: 1024,
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    convs: Vec<Conv2d>,
    count_head: Linear,
    kind_head: Linear,
    dim: usize,
}

impl Net {
    fn build<R: Rng + ?Sized>(ps: &mut ParamSet<f32>, width: usize, max_shapes: usize, rng: &mut R) -> Self {
        let plan = [
            (3, width, 1),
            (width, 2 * width, 2),
            (2 * width, 4 * width, 2),
            (4 * width, 4 * width, 2),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| {
                Conv2d::new(
                    ps,
                    &format!("conv.{i}"),
                    ci,
                    co,
                    3,
                    s,
                    true,
                    he_std(ci * 9, SLOPE),
                    rng,
                )
            })
            .collect();
        let dim = 4 * width;
        let count_head = Linear::new(ps, "count", dim, max_shapes, 1.0 / (dim as f64).sqrt(), 0.0, rng);
        let kind_head = Linear::new(
            ps,
            "kinds",
            dim,
            ShapeKind::ALL.len(),
            1.0 / (dim as f64).sqrt(),
            0.0,
            rng,
        );
        Self {
            convs,
            count_head,
            kind_head,
            dim,
        }
    }

    /// Globally pooled embedding `[n, dim]`.
    fn embed(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, b, h);
            h = g.leaky_relu(y, SLOPE as f32);
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]]);
        let sum = g.sum_last(flat, &[s[0], s[1]]);
        g.scale(sum, 1.0 / (s[2] * s[3]) as f32)
    }
}

/// Frozen embedding network trained in-repo to count shapes and recognize
/// their kinds in synthetic RGB scenes.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    params: ParamSet<f32>,
    net: Net,
    fingerprint: String,
    /// Final training loss, for the record.
    pub final_loss: Option<f64>,
}

/// Three display planes in `[-1, 1]` for any domain image.
pub fn display_planes<T: Scalar>(img: &DomainImage<T>) -> Tensor<f32> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    match img.kind {
        DomainKind::Categorical { .. } => {
            for (i, c) in img.class_indices().into_iter().enumerate() {
                let rgb = PALETTE[c % PALETTE.len()];
                for ch in 0..3 {
                    out[ch * plane + i] = rgb[ch] as f32 / 255.0 * 2.0 - 1.0;
                }
            }
        }
        DomainKind::Continuous { channels } => {
            let d = img.pixels.data();
            for ch in 0..3 {
                let src = if channels >= 3 { ch } else { 0 };
                for i in 0..plane {
                    out[ch * plane + i] = d[src * plane + i].as_f64() as f32;
                }
            }
        }
    }
    Tensor::new(&[3, h, w], out)
}

impl FeatureExtractor {
    fn fresh(config: ExtractorConfig) -> Result<Self> {
        config.scene.validate()?;
        if config.width == 0 || config.resolution < 8 {
            return Err(AnchorError::Config(
                "extractor needs width >= 1 and resolution >= 8".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let net = Net::build(&mut params, config.width, config.scene.max_shapes, &mut rng);
        let mut e = Self {
            config,
            params,
            net,
            fingerprint: String::new(),
            final_loss: None,
        };
        e.fingerprint = e.compute_fingerprint();
        Ok(e)
    }

    fn compute_fingerprint(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        tensor_digest(&format!("{EXTRACTOR_FORMAT}{config}"), self.params.iter())
    }

    /// Trains from scratch; a pure function of `config`.
    pub fn train(config: ExtractorConfig) -> Result<Self> {
        let mut e = Self::fresh(config)?;
        let cfg = e.config.clone();
        if cfg.steps == 0 || cfg.batch == 0 || cfg.samples == 0 {
            return Err(AnchorError::Config(
                "extractor training needs steps, batch and samples >= 1".into(),
            ));
        }
        let scene_cfg = SceneConfig {
            canvas: (cfg.resolution, cfg.resolution),
            ..cfg.scene.clone()
        };
        let mut images = Vec::with_capacity(cfg.samples);
        let mut counts = Vec::with_capacity(cfg.samples);
        let mut kinds = Vec::with_capacity(cfg.samples);
        for s in 0..cfg.samples as u64 {
            let scene = generate_scene(cfg.seed_start + s, &scene_cfg)?;
            images.push(render_domain::<f32>(&scene, RenderKind::Rgb, "rgb").pixels);
            counts.push(scene.shapes.len() - 1);
            let mut present = [0.0f32; 3];
            for sh in &scene.shapes {
                present[sh.kind.class_index() - 1] = 1.0;
            }
            kinds.push(present);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7);
        let mut opt = Adam::new(&e.params, cfg.lr, (0.9, 0.999));
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..cfg.samples)).collect();
            let x = Tensor::stack(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>());
            let mut g = Graph::new();
            let b = e.params.bind(&mut g, true);
            let xv = g.input(x);
            let emb = e.net.embed(&mut g, &b, xv);
            let cl = e.net.count_head.forward(&mut g, &b, emb);
            let count_loss = g.softmax_cross_entropy(cl, &idx.iter().map(|&i| counts[i]).collect::<Vec<_>>());
            // Multi-label presence: softplus(l) - y * l is the logistic loss.
            let kl = e.net.kind_head.forward(&mut g, &b, emb);
            let y = g.input(Tensor::new(
                &[cfg.batch, 3],
                idx.iter().flat_map(|&i| kinds[i]).collect(),
            ));
            let sp = g.softplus(kl);
            let yl = g.mul(y, kl);
            let bce = g.sub(sp, yl);
            let kind_loss = g.mean(bce);
            let loss = g.add(count_loss, kind_loss);
            let v = g.value(loss).data()[0] as f64;
            if !v.is_finite() {
                return Err(AnchorError::Training {
                    step,
                    reason: format!("extractor loss is {v}"),
                });
            }
            g.backward(loss);
            let grads = e.params.grads(&g, &b);
            opt.step(&mut e.params, &grads);
            e.final_loss = Some(v);
        }
        e.fingerprint = e.compute_fingerprint();
        Ok(e)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.net.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Embedding rows for a set of images, processed in chunks.
    pub fn embed<T: Scalar>(&self, images: &[DomainImage<T>]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(images.len(), self.dim());
        let mut row = 0;
        for chunk in images.chunks(64) {
            let planes: Vec<Tensor<f32>> = chunk.iter().map(display_planes).collect();
            let shape = planes[0].shape().to_vec();
            if planes.iter().any(|p| p.shape() != shape.as_slice()) {
                return Err(AnchorError::Contract(
                    "images in one embedding call must share a size".into(),
                ));
            }
            let x = Tensor::stack(&planes.iter().collect::<Vec<_>>());
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let xv = g.input(x);
            let emb = self.net.embed(&mut g, &b, xv);
            for r in g.value(emb).data().chunks(self.dim()) {
                for (j, &v) in r.iter().enumerate() {
                    out[(row, j)] = v as f64;
                }
                row += 1;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "fingerprint": self.fingerprint,
            "final_loss": self.final_loss,
        });
        let mut ck = Checkpoint::new(EXTRACTOR_FORMAT, meta);
        ck.push_set("net.", &self.params);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<f32>::load(path, EXTRACTOR_FORMAT)?;
        let corrupt = |reason: String| AnchorError::Corruption {
            path: path.to_path_buf(),
            reason,
        };
        let config: ExtractorConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| corrupt(e.to_string()))?;
        let mut e = Self::fresh(config)?;
        ck.fill_set("net.", &mut e.params)
            .map_err(|e| corrupt(e.to_string()))?;
        e.final_loss = ck.meta["final_loss"].as_f64();
        e.fingerprint = e.compute_fingerprint();
        if ck.meta["fingerprint"].as_str() != Some(e.fingerprint.as_str()) {
            return Err(corrupt("extractor weights do not match their fingerprint".into()));
        }
        Ok(e)
    }

    /// Loads `path` if present, otherwise trains from `config` and saves there.
    pub fn load_or_train(path: &Path, config: ExtractorConfig) -> Result<Self> {
        if path.exists() {
            let e = Self::load(path)?;
            if e.config == config {
                return Ok(e);
            }
            log::warn!(
                "cached extractor at {} has a different config; retraining",
                path.display()
            );
        }
        let e = Self::train(config)?;
        e.save(path)?;
        Ok(e)
    }
}
