use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchor_nn::{apply_bn_updates, Adam, Graph, Mode, Scalar};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adversarial_discriminator_graph, adversarial_generator_graph, latent_loss_graph, reconstruction_graph,
    LossWeights,
};
use crate::adapters::{export, AdapterConfig, DomainAdapter};
use crate::checkpoint::sha256_hex;
use crate::data::{save_grid, DomainDataset, DomainImage, DomainKind};
use crate::error::IoContext;
use crate::prior::GeneratorPrior;
use crate::{AnchorError, Result};

/// Loss traces file inside a run directory.
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Learning rate of the domain discriminator; `None` uses `lr`.
    pub disc_lr: Option<f64>,
    /// `None` picks the defaults for the domain kind.
    pub weights: Option<LossWeights>,
    pub adversarial_enabled: bool,
    /// Steps between snapshot grids; 0 disables them.
    pub snapshot_every: usize,
    pub seed: u64,
    pub adapter: AdapterConfig,
    /// Where traces and snapshots go; nothing is written when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 4,
            lr: 1e-4,
            betas: (0.9, 0.999),
            disc_lr: None,
            weights: None,
            adversarial_enabled: true,
            snapshot_every: 500,
            seed: 0,
            adapter: AdapterConfig::default(),
            run_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(AnchorError::Config(
                "training needs steps >= 1 and batch >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.disc_lr.is_some_and(|l| !(l > 0.0 && l.is_finite()))
        {
            return Err(AnchorError::Config("learning rates must be positive".into()));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        self.adapter.validate()
    }

    pub fn weights_for(&self, kind: DomainKind) -> LossWeights {
        self.weights.unwrap_or_else(|| LossWeights::for_kind(kind))
    }

    /// Digest of every setting that shapes the trained weights.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = None;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub rec: Vec<f64>,
    pub latent: Vec<f64>,
    pub adv: Vec<f64>,
    pub total: Vec<f64>,
    pub disc: Vec<f64>,
    pub snapshots: Vec<PathBuf>,
    pub trace: Option<PathBuf>,
    pub seconds: f64,
}

impl TrainingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,rec,latent,adv,total\n");
        for i in 0..self.rec.len() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                self.rec[i], self.latent[i], self.adv[i], self.total[i]
            ));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(out.as_bytes()).at(path)
    }
}

fn draw<R: Rng>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    if len >= n {
        sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Anchors one domain to the frozen `prior`.
///
/// `real_rgb` is the discriminator's real distribution and is required when
/// the adversarial term is enabled.
pub fn train_domain<T: Scalar>(
    domain_id: &str,
    dataset: &DomainDataset<T>,
    prior: &GeneratorPrior<T>,
    real_rgb: Option<&DomainDataset<T>>,
    config: &TrainingConfig,
) -> Result<(DomainAdapter<T>, TrainingReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(AnchorError::Data(format!(
            "dataset `{}` is empty",
            dataset.domain_id
        )));
    }
    let r = config.adapter.resolution;
    if dataset.resolution() != (r, r) {
        return Err(AnchorError::Config(format!(
            "dataset resolution {:?} differs from the adapter's {r}",
            dataset.resolution()
        )));
    }
    let real_rgb = match (config.adversarial_enabled, real_rgb) {
        (false, _) => None,
        (true, Some(ds)) => {
            let p = prior.resolution();
            if ds.kind != (DomainKind::Continuous { channels: 3 })
                || ds.resolution() != (p, p)
                || ds.is_empty()
            {
                return Err(AnchorError::Config(format!(
                    "real RGB set must hold {p}x{p} RGB images for the adversarial term"
                )));
            }
            Some(ds)
        }
        (true, None) => {
            return Err(AnchorError::Config(
                "the adversarial term needs the real RGB set".into(),
            ));
        }
    };
    let fingerprint = prior.compute_fingerprint();
    if fingerprint != prior.fingerprint() {
        return Err(AnchorError::Integrity(
            "prior weights differ from their recorded fingerprint".into(),
        ));
    }

    let start = Instant::now();
    let kind = dataset.kind;
    let weights = config.weights_for(kind);
    let spec = prior.spec();
    let mean = prior.mean_latent().map(|m| m.values.clone());
    let mut adapter = DomainAdapter::new(domain_id, kind, prior, &config.adapter)?;
    adapter.config_hash = config.hash();
    if !config.adversarial_enabled {
        adapter.discriminator = None;
    }
    let mut enc_opt = Adam::new(&adapter.encoder.params, config.lr, config.betas);
    let mut reg_opt = Adam::new(&adapter.regressor.params, config.lr, config.betas);
    let mut disc_opt = adapter
        .discriminator
        .as_ref()
        .map(|d| Adam::new(&d.params, config.disc_lr.unwrap_or(config.lr), config.betas));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainingReport::default();
    let snap_idx: Vec<usize> = (0..dataset.len().min(4)).collect();
    let snap_dir = config.run_dir.as_ref().map(|d| d.join("snapshots"));

    for step in 0..config.steps {
        if let (Some(dir), true) = (
            &snap_dir,
            config.snapshot_every > 0 && step % config.snapshot_every == 0,
        ) {
            let path = dir.join(format!("step_{step}.png"));
            write_snapshot(&adapter, prior, dataset, &snap_idx, &path)?;
            report.snapshots.push(path);
        }
        let idx = draw(&mut rng, dataset.len(), config.batch);
        let x = dataset.batch(&idx);
        let targets = dataset.raw_batch(&idx);

        // Discriminator step: real prior-domain images against the current translations to RGB.
        if let (Some(disc), Some(opt), Some(real_set)) = (&mut adapter.discriminator, &mut disc_opt, real_rgb)
        {
            let real = real_set.batch(&draw(&mut rng, real_set.len(), config.batch));
            let mut g = Graph::new();
            let eb = adapter.encoder.params.bind(&mut g, false);
            let pb = prior.bind(&mut g);
            let xv = g.input(x.clone());
            let codes = adapter.encoder.forward(&mut g, &eb, xv);
            let f = prior.features_graph(&mut g, &pb, codes);
            let fake = prior.to_rgb_graph(&mut g, &pb, f);
            let fake = g.detach(fake);
            let db = disc.params.bind(&mut g, true);
            let rv = g.input(real);
            let lr = disc.forward(&mut g, &db, rv);
            let lf = disc.forward(&mut g, &db, fake);
            let loss = adversarial_discriminator_graph(&mut g, lr, lf);
            let d_loss = g.value(loss).data()[0].as_f64();
            if !d_loss.is_finite() {
                return Err(AnchorError::Training {
                    step,
                    reason: format!("discriminator loss is {d_loss}"),
                });
            }
            g.backward(loss);
            let grads = disc.params.grads(&g, &db);
            opt.step(&mut disc.params, &grads);
            report.disc.push(d_loss);
        }

        // Encoder and regressor step on the weighted objective.
        let mut g = Graph::new();
        let eb = adapter.encoder.params.bind(&mut g, true);
        let rb = adapter.regressor.params.bind(&mut g, true);
        let pb = prior.bind(&mut g);
        let xv = g.input(x);
        let codes = adapter.encoder.forward(&mut g, &eb, xv);
        let f = prior.features_graph(&mut g, &pb, codes);
        let mut updates = Vec::new();
        let pred = adapter
            .regressor
            .forward(&mut g, &rb, f, Mode::Train, &mut updates);
        let rec = reconstruction_graph(&mut g, pred, &targets, kind);
        let lat = latent_loss_graph(&mut g, codes, &spec, mean.as_ref())?;
        let wr = g.scale(rec, T::lit(weights.lambda_rec));
        let wl = g.scale(lat, T::lit(weights.lambda_latent));
        let mut total = g.add(wr, wl);
        let mut adv_value = 0.0;
        if let Some(disc) = &adapter.discriminator {
            let db = disc.params.bind(&mut g, false);
            let rgb = prior.to_rgb_graph(&mut g, &pb, f);
            let logits = disc.forward(&mut g, &db, rgb);
            let adv = adversarial_generator_graph(&mut g, logits);
            adv_value = g.value(adv).data()[0].as_f64();
            let wa = g.scale(adv, T::lit(weights.lambda_adv));
            total = g.add(total, wa);
        }
        let scalar = |v| g.value(v).data()[0].as_f64();
        let (rec_v, lat_v, total_v) = (scalar(rec), scalar(lat), scalar(total));
        if !total_v.is_finite() {
            return Err(AnchorError::Training {
                step,
                reason: format!("total loss is {total_v} (rec {rec_v}, latent {lat_v}, adv {adv_value})"),
            });
        }
        g.backward(total);
        let eg = adapter.encoder.params.grads(&g, &eb);
        let rg = adapter.regressor.params.grads(&g, &rb);
        enc_opt.step(&mut adapter.encoder.params, &eg);
        reg_opt.step(&mut adapter.regressor.params, &rg);
        apply_bn_updates(&mut adapter.regressor.buffers, updates);
        report.rec.push(rec_v);
        report.latent.push(lat_v);
        report.adv.push(adv_value);
        report.total.push(total_v);
        if step % 250 == 0 {
            log::debug!("{domain_id} step {step}: rec {rec_v:.4} latent {lat_v:.4} adv {adv_value:.4}");
        }
    }

    if prior.compute_fingerprint() != fingerprint {
        return Err(AnchorError::Integrity(
            "prior weights changed during anchoring".into(),
        ));
    }
    if let Some(dir) = &config.run_dir {
        if let Some(snap_dir) = &snap_dir {
            if config.snapshot_every > 0 {
                let path = snap_dir.join(format!("step_{}.png", config.steps));
                write_snapshot(&adapter, prior, dataset, &snap_idx, &path)?;
                report.snapshots.push(path);
            }
        }
        let path = dir.join(TRACE_FILE);
        report.write_csv(&path)?;
        report.trace = Some(path);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((adapter, report))
}

/// One row per image: input, regressed reconstruction, generated RGB.
fn write_snapshot<T: Scalar>(
    adapter: &DomainAdapter<T>,
    prior: &GeneratorPrior<T>,
    dataset: &DomainDataset<T>,
    idx: &[usize],
    path: &Path,
) -> Result<()> {
    let codes = adapter.encode_batch(&dataset.batch(idx));
    let f = prior.features_batch(&codes)?;
    let pred = adapter.regressor.apply(&f);
    let rgb = prior.to_rgb_batch(&f)?;
    let mut cells: Vec<[DomainImage<T>; 3]> = Vec::new();
    for (row, &i) in idx.iter().enumerate() {
        let recon = DomainImage::new(
            adapter.domain_id.clone(),
            export(&pred.slice0(row), adapter.kind),
            adapter.kind,
        )?;
        let gen = DomainImage::new("rgb", rgb.slice0(row), DomainKind::Continuous { channels: 3 })?;
        cells.push([dataset.get(i).clone(), recon, gen]);
    }
    let rows: Vec<Vec<&DomainImage<T>>> = cells.iter().map(|c| c.iter().collect()).collect();
    save_grid(&rows, path)?;
    Ok(())
}
