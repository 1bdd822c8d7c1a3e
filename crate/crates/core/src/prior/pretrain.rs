//! Adversarial pretraining of a generator prior on an RGB dataset.

use std::path::PathBuf;
use std::time::Instant;

use anchor_nn::{Adam, Graph, ParamSet, Scalar, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeneratorPrior, LatentKind, PriorConfig, Provenance};
use crate::adapters::DiscriminatorNet;
use crate::data::{save_grid, DomainDataset, DomainImage, DomainKind};
use crate::{AnchorError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Weight of the gradient penalty on real images.
    pub r1_gamma: f64,
    /// Probe noise scale of the finite-difference penalty estimate.
    pub r1_sigma: f64,
    /// The penalty runs every `r1_every` discriminator steps, scaled up to match.
    pub r1_every: usize,
    /// Probability that a generator batch mixes two latents at a random slot.
    pub mixing: f64,
    pub disc_width: usize,
    pub mean_latent_samples: usize,
    pub seed: u64,
    /// Sample grid written after training.
    pub snapshot: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            betas: (0.0, 0.99),
            r1_gamma: 1.0,
            r1_sigma: 0.05,
            r1_every: 4,
            mixing: 0.5,
            disc_width: 32,
            mean_latent_samples: 10_000,
            seed: 0,
            snapshot: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnchorError::Config(m.to_string()));
        if self.steps == 0 || self.batch == 0 {
            return bad("pretraining needs steps >= 1 and batch >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.r1_every == 0 || !(self.r1_sigma > 0.0) || self.r1_gamma < 0.0 {
            return bad("penalty cadence and probe scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return bad("mixing probability must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    /// `(step, penalty)` at the steps where the penalty ran.
    pub r1: Vec<(usize, f64)>,
    pub snapshot: Option<PathBuf>,
    pub seconds: f64,
}

/// Mean of `softplus(sign * logits)`.
fn softplus_mean<T: Scalar>(g: &mut Graph<T>, logits: Var, sign: f64) -> Var {
    let s = g.scale(logits, T::lit(sign));
    let sp = g.softplus(s);
    g.mean(sp)
}

fn checked<T: Scalar>(g: &Graph<T>, v: Var, step: usize, what: &str) -> Result<f64> {
    let x = g.value(v).data()[0].as_f64();
    if !x.is_finite() {
        return Err(AnchorError::Training {
            step,
            reason: format!("{what} is {x}"),
        });
    }
    Ok(x)
}

/// Latent batch for a generator step: mapped `z`, optionally mixed with a
/// second draw from a random crossover slot on.
fn latent_batch<T: Scalar>(
    prior: &GeneratorPrior<T>,
    g: &mut Graph<T>,
    b: &anchor_nn::Bound,
    n: usize,
    mixing: f64,
    rng: &mut ChaCha8Rng,
) -> Var {
    let spec = prior.spec();
    let z1 = g.input(Tensor::randn(&[n, spec.dim], 1.0, rng));
    let w1 = prior.map_graph(g, b, z1);
    let slots = spec.num_slots;
    let cross = if spec.kind == LatentKind::WPlus && slots > 1 && rng.random::<f64>() < mixing {
        rng.random_range(1..slots)
    } else {
        slots
    };
    let w2 = if cross < slots {
        let z2 = g.input(Tensor::randn(&[n, spec.dim], 1.0, rng));
        prior.map_graph(g, b, z2)
    } else {
        w1
    };
    let parts: Vec<Var> = (0..slots).map(|s| if s < cross { w1 } else { w2 }).collect();
    let flat = g.concat(&parts);
    g.reshape(flat, &[n, slots, spec.dim])
}

/// Trains a generator from scratch with the non-saturating GAN loss and a
/// gradient penalty on real images, then freezes it.
pub fn pretrain_generator<T: Scalar>(
    dataset: &DomainDataset<T>,
    prior_config: &PriorConfig,
    config: &PretrainConfig,
) -> Result<(GeneratorPrior<T>, PretrainReport)> {
    config.validate()?;
    prior_config.validate()?;
    if dataset.kind != (DomainKind::Continuous { channels: 3 }) {
        return Err(AnchorError::Domain(format!(
            "pretraining needs an RGB dataset, `{}` is {}",
            dataset.domain_id, dataset.kind
        )));
    }
    if dataset.is_empty() {
        return Err(AnchorError::Data(format!(
            "dataset `{}` is empty",
            dataset.domain_id
        )));
    }
    let r = prior_config.resolution;
    if dataset.resolution() != (r, r) {
        return Err(AnchorError::Config(format!(
            "dataset resolution {:?} differs from the generator's {r}",
            dataset.resolution()
        )));
    }

    let start = Instant::now();
    let mut prior = GeneratorPrior::<T>::new(prior_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d_params = ParamSet::new();
    let disc = DiscriminatorNet::build(&mut d_params, r, config.disc_width, &mut rng);
    let mut g_opt = Adam::new(&prior.params, config.lr, config.betas);
    let mut d_opt = Adam::new(&d_params, config.lr, config.betas);
    let n = config.batch;
    let mut report = PretrainReport::default();

    for step in 0..config.steps {
        // Discriminator step on real images against detached samples.
        let idx: Vec<usize> = if dataset.len() >= n {
            sample(&mut rng, dataset.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..dataset.len())).collect()
        };
        let real = dataset.batch(&idx);
        let fake = {
            let mut g = Graph::new();
            let b = prior.bind(&mut g);
            let codes = latent_batch(&prior, &mut g, &b, n, config.mixing, &mut rng);
            let f = prior.features_graph(&mut g, &b, codes);
            let x = prior.to_rgb_graph(&mut g, &b, f);
            g.value(x).clone()
        };
        let penalize = config.r1_gamma > 0.0 && step % config.r1_every == 0;
        let noise = penalize.then(|| Tensor::<T>::randn(real.shape(), config.r1_sigma, &mut rng));
        {
            let mut g = Graph::new();
            let b = d_params.bind(&mut g, true);
            let xr = g.input(real.clone());
            let xf = g.input(fake);
            let lr = disc.forward(&mut g, &b, xr);
            let lf = disc.forward(&mut g, &b, xf);
            let lr_term = softplus_mean(&mut g, lr, -1.0);
            let lf_term = softplus_mean(&mut g, lf, 1.0);
            let mut loss = g.add(lr_term, lf_term);
            let d_loss = checked(&g, loss, step, "discriminator loss")?;
            if let Some(noise) = noise {
                // E[(D(x + d) - D(x))^2] / sigma^2 estimates E|grad D(x)|^2 for small Gaussian d.
                let xp = g.input(real.zip_map(&noise, |a, b| a + b));
                let lp = disc.forward(&mut g, &b, xp);
                let diff = g.sub(lp, lr);
                let sq = g.square(diff);
                let r1 = g.mean(sq);
                let r1 = g.scale(r1, T::lit(1.0 / (config.r1_sigma * config.r1_sigma)));
                report.r1.push((step, checked(&g, r1, step, "gradient penalty")?));
                let weighted = g.scale(r1, T::lit(0.5 * config.r1_gamma * config.r1_every as f64));
                loss = g.add(loss, weighted);
            }
            g.backward(loss);
            let grads = d_params.grads(&g, &b);
            d_opt.step(&mut d_params, &grads);
            report.d_loss.push(d_loss);
        }

        // Generator step through a constant discriminator.
        {
            let mut g = Graph::new();
            let b = prior.params.bind(&mut g, true);
            let db = d_params.bind(&mut g, false);
            let codes = latent_batch(&prior, &mut g, &b, n, config.mixing, &mut rng);
            let f = prior.features_graph(&mut g, &b, codes);
            let x = prior.to_rgb_graph(&mut g, &b, f);
            let logits = disc.forward(&mut g, &db, x);
            let loss = softplus_mean(&mut g, logits, -1.0);
            report.g_loss.push(checked(&g, loss, step, "generator loss")?);
            g.backward(loss);
            let grads = prior.params.grads(&g, &b);
            g_opt.step(&mut prior.params, &grads);
        }
        if !prior.params.all_finite() || !d_params.all_finite() {
            return Err(AnchorError::Training {
                step,
                reason: "non-finite weights".into(),
            });
        }
        if step % 100 == 0 {
            log::debug!(
                "pretrain step {step}: d {:.4} g {:.4}",
                report.d_loss[step],
                report.g_loss[step]
            );
        }
    }

    if prior.spec().kind == LatentKind::WPlus {
        prior.estimate_mean_latent(config.mean_latent_samples, config.seed ^ 0x6d65_616e)?;
    }
    prior.set_provenance(Provenance {
        steps: config.steps,
        train_images: dataset.len(),
        final_d_loss: report.d_loss.last().copied(),
        final_g_loss: report.g_loss.last().copied(),
        mean_latent_samples: prior.provenance().mean_latent_samples,
        note: format!(
            "non-saturating GAN on `{}`, seed {}",
            dataset.domain_id, config.seed
        ),
    });
    prior.refresh_fingerprint();
    if let Some(path) = &config.snapshot {
        write_sample_grid(&prior, 4, config.seed, path)?;
        report.snapshot = Some(path.clone());
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((prior, report))
}

/// Writes a `side x side` grid of samples for seeds `seed..`.
pub fn write_sample_grid<T: Scalar>(
    prior: &GeneratorPrior<T>,
    side: usize,
    seed: u64,
    path: &std::path::Path,
) -> Result<()> {
    let images: Vec<DomainImage<T>> = (0..(side * side) as u64)
        .map(|i| prior.sample_latent(seed + i).and_then(|c| prior.generate(&c)))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<&DomainImage<T>>> = images.chunks(side).map(|c| c.iter().collect()).collect();
    save_grid(&rows, path)?;
    Ok(())
}
