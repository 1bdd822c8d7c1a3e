use std::path::{Path, PathBuf};

use anchor_core::anchoring::TrainingConfig;
use anchor_core::data::{
    self, build_dataset, load_folder, save_grid, save_png, DatasetConfig, DatasetManifest, DomainKind,
};
use anchor_core::metrics::{evaluate_translation, ExtractorConfig, FeatureExtractor};
use anchor_core::prior::{pretrain_generator, write_sample_grid, PretrainConfig, PriorConfig};
use anchor_core::registry::{Registry, RUN_DIR};
use anchor_core::translation::{self, MixSpec};
use anchor_core::{Adapter, AnchorError, Dataset, Image, Prior};
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{self, config_error, Overrides};
use crate::RegistryArg;

fn seed_value(s: Option<u64>) -> Option<i64> {
    s.map(|v| v as i64)
}

fn count_value(s: Option<usize>) -> Option<i64> {
    s.map(|v| v as i64)
}

/// `dir/train` when it exists, else `dir`.
fn image_dir(dir: &Path) -> PathBuf {
    let train = dir.join("train");
    if train.is_dir() {
        train
    } else {
        dir.to_path_buf()
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}.png"))
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Dataset config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `root` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    train_per_domain: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
}

pub fn gen_data(a: GenData) -> Result<()> {
    let mut o = Overrides::default();
    o.set("root", a.out.as_ref().map(|p| p.display().to_string()))
        .set("seed", seed_value(a.seed))
        .set("resolution", count_value(a.resolution))
        .set("train_per_domain", count_value(a.train_per_domain))
        .set("eval_count", count_value(a.eval_count));
    let cfg: DatasetConfig = config::load(Some(&a.config), &o)?;
    let manifest = build_dataset(&cfg)?;
    config::persist(&cfg.root, "gen-data", &cfg)?;
    let path = cfg.root.join(data::dataset::MANIFEST_FILE);
    println!("{}", path.display());
    log::info!(
        "{} domains, {} eval pairs",
        manifest.domains.len(),
        manifest.pairs.len()
    );
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainFile {
    prior: PriorConfig,
    pretrain: PretrainConfig,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    /// Dataset root (with a manifest) or a folder of RGB images
    #[arg(long)]
    data: PathBuf,
    /// Registry directory to create
    #[arg(long, env = crate::REGISTRY_ENV)]
    out: PathBuf,
    /// Prior and pretraining config (TOML, sections [prior] and [pretrain])
    #[arg(long)]
    config: Option<PathBuf>,
    /// RGB domain inside a dataset root
    #[arg(long, default_value = "rgb")]
    domain: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn rgb_folder(data: &Path, domain: &str) -> PathBuf {
    if data.join(data::dataset::MANIFEST_FILE).is_file() {
        data.join(domain).join("train")
    } else {
        image_dir(data)
    }
}

fn load_rgb(dir: &Path, resolution: usize, seed: u64) -> Result<Dataset> {
    Ok(load_folder(
        dir,
        "rgb",
        DomainKind::Continuous { channels: 3 },
        resolution,
        seed,
    )?)
}

pub fn pretrain(a: Pretrain) -> Result<()> {
    let mut o = Overrides::default();
    o.set("pretrain.steps", count_value(a.steps))
        .set("pretrain.batch", count_value(a.batch))
        .set("pretrain.seed", seed_value(a.seed))
        .set("prior.seed", seed_value(a.seed));
    let cfg: PretrainFile = config::load(a.config.as_deref(), &o)?;
    cfg.prior.validate()?;
    cfg.pretrain.validate()?;
    let occupied = a.out.exists() && (!a.out.is_dir() || std::fs::read_dir(&a.out)?.next().is_some());
    if occupied {
        return Err(AnchorError::Overwrite(a.out.clone()).into());
    }
    let folder = rgb_folder(&a.data, &a.domain);
    let ds = load_rgb(&folder, cfg.prior.resolution, cfg.pretrain.seed)?;
    log::info!("pretraining on {} images from {}", ds.len(), folder.display());
    let (prior, report) = pretrain_generator::<f32>(&ds, &cfg.prior, &cfg.pretrain)?;
    let folder = std::fs::canonicalize(&folder).unwrap_or(folder);
    let reg = Registry::init(&a.out, &prior, Some(folder))?;
    let run = reg.root().join(RUN_DIR).join("prior");
    config::persist(&run, "pretrain", &cfg)?;
    write_sample_grid(&prior, 4, cfg.pretrain.seed, &run.join("samples.png"))?;
    let mut csv = String::from("step,d_loss,g_loss\n");
    for (i, (d, g)) in report.d_loss.iter().zip(&report.g_loss).enumerate() {
        csv.push_str(&format!("{i},{d},{g}\n"));
    }
    std::fs::write(run.join("trace.csv"), csv).context("writing pretrain trace")?;
    println!(
        "registry {} initialized; prior {}",
        a.out.display(),
        prior.fingerprint()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainDomain {
    #[command(flatten)]
    reg: RegistryArg,
    /// New domain id
    #[arg(long)]
    domain: String,
    /// Value model, `continuous:<channels>` or `categorical:<classes>`
    #[arg(long)]
    kind: DomainKind,
    /// Folder of domain images (its `train/` subfolder is used when present)
    #[arg(long)]
    data: PathBuf,
    /// Training config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the adversarial term
    #[arg(long)]
    no_adversarial: bool,
    /// Real RGB images for the discriminator; defaults to the prior's training set
    #[arg(long)]
    real_data: Option<PathBuf>,
}

pub fn train_domain(a: TrainDomain) -> Result<()> {
    let mut reg = Registry::open(&a.reg.registry)?;
    if reg.entry(&a.domain).is_ok() {
        return Err(AnchorError::Conflict(a.domain.clone()).into());
    }
    let mut o = Overrides::default();
    o.set("steps", count_value(a.steps))
        .set("batch", count_value(a.batch))
        .set("lr", a.lr)
        .set("seed", seed_value(a.seed))
        .set("adapter.seed", seed_value(a.seed))
        .set("adversarial_enabled", a.no_adversarial.then_some(false));
    let mut cfg: TrainingConfig = config::load(a.config.as_deref(), &o)?;
    cfg.validate()?;
    cfg.run_dir = Some(reg.run_dir(&a.domain));
    let folder = image_dir(&a.data);
    let ds: Dataset = load_folder(&folder, &a.domain, a.kind, cfg.adapter.resolution, cfg.seed)?;
    let real = if cfg.adversarial_enabled {
        let dir = a
            .real_data
            .clone()
            .or_else(|| reg.manifest().prior.data.clone())
            .ok_or_else(|| {
                config_error("the adversarial term needs --real-data (the registry records none)")
            })?;
        let res = reg.load_prior::<f32>()?.resolution();
        Some(load_rgb(&image_dir(&dir), res, cfg.seed)?)
    } else {
        None
    };
    config::persist(&reg.run_dir(&a.domain), "train-domain", &cfg)?;
    log::info!("anchoring `{}` ({}) on {} images", a.domain, a.kind, ds.len());
    let (entry, report) = reg.add_domain(&a.domain, &ds, real.as_ref(), &cfg)?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    println!(
        "added {} ({}) sha256 {}; final rec {:.4} latent {:.4} adv {:.4}",
        entry.domain_id,
        entry.kind,
        &entry.adapter_sha256[..12],
        last(&report.rec),
        last(&report.latent),
        last(&report.adv)
    );
    Ok(())
}

fn load_adapters(reg: &Registry, ids: &[String]) -> Result<Vec<Adapter>> {
    ids.iter().map(|id| Ok(reg.load_adapter::<f32>(id)?)).collect()
}

fn load_input(path: &Path, adapter: &Adapter) -> Result<Image> {
    Ok(data::load_png(
        path,
        &adapter.domain_id,
        adapter.kind,
        adapter.config.resolution,
    )?)
}

#[derive(Args, Debug)]
pub struct Translate {
    #[command(flatten)]
    reg: RegistryArg,
    /// Source domain
    #[arg(long)]
    from: String,
    /// Destination domain, or a comma-separated chain of domains
    #[arg(long)]
    to: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<out>_grid.png` with the input and every output side by side
    #[arg(long)]
    grid: bool,
}

pub fn translate(a: Translate) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    let mut ids = vec![a.from.clone()];
    ids.extend(parse_list(&a.to));
    if ids.len() < 2 {
        return Err(config_error("--to names no domain"));
    }
    let adapters = load_adapters(&reg, &ids)?;
    let prior: Prior = reg.load_prior()?;
    let x = load_input(&a.input, &adapters[0])?;
    let refs: Vec<&Adapter> = adapters.iter().collect();
    let outs = translation::progressive_translate(&x, &refs, &prior)?;
    let y = outs.last().expect("chain yields outputs");
    save_png(y, &a.out)?;
    println!("{}", a.out.display());
    if a.grid {
        let mut row = vec![&x];
        row.extend(outs.iter());
        let path = sibling(&a.out, "_grid");
        save_grid(&[row], &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct Sample {
    #[command(flatten)]
    reg: RegistryArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consecutive seeds to sample
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Comma-separated domain ids; all registered domains when omitted
    #[arg(long)]
    domains: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SampleRun<'a> {
    seed: u64,
    count: u64,
    domains: &'a [String],
    prior: &'a str,
}

pub fn sample(a: Sample) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    let ids = match &a.domains {
        Some(s) => parse_list(s),
        None => reg.list_domains().iter().map(|d| d.domain_id.clone()).collect(),
    };
    let adapters = load_adapters(&reg, &ids)?;
    let prior: Prior = reg.load_prior()?;
    let refs: Vec<&Adapter> = adapters.iter().collect();
    for seed in a.seed..a.seed + a.count {
        let s = translation::sample_multidomain(&prior, &refs, seed)?;
        save_png(&s.rgb, &a.out.join(format!("prior_rgb_{seed}.png")))?;
        for (id, img) in &s.outputs {
            save_png(img, &a.out.join(format!("{id}_{seed}.png")))?;
        }
    }
    let run = SampleRun {
        seed: a.seed,
        count: a.count,
        domains: &ids,
        prior: prior.fingerprint(),
    };
    config::persist(&a.out, "sample", &run)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_slots(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| config_error(format!("--slots `{s}` must look like `4:8`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| config_error(format!("bad slot index in `{s}`")))
    };
    Ok((parse(a)?, parse(b)?))
}

#[derive(Args, Debug)]
pub struct Mix {
    #[command(flatten)]
    reg: RegistryArg,
    #[arg(long)]
    from: String,
    /// Decode through this domain; the prior's own RGB when omitted
    #[arg(long)]
    to: Option<String>,
    #[arg(long = "in")]
    input: PathBuf,
    /// Half-open slot range `start:end` to resample; the late half when omitted
    #[arg(long)]
    slots: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variants from consecutive seeds, written as `<out>_<k>.png` when above 1
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<out>_grid.png` with the input and all variants
    #[arg(long)]
    grid: bool,
}

pub fn mix(a: Mix) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    let src = reg.load_adapter::<f32>(&a.from)?;
    let dst = a.to.as_ref().map(|id| reg.load_adapter::<f32>(id)).transpose()?;
    let prior: Prior = reg.load_prior()?;
    let x = load_input(&a.input, &src)?;
    let slots = prior.spec().num_slots;
    let mut variants = Vec::new();
    for k in 0..a.count {
        let seed = a.seed + k;
        let spec = match &a.slots {
            Some(s) => {
                let (start, end) = parse_slots(s)?;
                MixSpec { start, end, seed }
            }
            None => MixSpec::late(slots, seed),
        };
        variants.push(translation::multimodal_sample(
            &x,
            &src,
            dst.as_ref(),
            &prior,
            &spec,
        )?);
    }
    if a.count == 1 {
        save_png(&variants[0], &a.out)?;
        println!("{}", a.out.display());
    } else {
        for (k, v) in variants.iter().enumerate() {
            let path = sibling(&a.out, &format!("_{k}"));
            save_png(v, &path)?;
            println!("{}", path.display());
        }
    }
    if a.grid {
        let mut row = vec![&x];
        row.extend(variants.iter());
        let path = sibling(&a.out, "_grid");
        save_grid(&[row], &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[command(flatten)]
    reg: RegistryArg,
    /// Dataset manifest (or its directory) providing the paired eval split
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    /// Report file (text table)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON instead of a table
    #[arg(long)]
    json: bool,
    /// Use only the first N pairs
    #[arg(long)]
    limit: Option<usize>,
    /// Cached extractor checkpoint; trained on first use
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Skip the extractor-based metrics
    #[arg(long)]
    no_extractor: bool,
    /// Seed of the shuffled baseline
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn evaluate(a: Evaluate) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    let src = reg.load_adapter::<f32>(&a.from)?;
    let dst = reg.load_adapter::<f32>(&a.to)?;
    let prior: Prior = reg.load_prior()?;
    let manifest = DatasetManifest::load(&a.pairs)?;
    let mut pairs = manifest.load_pairs::<f32>(&a.from, &a.to)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let extractor = if a.no_extractor {
        None
    } else {
        let path = a
            .extractor
            .clone()
            .unwrap_or_else(|| reg.root().join(RUN_DIR).join("extractor.ckpt"));
        let cfg = ExtractorConfig {
            resolution: manifest.resolution,
            scene: manifest.scene.clone(),
            ..Default::default()
        };
        Some(FeatureExtractor::load_or_train(&path, cfg)?)
    };
    let report = evaluate_translation(&pairs, &src, &dst, &prior, extractor.as_ref(), a.seed)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(out, report.to_table()).with_context(|| format!("writing {}", out.display()))?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectFeatures {
    #[command(flatten)]
    reg: RegistryArg,
    /// Latent seed, used when no input image is given
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encode this image instead of sampling
    #[arg(long = "in", requires = "from")]
    input: Option<PathBuf>,
    #[arg(long)]
    from: Option<String>,
    /// Comma-separated channel indices; the first 16 when omitted
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn inspect_features(a: InspectFeatures) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    let prior: Prior = reg.load_prior()?;
    let code = match (&a.input, &a.from) {
        (Some(path), Some(id)) => {
            let src = reg.load_adapter::<f32>(id)?;
            src.encode(&load_input(path, &src)?)?
        }
        _ => prior.sample_latent(a.seed)?,
    };
    let channels: Vec<usize> = match &a.channels {
        Some(s) => s
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| config_error(format!("bad channel `{c}`")))
            })
            .collect::<Result<_>>()?,
        None => (0..prior.feature_shape()[0].min(16)).collect(),
    };
    prior.dump_feature_channels(&code, &channels, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ListDomains {
    #[command(flatten)]
    reg: RegistryArg,
    #[arg(long)]
    json: bool,
}

pub fn list_domains(a: ListDomains) -> Result<()> {
    let reg = Registry::open(&a.reg.registry)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(reg.list_domains())?);
        return Ok(());
    }
    println!("prior {}", reg.manifest().prior.fingerprint);
    for d in reg.list_domains() {
        println!(
            "{:<16} {:<16} {}  {}",
            d.domain_id,
            d.kind.to_string(),
            &d.adapter_sha256[..12],
            d.created_at
        );
    }
    Ok(())
}
