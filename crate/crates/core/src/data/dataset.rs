//! On-disk multi-domain datasets with unpaired train splits and a paired eval split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anchor_nn::Scalar;
use serde::{Deserialize, Serialize};

use super::folder::DomainDataset;
use super::image::{DomainImage, DomainKind};
use super::io::{load_png, save_png};
use super::render::{render_domain, RenderKind};
use super::scene::{generate_scene, SceneConfig};
use crate::error::IoContext;
use crate::{AnchorError, Result};

pub const DATA_FORMAT: &str = "anchor-data/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub render: RenderKind,
    /// First train seed; defaults to a range after the eval seeds and earlier domains.
    #[serde(default)]
    pub train_seed_start: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub train_per_domain: usize,
    pub eval_count: usize,
    #[serde(default)]
    pub eval_seed_start: Option<u64>,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub scene: SceneConfig,
}

fn default_resolution() -> usize {
    64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub id: String,
    pub render: RenderKind,
    pub kind: DomainKind,
    /// Half-open train seed range.
    pub train_seeds: (u64, u64),
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub seed: u64,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub root: PathBuf,
    pub creation_seed: u64,
    pub resolution: usize,
    pub scene: SceneConfig,
    pub eval_seeds: (u64, u64),
    pub domains: Vec<ManifestDomain>,
    pub pairs: Vec<PairRow>,
}

impl DatasetConfig {
    /// Scene parameters with the canvas and world seed taken from this config.
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            canvas: (self.resolution, self.resolution),
            world_seed: self.seed,
            ..self.scene.clone()
        }
    }

    fn eval_range(&self) -> (u64, u64) {
        let start = self.eval_seed_start.unwrap_or(0);
        (start, start + self.eval_count as u64)
    }

    /// Resolved train seed range of every domain, in config order.
    pub fn train_ranges(&self) -> Vec<(u64, u64)> {
        let (_, eval_end) = self.eval_range();
        let n = self.train_per_domain as u64;
        self.domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let start = d.train_seed_start.unwrap_or(eval_end + i as u64 * n);
                (start, start + n)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnchorError::Config(m));
        if self.train_per_domain == 0 || self.eval_count == 0 {
            return bad("every split needs at least one image".into());
        }
        if self.resolution < 8 {
            return bad(format!(
                "resolution {} is below the minimum of 8",
                self.resolution
            ));
        }
        if self.domains.is_empty() {
            return bad("no domains requested".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            let valid = !d.id.is_empty()
                && d.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid {
                return bad(format!("domain id `{}` must be non-empty [A-Za-z0-9_-]", d.id));
            }
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return bad(format!("duplicate domain id `{}`", d.id));
            }
        }
        self.scene_config().validate()?;
        let overlaps = |a: (u64, u64), b: (u64, u64)| a.0 < b.1 && b.0 < a.1;
        let ranges = self.train_ranges();
        let eval = self.eval_range();
        for (i, &r) in ranges.iter().enumerate() {
            if overlaps(r, eval) {
                return bad(format!(
                    "train seeds of `{}` overlap the eval seeds",
                    self.domains[i].id
                ));
            }
            for (j, &o) in ranges[..i].iter().enumerate() {
                if overlaps(r, o) {
                    return bad(format!(
                        "train seeds of `{}` and `{}` overlap; train splits must be unpaired",
                        self.domains[j].id, self.domains[i].id
                    ));
                }
            }
        }
        Ok(())
    }
}

fn rel_path(domain: &str, split: Split, seed: u64) -> String {
    format!("{domain}/{}/{seed}.png", split.dir())
}

/// Renders one domain for a list of scene seeds, in memory.
pub fn render_seeds<T: Scalar>(
    scene: &SceneConfig,
    domain_id: &str,
    render: RenderKind,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<DomainImage<T>>> {
    seeds
        .into_iter()
        .map(|s| Ok(render_domain(&generate_scene(s, scene)?, render, domain_id)))
        .collect()
}

/// Generates every split to disk and writes the manifest.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let scene = config.scene_config();
    let root = &config.root;
    std::fs::create_dir_all(root).at(root)?;
    let eval = config.eval_range();
    let mut domains = Vec::new();
    let mut pairs: Vec<PairRow> = (eval.0..eval.1)
        .map(|seed| PairRow {
            seed,
            files: BTreeMap::new(),
        })
        .collect();
    for (spec, range) in config.domains.iter().zip(config.train_ranges()) {
        let mut train = Vec::new();
        for seed in range.0..range.1 {
            let rel = rel_path(&spec.id, Split::Train, seed);
            let img = render_domain::<f64>(&generate_scene(seed, &scene)?, spec.render, &spec.id);
            save_png(&img, &root.join(&rel))?;
            train.push(rel);
        }
        let mut eval_files = Vec::new();
        for row in pairs.iter_mut() {
            let rel = rel_path(&spec.id, Split::Eval, row.seed);
            let img = render_domain::<f64>(&generate_scene(row.seed, &scene)?, spec.render, &spec.id);
            save_png(&img, &root.join(&rel))?;
            row.files.insert(spec.id.clone(), rel.clone());
            eval_files.push(rel);
        }
        domains.push(ManifestDomain {
            id: spec.id.clone(),
            render: spec.render,
            kind: spec.render.domain_kind(),
            train_seeds: range,
            train,
            eval: eval_files,
        });
    }
    let manifest = DatasetManifest {
        format: DATA_FORMAT.to_string(),
        root: root.clone(),
        creation_seed: config.seed,
        resolution: config.resolution,
        scene,
        eval_seeds: eval,
        domains,
        pairs,
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").at(path)
    }

    /// Reads a manifest; relative file entries resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).at(&path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| AnchorError::Format {
            what: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if m.format != DATA_FORMAT {
            return Err(AnchorError::Format {
                what: path.display().to_string(),
                reason: format!("expected format {DATA_FORMAT}, found {}", m.format),
            });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn domain(&self, id: &str) -> Result<&ManifestDomain> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| AnchorError::NotFound(id.to_string()))
    }

    pub fn load_split<T: Scalar>(&self, id: &str, split: Split) -> Result<DomainDataset<T>> {
        let d = self.domain(id)?;
        let files = match split {
            Split::Train => &d.train,
            Split::Eval => &d.eval,
        };
        let images = files
            .iter()
            .map(|f| load_png(&self.root.join(f), id, d.kind, self.resolution))
            .collect::<Result<Vec<_>>>()?;
        DomainDataset::from_images(id, d.kind, images)
    }

    /// Eval images of two domains, aligned by scene seed.
    pub fn load_pairs<T: Scalar>(&self, a: &str, b: &str) -> Result<Vec<(DomainImage<T>, DomainImage<T>)>> {
        let (da, db) = (self.domain(a)?, self.domain(b)?);
        self.pairs
            .iter()
            .map(|row| {
                let fa = row
                    .files
                    .get(a)
                    .ok_or_else(|| AnchorError::Data(format!("seed {} lacks {a}", row.seed)))?;
                let fb = row
                    .files
                    .get(b)
                    .ok_or_else(|| AnchorError::Data(format!("seed {} lacks {b}", row.seed)))?;
                Ok((
                    load_png(&self.root.join(fa), a, da.kind, self.resolution)?,
                    load_png(&self.root.join(fb), b, db.kind, self.resolution)?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(root: &Path) -> DatasetConfig {
        DatasetConfig {
            root: root.to_path_buf(),
            seed: 3,
            resolution: 16,
            train_per_domain: 200,
            eval_count: 50,
            eval_seed_start: None,
            domains: vec![
                DomainSpec {
                    id: "rgb".into(),
                    render: RenderKind::Rgb,
                    train_seed_start: None,
                },
                DomainSpec {
                    id: "seg".into(),
                    render: RenderKind::Segmentation,
                    train_seed_start: None,
                },
            ],
            scene: SceneConfig::default(),
        }
    }

    #[test]
    fn counts_match_request_and_train_seeds_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&config(dir.path())).unwrap();
        assert_eq!(m.domains.len(), 2);
        assert_eq!(m.domains.iter().map(|d| d.train.len()).sum::<usize>(), 400);
        assert_eq!(m.domains.iter().map(|d| d.eval.len()).sum::<usize>(), 100);
        assert_eq!(m.pairs.len(), 50);
        let (a, b) = (m.domains[0].train_seeds, m.domains[1].train_seeds);
        assert!(a.1 <= b.0 || b.1 <= a.0);
        assert!(m.pairs.iter().all(|p| p.files.len() == 2));
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back.pairs, m.pairs);
        let seg = back.load_split::<f32>("seg", Split::Eval).unwrap();
        assert_eq!(seg.len(), 50);
    }

    #[test]
    fn overlapping_train_ranges_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.domains[0].train_seed_start = Some(1000);
        cfg.domains[1].train_seed_start = Some(1100);
        assert!(matches!(build_dataset(&cfg), Err(AnchorError::Config(_))));
        cfg.domains[1].train_seed_start = Some(10);
        assert!(
            matches!(build_dataset(&cfg), Err(AnchorError::Config(_))),
            "overlaps eval seeds"
        );
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut c1 = config(d1.path());
        c1.train_per_domain = 5;
        c1.eval_count = 3;
        let c2 = DatasetConfig {
            root: d2.path().to_path_buf(),
            ..c1.clone()
        };
        let (m1, m2) = (build_dataset(&c1).unwrap(), build_dataset(&c2).unwrap());
        assert_eq!(m1.pairs, m2.pairs);
        for d in &m1.domains {
            for f in d.train.iter().chain(&d.eval) {
                assert_eq!(
                    std::fs::read(d1.path().join(f)).unwrap(),
                    std::fs::read(d2.path().join(f)).unwrap()
                );
            }
        }
    }
}
