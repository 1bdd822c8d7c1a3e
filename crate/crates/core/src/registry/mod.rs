//! On-disk catalog binding one frozen prior to many domain adapters.
//!
//! Layout under the registry root:
//!
//! ```text
//! prior.ckpt
//! manifest.json
//! adapters/<domain_id>.ckpt
//! runs/<domain_id>/        traces, snapshots and resolved configs
//! .lock                    present while a writer is active
//! ```
//!
//! Adding a domain only creates files; everything already present keeps its
//! bytes, which [`Registry::add_adapter`] verifies through content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anchor_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::adapters::DomainAdapter;
use crate::anchoring::{train_domain, TrainingConfig, TrainingReport};
use crate::checkpoint::file_sha256;
use crate::data::{DomainDataset, DomainKind};
use crate::error::IoContext;
use crate::prior::GeneratorPrior;
use crate::{AnchorError, Result};

pub const REGISTRY_FORMAT: &str = "anchor-registry/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIOR_FILE: &str = "prior.ckpt";
pub const LOCK_FILE: &str = ".lock";
pub const ADAPTER_DIR: &str = "adapters";
pub const RUN_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    /// Relative to the registry root.
    pub path: PathBuf,
    pub fingerprint: String,
    pub sha256: String,
    /// RGB data the prior was pretrained on, if known; the default real set
    /// for adversarial anchoring.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: String,
    pub kind: DomainKind,
    /// Relative to the registry root.
    pub adapter_path: PathBuf,
    pub adapter_sha256: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set.
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub format: String,
    pub prior: PriorEntry,
    pub domains: Vec<DomainEntry>,
}

/// Timestamp for new entries; honours `SOURCE_DATE_EPOCH` for reproducible runs.
pub fn timestamp() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn valid_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok {
        return Err(AnchorError::Config(format!(
            "domain id `{id}` must be non-empty [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

/// Exclusive writer lock, released on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AnchorError::Locked(path)),
            Err(e) => Err(AnchorError::Io { path, source: e }),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

#[derive(Clone, Debug)]
pub struct Registry {
    root: PathBuf,
    manifest: RegistryManifest,
}

impl Registry {
    /// Creates a registry holding `prior` and no domains. Refuses any
    /// existing non-empty directory.
    pub fn init<T: Scalar>(
        root: &Path,
        prior: &GeneratorPrior<T>,
        prior_data: Option<PathBuf>,
    ) -> Result<Self> {
        if root.exists() {
            let occupied = !root.is_dir() || fs::read_dir(root).at(root)?.next().is_some();
            if occupied {
                return Err(AnchorError::Overwrite(root.to_path_buf()));
            }
        }
        fs::create_dir_all(root.join(ADAPTER_DIR)).at(root)?;
        let _lock = LockGuard::acquire(root)?;
        let prior_path = root.join(PRIOR_FILE);
        prior.save(&prior_path)?;
        let manifest = RegistryManifest {
            format: REGISTRY_FORMAT.into(),
            prior: PriorEntry {
                path: PRIOR_FILE.into(),
                fingerprint: prior.fingerprint().to_string(),
                sha256: file_sha256(&prior_path)?,
                data: prior_data,
            },
            domains: Vec::new(),
        };
        let reg = Self {
            root: root.to_path_buf(),
            manifest,
        };
        reg.write_manifest()?;
        Ok(reg)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn read_manifest(root: &Path) -> Result<RegistryManifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let m: RegistryManifest = serde_json::from_str(&text).map_err(|e| AnchorError::Corruption {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.format != REGISTRY_FORMAT {
            return Err(AnchorError::Corruption {
                path,
                reason: format!("unknown format {}", m.format),
            });
        }
        Ok(m)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.root.join(MANIFEST_FILE), format!("{text}\n").as_bytes())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RegistryManifest {
        &self.manifest
    }

    /// Registered domains in creation order.
    pub fn list_domains(&self) -> &[DomainEntry] {
        &self.manifest.domains
    }

    pub fn entry(&self, domain_id: &str) -> Result<&DomainEntry> {
        self.manifest
            .domains
            .iter()
            .find(|d| d.domain_id == domain_id)
            .ok_or_else(|| AnchorError::NotFound(domain_id.to_string()))
    }

    pub fn run_dir(&self, domain_id: &str) -> PathBuf {
        self.root.join(RUN_DIR).join(domain_id)
    }

    fn verify_hash(&self, rel: &Path, expected: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let found = file_sha256(&path)?;
        if found != expected {
            return Err(AnchorError::Corruption {
                path,
                reason: format!("content hash {found} != recorded {expected}"),
            });
        }
        Ok(path)
    }

    /// Hash-verified prior.
    pub fn load_prior<T: Scalar>(&self) -> Result<GeneratorPrior<T>> {
        let p = &self.manifest.prior;
        let path = self.verify_hash(&p.path, &p.sha256)?;
        let prior = GeneratorPrior::<T>::load(&path)?;
        if prior.fingerprint() != p.fingerprint {
            return Err(AnchorError::FingerprintMismatch {
                expected: p.fingerprint.clone(),
                found: prior.fingerprint().into(),
            });
        }
        Ok(prior)
    }

    /// Hash-verified adapter, checked against the registry's prior.
    pub fn load_adapter<T: Scalar>(&self, domain_id: &str) -> Result<DomainAdapter<T>> {
        let e = self.entry(domain_id)?;
        let path = self.verify_hash(&e.adapter_path, &e.adapter_sha256)?;
        let adapter = DomainAdapter::<T>::load(&path)?;
        if adapter.prior_fingerprint != self.manifest.prior.fingerprint {
            return Err(AnchorError::FingerprintMismatch {
                expected: self.manifest.prior.fingerprint.clone(),
                found: adapter.prior_fingerprint,
            });
        }
        if adapter.domain_id != domain_id || adapter.kind != e.kind {
            return Err(AnchorError::Corruption {
                path,
                reason: "adapter does not match its manifest entry".into(),
            });
        }
        Ok(adapter)
    }

    /// Content hashes of every file the manifest tracks.
    pub fn file_hashes(&self) -> Result<BTreeMap<PathBuf, String>> {
        let mut out = BTreeMap::new();
        out.insert(
            self.manifest.prior.path.clone(),
            file_sha256(&self.root.join(&self.manifest.prior.path))?,
        );
        for d in &self.manifest.domains {
            out.insert(
                d.adapter_path.clone(),
                file_sha256(&self.root.join(&d.adapter_path))?,
            );
        }
        Ok(out)
    }

    /// Registers an already trained adapter.
    pub fn add_adapter<T: Scalar>(&mut self, adapter: &DomainAdapter<T>) -> Result<DomainEntry> {
        let _lock = LockGuard::acquire(&self.root)?;
        self.add_locked(adapter)
    }

    fn add_locked<T: Scalar>(&mut self, adapter: &DomainAdapter<T>) -> Result<DomainEntry> {
        // Another writer may have appended since this handle was opened.
        self.manifest = Self::read_manifest(&self.root)?;
        let id = adapter.domain_id.clone();
        valid_id(&id)?;
        if self.manifest.domains.iter().any(|d| d.domain_id == id) {
            return Err(AnchorError::Conflict(id));
        }
        if adapter.prior_fingerprint != self.manifest.prior.fingerprint {
            return Err(AnchorError::FingerprintMismatch {
                expected: self.manifest.prior.fingerprint.clone(),
                found: adapter.prior_fingerprint.clone(),
            });
        }
        let before = self.file_hashes()?;
        let rel = Path::new(ADAPTER_DIR).join(format!("{id}.ckpt"));
        let path = self.root.join(&rel);
        if path.exists() {
            return Err(AnchorError::Overwrite(path));
        }
        fs::create_dir_all(self.root.join(ADAPTER_DIR)).at(&self.root)?;
        write_atomic(&path, &adapter.to_checkpoint().to_bytes())?;
        let entry = DomainEntry {
            domain_id: id,
            kind: adapter.kind,
            adapter_path: rel,
            adapter_sha256: file_sha256(&path)?,
            config_hash: adapter.config_hash.clone(),
            created_at: timestamp(),
        };
        self.manifest.domains.push(entry.clone());
        self.write_manifest()?;
        let after = self.file_hashes()?;
        for (p, h) in &before {
            if after.get(p) != Some(h) {
                return Err(AnchorError::Integrity(format!(
                    "{} changed while adding a domain",
                    p.display()
                )));
            }
        }
        Ok(entry)
    }

    /// Trains a new domain against the registry's prior and registers it.
    pub fn add_domain<T: Scalar>(
        &mut self,
        domain_id: &str,
        dataset: &DomainDataset<T>,
        real_rgb: Option<&DomainDataset<T>>,
        config: &TrainingConfig,
    ) -> Result<(DomainEntry, TrainingReport)> {
        valid_id(domain_id)?;
        let _lock = LockGuard::acquire(&self.root)?;
        self.manifest = Self::read_manifest(&self.root)?;
        if self.manifest.domains.iter().any(|d| d.domain_id == domain_id) {
            return Err(AnchorError::Conflict(domain_id.to_string()));
        }
        let prior = self.load_prior::<T>()?;
        let mut config = config.clone();
        if config.run_dir.is_none() {
            config.run_dir = Some(self.run_dir(domain_id));
        }
        let (adapter, report) = train_domain(domain_id, dataset, &prior, real_rgb, &config)?;
        if prior.compute_fingerprint() != self.manifest.prior.fingerprint {
            return Err(AnchorError::Integrity("prior drifted during training".into()));
        }
        let entry = self.add_locked(&adapter)?;
        Ok((entry, report))
    }
}
