//! Binary checkpoint container with a JSON sidecar manifest.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, the JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curriculum::{AdrSet, BaselineSettings, BaselineTrainer};
use crate::nn::{ArchitectureSpec, NetError, ParamVector};
use crate::ppo::AdamState;
use crate::scalar::Scalar;
use crate::selfplay::{OpponentPool, SelfPlaySettings, SelfPlayTrainer};

pub const MAGIC: &[u8; 8] = b"GPLYCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported checkpoint format version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    SelfPlay,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
    /// Training step of a parameter snapshot, or the update count of optimizer moments.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    /// Scalar type the run trained with.
    pub scalar: String,
    pub config_hash: String,
    pub network: ArchitectureSpec,
    pub tensors: Vec<TensorEntry>,
    /// Controller state for baseline runs.
    #[serde(default)]
    pub adr: Option<AdrSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f64>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// `ckpt-00000050.bin` style name for a step.
pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step:08}.bin")
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl Checkpoint {
    fn push<T: Scalar>(&mut self, name: &str, values: &[T], version: u64) {
        self.header.tensors.push(TensorEntry { name: name.to_string(), len: values.len(), version });
        self.tensors.push(values.iter().map(|v| v.as_f64()).collect());
    }

    fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f64])> {
        let i = self.header.tensors.iter().position(|t| t.name == name)?;
        Some((&self.header.tensors[i], &self.tensors[i]))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.iter().map(|t| t.name.as_str())
    }

    /// Parameters stored under `name` ("alice", "bob" or "policy").
    pub fn params<T: Scalar>(&self, name: &str) -> Result<ParamVector<T>, CheckpointError> {
        let (entry, values) =
            self.tensor(name).ok_or_else(|| CheckpointError::Mismatch(format!("no tensor '{name}' in checkpoint")))?;
        Ok(ParamVector::from_values(
            self.header.network.clone(),
            values.iter().map(|&v| T::of(v)).collect(),
            entry.version,
        )?)
    }

    /// The goal-conditioned solver: Bob for self-play runs, the policy for baselines.
    pub fn solver<T: Scalar>(&self) -> Result<ParamVector<T>, CheckpointError> {
        match self.header.kind {
            CheckpointKind::SelfPlay => self.params("bob"),
            CheckpointKind::Baseline => self.params("policy"),
        }
    }

    fn adam<T: Scalar>(&self, prefix: &str) -> Result<AdamState<T>, CheckpointError> {
        let (me, m) = self
            .tensor(&format!("{prefix}.adam.m"))
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing {prefix} optimizer state")))?;
        let (_, v) = self
            .tensor(&format!("{prefix}.adam.v"))
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing {prefix} optimizer state")))?;
        let mut adam = AdamState::new(m.len());
        adam.m = m.iter().map(|&x| T::of(x)).collect();
        adam.v = v.iter().map(|&x| T::of(x)).collect();
        adam.step = me.version;
        Ok(adam)
    }

    fn pool<T: Scalar>(&self, prefix: &str, capacity: usize) -> Result<OpponentPool<T>, CheckpointError> {
        let mut pool = OpponentPool::new(capacity);
        let wanted = format!("pool.{prefix}.");
        let names: Vec<String> =
            self.header.tensors.iter().filter(|t| t.name.starts_with(&wanted)).map(|t| t.name.clone()).collect();
        for name in names {
            pool.push(self.params(&name)?);
        }
        Ok(pool)
    }

    fn empty(
        kind: CheckpointKind,
        step: u64,
        seed: u64,
        scalar: &str,
        config_hash: &str,
        network: &ArchitectureSpec,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind,
                step,
                seed,
                scalar: scalar.to_string(),
                config_hash: config_hash.to_string(),
                network: network.clone(),
                tensors: vec![],
                adr: None,
            },
            tensors: vec![],
        }
    }

    pub fn from_selfplay<T: Scalar>(trainer: &SelfPlayTrainer<T>, config_hash: &str) -> Self {
        let mut c = Self::empty(
            CheckpointKind::SelfPlay,
            trainer.step,
            trainer.settings.seed,
            T::TAG,
            config_hash,
            &trainer.alice.spec,
        );
        c.push("alice", &trainer.alice.values, trainer.alice.version);
        c.push("bob", &trainer.bob.values, trainer.bob.version);
        c.push("alice.adam.m", &trainer.alice_adam.m, trainer.alice_adam.step);
        c.push("alice.adam.v", &trainer.alice_adam.v, trainer.alice_adam.step);
        c.push("bob.adam.m", &trainer.bob_adam.m, trainer.bob_adam.step);
        c.push("bob.adam.v", &trainer.bob_adam.v, trainer.bob_adam.step);
        for (k, p) in trainer.alice_pool.snapshots().enumerate() {
            c.push(&format!("pool.alice.{k:03}"), &p.values, p.version);
        }
        for (k, p) in trainer.bob_pool.snapshots().enumerate() {
            c.push(&format!("pool.bob.{k:03}"), &p.values, p.version);
        }
        c
    }

    /// Rebuilds a trainer; `settings` must come from the same configuration.
    pub fn into_selfplay<T: Scalar>(&self, settings: SelfPlaySettings) -> Result<SelfPlayTrainer<T>, CheckpointError> {
        if self.header.kind != CheckpointKind::SelfPlay {
            return Err(CheckpointError::Mismatch("expected a self-play checkpoint".into()));
        }
        let cap = settings.pool.capacity;
        Ok(SelfPlayTrainer {
            alice: self.params("alice")?,
            bob: self.params("bob")?,
            alice_adam: self.adam("alice")?,
            bob_adam: self.adam("bob")?,
            alice_pool: self.pool("alice", cap)?,
            bob_pool: self.pool("bob", cap)?,
            step: self.header.step,
            settings,
        })
    }

    pub fn from_baseline<T: Scalar>(trainer: &BaselineTrainer<T>, config_hash: &str) -> Self {
        let mut c = Self::empty(
            CheckpointKind::Baseline,
            trainer.step,
            trainer.settings.seed,
            T::TAG,
            config_hash,
            &trainer.policy.spec,
        );
        c.header.adr = Some(trainer.adr.clone());
        c.push("policy", &trainer.policy.values, trainer.policy.version);
        c.push("policy.adam.m", &trainer.adam.m, trainer.adam.step);
        c.push("policy.adam.v", &trainer.adam.v, trainer.adam.step);
        c
    }

    pub fn into_baseline<T: Scalar>(&self, settings: BaselineSettings) -> Result<BaselineTrainer<T>, CheckpointError> {
        if self.header.kind != CheckpointKind::Baseline {
            return Err(CheckpointError::Mismatch("expected a baseline checkpoint".into()));
        }
        Ok(BaselineTrainer {
            policy: self.params("policy")?,
            adam: self.adam("policy")?,
            adr: self.header.adr.clone().ok_or_else(|| CheckpointError::Mismatch("missing controller state".into()))?,
            step: self.header.step,
            settings,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let corrupt = |detail: &str| CheckpointError::Corrupt { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic(path.to_path_buf()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { path: path.to_path_buf(), found: version });
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let raw = bytes.get(offset..offset + 8 * t.len).ok_or_else(|| corrupt("truncated tensor data"))?;
            tensors.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
            offset += 8 * t.len;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes `path` and its sidecar manifest.
    pub fn write(&self, path: &Path) -> Result<Manifest, CheckpointError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        let bytes = self.to_bytes();
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &bytes).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.header.kind,
            step: self.header.step,
            seed: self.header.seed,
            config_hash: self.header.config_hash.clone(),
            file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let mpath = manifest_path(path);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")
            .map_err(io(&mpath))?;
        Ok(manifest)
    }

    /// Reads a checkpoint, verifying it against its manifest when one is present.
    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(io(path))?;
        let mpath = manifest_path(path);
        if let Ok(text) = fs::read_to_string(&mpath) {
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| CheckpointError::Corrupt { path: mpath.clone(), detail: e.to_string() })?;
            if manifest.sha256 != hex::encode(Sha256::digest(&bytes)) {
                return Err(CheckpointError::Corrupt {
                    path: path.to_path_buf(),
                    detail: "checksum differs from manifest".into(),
                });
            }
        }
        Self::from_bytes(&bytes, path)
    }
}

/// The highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    list_checkpoints(dir).pop().map(|(_, p)| p)
}

/// Checkpoints in `dir` sorted by step.
pub fn list_checkpoints(dir: &Path) -> Vec<(u64, PathBuf)> {
    let Ok(entries) = fs::read_dir(dir) else { return vec![] };
    let mut found: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let step = name.strip_prefix("ckpt-")?.strip_suffix(".bin")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    found.sort();
    found
}
