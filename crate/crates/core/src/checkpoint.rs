//! Frozen network state and its on-disk container.
//!
//! The file format is a single UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format": "ancl-lab-checkpoint",
//!   "version": 1,
//!   "arch": { "input_dim": .., "hidden_dims": [..], "activation": "ReLU",
//!             "head_mode": "MultiHead" | "SingleHead", "head_sizes": [..] },
//!   "weights":     { "<name>": [f64; P], .. },
//!   "importances": { "<name>": { "values": [f64; P], "source": "Fisher" | "Mas",
//!                                "tasks_covered": n }, .. },
//!   "buffer": null | { "per_class": m, "dim": d, "classes": [..] },
//!   "values": { "<name>": [f64, ..], .. }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! write/read cycle reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::nn::{ArchSpec, WeightVector};
use crate::replay::MemoryBuffer;

pub const FORMAT: &str = "ancl-lab-checkpoint";
pub const VERSION: u32 = 1;

/// State carried between tasks: the frozen old network, the frozen
/// auxiliary network, their importances, the exemplar memory and a snapshot
/// of the main weights after every task.
///
/// Stored weights are replaced wholesale, never edited in place.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointStore {
    old_weights: Option<WeightVector>,
    aux_weights: Option<WeightVector>,
    old_importance: Option<ImportanceMap>,
    aux_importance: Option<ImportanceMap>,
    snapshots: Vec<WeightVector>,
    buffer: Option<MemoryBuffer>,
}

impl CheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Freezes `w` as the old network and appends it to the task snapshots.
    pub fn freeze_old(&mut self, w: &WeightVector) {
        self.old_weights = Some(w.clone());
        self.snapshots.push(w.clone());
    }

    /// Sets the old-network reference without recording a task snapshot.
    pub fn set_old_reference(&mut self, w: &WeightVector) {
        self.old_weights = Some(w.clone());
    }

    pub fn freeze_aux(&mut self, w: &WeightVector, importance: Option<ImportanceMap>) {
        self.aux_weights = Some(w.clone());
        self.aux_importance = importance;
    }

    pub fn clear_aux(&mut self) {
        self.aux_weights = None;
        self.aux_importance = None;
    }

    pub fn set_old_importance(&mut self, imp: ImportanceMap) {
        self.old_importance = Some(imp);
    }

    pub fn set_buffer(&mut self, buffer: MemoryBuffer) {
        self.buffer = Some(buffer);
    }

    pub fn old_weights(&self) -> Option<&WeightVector> {
        self.old_weights.as_ref()
    }

    pub fn aux_weights(&self) -> Option<&WeightVector> {
        self.aux_weights.as_ref()
    }

    pub fn old_importance(&self) -> Option<&ImportanceMap> {
        self.old_importance.as_ref()
    }

    pub fn aux_importance(&self) -> Option<&ImportanceMap> {
        self.aux_importance.as_ref()
    }

    pub fn snapshots(&self) -> &[WeightVector] {
        &self.snapshots
    }

    pub fn buffer(&self) -> Option<&MemoryBuffer> {
        self.buffer.as_ref()
    }

    pub fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer> {
        self.buffer.as_mut()
    }
}

/// Versioned on-disk container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub arch: ArchSpec,
    #[serde(default)]
    pub weights: BTreeMap<String, WeightVector>,
    #[serde(default)]
    pub importances: BTreeMap<String, ImportanceMap>,
    #[serde(default)]
    pub buffer: Option<MemoryBuffer>,
    #[serde(default)]
    pub values: BTreeMap<String, Vec<f64>>,
}

impl CheckpointFile {
    pub fn new(arch: ArchSpec) -> Self {
        CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            arch,
            weights: BTreeMap::new(),
            importances: BTreeMap::new(),
            buffer: None,
            values: BTreeMap::new(),
        }
    }

    /// Packs a store: `old`, `aux`, `task_<k>` weights, `old`/`aux` importances.
    pub fn from_store(arch: ArchSpec, store: &CheckpointStore) -> Self {
        let mut f = Self::new(arch);
        if let Some(w) = store.old_weights() {
            f.weights.insert("old".into(), w.clone());
        }
        if let Some(w) = store.aux_weights() {
            f.weights.insert("aux".into(), w.clone());
        }
        for (k, w) in store.snapshots().iter().enumerate() {
            f.weights.insert(format!("task_{k}"), w.clone());
        }
        if let Some(m) = store.old_importance() {
            f.importances.insert("old".into(), m.clone());
        }
        if let Some(m) = store.aux_importance() {
            f.importances.insert("aux".into(), m.clone());
        }
        f.buffer = store.buffer().cloned();
        f
    }

    pub fn weight(&self, name: &str) -> Result<&WeightVector> {
        self.weights.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no weights named {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        self.arch.validate()?;
        let p = self.arch.param_count();
        for (name, w) in &self.weights {
            if w.len() != p {
                return Err(Error::Format(format!("weights {name:?} have length {}, expected {p}", w.len())));
            }
        }
        for (name, m) in &self.importances {
            if m.len() != p {
                return Err(Error::Format(format!("importance {name:?} has length {}, expected {p}", m.len())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
