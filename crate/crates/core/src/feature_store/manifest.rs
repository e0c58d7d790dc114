//! Experiment manifests: the list of candidate checkpoints and their dumps.
//!
//! ```json
//! {
//!   "task": "classification",
//!   "n_classes": 65,
//!   "checkpoints": [
//!     { "run_id": "lambda_0.3", "hyperparams": {"lambda": 0.3}, "iteration": 5000,
//!       "target_probs": "runs/l03/5000/target.prb",
//!       "source_val_probs": "runs/l03/5000/src_val.prb",
//!       "source_val_labels": "data/src_val.lbl",
//!       "target_logits": "runs/l03/5000/target.lgt" }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. `target_labels` is
//! also accepted; it is used only for the quarantined oracle accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_label_vector, load_logit_matrix, load_prob_matrix, load_segmentation_dump, LabelVector,
    LogitMatrix, ProbMatrix, SegmentationDump,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
    SourceSelection,
}

/// Identity of one checkpoint: a training run and an iteration within it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CheckpointId {
    pub run_id: String,
    pub iteration: u64,
}

impl fmt::Display for CheckpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.run_id, self.iteration)
    }
}

/// On-disk form of a manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub run_id: String,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
    pub iteration: u64,
    pub target_probs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_val_probs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_val_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_labels: Option<PathBuf>,
}

/// On-disk form of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub task: Task,
    pub n_classes: usize,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl ManifestFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A candidate model with resolved dump paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub run_id: String,
    pub hyperparams: BTreeMap<String, f64>,
    pub iteration: u64,
    pub target_probs_path: PathBuf,
    pub source_val_probs_path: Option<PathBuf>,
    pub source_val_labels_path: Option<PathBuf>,
    pub target_logits_path: Option<PathBuf>,
    pub target_labels_path: Option<PathBuf>,
}

impl CheckpointRecord {
    pub fn id(&self) -> CheckpointId {
        CheckpointId {
            run_id: self.run_id.clone(),
            iteration: self.iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetPredictions {
    Classification(ProbMatrix),
    Segmentation(SegmentationDump),
}

impl TargetPredictions {
    pub fn n_classes(&self) -> usize {
        match self {
            TargetPredictions::Classification(m) => m.n_classes(),
            TargetPredictions::Segmentation(d) => d.n_classes(),
        }
    }
}

/// A checkpoint together with its loaded, validated dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub record: CheckpointRecord,
    pub target: TargetPredictions,
    pub source_val_probs: Option<ProbMatrix>,
    pub source_val_labels: Option<LabelVector>,
    pub target_logits: Option<LogitMatrix>,
    /// Ground-truth target labels. Evaluation only; never used for selection.
    pub target_labels: Option<LabelVector>,
}

impl Checkpoint {
    pub fn id(&self) -> CheckpointId {
        self.record.id()
    }

    /// Paired source-validation predictions and labels, when both exist.
    pub fn source_validation(&self) -> Option<(&ProbMatrix, &LabelVector)> {
        self.source_val_probs
            .as_ref()
            .zip(self.source_val_labels.as_ref())
    }

    fn validate(&self, task: Task, n_classes: usize) -> Result<()> {
        let c = self.target.n_classes();
        if c != n_classes {
            return Err(Error::Manifest(format!(
                "target predictions have {c} classes, manifest declares {n_classes}"
            )));
        }
        match (task, &self.target) {
            (Task::Segmentation, TargetPredictions::Segmentation(_)) => {}
            (Task::Segmentation, _) => {
                return Err(Error::Manifest(
                    "segmentation task needs SEG1 target dumps".into(),
                ))
            }
            (_, TargetPredictions::Segmentation(_)) => {
                return Err(Error::Manifest(
                    "segmentation dump given for a non-segmentation task".into(),
                ))
            }
            _ => {}
        }
        match (&self.source_val_probs, &self.source_val_labels) {
            (Some(p), Some(l)) => {
                if p.n_classes() != n_classes {
                    return Err(Error::Manifest(format!(
                        "source validation predictions have {} classes, manifest declares {n_classes}",
                        p.n_classes()
                    )));
                }
                l.validate_against(p.n_samples(), n_classes)
                    .map_err(|e| e.context("source_val_labels"))?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::Manifest(
                    "source_val_probs and source_val_labels must be given together".into(),
                ))
            }
        }
        if let TargetPredictions::Classification(t) = &self.target {
            if let Some(lg) = &self.target_logits {
                if lg.n_samples() != t.n_samples() || lg.n_classes() != t.n_classes() {
                    return Err(Error::Manifest(format!(
                        "target logits are {}x{}, target predictions {}x{}",
                        lg.n_samples(),
                        lg.n_classes(),
                        t.n_samples(),
                        t.n_classes()
                    )));
                }
            }
            if let Some(l) = &self.target_labels {
                l.validate_against(t.n_samples(), n_classes)
                    .map_err(|e| e.context("target_labels"))?;
            }
        } else if self.target_logits.is_some() || self.target_labels.is_some() {
            return Err(Error::Manifest(
                "target_logits/target_labels are not supported for segmentation".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub task: Task,
    pub n_classes: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl Manifest {
    /// Checks the cross-checkpoint invariants: non-empty, unique
    /// `(run_id, iteration)`, consistent class counts and dump shapes.
    pub fn new(task: Task, n_classes: usize, checkpoints: Vec<Checkpoint>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::Manifest("no checkpoints".into()));
        }
        let mut seen = HashSet::new();
        for ck in &checkpoints {
            let id = ck.id();
            if !seen.insert(id.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate checkpoint (run_id {:?}, iteration {})",
                    id.run_id, id.iteration
                )));
            }
            ck.validate(task, n_classes)
                .map_err(|e| e.context(format!("checkpoint {id}")))?;
        }
        Ok(Manifest {
            task,
            n_classes,
            checkpoints,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a manifest and eagerly loads and validates every referenced dump.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = ManifestFile::from_json(&text).map_err(|e| e.context(path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    let mut checkpoints = Vec::with_capacity(file.checkpoints.len());
    for entry in file.checkpoints {
        let record = CheckpointRecord {
            run_id: entry.run_id,
            hyperparams: entry.hyperparams,
            iteration: entry.iteration,
            target_probs_path: resolve(base, &entry.target_probs),
            source_val_probs_path: entry.source_val_probs.map(|p| resolve(base, &p)),
            source_val_labels_path: entry.source_val_labels.map(|p| resolve(base, &p)),
            target_logits_path: entry.target_logits.map(|p| resolve(base, &p)),
            target_labels_path: entry.target_labels.map(|p| resolve(base, &p)),
        };
        let id = record.id();
        // Report duplicates before touching the filesystem.
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate checkpoint (run_id {:?}, iteration {})",
                id.run_id, id.iteration
            )));
        }
        let ck = load_checkpoint(file.task, record)
            .map_err(|e| e.context(format!("checkpoint {id}")))?;
        checkpoints.push(ck);
    }
    Manifest::new(file.task, file.n_classes, checkpoints)
}

fn load_checkpoint(task: Task, record: CheckpointRecord) -> Result<Checkpoint> {
    let target = match task {
        Task::Segmentation => {
            TargetPredictions::Segmentation(load_segmentation_dump(&record.target_probs_path)?)
        }
        _ => TargetPredictions::Classification(load_prob_matrix(&record.target_probs_path)?),
    };
    let source_val_probs = record
        .source_val_probs_path
        .as_ref()
        .map(load_prob_matrix)
        .transpose()?;
    let source_val_labels = record
        .source_val_labels_path
        .as_ref()
        .map(load_label_vector)
        .transpose()?;
    let target_logits = record
        .target_logits_path
        .as_ref()
        .map(load_logit_matrix)
        .transpose()?;
    let target_labels = record
        .target_labels_path
        .as_ref()
        .map(load_label_vector)
        .transpose()?;
    Ok(Checkpoint {
        record,
        target,
        source_val_probs,
        source_val_labels,
        target_logits,
        target_labels,
    })
}
