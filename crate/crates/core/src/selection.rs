//! Scoring checkpoints under each criterion and picking winners.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    class_entropy, dev_risk, fit_domain_discriminator, iwv_risk, select_validation_subset,
    source_risk, zero_one_losses, DevConfig,
};
use crate::error::{Error, Result};
use crate::feature_store::{
    Checkpoint, CheckpointId, LabelVector, Manifest, ProbMatrix, TargetPredictions,
};
use crate::snd::{
    prepare_features, prepare_features_logits, segmentation_sample_indices, snd, snd_segmentation,
    SndConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Snd,
    SndNoSoftmax,
    CEnt,
    SourceRisk,
    Iwv,
    Dev,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Snd,
        Criterion::SndNoSoftmax,
        Criterion::CEnt,
        Criterion::SourceRisk,
        Criterion::Iwv,
        Criterion::Dev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Snd => "snd",
            Criterion::SndNoSoftmax => "snd_no_softmax",
            Criterion::CEnt => "c_ent",
            Criterion::SourceRisk => "source_risk",
            Criterion::Iwv => "iwv",
            Criterion::Dev => "dev",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Criterion::Snd | Criterion::SndNoSoftmax => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn needs_source_validation(self) -> bool {
        matches!(
            self,
            Criterion::SourceRisk | Criterion::Iwv | Criterion::Dev
        )
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Criterion::ALL.iter().map(|c| c.name()).collect();
                Error::Config(format!(
                    "unknown criterion {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Maximize => "maximize",
            Direction::Minimize => "minimize",
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn prefers(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionScore {
    pub criterion: Criterion,
    pub value: f64,
    pub direction: Direction,
}

impl CriterionScore {
    pub fn new(criterion: Criterion, value: f64) -> Self {
        CriterionScore {
            criterion,
            value,
            direction: criterion.direction(),
        }
    }
}

/// One row of the report: a checkpoint's value under one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub run_id: String,
    pub iteration: u64,
    pub criterion: Criterion,
    pub value: f64,
    pub direction: Direction,
}

impl ScoreEntry {
    pub fn id(&self) -> CheckpointId {
        CheckpointId {
            run_id: self.run_id.clone(),
            iteration: self.iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAccuracy {
    pub run_id: String,
    pub iteration: u64,
    pub value: f64,
}

/// Target accuracy computed from evaluation-only labels. Never feeds winners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub accuracy: Vec<OracleAccuracy>,
    pub winner: CheckpointId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scores: Vec<ScoreEntry>,
    pub winners: BTreeMap<Criterion, CheckpointId>,
    pub oracle: Option<OracleReport>,
}

impl SelectionReport {
    pub fn winner(&self, criterion: Criterion) -> Option<&CheckpointId> {
        self.winners.get(&criterion)
    }

    pub fn oracle_winner(&self) -> Option<&CheckpointId> {
        self.oracle.as_ref().map(|o| &o.winner)
    }

    pub fn scores_for(&self, id: &CheckpointId) -> Vec<CriterionScore> {
        self.scores
            .iter()
            .filter(|s| s.run_id == id.run_id && s.iteration == id.iteration)
            .map(|s| CriterionScore::new(s.criterion, s.value))
            .collect()
    }

    /// Per criterion and run, the `(iteration, value)` series in iteration order.
    pub fn curves(&self) -> BTreeMap<Criterion, BTreeMap<String, Vec<(u64, f64)>>> {
        let mut out: BTreeMap<Criterion, BTreeMap<String, Vec<(u64, f64)>>> = BTreeMap::new();
        for s in &self.scores {
            out.entry(s.criterion)
                .or_default()
                .entry(s.run_id.clone())
                .or_default()
                .push((s.iteration, s.value));
        }
        for runs in out.values_mut() {
            for series in runs.values_mut() {
                series.sort_by_key(|&(it, _)| it);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Index of the best `(id, value)` pair; equal values go to the earlier
/// iteration, then the lexicographically smaller run_id.
pub fn best_index(candidates: &[(CheckpointId, f64)], direction: Direction) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, (id, v)) in candidates.iter().enumerate() {
        best = match best {
            None => Some(k),
            Some(b) => {
                let (bid, bv) = &candidates[b];
                let better = direction.prefers(*v, *bv)
                    || (*v == *bv && (id.iteration, &id.run_id) < (bid.iteration, &bid.run_id));
                Some(if better { k } else { b })
            }
        };
    }
    best
}

fn check_requirements(manifest: &Manifest, criteria: &BTreeSet<Criterion>) -> Result<()> {
    for &c in criteria {
        for ck in &manifest.checkpoints {
            if c.needs_source_validation() && ck.source_validation().is_none() {
                return Err(Error::Validation(format!(
                    "criterion {c} needs source validation predictions and labels, \
                     missing for checkpoint {}",
                    ck.id()
                )));
            }
            if c == Criterion::SndNoSoftmax {
                if manifest.task == crate::feature_store::Task::Segmentation {
                    return Err(Error::Validation(format!(
                        "criterion {c} is not supported for segmentation"
                    )));
                }
                if ck.target_logits.is_none() {
                    return Err(Error::Validation(format!(
                        "criterion {c} needs target logits, missing for checkpoint {}",
                        ck.id()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Target rows used as discriminator input: the full matrix for classification,
/// the same pixels SND samples for segmentation.
fn target_rows(ck: &Checkpoint, snd_config: &SndConfig) -> Result<ProbMatrix> {
    match &ck.target {
        TargetPredictions::Classification(m) => Ok(m.clone()),
        TargetPredictions::Segmentation(dump) => {
            let c = dump.n_classes();
            let mut data = Vec::new();
            for (i, im) in dump.images().iter().enumerate() {
                let k = snd_config.subsample_pixels.min(im.n_pixels());
                for p in segmentation_sample_indices(snd_config.rng_seed, i, im.n_pixels(), k) {
                    data.extend_from_slice(im.pixel(p));
                }
            }
            ProbMatrix::new(data.len() / c, c, data)
        }
    }
}

fn score_checkpoint(
    ck: &Checkpoint,
    criteria: &BTreeSet<Criterion>,
    snd_config: &SndConfig,
    dev_config: &DevConfig,
) -> Result<Vec<CriterionScore>> {
    let mut out = Vec::with_capacity(criteria.len());

    let source_subset = ck.source_validation().map(|(probs, labels)| {
        let idx = match dev_config.val_per_class {
            Some(k) => select_validation_subset(labels, k, dev_config.rng_seed),
            None => (0..labels.len()).collect(),
        };
        (probs.select_rows(&idx), labels.select(&idx))
    });
    let needs_weights = criteria.contains(&Criterion::Iwv) || criteria.contains(&Criterion::Dev);
    let weighted = if needs_weights {
        let (probs, labels): &(ProbMatrix, LabelVector) = source_subset
            .as_ref()
            .expect("checked by check_requirements");
        let target = target_rows(ck, snd_config)?;
        let weights = fit_domain_discriminator(
            &prepare_features(probs)?,
            &prepare_features(&target)?,
            dev_config,
        )?;
        Some((zero_one_losses(probs, labels)?, weights))
    } else {
        None
    };

    for &c in criteria {
        let score = match c {
            Criterion::Snd => {
                let value = match &ck.target {
                    TargetPredictions::Classification(m) => {
                        snd(&prepare_features(m)?, snd_config)?.value
                    }
                    TargetPredictions::Segmentation(d) => snd_segmentation(d, snd_config)?.value,
                };
                CriterionScore::new(c, value)
            }
            Criterion::SndNoSoftmax => {
                let logits = ck
                    .target_logits
                    .as_ref()
                    .expect("checked by check_requirements");
                CriterionScore::new(c, snd(&prepare_features_logits(logits)?, snd_config)?.value)
            }
            Criterion::CEnt => match &ck.target {
                TargetPredictions::Classification(m) => class_entropy(m),
                TargetPredictions::Segmentation(d) => class_entropy(&d.to_prob_matrix()),
            },
            Criterion::SourceRisk => {
                let (probs, labels) = source_subset
                    .as_ref()
                    .expect("checked by check_requirements");
                source_risk(probs, labels)?
            }
            Criterion::Iwv => {
                let (losses, w) = weighted.as_ref().expect("weights fitted");
                iwv_risk(losses, w)?
            }
            Criterion::Dev => {
                let (losses, w) = weighted.as_ref().expect("weights fitted");
                dev_risk(losses, w)?
            }
        };
        out.push(score);
    }
    Ok(out)
}

fn target_accuracy(ck: &Checkpoint) -> Option<f64> {
    let (TargetPredictions::Classification(m), Some(labels)) = (&ck.target, &ck.target_labels)
    else {
        return None;
    };
    let correct = (0..m.n_samples())
        .filter(|&i| m.argmax(i) == labels.as_slice()[i])
        .count();
    Some(correct as f64 / m.n_samples() as f64)
}

/// Scores every checkpoint under every requested criterion and selects the
/// best checkpoint per criterion.
pub fn score_manifest(
    manifest: &Manifest,
    criteria: &BTreeSet<Criterion>,
    snd_config: &SndConfig,
    dev_config: &DevConfig,
) -> Result<SelectionReport> {
    snd_config.validate()?;
    dev_config.validate()?;
    check_requirements(manifest, criteria)?;

    let per_checkpoint = manifest
        .checkpoints
        .par_iter()
        .map(|ck| {
            score_checkpoint(ck, criteria, snd_config, dev_config)
                .map_err(|e| e.context(format!("checkpoint {}", ck.id())))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = Vec::with_capacity(manifest.checkpoints.len() * criteria.len());
    for (ck, cs) in manifest.checkpoints.iter().zip(&per_checkpoint) {
        for s in cs {
            scores.push(ScoreEntry {
                run_id: ck.record.run_id.clone(),
                iteration: ck.record.iteration,
                criterion: s.criterion,
                value: s.value,
                direction: s.direction,
            });
        }
    }

    let mut winners = BTreeMap::new();
    for &c in criteria {
        let candidates: Vec<(CheckpointId, f64)> = scores
            .iter()
            .filter(|s| s.criterion == c)
            .map(|s| (s.id(), s.value))
            .collect();
        if let Some(b) = best_index(&candidates, c.direction()) {
            winners.insert(c, candidates[b].0.clone());
        }
    }

    let accuracies: Option<Vec<f64>> = manifest.checkpoints.iter().map(target_accuracy).collect();
    let oracle = accuracies.map(|acc| {
        let candidates: Vec<(CheckpointId, f64)> = manifest
            .checkpoints
            .iter()
            .zip(&acc)
            .map(|(ck, &a)| (ck.id(), a))
            .collect();
        let b = best_index(&candidates, Direction::Maximize).expect("manifest is non-empty");
        OracleReport {
            accuracy: candidates
                .iter()
                .map(|(id, v)| OracleAccuracy {
                    run_id: id.run_id.clone(),
                    iteration: id.iteration,
                    value: *v,
                })
                .collect(),
            winner: candidates[b].0.clone(),
        }
    });

    Ok(SelectionReport {
        scores,
        winners,
        oracle,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSelection {
    pub winner: String,
    /// SND of each candidate's target predictions.
    pub scores: BTreeMap<String, f64>,
}

/// Picks the source domain whose model gives the densest target
/// neighborhoods. Ties go to the lexicographically first name.
pub fn select_source_domain(
    candidates: &BTreeMap<String, ProbMatrix>,
    config: &SndConfig,
) -> Result<SourceSelection> {
    if candidates.len() < 2 {
        return Err(Error::Validation(format!(
            "source selection needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let (first_name, first) = candidates.iter().next().expect("non-empty");
    for (name, m) in candidates {
        if m.n_samples() != first.n_samples() || m.n_classes() != first.n_classes() {
            return Err(Error::Shape(format!(
                "candidate {name:?} is {}x{}, candidate {first_name:?} is {}x{}",
                m.n_samples(),
                m.n_classes(),
                first.n_samples(),
                first.n_classes()
            )));
        }
    }
    let mut scores = BTreeMap::new();
    let mut winner: Option<(&String, f64)> = None;
    for (name, m) in candidates {
        let v = snd(&prepare_features(m)?, config)?.value;
        if winner.is_none_or(|(_, best)| v > best) {
            winner = Some((name, v));
        }
        scores.insert(name.clone(), v);
    }
    Ok(SourceSelection {
        winner: winner.expect("non-empty").0.clone(),
        scores,
    })
}

/// CSV rendering of the score table: `run_id,iteration,criterion,value,direction`.
pub fn report_csv(report: &SelectionReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "iteration", "criterion", "value", "direction"])
        .expect("in-memory write");
    for s in &report.scores {
        w.write_record([
            s.run_id.as_str(),
            &s.iteration.to_string(),
            s.criterion.name(),
            &s.value.to_string(),
            s.direction.name(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Writes the JSON report and the plot-ready CSV.
pub fn emit_report(
    report: &SelectionReport,
    json_path: impl AsRef<Path>,
    csv_path: impl AsRef<Path>,
) -> Result<()> {
    let json_path = json_path.as_ref();
    std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
    let csv_path = csv_path.as_ref();
    std::fs::write(csv_path, report_csv(report)).map_err(|e| Error::io(csv_path, e))
}
