//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use nbrselect::feature_store::{
    save_label_vector, save_logit_matrix, save_prob_matrix, CheckpointEntry, LabelVector,
    LogitMatrix, ManifestFile, ProbMatrix, Task,
};
use nbrselect::snd::FeatureMatrix;
use nbrselect::toy::{
    generate_toy_data, Adaptation, Batch, LossBreakdown, MlpModel, ParamGroup, ToyConfig,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Softmax of standard normal logits scaled by `scale`.
pub fn random_probs(rng: &mut impl Rng, n: usize, c: usize, scale: f64) -> ProbMatrix {
    let normal = Normal::new(0.0, scale).unwrap();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| softmax(&(0..c).map(|_| normal.sample(rng)).collect::<Vec<_>>()))
        .collect();
    ProbMatrix::from_rows(&rows).unwrap()
}

/// Random unit vectors in `dim` dimensions.
pub fn random_unit_features(rng: &mut impl Rng, n: usize, dim: usize) -> FeatureMatrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect();
    FeatureMatrix::from_rows(&rows)
        .unwrap()
        .l2_normalized()
        .unwrap()
}

/// Predictions of a model whose logits are `margin` on the true class plus
/// Gaussian noise of `noise` on every class. Returns probs, logits, labels.
pub fn noisy_cluster_predictions(
    rng: &mut impl Rng,
    labels: &[usize],
    n_classes: usize,
    margin: f64,
    noise: f64,
) -> (ProbMatrix, LogitMatrix) {
    let normal = Normal::new(0.0, noise).unwrap();
    let mut logit_rows = Vec::with_capacity(labels.len());
    let mut prob_rows = Vec::with_capacity(labels.len());
    for &y in labels {
        let z: Vec<f64> = (0..n_classes)
            .map(|k| if k == y { margin } else { 0.0 } + normal.sample(rng))
            .collect();
        prob_rows.push(softmax(&z));
        logit_rows.push(z);
    }
    (
        ProbMatrix::from_rows(&prob_rows).unwrap(),
        LogitMatrix::from_rows(&logit_rows).unwrap(),
    )
}

pub fn balanced_labels(n: usize, n_classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % n_classes).collect()
}

/// Rounds every entry through f32, as the binary format stores it.
pub fn f32_exact(m: &ProbMatrix) -> ProbMatrix {
    let data = m.as_slice().iter().map(|&x| x as f32 as f64).collect();
    ProbMatrix::new(m.n_samples(), m.n_classes(), data).unwrap()
}

/// A checkpoint to be written by [`write_manifest`].
pub struct FixtureCheckpoint {
    pub run_id: String,
    pub iteration: u64,
    pub target: ProbMatrix,
    pub target_logits: Option<LogitMatrix>,
    pub target_labels: Option<Vec<usize>>,
    pub source_val: Option<(ProbMatrix, Vec<usize>)>,
}

impl FixtureCheckpoint {
    pub fn new(run_id: &str, iteration: u64, target: ProbMatrix) -> Self {
        FixtureCheckpoint {
            run_id: run_id.to_string(),
            iteration,
            target,
            target_logits: None,
            target_labels: None,
            source_val: None,
        }
    }
}

/// Writes the dumps and a manifest referencing them by relative path.
pub fn write_manifest(
    dir: &Path,
    n_classes: usize,
    checkpoints: &[FixtureCheckpoint],
) -> std::path::PathBuf {
    let mut entries = Vec::new();
    for ck in checkpoints {
        let stem = format!("{}_{}", ck.run_id, ck.iteration);
        let target = format!("{stem}_target.prb");
        save_prob_matrix(dir.join(&target), &ck.target).unwrap();
        let mut entry = CheckpointEntry {
            run_id: ck.run_id.clone(),
            hyperparams: Default::default(),
            iteration: ck.iteration,
            target_probs: target.into(),
            source_val_probs: None,
            source_val_labels: None,
            target_logits: None,
            target_labels: None,
        };
        if let Some(l) = &ck.target_logits {
            let p = format!("{stem}_target.lgt");
            save_logit_matrix(dir.join(&p), l).unwrap();
            entry.target_logits = Some(p.into());
        }
        if let Some(y) = &ck.target_labels {
            let p = format!("{stem}_target.lbl");
            save_label_vector(dir.join(&p), &LabelVector::new(y.clone())).unwrap();
            entry.target_labels = Some(p.into());
        }
        if let Some((probs, y)) = &ck.source_val {
            let p = format!("{stem}_srcval.prb");
            let l = format!("{stem}_srcval.lbl");
            save_prob_matrix(dir.join(&p), probs).unwrap();
            save_label_vector(dir.join(&l), &LabelVector::new(y.clone())).unwrap();
            entry.source_val_probs = Some(p.into());
            entry.source_val_labels = Some(l.into());
        }
        entries.push(entry);
    }
    let path = dir.join("manifest.json");
    ManifestFile {
        task: Task::Classification,
        n_classes,
        checkpoints: entries,
    }
    .write(&path)
    .unwrap();
    path
}

/// Five checkpoints whose predictions get noisier with the planted rank;
/// the run order is shuffled so the winner is not decided by tie-breaks.
/// Returns the manifest path and the run_id of the cleanest checkpoint.
pub fn planted_quality_manifest(dir: &Path, seed: u64) -> (std::path::PathBuf, String) {
    let mut rng = rng(seed);
    let n_classes = 5;
    let labels = balanced_labels(200, n_classes);
    let noises = [0.6, 1.2, 1.8, 2.4, 3.0];
    let mut order: Vec<usize> = (0..noises.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut cks = Vec::new();
    let mut best = String::new();
    for (slot, &rank) in order.iter().enumerate() {
        let (probs, logits) =
            noisy_cluster_predictions(&mut rng, &labels, n_classes, 4.0, noises[rank]);
        let run_id = format!("run{slot}");
        if rank == 0 {
            best = run_id.clone();
        }
        let (sv_probs, _) = noisy_cluster_predictions(
            &mut rng,
            &balanced_labels(30, n_classes),
            n_classes,
            4.0,
            0.6,
        );
        cks.push(FixtureCheckpoint {
            run_id,
            iteration: 1000,
            target: f32_exact(&probs),
            target_logits: Some(logits),
            target_labels: Some(labels.clone()),
            source_val: Some((f32_exact(&sv_probs), balanced_labels(30, n_classes))),
        });
    }
    (write_manifest(dir, n_classes, &cks), best)
}

const H: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn central<F: Fn(&MlpModel) -> f64>(model: &MlpModel, k: usize, f: F) -> f64 {
    let mut plus = model.clone();
    plus.params_mut()[k] += H;
    let mut minus = model.clone();
    minus.params_mut()[k] -= H;
    (f(&plus) - f(&minus)) / (2.0 * H)
}

fn expected_gradient(model: &MlpModel, batch: &Batch<'_>, k: usize) -> f64 {
    let term = |sel: fn(&LossBreakdown) -> f64| central(model, k, |m| sel(&m.losses(batch)));
    let ds = term(|l| l.source);
    let da = term(|l| l.adapt);
    match batch.adaptation {
        Adaptation::Adversarial => match model.param_group(k) {
            ParamGroup::Hidden => ds - batch.lambda_adv * da,
            ParamGroup::Classifier => ds,
            ParamGroup::Domain => da,
        },
        Adaptation::Collapse { .. } => ds + batch.lambda_adv * da,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest relative error between the analytic gradient and the loss-only
/// finite-difference oracle over 10 random parameters.
pub fn gradient_rel_error(adaptation: Adaptation, lambda: f64, seed: u64) -> f64 {
    let cfg = ToyConfig {
        rng_seed: seed,
        n_per_class: 20,
        n_target: 20,
        target_shift: [3.0, -3.0],
        ..ToyConfig::default()
    };
    let data = generate_toy_data(&cfg);
    // perturb away from the initialization so every layer is active
    let mut model = MlpModel::from_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for w in model.params_mut() {
        *w *= 1.0 + 0.5 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
    }
    let batch = Batch {
        source: &data.source,
        source_labels: &data.source_labels,
        target: &data.target,
        adaptation,
        lambda_adv: lambda,
    };
    let (_, grad) = model.loss_and_gradient(&batch);
    let picks = index::sample(&mut rng, grad.len(), 10);
    picks
        .iter()
        .map(|k| rel_err(grad[k], expected_gradient(&model, &batch, k)))
        .fold(0.0, f64::max)
}
