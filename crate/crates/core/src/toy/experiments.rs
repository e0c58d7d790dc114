//! Canned toy experiments with their directional checks.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{train_toy, Adaptation, MlpModel, ToyConfig};
use crate::baselines::class_entropy;
use crate::error::{Error, Result};
use crate::feature_store::{
    save_label_vector, save_prob_matrix, CheckpointEntry, LabelVector, ManifestFile, ProbMatrix,
    Task,
};
use crate::snd::{prepare_features, snd, SndConfig};
use crate::stats::{mean, spearman};
use crate::toy::generate_toy_data;

pub const VARIANCE_SIGMAS: [f64; 5] = [0.3, 0.6, 1.0, 1.5, 2.0];
pub const TEMPERATURES: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.1];
/// Temperatures over which the selected model must not change.
pub const STABLE_TEMPERATURES: [f64; 3] = [0.03, 0.05, 0.07];
pub const CANDIDATE_LAMBDAS: [f64; 4] = [0.0, 0.1, 0.3, 1.0];
pub const SUBSAMPLE_FRACTIONS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
pub const SUBSAMPLE_DRAWS: usize = 10;
pub const SUBSAMPLE_TARGET: usize = 2000;
/// Allowed relative deviation of half-size SND from the full-set value.
pub const SUBSAMPLE_TOLERANCE: f64 = 0.05;
pub const MODE_COUNTS: [usize; 2] = [1, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    FalseAlignment,
    VarianceSweep,
    ModeCount,
    DegenerateCollapse,
    TemperatureSweep,
    SubsampleSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::FalseAlignment,
        Experiment::VarianceSweep,
        Experiment::ModeCount,
        Experiment::DegenerateCollapse,
        Experiment::TemperatureSweep,
        Experiment::SubsampleSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::FalseAlignment => "false_alignment",
            Experiment::VarianceSweep => "variance_sweep",
            Experiment::ModeCount => "mode_count",
            Experiment::DegenerateCollapse => "degenerate_collapse",
            Experiment::TemperatureSweep => "temperature_sweep",
            Experiment::SubsampleSweep => "subsample_sweep",
        }
    }

    /// Base configuration of the experiment before command-line overrides.
    ///
    /// The false-alignment fixture (also used by the temperature sweep) moves
    /// the class-1 Gaussian toward the decision boundary and trains with a
    /// larger step for longer, so the adversarial branch converges.
    pub fn fixture(self) -> ToyConfig {
        let base = ToyConfig::default();
        match self {
            Experiment::FalseAlignment | Experiment::TemperatureSweep => ToyConfig {
                target_shift: [0.5, -3.5],
                learning_rate: 1.0,
                epochs: 2000,
                ..base
            },
            Experiment::VarianceSweep => ToyConfig {
                target_classes: vec![0, 1],
                shifted_classes: vec![],
                ..base
            },
            Experiment::ModeCount => base,
            Experiment::DegenerateCollapse => ToyConfig {
                target_classes: vec![0, 1],
                ..base
            },
            Experiment::SubsampleSweep => ToyConfig {
                target_classes: vec![0, 1],
                n_target: SUBSAMPLE_TARGET,
                ..base
            },
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                Error::Config(format!(
                    "unknown experiment {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// One line of the curve CSV. `variant` tells apart rows sharing a sweep
/// value and seed (the candidate model, or the subsample draw).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub sweep_variable: f64,
    pub seed: u64,
    pub snd: f64,
    pub c_ent: f64,
    pub target_accuracy_oracle: f64,
    pub variant: String,
}

/// Target predictions of one trained model, written as a binary dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDump {
    pub seed: u64,
    pub variant: String,
    pub lambda_adv: f64,
    pub epochs: usize,
    pub probs: ProbMatrix,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub experiment: Experiment,
    pub rows: Vec<ExperimentRow>,
    pub dumps: Vec<PredictionDump>,
    pub passed: bool,
    pub summary: String,
}

impl ExperimentRecord {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("sweep_variable,seed,snd,c_ent,target_accuracy_oracle,variant\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.sweep_variable, r.seed, r.snd, r.c_ent, r.target_accuracy_oracle, r.variant
            )
            .expect("write to string");
        }
        out
    }

    /// Writes `<name>.csv`, one `.prb`/`.lbl` pair per dump and, when an
    /// experiment compares candidate models, one manifest per seed that the
    /// `score` command accepts. Returns the written paths.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let name = self.experiment.name();
        let mut written = Vec::new();

        let csv_path = out_dir.join(format!("{name}.csv"));
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        written.push(csv_path);

        let mut per_seed: BTreeMap<u64, Vec<CheckpointEntry>> = BTreeMap::new();
        for d in &self.dumps {
            let stem = format!("{name}_s{}_{}", d.seed, d.variant);
            let probs = PathBuf::from(format!("{stem}.prb"));
            let labels = PathBuf::from(format!("{stem}.lbl"));
            save_prob_matrix(out_dir.join(&probs), &d.probs)?;
            save_label_vector(out_dir.join(&labels), &d.labels)?;
            written.push(out_dir.join(&probs));
            written.push(out_dir.join(&labels));
            per_seed.entry(d.seed).or_default().push(CheckpointEntry {
                run_id: d.variant.clone(),
                hyperparams: BTreeMap::from([("lambda_adv".to_string(), d.lambda_adv)]),
                iteration: d.epochs as u64,
                target_probs: probs,
                source_val_probs: None,
                source_val_labels: None,
                target_logits: None,
                target_labels: Some(labels),
            });
        }

        if self.compares_models() {
            for (seed, checkpoints) in per_seed {
                let manifest = ManifestFile {
                    task: Task::Classification,
                    n_classes: self.dumps[0].probs.n_classes(),
                    checkpoints,
                };
                let path = out_dir.join(format!("{name}_s{seed}_manifest.json"));
                manifest.write(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    fn compares_models(&self) -> bool {
        matches!(
            self.experiment,
            Experiment::FalseAlignment
                | Experiment::DegenerateCollapse
                | Experiment::TemperatureSweep
        )
    }
}

/// Criterion values of one set of target predictions.
#[derive(Debug, Clone, Copy)]
struct Scores {
    snd: f64,
    c_ent: f64,
    accuracy: f64,
}

fn accuracy(probs: &ProbMatrix, labels: &[usize]) -> f64 {
    let correct = (0..probs.n_samples())
        .filter(|&i| probs.argmax(i) == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}

fn evaluate(probs: &ProbMatrix, labels: &[usize], snd_config: &SndConfig) -> Result<Scores> {
    Ok(Scores {
        snd: snd(&prepare_features(probs)?, snd_config)?.value,
        c_ent: class_entropy(probs).value,
        accuracy: accuracy(probs, labels),
    })
}

fn row(sweep_variable: f64, seed: u64, s: Scores, variant: impl Into<String>) -> ExperimentRow {
    ExperimentRow {
        sweep_variable,
        seed,
        snd: s.snd,
        c_ent: s.c_ent,
        target_accuracy_oracle: s.accuracy,
        variant: variant.into(),
    }
}

/// A trained model's target predictions.
struct Trained {
    config: ToyConfig,
    model: MlpModel,
    probs: ProbMatrix,
    labels: Vec<usize>,
}

impl Trained {
    fn dump(&self, variant: &str) -> PredictionDump {
        PredictionDump {
            seed: self.config.rng_seed,
            variant: variant.to_string(),
            lambda_adv: self.config.lambda_adv,
            epochs: self.config.epochs,
            probs: self.probs.clone(),
            labels: LabelVector::new(self.labels.clone()),
        }
    }
}

/// Trains every configuration in parallel, keeping the input order.
fn train_all(configs: Vec<ToyConfig>) -> Result<Vec<Trained>> {
    configs
        .into_par_iter()
        .map(|config| {
            let run = train_toy(&config)?;
            Ok(Trained {
                model: run.model,
                probs: run.target_probs,
                labels: run.data.target_labels,
                config,
            })
        })
        .collect()
}

fn lambda_variant(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

/// Runs one experiment for each seed in `seeds`, starting from `base`.
pub fn run_experiment(
    experiment: Experiment,
    base: &ToyConfig,
    seeds: &[u64],
) -> Result<ExperimentRecord> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    base.validate()?;
    let seeded = |seed: u64| ToyConfig {
        rng_seed: seed,
        ..base.clone()
    };
    let record = match experiment {
        Experiment::FalseAlignment => false_alignment(seeds, seeded),
        Experiment::VarianceSweep => variance_sweep(seeds, seeded),
        Experiment::ModeCount => mode_count(seeds, seeded),
        Experiment::DegenerateCollapse => degenerate_collapse(seeds, seeded),
        Experiment::TemperatureSweep => temperature_sweep(seeds, seeded),
        Experiment::SubsampleSweep => subsample_sweep(seeds, seeded),
    }?;
    Ok(ExperimentRecord {
        experiment,
        ..record
    })
}

fn record(
    rows: Vec<ExperimentRow>,
    dumps: Vec<PredictionDump>,
    passed: bool,
    summary: String,
) -> ExperimentRecord {
    ExperimentRecord {
        experiment: Experiment::FalseAlignment,
        rows,
        dumps,
        passed,
        summary,
    }
}

fn false_alignment(seeds: &[u64], seeded: impl Fn(u64) -> ToyConfig) -> Result<ExperimentRecord> {
    let lambdas = [0.0, 1.0];
    let configs = seeds
        .iter()
        .flat_map(|&s| {
            lambdas.map(|lambda_adv| ToyConfig {
                lambda_adv,
                adaptation: Adaptation::Adversarial,
                ..seeded(s)
            })
        })
        .collect();
    let trained = train_all(configs)?;
    let snd_config = SndConfig::default();
    let (mut rows, mut dumps) = (Vec::new(), Vec::new());
    let mut hits = 0;
    for (pair, &seed) in trained.chunks(2).zip(seeds) {
        let src = evaluate(&pair[0].probs, &pair[0].labels, &snd_config)?;
        let adv = evaluate(&pair[1].probs, &pair[1].labels, &snd_config)?;
        if src.snd > adv.snd && adv.c_ent < src.c_ent && src.accuracy > adv.accuracy {
            hits += 1;
        }
        for (t, s) in pair.iter().zip([src, adv]) {
            let variant = lambda_variant(t.config.lambda_adv);
            rows.push(row(t.config.lambda_adv, seed, s, variant.clone()));
            dumps.push(t.dump(&variant));
        }
    }
    // at least two of every three seeds
    let passed = 3 * hits >= 2 * seeds.len();
    let summary = format!(
        "SND picks source-only while C-Ent picks the adversarial model (and source-only is more accurate) in {hits} of {} seeds",
        seeds.len()
    );
    Ok(record(rows, dumps, passed, summary))
}

fn variance_sweep(seeds: &[u64], seeded: impl Fn(u64) -> ToyConfig) -> Result<ExperimentRecord> {
    let configs = seeds
        .iter()
        .flat_map(|&s| {
            VARIANCE_SIGMAS.map(|source_std| ToyConfig {
                source_std,
                ..seeded(s)
            })
        })
        .collect();
    let trained = train_all(configs)?;
    let snd_config = SndConfig::default();
    let (mut rows, mut dumps, mut rhos) = (Vec::new(), Vec::new(), Vec::new());
    for (group, &seed) in trained.chunks(VARIANCE_SIGMAS.len()).zip(seeds) {
        let mut snds = Vec::new();
        for t in group {
            let s = evaluate(&t.probs, &t.labels, &snd_config)?;
            let sigma = t.config.source_std;
            let variant = format!("sigma_{sigma}");
            rows.push(row(sigma, seed, s, variant.clone()));
            dumps.push(t.dump(&variant));
            snds.push(s.snd);
        }
        rhos.push(spearman(&VARIANCE_SIGMAS, &snds));
    }
    let rho = mean(&rhos);
    let passed = rho <= -0.9;
    let summary = format!(
        "mean Spearman(sigma, SND) = {rho:.3} over {} seeds",
        seeds.len()
    );
    Ok(record(rows, dumps, passed, summary))
}

fn mode_count(seeds: &[u64], seeded: impl Fn(u64) -> ToyConfig) -> Result<ExperimentRecord> {
    // one source-only model per seed, evaluated on targets of equal size
    let configs = seeds
        .iter()
        .map(|&s| ToyConfig {
            lambda_adv: 0.0,
            ..seeded(s)
        })
        .collect();
    let trained = train_all(configs)?;
    let snd_config = SndConfig::default();
    let (mut rows, mut dumps) = (Vec::new(), Vec::new());
    let mut all_larger = true;
    for (t, &seed) in trained.iter().zip(seeds) {
        let mut snds = Vec::new();
        for modes in MODE_COUNTS {
            let cfg = ToyConfig {
                target_modes: Some(modes),
                ..t.config.clone()
            };
            cfg.validate()?;
            let data = generate_toy_data(&cfg);
            let probs = t.model.predict(&data.target)?;
            let s = evaluate(&probs, &data.target_labels, &snd_config)?;
            let variant = format!("modes_{modes}");
            rows.push(row(modes as f64, seed, s, variant.clone()));
            dumps.push(PredictionDump {
                seed,
                variant,
                lambda_adv: 0.0,
                epochs: cfg.epochs,
                probs,
                labels: LabelVector::new(data.target_labels),
            });
            snds.push(s.snd);
        }
        all_larger &= snds[0] > snds[1];
    }
    let summary = format!(
        "SND(1 mode) > SND(6 modes) in {} of {} seeds",
        rows.chunks(2).filter(|r| r[0].snd > r[1].snd).count(),
        seeds.len()
    );
    Ok(record(rows, dumps, all_larger, summary))
}

fn degenerate_collapse(
    seeds: &[u64],
    seeded: impl Fn(u64) -> ToyConfig,
) -> Result<ExperimentRecord> {
    let configs = seeds
        .iter()
        .flat_map(|&s| {
            [
                ToyConfig {
                    lambda_adv: 0.0,
                    adaptation: Adaptation::Adversarial,
                    ..seeded(s)
                },
                ToyConfig {
                    lambda_adv: 1.0,
                    adaptation: Adaptation::Collapse { class: 0 },
                    ..seeded(s)
                },
            ]
        })
        .collect();
    let trained = train_all(configs)?;
    let snd_config = SndConfig::default();
    let (mut rows, mut dumps) = (Vec::new(), Vec::new());
    let mut hits = 0;
    for (pair, &seed) in trained.chunks(2).zip(seeds) {
        let src = evaluate(&pair[0].probs, &pair[0].labels, &snd_config)?;
        let col = evaluate(&pair[1].probs, &pair[1].labels, &snd_config)?;
        if col.snd > src.snd {
            hits += 1;
        }
        for (t, s, variant) in [(&pair[0], src, "source_only"), (&pair[1], col, "collapse")] {
            rows.push(row(t.config.lambda_adv, seed, s, variant));
            dumps.push(t.dump(variant));
        }
    }
    let summary = format!(
        "SND(collapse) > SND(source-only) in {hits} of {} seeds",
        seeds.len()
    );
    Ok(record(rows, dumps, hits == seeds.len(), summary))
}

fn temperature_sweep(seeds: &[u64], seeded: impl Fn(u64) -> ToyConfig) -> Result<ExperimentRecord> {
    let configs = seeds
        .iter()
        .flat_map(|&s| {
            CANDIDATE_LAMBDAS.map(|lambda_adv| ToyConfig {
                lambda_adv,
                adaptation: Adaptation::Adversarial,
                ..seeded(s)
            })
        })
        .collect();
    let trained = train_all(configs)?;
    let (mut rows, mut dumps) = (Vec::new(), Vec::new());
    let mut stable_seeds = 0;
    for (group, &seed) in trained.chunks(CANDIDATE_LAMBDAS.len()).zip(seeds) {
        for t in group {
            dumps.push(t.dump(&lambda_variant(t.config.lambda_adv)));
        }
        let mut picks = BTreeMap::new();
        for tau in TEMPERATURES {
            let snd_config = SndConfig::with_temperature(tau);
            let mut best: Option<(f64, f64)> = None;
            for t in group {
                let s = evaluate(&t.probs, &t.labels, &snd_config)?;
                let lambda = t.config.lambda_adv;
                rows.push(row(tau, seed, s, lambda_variant(lambda)));
                // ties keep the earlier (smaller) lambda
                if best.is_none_or(|(v, _)| s.snd > v) {
                    best = Some((s.snd, lambda));
                }
            }
            picks.insert(tau.to_bits(), best.expect("candidates").1);
        }
        let stable: Vec<f64> = STABLE_TEMPERATURES
            .iter()
            .map(|t| picks[&t.to_bits()])
            .collect();
        if stable.iter().all(|&l| l == stable[0]) {
            stable_seeds += 1;
        }
    }
    let summary = format!(
        "SND-selected lambda identical for tau in {STABLE_TEMPERATURES:?} in {stable_seeds} of {} seeds",
        seeds.len()
    );
    Ok(record(rows, dumps, stable_seeds == seeds.len(), summary))
}

fn subsample_sweep(seeds: &[u64], seeded: impl Fn(u64) -> ToyConfig) -> Result<ExperimentRecord> {
    let configs = seeds
        .iter()
        .map(|&s| ToyConfig {
            lambda_adv: 0.0,
            ..seeded(s)
        })
        .collect();
    let trained = train_all(configs)?;
    let snd_config = SndConfig::default();
    let (mut rows, mut dumps) = (Vec::new(), Vec::new());
    let mut worst_half: f64 = 0.0;
    for (t, &seed) in trained.iter().zip(seeds) {
        dumps.push(t.dump("full"));
        let n = t.probs.n_samples();
        let full = evaluate(&t.probs, &t.labels, &snd_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        for fraction in SUBSAMPLE_FRACTIONS {
            let k = ((fraction * n as f64).round() as usize).clamp(2, n);
            for draw in 0..SUBSAMPLE_DRAWS {
                let mut idx = index::sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                let probs = t.probs.select_rows(&idx);
                let labels: Vec<usize> = idx.iter().map(|&i| t.labels[i]).collect();
                let s = evaluate(&probs, &labels, &snd_config)?;
                if fraction == 0.5 {
                    worst_half = worst_half.max((s.snd - full.snd).abs() / full.snd);
                }
                rows.push(row(fraction, seed, s, format!("draw_{draw}")));
            }
        }
    }
    let passed = worst_half <= SUBSAMPLE_TOLERANCE;
    let summary = format!(
        "largest relative deviation of 50% subsets from the full-set SND = {worst_half:.4} (limit {SUBSAMPLE_TOLERANCE})"
    );
    Ok(record(rows, dumps, passed, summary))
}
