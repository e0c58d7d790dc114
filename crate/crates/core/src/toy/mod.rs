//! Gaussian toy experiments.
//!
//! Source data are two isotropic Gaussians at (0,0) and (5,5); the target is
//! derived by shifting some of them. A two-layer network is trained either on
//! source only (`lambda_adv = 0`), with a domain-adversarial branch, or with a
//! loss that pushes every target sample into one class. Target predictions are
//! then scored with the production criteria.

mod data;
mod experiments;
mod model;

pub use data::{generate_toy_data, target_centers, ToyData};
pub use experiments::{
    run_experiment, Experiment, ExperimentRecord, ExperimentRow, PredictionDump, CANDIDATE_LAMBDAS,
    MODE_COUNTS, STABLE_TEMPERATURES, SUBSAMPLE_FRACTIONS, SUBSAMPLE_TOLERANCE, TEMPERATURES,
    VARIANCE_SIGMAS,
};
pub use model::{
    grl_backward, grl_forward, train, Batch, LossBreakdown, MlpModel, ParamGroup, TrainingLog,
};

use crate::error::{Error, Result};
use crate::feature_store::ProbMatrix;

/// How the target enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptation {
    /// Domain classifier behind a gradient reversal layer.
    Adversarial,
    /// Cross-entropy pulling every target sample to `class`.
    Collapse { class: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub source_means: Vec<[f64; 2]>,
    pub source_std: f64,
    pub target_shift: [f64; 2],
    /// Source classes present in the target.
    pub target_classes: Vec<usize>,
    /// Target classes displaced by `target_shift`.
    pub shifted_classes: Vec<usize>,
    /// When set, the target is drawn from this many shifted modes instead.
    pub target_modes: Option<usize>,
    pub n_per_class: usize,
    pub n_target: usize,
    pub lambda_adv: f64,
    pub adaptation: Adaptation,
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            source_means: vec![[0.0, 0.0], [5.0, 5.0]],
            source_std: 1.0,
            target_shift: [3.0, 3.0],
            target_classes: vec![1],
            shifted_classes: vec![1],
            target_modes: None,
            n_per_class: 200,
            n_target: 200,
            lambda_adv: 0.0,
            adaptation: Adaptation::Adversarial,
            hidden_units: 15,
            epochs: 500,
            learning_rate: 0.05,
            rng_seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.source_means.len();
        if c < 2 {
            return Err(Error::Config("need at least 2 source classes".into()));
        }
        if !(self.source_std > 0.0 && self.source_std.is_finite()) {
            return Err(Error::Config("source_std must be positive".into()));
        }
        if self.n_per_class < 10 {
            return Err(Error::Config("n_per_class must be at least 10".into()));
        }
        if self.n_target < 2 {
            return Err(Error::Config("n_target must be at least 2".into()));
        }
        if self.hidden_units < 2 {
            return Err(Error::Config("hidden_units must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config("lambda_adv must be non-negative".into()));
        }
        if self.target_modes == Some(0) {
            return Err(Error::Config("target_modes must be at least 1".into()));
        }
        if self.target_modes.is_none() && self.target_classes.is_empty() {
            return Err(Error::Config("target_classes is empty".into()));
        }
        let bad_class = self
            .target_classes
            .iter()
            .chain(&self.shifted_classes)
            .copied()
            .chain(match self.adaptation {
                Adaptation::Collapse { class } => Some(class),
                Adaptation::Adversarial => None,
            })
            .find(|&k| k >= c);
        if let Some(k) = bad_class {
            return Err(Error::Config(format!(
                "class {k} out of range for {c} classes"
            )));
        }
        Ok(())
    }

    /// Applies a `key=value` override, as given on the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}")))
        }
        fn point(key: &str, v: &str) -> Result<[f64; 2]> {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!("{key} expects \"x,y\", got {v:?}")));
            }
            Ok([num(key, parts[0])?, num(key, parts[1])?])
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        match key {
            "source_std" => self.source_std = num(key, value)?,
            "target_shift" => self.target_shift = point(key, value)?,
            "source_means" => {
                self.source_means = value
                    .split(';')
                    .map(|p| point(key, p))
                    .collect::<Result<_>>()?
            }
            "target_classes" => self.target_classes = list(key, value)?,
            "shifted_classes" => self.shifted_classes = list(key, value)?,
            "target_modes" => self.target_modes = Some(num(key, value)?),
            "n_per_class" => self.n_per_class = num(key, value)?,
            "n_target" => self.n_target = num(key, value)?,
            "lambda_adv" => self.lambda_adv = num(key, value)?,
            "hidden_units" => self.hidden_units = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "rng_seed" => self.rng_seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown toy setting {key:?}"))),
        }
        Ok(())
    }
}

/// A trained toy model with its data and target predictions.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: MlpModel,
    pub data: ToyData,
    pub target_probs: ProbMatrix,
    pub log: TrainingLog,
}

impl ToyRun {
    /// Target accuracy against the generator's labels (evaluation only).
    pub fn target_accuracy(&self) -> f64 {
        1.0 - self
            .model
            .error_rate(&self.data.target, &self.data.target_labels)
    }

    pub fn source_error(&self) -> f64 {
        self.model
            .error_rate(&self.data.source, &self.data.source_labels)
    }
}

/// Generates data, initializes the network from the seed and trains it.
pub fn train_toy(config: &ToyConfig) -> Result<ToyRun> {
    config.validate()?;
    let data = generate_toy_data(config);
    let mut model = MlpModel::from_config(config);
    let batch = Batch {
        source: &data.source,
        source_labels: &data.source_labels,
        target: &data.target,
        adaptation: config.adaptation,
        lambda_adv: config.lambda_adv,
    };
    let log = train(&mut model, &batch, config.epochs, config.learning_rate)?;
    let target_probs = model.predict(&data.target)?;
    Ok(ToyRun {
        model,
        data,
        target_probs,
        log,
    })
}
