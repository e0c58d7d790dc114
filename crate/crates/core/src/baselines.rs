//! Comparison criteria: class-output entropy (C-Ent), source risk, importance
//! weighted validation (IWV) and its control-variate variant DEV.
//!
//! Importance weights come from a logistic domain discriminator trained to
//! tell source-validation features (label 1) from target features (label 0).
//! The density ratio `p_t(x) / p_s(x)` is then
//! `(n_s / n_t) * (1 - d(x)) / d(x) = (n_s / n_t) * exp(-z(x))`
//! where `z` is the discriminator logit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::feature_store::{argmax, LabelVector, ProbMatrix};
use crate::selection::{Criterion, CriterionScore};
use crate::snd::FeatureMatrix;

/// Source-validation samples kept per class by default.
pub const DEFAULT_VAL_PER_CLASS: usize = 3;

const VAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DevConfig {
    /// Held-out source samples per class; `None` keeps every supplied row.
    pub val_per_class: Option<usize>,
    pub discriminator_epochs: usize,
    pub discriminator_lr: f64,
    pub l2_penalty: f64,
    pub rng_seed: u64,
    /// Upper bound on any importance weight.
    pub weight_clip: f64,
}

impl Default for DevConfig {
    fn default() -> Self {
        DevConfig {
            val_per_class: Some(DEFAULT_VAL_PER_CLASS),
            discriminator_epochs: 200,
            discriminator_lr: 0.1,
            l2_penalty: 1e-3,
            rng_seed: 0,
            weight_clip: 20.0,
        }
    }
}

impl DevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.val_per_class == Some(0) {
            return Err(Error::Config("val_per_class must be at least 1".into()));
        }
        if !(self.discriminator_lr > 0.0 && self.discriminator_lr.is_finite()) {
            return Err(Error::Config("discriminator_lr must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::Config("l2_penalty must be non-negative".into()));
        }
        if self.weight_clip.is_nan() || self.weight_clip <= 1.0 {
            return Err(Error::Config("weight_clip must exceed 1".into()));
        }
        Ok(())
    }
}

/// Per-sample importance weights over the source-validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    /// Discriminator probability that each sample comes from the source.
    /// Empty when the weights were supplied directly.
    pub source_prob: Vec<f64>,
}

impl ImportanceWeights {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!(
                "importance weight {} at index {i} is not a finite non-negative number",
                weights[i]
            )));
        }
        Ok(ImportanceWeights {
            weights,
            source_prob: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Mean Shannon entropy of the predicted class distributions, `0 ln 0 = 0`.
pub fn class_entropy(probs: &ProbMatrix) -> CriterionScore {
    let total: f64 = probs
        .rows()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    CriterionScore::new(Criterion::CEnt, total / probs.n_samples() as f64)
}

/// Per-sample 0/1 error of the argmax prediction (ties to the lowest class).
pub fn zero_one_losses(probs: &ProbMatrix, labels: &LabelVector) -> Result<Vec<f64>> {
    labels.validate_against(probs.n_samples(), probs.n_classes())?;
    Ok(probs
        .rows()
        .zip(labels.as_slice())
        .map(|(row, &y)| if argmax(row) == y { 0.0 } else { 1.0 })
        .collect())
}

/// Error rate on labeled source-validation samples.
pub fn source_risk(probs: &ProbMatrix, labels: &LabelVector) -> Result<CriterionScore> {
    let losses = zero_one_losses(probs, labels)?;
    let risk = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(CriterionScore::new(Criterion::SourceRisk, risk))
}

/// Picks up to `per_class` rows of every class, uniformly at random without
/// replacement. Returned indices are sorted.
pub fn select_validation_subset(labels: &LabelVector, per_class: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.as_slice().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for members in by_class.values() {
        if members.len() <= per_class {
            out.extend_from_slice(members);
        } else {
            let picked = rand::seq::index::sample(&mut rng, members.len(), per_class);
            out.extend(picked.iter().map(|k| members[k]));
        }
    }
    out.sort_unstable();
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits the logistic domain discriminator and returns importance weights for
/// the source-validation rows.
pub fn fit_domain_discriminator(
    source_val: &FeatureMatrix,
    target: &FeatureMatrix,
    config: &DevConfig,
) -> Result<ImportanceWeights> {
    config.validate()?;
    let (n_s, n_t) = (source_val.n_samples(), target.n_samples());
    if n_s == 0 || n_t == 0 {
        return Err(Error::Validation(
            "discriminator needs both source and target samples".into(),
        ));
    }
    if source_val.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "source features have dim {}, target features {}",
            source_val.dim(),
            target.dim()
        )));
    }
    let dim = source_val.dim();
    let n = (n_s + n_t) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut w: Vec<f64> = (0..dim).map(|_| init.sample(&mut rng)).collect();
    let mut b = 0.0;

    let logit = |w: &[f64], b: f64, x: &[f64]| -> f64 {
        b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
    };

    let mut grad_w = vec![0.0; dim];
    for _ in 0..config.discriminator_epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        let samples = source_val
            .rows()
            .map(|x| (x, 1.0))
            .chain(target.rows().map(|x| (x, 0.0)));
        for (x, y) in samples {
            let r = sigmoid(logit(&w, b, x)) - y;
            grad_b += r;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        for (wk, g) in w.iter_mut().zip(&grad_w) {
            *wk -= config.discriminator_lr * (g / n + config.l2_penalty * *wk);
        }
        b -= config.discriminator_lr * grad_b / n;
    }

    let ratio = n_s as f64 / n_t as f64;
    let mut weights = Vec::with_capacity(n_s);
    let mut source_prob = Vec::with_capacity(n_s);
    for x in source_val.rows() {
        let z = logit(&w, b, x);
        source_prob.push(sigmoid(z));
        let wt = (ratio * (-z).exp()).min(config.weight_clip);
        weights.push(wt.max(f64::MIN_POSITIVE));
    }
    Ok(ImportanceWeights {
        weights,
        source_prob,
    })
}

fn check_lengths(losses: &[f64], weights: &ImportanceWeights) -> Result<()> {
    if losses.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::Validation("no validation samples".into()));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Importance-weighted validation risk, `mean(w_i * l_i)`.
pub fn iwv_risk(losses: &[f64], weights: &ImportanceWeights) -> Result<CriterionScore> {
    check_lengths(losses, weights)?;
    let value = mean(
        losses.iter().zip(&weights.weights).map(|(l, w)| l * w),
        losses.len(),
    );
    Ok(CriterionScore::new(Criterion::Iwv, value))
}

/// Control coefficient of the DEV estimator, `-Cov(WL, W) / Var(W)`, or zero
/// when the weights are (numerically) constant.
pub fn dev_control_eta(losses: &[f64], weights: &ImportanceWeights) -> Result<f64> {
    check_lengths(losses, weights)?;
    let n = losses.len();
    let w = &weights.weights;
    let wl: Vec<f64> = losses.iter().zip(w).map(|(l, w)| l * w).collect();
    let mean_w = mean(w.iter().copied(), n);
    let mean_wl = mean(wl.iter().copied(), n);
    let var_w = mean(w.iter().map(|x| (x - mean_w).powi(2)), n);
    if var_w < VAR_EPS {
        return Ok(0.0);
    }
    let cov = mean(
        wl.iter().zip(w).map(|(a, b)| (a - mean_wl) * (b - mean_w)),
        n,
    );
    Ok(-cov / var_w)
}

/// Deep embedded validation risk: the IWV mean plus a control variate on the
/// weights, whose expectation is one.
pub fn dev_risk(losses: &[f64], weights: &ImportanceWeights) -> Result<CriterionScore> {
    check_lengths(losses, weights)?;
    if losses.len() < 2 {
        return Err(Error::Validation("DEV needs at least 2 samples".into()));
    }
    let n = losses.len();
    let control_eta = dev_control_eta(losses, weights)?;
    let mean_w = mean(weights.weights.iter().copied(), n);
    let mean_wl = mean(losses.iter().zip(&weights.weights).map(|(l, w)| l * w), n);
    let value = mean_wl + control_eta * mean_w - control_eta;
    Ok(CriterionScore::new(Criterion::Dev, value))
}

/// Sum of squared distances to class means divided by the sum of squared
/// distances to the global mean. Lies in [0, 1].
pub fn relative_within_class_variance(
    features: &FeatureMatrix,
    labels: &LabelVector,
) -> Result<f64> {
    let n = features.n_samples();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("no samples".into()));
    }
    let dim = features.dim();
    let mut global = vec![0.0; dim];
    let mut class_sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in features.rows().zip(labels.as_slice()) {
        let (sum, count) = class_sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for k in 0..dim {
            sum[k] += row[k];
            global[k] += row[k];
        }
        *count += 1;
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let class_means: BTreeMap<usize, Vec<f64>> = class_sums
        .into_iter()
        .map(|(c, (s, k))| (c, s.into_iter().map(|v| v / k as f64).collect()))
        .collect();

    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut within = 0.0;
    let mut total = 0.0;
    for (row, y) in features.rows().zip(labels.as_slice()) {
        within += sq(row, &class_means[y]);
        total += sq(row, &global);
    }
    if total <= 1e-300 {
        return Err(Error::Validation("total feature variance is zero".into()));
    }
    Ok((within / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(w: &[f64]) -> ImportanceWeights {
        ImportanceWeights::from_weights(w.to_vec()).unwrap()
    }

    #[test]
    fn class_entropy_examples() {
        let uniform = ProbMatrix::new(3, 65, vec![1.0 / 65.0; 3 * 65]).unwrap();
        assert!((class_entropy(&uniform).value - 65f64.ln()).abs() < 1e-12);
        let onehot = ProbMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(class_entropy(&onehot).value, 0.0);
        let mixed = ProbMatrix::from_rows(&[[0.9, 0.1], [0.5, 0.5]]).unwrap();
        // -(0.9 ln 0.9 + 0.1 ln 0.1) = 0.325083, ln 2 = 0.693147
        assert!((class_entropy(&mixed).value - 0.509115).abs() < 1e-6);
    }

    #[test]
    fn source_risk_examples() {
        let p = ProbMatrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]).unwrap();
        let right = LabelVector::new(vec![0, 1, 0, 1]);
        let wrong = LabelVector::new(vec![1, 0, 1, 0]);
        let one_off = LabelVector::new(vec![0, 1, 1, 1]);
        assert_eq!(source_risk(&p, &right).unwrap().value, 0.0);
        assert_eq!(source_risk(&p, &wrong).unwrap().value, 1.0);
        assert_eq!(source_risk(&p, &one_off).unwrap().value, 0.25);
        assert!(source_risk(&p, &LabelVector::new(vec![0])).is_err());
    }

    #[test]
    fn iwv_examples() {
        let l = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(iwv_risk(&l, &weights(&[1.0; 4])).unwrap().value, 0.25);
        assert_eq!(
            iwv_risk(&[0.0; 3], &weights(&[5.0, 0.1, 2.0]))
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(
            iwv_risk(&[1.0, 0.0], &weights(&[2.0, 0.5])).unwrap().value,
            1.0
        );
        assert!(iwv_risk(&[1.0], &weights(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn dev_reduces_to_iwv_for_constant_weights() {
        let l = [1.0, 0.0, 1.0, 1.0, 0.0];
        let w = weights(&[0.7; 5]);
        assert_eq!(dev_control_eta(&l, &w).unwrap(), 0.0);
        assert_eq!(
            dev_risk(&l, &w).unwrap().value,
            iwv_risk(&l, &w).unwrap().value
        );
    }

    #[test]
    fn dev_with_constant_losses_is_that_constant() {
        let w = weights(&[0.2, 3.0, 1.1, 0.5, 7.0]);
        for c in [0.0, 0.3, 1.0] {
            let l = [c; 5];
            let eta = dev_control_eta(&l, &w).unwrap();
            assert!((eta + c).abs() < 1e-12);
            assert!((dev_risk(&l, &w).unwrap().value - c).abs() < 1e-12);
        }
    }

    #[test]
    fn dev_needs_two_samples() {
        assert!(dev_risk(&[1.0], &weights(&[1.0])).is_err());
    }

    #[test]
    fn subset_keeps_per_class_quota() {
        let labels = LabelVector::new(vec![0, 0, 0, 0, 1, 1, 2, 0, 1, 1, 1]);
        let idx = select_validation_subset(&labels, 3, 4);
        let mut counts = [0; 3];
        for &i in &idx {
            counts[labels.as_slice()[i]] += 1;
        }
        assert_eq!(counts, [3, 3, 1]);
        assert_eq!(idx, select_validation_subset(&labels, 3, 4));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn discriminator_on_identical_domains() {
        let f = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]])
            .unwrap()
            .l2_normalized()
            .unwrap();
        let w = fit_domain_discriminator(&f, &f, &DevConfig::default()).unwrap();
        for (&wt, &d) in w.weights.iter().zip(&w.source_prob) {
            assert!((d - 0.5).abs() < 0.01, "{d}");
            assert!((wt - 1.0).abs() < 0.05, "{wt}");
        }
    }

    #[test]
    fn discriminator_downweights_separable_source() {
        let src = FeatureMatrix::from_rows(&[[1.0, 0.0]; 10]).unwrap();
        let tgt = FeatureMatrix::from_rows(&[[0.0, 1.0]; 10]).unwrap();
        let cfg = DevConfig {
            discriminator_epochs: 2000,
            discriminator_lr: 1.0,
            l2_penalty: 0.0,
            ..DevConfig::default()
        };
        let w = fit_domain_discriminator(&src, &tgt, &cfg).unwrap();
        assert!(
            w.weights.iter().all(|&x| x < 0.1 && x > 0.0),
            "{:?}",
            w.weights
        );
        let w_tgt = fit_domain_discriminator(&tgt, &src, &cfg).unwrap();
        assert!(w_tgt.weights.iter().all(|&x| x < 0.1));
    }

    #[test]
    fn discriminator_shape_errors() {
        let a = FeatureMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = FeatureMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(fit_domain_discriminator(&a, &b, &DevConfig::default()).is_err());
        let empty = FeatureMatrix::new(0, 2, vec![]).unwrap();
        assert!(fit_domain_discriminator(&a, &empty, &DevConfig::default()).is_err());
    }

    #[test]
    fn within_class_variance_examples() {
        let f = FeatureMatrix::from_rows(&[[-2.0], [0.0], [0.0], [2.0]]).unwrap();
        let l = LabelVector::new(vec![0, 0, 1, 1]);
        assert!((relative_within_class_variance(&f, &l).unwrap() - 0.5).abs() < 1e-15);

        let f =
            FeatureMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(relative_within_class_variance(&f, &l).unwrap(), 0.0);

        let same = FeatureMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(relative_within_class_variance(&same, &LabelVector::new(vec![0, 1])).is_err());
    }
}
