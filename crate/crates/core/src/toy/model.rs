//! Two-layer tanh network with a class head and a domain head.
//!
//! Parameters live in one flat vector, laid out as
//! `[w1 (h x 2) | b1 (h) | wc (C x h) | bc (C) | wd (h) | bd]`.
//! The domain head sits behind a gradient reversal layer: identity going
//! forward, `-lambda` times the gradient going back into the hidden layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{Adaptation, ToyConfig};
use crate::error::{Error, Result};
use crate::feature_store::ProbMatrix;

const INPUT_DIM: usize = 2;

/// Backward pass of the gradient reversal layer.
pub fn grl_backward(upstream_gradient: &[f64], lambda_adv: f64) -> Vec<f64> {
    upstream_gradient.iter().map(|g| -lambda_adv * g).collect()
}

/// Forward pass of the gradient reversal layer: the identity.
pub fn grl_forward(features: &[f64]) -> &[f64] {
    features
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Hidden,
    Classifier,
    Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    hidden: usize,
    n_classes: usize,
    params: Vec<f64>,
}

/// Loss terms at the current parameters. `adapt` is the domain
/// classification loss (adversarial) or the target collapse loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub source: f64,
    pub adapt: f64,
}

/// Source and target inputs of one full batch, plus how they are trained.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub source: &'a [[f64; 2]],
    pub source_labels: &'a [usize],
    pub target: &'a [[f64; 2]],
    pub adaptation: Adaptation,
    pub lambda_adv: f64,
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    domain_logit: f64,
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MlpModel {
    /// Uniform `±1/sqrt(fan_in)` initialization from stream 2 of `seed`.
    pub fn init(hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut params = Vec::with_capacity(Self::param_count(hidden, n_classes));
        let mut fill = |count: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            for _ in 0..count {
                params.push(dist.sample(&mut rng));
            }
        };
        fill(hidden * INPUT_DIM, INPUT_DIM);
        fill(hidden, INPUT_DIM);
        fill(n_classes * hidden, hidden);
        fill(n_classes, hidden);
        fill(hidden, hidden);
        fill(1, hidden);
        MlpModel {
            hidden,
            n_classes,
            params,
        }
    }

    pub fn from_config(config: &ToyConfig) -> Self {
        Self::init(
            config.hidden_units,
            config.source_means.len(),
            config.rng_seed,
        )
    }

    fn param_count(hidden: usize, n_classes: usize) -> usize {
        hidden * INPUT_DIM + hidden + n_classes * hidden + n_classes + hidden + 1
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 6] {
        let h = self.hidden;
        let c = self.n_classes;
        let w1 = 0;
        let b1 = w1 + h * INPUT_DIM;
        let wc = b1 + h;
        let bc = wc + c * h;
        let wd = bc + c;
        let bd = wd + h;
        [w1, b1, wc, bc, wd, bd]
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        let [_, _, wc, _, wd, _] = self.offsets();
        if index < wc {
            ParamGroup::Hidden
        } else if index < wd {
            ParamGroup::Classifier
        } else {
            ParamGroup::Domain
        }
    }

    fn forward(&self, x: &[f64; 2]) -> Forward {
        let mut fw = Forward {
            hidden: vec![0.0; self.hidden],
            probs: vec![0.0; self.n_classes],
            domain_logit: 0.0,
        };
        self.forward_into(x, &mut fw);
        fw
    }

    /// Forward pass into preallocated buffers.
    fn forward_into(&self, x: &[f64; 2], fw: &mut Forward) {
        let [w1, b1, wc, bc, wd, bd] = self.offsets();
        let p = &self.params;
        for (j, h) in fw.hidden.iter_mut().enumerate() {
            let a = p[w1 + j * INPUT_DIM] * x[0] + p[w1 + j * INPUT_DIM + 1] * x[1] + p[b1 + j];
            *h = a.tanh();
        }
        for (k, out) in fw.probs.iter_mut().enumerate() {
            let row = &p[wc + k * self.hidden..wc + (k + 1) * self.hidden];
            let mut s = 0.0;
            for (w, h) in row.iter().zip(&fw.hidden) {
                s += w * h;
            }
            *out = p[bc + k] + s;
        }
        softmax_in_place(&mut fw.probs);
        let reversed = grl_forward(&fw.hidden);
        let mut s = 0.0;
        for (w, h) in p[wd..wd + self.hidden].iter().zip(reversed) {
            s += w * h;
        }
        fw.domain_logit = p[bd] + s;
    }

    /// Class probabilities for each point.
    pub fn predict(&self, points: &[[f64; 2]]) -> Result<ProbMatrix> {
        let mut data = Vec::with_capacity(points.len() * self.n_classes);
        for x in points {
            data.extend(self.forward(x).probs);
        }
        ProbMatrix::new(points.len(), self.n_classes, data)
    }

    /// Fraction of points whose argmax class differs from the label.
    pub fn error_rate(&self, points: &[[f64; 2]], labels: &[usize]) -> f64 {
        let wrong = points
            .iter()
            .zip(labels)
            .filter(|(x, &y)| crate::feature_store::argmax(&self.forward(x).probs) != y)
            .count();
        wrong as f64 / points.len() as f64
    }

    /// Loss terms only, no gradient.
    pub fn losses(&self, batch: &Batch<'_>) -> LossBreakdown {
        let ns = batch.source.len() as f64;
        let source = batch
            .source
            .iter()
            .zip(batch.source_labels)
            .map(|(x, &y)| -self.forward(x).probs[y].ln())
            .sum::<f64>()
            / ns;
        let adapt = match batch.adaptation {
            Adaptation::Adversarial => {
                let n_all = (batch.source.len() + batch.target.len()) as f64;
                // source is domain 1, target domain 0
                let src: f64 = batch
                    .source
                    .iter()
                    .map(|x| softplus(-self.forward(x).domain_logit))
                    .sum();
                let tgt: f64 = batch
                    .target
                    .iter()
                    .map(|x| softplus(self.forward(x).domain_logit))
                    .sum();
                (src + tgt) / n_all
            }
            Adaptation::Collapse { class } => {
                batch
                    .target
                    .iter()
                    .map(|x| -self.forward(x).probs[class].ln())
                    .sum::<f64>()
                    / batch.target.len() as f64
            }
        };
        LossBreakdown { source, adapt }
    }

    /// Loss terms and the training gradient.
    ///
    /// Adversarial: classifier and hidden layer descend the source loss, the
    /// domain head descends the domain loss, and the hidden layer also gets
    /// the domain gradient through [`grl_backward`]. Collapse: every
    /// parameter descends `source + lambda * collapse`.
    pub fn loss_and_gradient(&self, batch: &Batch<'_>) -> (LossBreakdown, Vec<f64>) {
        let [w1, b1, wc, bc, wd, bd] = self.offsets();
        let (h, c) = (self.hidden, self.n_classes);
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let ns = batch.source.len() as f64;
        let nt = batch.target.len() as f64;
        let n_all = ns + nt;
        let mut source_loss = 0.0;
        let mut adapt_loss = 0.0;

        // Accumulates gradients from one sample given dL/dlogits of the class
        // head and dL/dh arriving from the domain branch.
        let backprop =
            |grad: &mut [f64], dh: &mut [f64], x: &[f64; 2], fw: &Forward, d_out: &[f64]| {
                for k in 0..c {
                    grad[bc + k] += d_out[k];
                    for j in 0..h {
                        grad[wc + k * h + j] += d_out[k] * fw.hidden[j];
                        dh[j] += d_out[k] * p[wc + k * h + j];
                    }
                }
                for j in 0..h {
                    let da = dh[j] * (1.0 - fw.hidden[j] * fw.hidden[j]);
                    grad[w1 + j * INPUT_DIM] += da * x[0];
                    grad[w1 + j * INPUT_DIM + 1] += da * x[1];
                    grad[b1 + j] += da;
                }
            };

        let no_out = vec![0.0; c];
        let mut d_out = vec![0.0; c];
        let mut dh = vec![0.0; h];
        let mut fw = Forward {
            hidden: vec![0.0; h],
            probs: vec![0.0; c],
            domain_logit: 0.0,
        };

        // Domain branch for one sample: head gradient plus reversed hidden gradient.
        let domain_branch = |grad: &mut [f64], dh: &mut [f64], fw: &Forward, domain: f64| {
            let dz = (sigmoid(fw.domain_logit) - domain) / n_all;
            grad[bd] += dz;
            for j in 0..h {
                grad[wd + j] += dz * fw.hidden[j];
                dh[j] = dz * p[wd + j];
            }
            let reversed = grl_backward(dh, batch.lambda_adv);
            dh.copy_from_slice(&reversed);
        };

        for (x, &y) in batch.source.iter().zip(batch.source_labels) {
            self.forward_into(x, &mut fw);
            source_loss -= fw.probs[y].ln() / ns;
            for (k, d) in d_out.iter_mut().enumerate() {
                *d = (fw.probs[k] - f64::from(u8::from(k == y))) / ns;
            }
            match batch.adaptation {
                Adaptation::Adversarial => {
                    adapt_loss += softplus(-fw.domain_logit) / n_all;
                    domain_branch(&mut grad, &mut dh, &fw, 1.0);
                }
                Adaptation::Collapse { .. } => dh.fill(0.0),
            }
            backprop(&mut grad, &mut dh, x, &fw, &d_out);
        }

        for x in batch.target {
            self.forward_into(x, &mut fw);
            match batch.adaptation {
                Adaptation::Adversarial => {
                    adapt_loss += softplus(fw.domain_logit) / n_all;
                    domain_branch(&mut grad, &mut dh, &fw, 0.0);
                    backprop(&mut grad, &mut dh, x, &fw, &no_out);
                }
                Adaptation::Collapse { class } => {
                    adapt_loss -= fw.probs[class].ln() / nt;
                    for (k, d) in d_out.iter_mut().enumerate() {
                        *d =
                            batch.lambda_adv * (fw.probs[k] - f64::from(u8::from(k == class))) / nt;
                    }
                    dh.fill(0.0);
                    backprop(&mut grad, &mut dh, x, &fw, &d_out);
                }
            }
        }

        (
            LossBreakdown {
                source: source_loss,
                adapt: adapt_loss,
            },
            grad,
        )
    }
}

/// Per-epoch loss history; entry `k` is measured before update `k`, the last
/// entry after the final update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub source_loss: Vec<f64>,
    pub adapt_loss: Vec<f64>,
}

impl TrainingLog {
    /// Whether the source loss went down over training.
    pub fn source_loss_decreased(&self) -> bool {
        match (self.source_loss.first(), self.source_loss.last()) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        }
    }
}

/// Full-batch gradient descent for `epochs` steps.
pub fn train(
    model: &mut MlpModel,
    batch: &Batch<'_>,
    epochs: usize,
    learning_rate: f64,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    for epoch in 0..=epochs {
        let (loss, grad) = model.loss_and_gradient(batch);
        let total = loss.source + batch.lambda_adv * loss.adapt;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, loss: total });
        }
        log.source_loss.push(loss.source);
        log.adapt_loss.push(loss.adapt);
        if epoch == epochs {
            break;
        }
        for (w, g) in model.params.iter_mut().zip(&grad) {
            *w -= learning_rate * g;
        }
        if model.params.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                loss: f64::NAN,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grl_examples() {
        assert_eq!(grl_backward(&[1.0, -2.0], 0.0), vec![-0.0, 0.0]);
        assert_eq!(grl_backward(&[1.0, -2.0], 1.0), vec![-1.0, 2.0]);
        assert_eq!(grl_backward(&[0.5], 2.0), vec![-1.0]);
        assert_eq!(grl_forward(&[0.5, 1.0]), &[0.5, 1.0]);
    }

    #[test]
    fn layout_and_groups() {
        let m = MlpModel::init(4, 2, 0);
        assert_eq!(m.params().len(), 4 * 2 + 4 + 2 * 4 + 2 + 4 + 1);
        assert_eq!(m.param_group(0), ParamGroup::Hidden);
        assert_eq!(m.param_group(11), ParamGroup::Hidden);
        assert_eq!(m.param_group(12), ParamGroup::Classifier);
        assert_eq!(m.param_group(21), ParamGroup::Classifier);
        assert_eq!(m.param_group(22), ParamGroup::Domain);
        assert_eq!(m.param_group(26), ParamGroup::Domain);
    }

    #[test]
    fn predictions_are_distributions() {
        let m = MlpModel::init(5, 3, 1);
        let p = m.predict(&[[0.0, 0.0], [10.0, -3.0]]).unwrap();
        assert_eq!(p.n_classes(), 3);
    }

    #[test]
    fn losses_agree_with_gradient_pass() {
        let m = MlpModel::init(6, 2, 3);
        let src = [[0.1, 0.2], [4.0, 5.0], [0.5, -0.3]];
        let tgt = [[6.0, 7.0], [1.0, 1.0]];
        for adaptation in [Adaptation::Adversarial, Adaptation::Collapse { class: 0 }] {
            let batch = Batch {
                source: &src,
                source_labels: &[0, 1, 0],
                target: &tgt,
                adaptation,
                lambda_adv: 0.7,
            };
            let a = m.losses(&batch);
            let (b, _) = m.loss_and_gradient(&batch);
            assert!((a.source - b.source).abs() < 1e-12);
            assert!((a.adapt - b.adapt).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = MlpModel::init(4, 2, 0);
        let src = [[0.0, 0.0], [5.0, 5.0]];
        let batch = Batch {
            source: &src,
            source_labels: &[0, 1],
            target: &src,
            adaptation: Adaptation::Adversarial,
            lambda_adv: 1.0,
        };
        let err = train(&mut m, &batch, 50, f64::INFINITY).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(err.to_string().contains("smaller learning_rate"));
    }
}
