//! Finite-difference checks of the toy network's training gradient.
//!
//! The oracle only evaluates losses. For the adversarial objective the
//! expected update direction is assembled from the separate loss terms:
//! hidden layer `dLs - lambda dLd`, class head `dLs`, domain head `dLd`.

mod common;

use common::{central, gradient_rel_error, GRAD_REL_TOL};
use nbrselect::toy::{generate_toy_data, Adaptation, Batch, MlpModel, ParamGroup, ToyConfig};

#[test]
fn adversarial_gradient_matches_finite_differences() {
    for seed in 0..3 {
        for lambda in [0.0, 0.5, 1.0] {
            let err = gradient_rel_error(Adaptation::Adversarial, lambda, seed);
            assert!(
                err <= GRAD_REL_TOL,
                "seed {seed} lambda {lambda}: rel err {err}"
            );
        }
    }
}

#[test]
fn collapse_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let err = gradient_rel_error(Adaptation::Collapse { class: 0 }, 0.7, seed);
        assert!(err <= GRAD_REL_TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn reversal_flips_the_hidden_domain_gradient() {
    let cfg = ToyConfig {
        n_per_class: 10,
        n_target: 10,
        ..ToyConfig::default()
    };
    let data = generate_toy_data(&cfg);
    let model = MlpModel::from_config(&cfg);
    let batch = |lambda| Batch {
        source: &data.source,
        source_labels: &data.source_labels,
        target: &data.target,
        adaptation: Adaptation::Adversarial,
        lambda_adv: lambda,
    };
    let (_, g0) = model.loss_and_gradient(&batch(0.0));
    let (_, g1) = model.loss_and_gradient(&batch(1.0));
    let (_, g2) = model.loss_and_gradient(&batch(2.0));
    for k in 0..g0.len() {
        let dom_part_1 = g1[k] - g0[k];
        let dom_part_2 = g2[k] - g0[k];
        match model.param_group(k) {
            // linear in lambda with a negative sign on the domain gradient
            ParamGroup::Hidden => {
                let dd = central(&model, k, |m| m.losses(&batch(0.0)).adapt);
                assert!(
                    (dom_part_1 + dd).abs() <= 1e-6 * dd.abs().max(1e-3),
                    "k={k}"
                );
                assert!((dom_part_2 - 2.0 * dom_part_1).abs() < 1e-12);
            }
            _ => assert_eq!(dom_part_1, 0.0),
        }
    }
}

#[test]
fn source_loss_falls_over_first_epochs() {
    for seed in 0..3 {
        let cfg = ToyConfig {
            rng_seed: seed,
            epochs: 10,
            ..ToyConfig::default()
        };
        let run = nbrselect::toy::train_toy(&cfg).unwrap();
        assert!(
            run.log.source_loss_decreased(),
            "seed {seed}: {:?}",
            run.log.source_loss
        );
    }
}

#[test]
fn source_only_training_separates_classes() {
    let run = nbrselect::toy::train_toy(&ToyConfig::default()).unwrap();
    assert!(run.source_error() <= 0.02, "{}", run.source_error());
}
