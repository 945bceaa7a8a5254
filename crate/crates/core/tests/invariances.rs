//! Permutation symmetries of the attention operators and structural
//! identities of the three-term objective.

mod common;

use latentdr::latentdr::build_soft_label;
use latentdr::{RngStreams, Tensor};
use rand::Rng;

#[test]
fn restoration_ignores_key_value_order() {
    let err = common::restoration_permutation_error(100);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let (mixer, layer) = common::self_attention_equivariance_error(100);
    assert!(mixer < 1e-12, "mixer {mixer}");
    assert!(layer < 1e-12, "layer {layer}");
}

#[test]
fn total_is_sum_of_terms() {
    let err = common::loss_sum_error(30);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn single_class_batch_soft_label_is_the_label() {
    assert!(common::single_class_soft_label_is_label());
}

#[test]
fn soft_label_is_exact_class_frequency() {
    let mut rng = RngStreams::new(4).stream("cases");
    for _ in 0..200 {
        let b = rng.gen_range(1..20);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..5)).collect();
        let soft = build_soft_label(&Tensor::one_hot(&labels, 5).unwrap()).unwrap();
        for (c, &p) in soft.distribution.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == c).count();
            // p is the correctly rounded count/b: its error is below half an ulp
            let err = (p * b as f64 - count as f64).abs();
            assert!(err <= b as f64 * f64::EPSILON * p.max(f64::MIN_POSITIVE), "{count}/{b} gave {p}");
        }
        assert!((soft.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shared_classifier_gradient_is_sum_of_term_gradients() {
    let err = common::shared_classifier_gradient_error(10);
    assert!(err < 1e-10, "{err}");
}
