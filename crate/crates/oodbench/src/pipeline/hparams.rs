//! Random hyper-parameter search: trial 0 is the default configuration,
//! later trials draw from the per-algorithm search distributions.

use rand::Rng as _;

use crate::algo::{Algorithm, HyperParams};
use crate::rng;

/// Deterministic hyper-parameter draw for `(algorithm, trial_index, seed)`.
///
/// Trial 0 returns the defaults. Trials >= 1 sample, in a fixed order, the
/// shared optimizer parameters and then the algorithm's own rows:
///
/// * learning rate `10^U(-2, -0.3)`, momentum from {0.5, 0.9, 0.99},
///   weight decay `10^U(-5, -3)`;
/// * Mixup alpha from {0.1, 0.2, 0.3, 1, 2};
/// * MC-Dropout rate from {0.05, 0.1, 0.2}, passes from {10};
/// * MIMO subnetworks 2..=5, input repetition `U(0, 1)`,
///   batch repetition 1..=5;
/// * RND/OC teacher width from {64, 128, 256}, depth from {2, 3, 4},
///   regularization `10^U(-2, 1)`;
/// * Soft-labeler target from {0.7, 0.8, 0.9}.
///
/// Fields not owned by the algorithm keep their defaults, so one struct
/// serves every training path.
pub fn sample_hparams(algorithm: Algorithm, trial_index: usize, seed: u64) -> HyperParams {
    let mut hp = HyperParams::default();
    if trial_index == 0 {
        return hp;
    }
    let mut r = rng::rng_from_seed(rng::derive_seed_indexed(
        seed,
        "hparams",
        &[algorithm_tag(algorithm), trial_index as u64],
    ));

    hp.learning_rate = 10f64.powf(r.gen_range(-2.0..-0.3));
    hp.momentum = *choice(&mut r, &[0.5, 0.9, 0.99]);
    hp.weight_decay = 10f64.powf(r.gen_range(-5.0..-3.0));

    match algorithm {
        Algorithm::Mixup => {
            hp.mixing_alpha = *choice(&mut r, &[0.1, 0.2, 0.3, 1.0, 2.0]);
        }
        Algorithm::McDropout => {
            hp.dropout_rate = *choice(&mut r, &[0.05, 0.1, 0.2]);
            hp.num_passes = *choice(&mut r, &[10]);
        }
        Algorithm::Mimo => {
            hp.subnetworks = r.gen_range(2..=5);
            hp.input_repetition_prob = r.gen_range(0.0..1.0);
            hp.batch_repetition = r.gen_range(1..=5);
        }
        Algorithm::Rnd | Algorithm::Oc => {
            hp.teacher_width = *choice(&mut r, &[64, 128, 256]);
            hp.teacher_depth = *choice(&mut r, &[2, 3, 4]);
            hp.regularization = 10f64.powf(r.gen_range(-2.0..1.0));
        }
        Algorithm::SoftLabeler => {
            hp.soft_label_value = *choice(&mut r, &[0.7, 0.8, 0.9]);
        }
        Algorithm::Erm | Algorithm::Rbf => {}
    }
    hp
}

fn algorithm_tag(algorithm: Algorithm) -> u64 {
    Algorithm::ALL
        .iter()
        .position(|a| *a == algorithm)
        .expect("algorithm is in ALL") as u64
}

fn choice<'a, T>(r: &mut rng::Rng, options: &'a [T]) -> &'a T {
    &options[r.gen_range(0..options.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_zero_is_the_default_configuration() {
        for &algorithm in &Algorithm::ALL {
            let hp = sample_hparams(algorithm, 0, 12345);
            assert_eq!(hp, HyperParams::default(), "{algorithm}");
        }
        let defaults = HyperParams::default();
        assert_eq!(defaults.learning_rate, 0.1);
        assert_eq!(defaults.momentum, 0.9);
        assert_eq!(defaults.weight_decay, 1e-4);
        assert_eq!(defaults.mixing_alpha, 0.3);
        assert_eq!(defaults.dropout_rate, 0.05);
        assert_eq!(defaults.num_passes, 10);
        assert_eq!(defaults.subnetworks, 2);
        assert_eq!(defaults.input_repetition_prob, 0.6);
        assert_eq!(defaults.batch_repetition, 2);
        assert_eq!(defaults.teacher_width, 128);
        assert_eq!(defaults.teacher_depth, 3);
        assert_eq!(defaults.regularization, 0.0);
        assert_eq!(defaults.soft_label_value, 0.9);
    }

    #[test]
    fn draws_are_deterministic_and_trial_dependent() {
        let a = sample_hparams(Algorithm::Mimo, 3, 7);
        let b = sample_hparams(Algorithm::Mimo, 3, 7);
        assert_eq!(a, b);
        let c = sample_hparams(Algorithm::Mimo, 4, 7);
        assert_ne!(a, c);
        let d = sample_hparams(Algorithm::Mimo, 3, 8);
        assert_ne!(a, d);
    }

    #[test]
    fn draws_respect_the_search_distributions() {
        for trial in 1..40 {
            let hp = sample_hparams(Algorithm::Mixup, trial, 99);
            assert!([0.1, 0.2, 0.3, 1.0, 2.0].contains(&hp.mixing_alpha));
            assert!(hp.learning_rate >= 1e-2 && hp.learning_rate <= 10f64.powf(-0.3));
            assert!([0.5, 0.9, 0.99].contains(&hp.momentum));
            assert!(hp.weight_decay >= 1e-5 && hp.weight_decay <= 1e-3);
            // Fields the algorithm does not own stay at their defaults.
            assert_eq!(hp.subnetworks, 2);
            assert_eq!(hp.teacher_width, 128);

            let hp = sample_hparams(Algorithm::Mimo, trial, 99);
            assert!((2..=5).contains(&hp.subnetworks));
            assert!((1..=5).contains(&hp.batch_repetition));
            assert!((0.0..1.0).contains(&hp.input_repetition_prob));

            let hp = sample_hparams(Algorithm::McDropout, trial, 99);
            assert!([0.05, 0.1, 0.2].contains(&hp.dropout_rate));
            assert_eq!(hp.num_passes, 10);

            let hp = sample_hparams(Algorithm::Oc, trial, 99);
            assert!([64, 128, 256].contains(&hp.teacher_width));
            assert!([2, 3, 4].contains(&hp.teacher_depth));
            assert!(hp.regularization >= 1e-2 && hp.regularization <= 10.0);

            let hp = sample_hparams(Algorithm::SoftLabeler, trial, 99);
            assert!([0.7, 0.8, 0.9].contains(&hp.soft_label_value));
        }
    }
}
