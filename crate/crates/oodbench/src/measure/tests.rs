use std::sync::Arc;

use super::*;
use crate::algo::{train_run, HyperParams, RunSeeds, TrainSchedule, TrainedModel};
use crate::data::{generate_blobs, split_train_val, BlobSpec, SplitSpec};
use crate::net::{HeadKind, Mode, PredictorConfig, SizeTier};
use crate::posthoc::CalibratedMember;

fn train_tiny(algorithm: Algorithm, seed: u64) -> (TrainedModel, Dataset) {
    let spec = BlobSpec {
        classes: 3,
        per_class: 24,
        dim: 4,
        supercluster_count: 3,
        spread: 0.5,
        noise: 0.3,
    };
    let ds = generate_blobs(&spec, seed).unwrap();
    let (train, val) = split_train_val(&ds, &SplitSpec::new(seed)).unwrap();
    let config = PredictorConfig {
        input_dim: 4,
        hidden_widths: vec![8],
        feature_dim: 5,
        num_classes: 3,
        head_kind: HeadKind::Linear,
        dropout_rate: 0.0,
        spectral_norm: false,
        size_tier: SizeTier::Small,
    };
    let hp = HyperParams {
        learning_rate: 0.05,
        teacher_width: 6,
        teacher_depth: 2,
        num_passes: 4,
        dropout_rate: 0.2,
        ..HyperParams::default()
    };
    let schedule = TrainSchedule {
        epochs: 4,
        batch_size: 16,
        decay_every: 3,
    };
    let model = train_run(
        algorithm,
        &config,
        &hp,
        &train,
        &val,
        &RunSeeds::simple(seed),
        &schedule,
    )
    .unwrap();
    (model, val)
}

fn single(model: TrainedModel) -> Ensemble {
    Ensemble::single(Arc::new(model), 1.0).unwrap()
}

#[test]
fn simple_scores_hand_cases() {
    assert_eq!(score_largest(&[0.7, 0.2, 0.1]).unwrap(), -0.7);
    assert_eq!(score_largest(&[1.0, 0.0, 0.0]).unwrap(), -1.0);
    assert_eq!(score_largest(&[0.25; 4]).unwrap(), -0.25);

    assert_eq!(score_gap(&[1.0, 0.0]).unwrap(), -1.0);
    assert_eq!(score_gap(&[0.25; 4]).unwrap(), 0.0);
    assert!((score_gap(&[0.7, 0.2, 0.1]).unwrap() + 0.5).abs() < 1e-15);

    assert_eq!(score_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    assert!((score_entropy(&[0.25; 4]).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    assert!((score_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn peakedness_ordering_holds_for_all_three_statistics() {
    let one_hot = [1.0, 0.0, 0.0, 0.0];
    let uniform = [0.25; 4];
    let mut r = crate::rng::rng_from_seed(2);
    use rand::Rng as _;
    for _ in 0..100 {
        let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.01..5.0)).collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        for f in [score_largest, score_gap, score_entropy] {
            let low = f(&one_hot).unwrap();
            let mid = f(&p).unwrap();
            let high = f(&uniform).unwrap();
            assert!(low <= mid + 1e-12 && mid <= high + 1e-12);
        }
    }
}

#[test]
fn gap_requires_two_classes() {
    assert!(score_gap(&[1.0]).is_err());
}

#[test]
fn jacobian_of_constant_model_is_zero() {
    let cfg = PredictorConfig {
        input_dim: 3,
        hidden_widths: vec![4],
        feature_dim: 2,
        num_classes: 3,
        head_kind: HeadKind::Linear,
        dropout_rate: 0.0,
        spectral_norm: false,
        size_tier: SizeTier::Small,
    };
    let predictor = crate::net::Predictor::zeroed(cfg).unwrap();
    let model = TrainedModel {
        predictor,
        auxiliary: None,
        algorithm: Algorithm::Erm,
        hyperparams: HyperParams::default(),
        training_log: vec![],
        seeds: RunSeeds::simple(0),
        train_input_mean: vec![0.0; 3],
        train_label_mean: vec![1.0 / 3.0; 3],
    };
    let ensemble = single(model);
    assert_eq!(score_jacobian(&ensemble, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
}

#[test]
fn augmentation_with_zero_noise_equals_largest() {
    let (model, _) = train_tiny(Algorithm::Erm, 3);
    let ensemble = single(model);
    let x = [0.5, -0.2, 1.0, 0.3];
    let spec = AugmentSpec {
        count: 5,
        noise_scale: 0.0,
    };
    let via_augment = score_augment(&ensemble, &x, &spec, 9, 17).unwrap();
    let direct = score_largest(&ensemble.prob(&x, 17).unwrap()).unwrap();
    assert_eq!(via_augment, direct);
}

#[test]
fn augmentation_matches_two_pass_oracle() {
    use rand::Rng as _;
    let (model, _) = train_tiny(Algorithm::Erm, 4);
    let ensemble = single(model);
    let x = [0.1, 0.9, -0.4, 0.0];
    let spec = AugmentSpec {
        count: 2,
        noise_scale: 0.5,
    };
    let (seed, key) = (21, 5);
    let fast = score_augment(&ensemble, &x, &spec, seed, key).unwrap();

    // Re-derive both perturbations by hand and average the two passes.
    let mut mean = vec![0.0; 3];
    for a in 0..2u64 {
        let mut noise_rng =
            crate::rng::rng_from_seed(crate::rng::derive_seed_indexed(seed, "augment", &[key, a]));
        let xa: Vec<f64> = x
            .iter()
            .map(|&v| v + 0.5 * noise_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p = ensemble.prob(&xa, key).unwrap();
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / 2.0;
        }
    }
    let oracle = -mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((fast - oracle).abs() < 1e-12);
}

#[test]
fn native_js_cases() {
    let p = vec![0.3, 0.7];
    assert_eq!(native_js(&[p.clone(), p.clone(), p]).unwrap(), 0.0);

    let js = native_js(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!((js - 2.0f64.ln()).abs() < 1e-12);

    let members = vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.25, 0.75]];
    let v = native_js(&members).unwrap();
    assert!(v >= 0.0 && v <= (members.len() as f64).ln());

    let permuted = vec![members[2].clone(), members[0].clone(), members[1].clone()];
    assert_eq!(native_js(&permuted).unwrap(), v);
}

#[test]
fn native_softlabel_cases() {
    assert_eq!(native_softlabel(&[0.8, 0.2], 0.8).unwrap(), 0.0);
    assert!((native_softlabel(&[1.0, 0.0], 0.8).unwrap() - 0.04).abs() < 1e-15);
    let below = native_softlabel(&[0.6, 0.4], 0.8).unwrap();
    let above = native_softlabel(&[1.0, 0.0], 0.8).unwrap();
    assert!((below - above).abs() < 1e-12);
}

#[test]
fn native_mixup_forced_lambda_one_is_zero() {
    let (model, _) = train_tiny(Algorithm::Mixup, 5);
    let x_mean = model.train_input_mean.clone();
    let y_mean = model.train_label_mean.clone();
    let ensemble = single(model);
    let x = [0.3, 0.3, -0.5, 0.8];
    let v = native_mixup_with_lambdas(&ensemble, &x, 1, &[1.0], &x_mean, &y_mean).unwrap();
    assert!(v.abs() < 1e-28, "{v}");
}

#[test]
fn native_mixup_matches_direct_composition() {
    let (model, _) = train_tiny(Algorithm::Mixup, 6);
    let x_mean = model.train_input_mean.clone();
    let y_mean = model.train_label_mean.clone();
    let ensemble = single(model);
    let x = [1.0, -0.3, 0.2, 0.6];
    let lambda = 0.5;
    let fast =
        native_mixup_with_lambdas(&ensemble, &x, 2, &[lambda], &x_mean, &y_mean).unwrap();

    let fx = ensemble.prob(&x, 2).unwrap();
    let mixed: Vec<f64> = x
        .iter()
        .zip(&x_mean)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let f_mixed = ensemble.prob(&mixed, 2).unwrap();
    let oracle: f64 = fx
        .iter()
        .zip(&y_mean)
        .zip(&f_mixed)
        .map(|((fa, ya), fm)| {
            let v = lambda * fa + (1.0 - lambda) * ya - fm;
            v * v
        })
        .sum();
    assert!((fast - oracle).abs() < 1e-12);
}

#[test]
fn native_mixup_is_zero_for_affine_predictor() {
    // A constant predictor is affine on every segment; with y_mean set to
    // its constant output the criterion is met exactly.
    let cfg = PredictorConfig {
        input_dim: 2,
        hidden_widths: vec![],
        feature_dim: 2,
        num_classes: 2,
        head_kind: HeadKind::Linear,
        dropout_rate: 0.0,
        spectral_norm: false,
        size_tier: SizeTier::Small,
    };
    let predictor = crate::net::Predictor::zeroed(cfg).unwrap();
    let constant_output = {
        let (logits, _) = predictor.forward(&[0.0, 0.0], Mode::Eval).unwrap();
        crate::net::softmax(&logits, 1.0).unwrap()
    };
    let model = TrainedModel {
        predictor,
        auxiliary: None,
        algorithm: Algorithm::Mixup,
        hyperparams: HyperParams::default(),
        training_log: vec![],
        seeds: RunSeeds::simple(0),
        train_input_mean: vec![0.4, -0.1],
        train_label_mean: constant_output.clone(),
    };
    let x_mean = model.train_input_mean.clone();
    let ensemble = single(model);
    let v = native_mixup_with_lambdas(
        &ensemble,
        &[2.0, -1.0],
        0,
        &[0.2, 0.5, 0.9],
        &x_mean,
        &constant_output,
    )
    .unwrap();
    assert!(v.abs() < 1e-28, "{v}");
}

#[test]
fn native_student_teacher_cases() {
    let (model, _) = train_tiny(Algorithm::Oc, 7);
    let x = [0.2, 0.2, 0.2, 0.2];
    let v = model.aux_disagreement(&x).unwrap();
    assert!(v >= 0.0);

    // A student copied from the teacher disagrees nowhere.
    let (mut rnd_model, _) = train_tiny(Algorithm::Rnd, 8);
    let pair = rnd_model.auxiliary.as_mut().unwrap();
    let teacher_params = pair.teacher.flatten_params();
    pair.student.set_params(&teacher_params).unwrap();
    assert_eq!(rnd_model.aux_disagreement(&x).unwrap(), 0.0);

    // Models without an auxiliary pair reject the measure.
    let (erm, _) = train_tiny(Algorithm::Erm, 9);
    assert!(matches!(
        erm.aux_disagreement(&x),
        Err(Error::MeasureIncompatible(_))
    ));
}

#[test]
fn native_dispatch_respects_compatibility() {
    let val_spec = ScorerConfig::default();
    for algorithm in [Algorithm::Erm, Algorithm::Rbf, Algorithm::Mimo] {
        let (model, val) = train_tiny(algorithm, 10);
        let ensemble = single(model);
        assert!(!native_compatible(&ensemble));
        assert!(matches!(
            Scorer::fit(MeasureId::Native, &ensemble, &val, &val_spec),
            Err(Error::MeasureIncompatible(_))
        ));
    }
    for algorithm in [
        Algorithm::Mixup,
        Algorithm::SoftLabeler,
        Algorithm::Rnd,
        Algorithm::Oc,
        Algorithm::McDropout,
    ] {
        let (model, val) = train_tiny(algorithm, 11);
        let ensemble = single(model);
        assert!(native_compatible(&ensemble));
        let scorer = Scorer::fit(MeasureId::Native, &ensemble, &val, &val_spec).unwrap();
        let v = scorer.score(&ensemble, val.row(0), 0).unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn ensembles_always_have_a_native_measure() {
    let (a, val) = train_tiny(Algorithm::Erm, 12);
    let (b, _) = train_tiny(Algorithm::Erm, 13);
    let ensemble = Ensemble::new(
        vec![
            CalibratedMember {
                model: Arc::new(a),
                tau: 1.0,
            },
            CalibratedMember {
                model: Arc::new(b),
                tau: 1.0,
            },
        ],
        "test".into(),
    )
    .unwrap();
    assert!(native_compatible(&ensemble));
    let scorer = Scorer::fit(MeasureId::Native, &ensemble, &val, &ScorerConfig::default()).unwrap();
    let v = scorer.score(&ensemble, val.row(0), 0).unwrap();
    assert!(v >= 0.0);
}

#[test]
fn ensemble_prob_is_the_member_mean_and_permutation_invariant() {
    let (a, _) = train_tiny(Algorithm::Erm, 14);
    let (b, _) = train_tiny(Algorithm::Erm, 15);
    let (a, b) = (Arc::new(a), Arc::new(b));
    let x = [0.1, 0.2, 0.3, 0.4];
    let make = |models: Vec<Arc<TrainedModel>>| {
        Ensemble::new(
            models
                .into_iter()
                .map(|m| CalibratedMember { model: m, tau: 1.0 })
                .collect(),
            "test".into(),
        )
        .unwrap()
    };
    let e_ab = make(vec![a.clone(), b.clone()]);
    let e_ba = make(vec![b.clone(), a.clone()]);
    let pa = a.prob(&x, 1.0, 0).unwrap();
    let pb = b.prob(&x, 1.0, 0).unwrap();
    let mean: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| (x + y) / 2.0).collect();
    let got = e_ab.prob(&x, 0).unwrap();
    for (g, m) in got.iter().zip(&mean) {
        assert!((g - m).abs() < 1e-15);
    }
    let swapped = e_ba.prob(&x, 0).unwrap();
    for (g, s) in got.iter().zip(&swapped) {
        assert!((g - s).abs() < 1e-15);
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn duplicate_ensemble_members_are_rejected() {
    let (a, _) = train_tiny(Algorithm::Erm, 16);
    let a = Arc::new(a);
    let result = Ensemble::new(
        vec![
            CalibratedMember {
                model: a.clone(),
                tau: 1.0,
            },
            CalibratedMember {
                model: a.clone(),
                tau: 1.2,
            },
        ],
        "test".into(),
    );
    assert!(result.is_err());
}

#[test]
fn gmm_scorer_runs_end_to_end() {
    let (model, val) = train_tiny(Algorithm::Erm, 17);
    let ensemble = single(model);
    let scorer = Scorer::fit(MeasureId::Gmm, &ensemble, &val, &ScorerConfig::default()).unwrap();
    let scores = scorer.score_dataset(&ensemble, &val, "val").unwrap();
    assert_eq!(scores.len(), val.len());
    assert!(scores.iter().all(|s| s.is_finite() && *s <= 0.0));
}

#[test]
fn measure_determinism_given_key() {
    let (model, val) = train_tiny(Algorithm::McDropout, 18);
    let ensemble = single(model);
    for measure in [
        MeasureId::Largest,
        MeasureId::Entropy,
        MeasureId::Jacobian,
        MeasureId::Augment,
        MeasureId::Native,
    ] {
        let scorer = Scorer::fit(measure, &ensemble, &val, &ScorerConfig::default()).unwrap();
        let a = scorer.score(&ensemble, val.row(0), 7).unwrap();
        let b = scorer.score(&ensemble, val.row(0), 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{measure}");
    }
}

#[test]
fn score_dump_round_trips() {
    let records = vec![
        ScoreRecord {
            example_id: 0,
            split: "in".into(),
            measure: "entropy".into(),
            score: 0.123456789123456789,
        },
        ScoreRecord {
            example_id: 7,
            split: "out".into(),
            measure: "largest".into(),
            score: -1.0 / 3.0,
        },
    ];
    let dir = std::env::temp_dir().join(format!("oodbench-scores-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("scores.tsv");
    write_scores(&path, &records).unwrap();
    let loaded = read_scores(&path).unwrap();
    assert_eq!(loaded, records);
    std::fs::remove_dir_all(dir).ok();
}
