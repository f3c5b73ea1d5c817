//! Shared training loop, auxiliary student/teacher pairs, the trained-model
//! container, and its checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    cross_entropy_blocks, mimo_compose, mixup_batch, oc_penalty, soften_labels, Algorithm,
    ComposedBatch, HyperParams,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metric::NLL_PROB_FLOOR;
use crate::net::{
    self, checkpoint::Container, HeadKind, Mode, Predictor, PredictorConfig, SgdState,
    SpectralState,
};
use crate::rng;

/// Epoch/batch/decay knobs of the shared loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between factor-10 learning-rate decays.
    pub decay_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 60,
            batch_size: 64,
            decay_every: 20,
        }
    }
}

/// Seed provenance of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    /// Seeds the predictor (and, indirectly, auxiliary) initialization.
    pub init_seed: u64,
    /// Identifies the train/validation split this run consumed.
    pub data_seed: u64,
    /// Hyper-parameter trial index.
    pub trial_index: usize,
    /// Root of all in-run randomness (shuffling, transforms, dropout).
    pub run_seed: u64,
}

impl RunSeeds {
    pub fn simple(seed: u64) -> Self {
        RunSeeds {
            init_seed: seed,
            data_seed: seed,
            trial_index: 0,
            run_seed: seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub train_loss: f64,
    pub val_nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxKind {
    /// Student chases a frozen randomly initialized teacher.
    Rnd,
    /// Student chases the zero function under an orthogonality penalty.
    Oc,
}

/// Frozen teacher and trainable student over featurizer outputs.
#[derive(Clone, Debug)]
pub struct AuxiliaryPair {
    pub kind: AuxKind,
    pub teacher: Predictor,
    pub student: Predictor,
    /// Orthogonality penalty weight (OC only; zero disables it).
    pub regularization: f64,
}

fn aux_config(feature_dim: usize, num_classes: usize, hp: &HyperParams) -> PredictorConfig {
    PredictorConfig {
        input_dim: feature_dim,
        // depth counts linear layers: hidden widths plus the feature layer
        // plus the head.
        hidden_widths: vec![hp.teacher_width; hp.teacher_depth.saturating_sub(2)],
        feature_dim: hp.teacher_width,
        num_classes,
        head_kind: HeadKind::Linear,
        dropout_rate: 0.0,
        spectral_norm: false,
        size_tier: crate::net::SizeTier::Small,
    }
}

impl AuxiliaryPair {
    /// Teacher and student share the architecture but draw independent
    /// initializations from the run's auxiliary seed stream.
    pub fn init(
        kind: AuxKind,
        feature_dim: usize,
        num_classes: usize,
        hp: &HyperParams,
        run_seed: u64,
    ) -> Result<Self> {
        let cfg = aux_config(feature_dim, num_classes, hp);
        let teacher = Predictor::init(cfg.clone(), rng::derive_seed(run_seed, &["aux", "teacher"]))?;
        let student = Predictor::init(cfg, rng::derive_seed(run_seed, &["aux", "student"]))?;
        Ok(AuxiliaryPair {
            kind,
            teacher,
            student,
            regularization: hp.regularization,
        })
    }

    /// Teacher output for a feature vector; the OC teacher is the zero
    /// function.
    pub fn teacher_output(&self, features: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            AuxKind::Oc => Ok(vec![0.0; self.teacher.config().num_classes]),
            AuxKind::Rnd => Ok(self.teacher.forward(features, Mode::Eval)?.0),
        }
    }

    pub fn student_output(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.student.forward(features, Mode::Eval)?.0)
    }
}

/// Squared distance between the student and teacher outputs on a feature
/// vector (the OC teacher being identically zero).
pub fn student_teacher_loss(features: &[f64], pair: &AuxiliaryPair) -> Result<f64> {
    let s = pair.student_output(features)?;
    let t = pair.teacher_output(features)?;
    Ok(s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Gradient of `reg * oc_penalty(student weights)` as a flat vector
/// aligned with the student's parameter layout (zeros on biases).
fn oc_penalty_grad_flat(student: &Predictor, reg: f64) -> Vec<f64> {
    let mut flat = Vec::with_capacity(student.param_count());
    for layer in student.all_layers() {
        let w = &layer.w;
        // M = W^T W - I  (cols x cols)
        let mut m = vec![0.0; w.cols * w.cols];
        for a in 0..w.cols {
            for b in 0..w.cols {
                let mut dot = 0.0;
                for r in 0..w.rows {
                    dot += w.at(r, a) * w.at(r, b);
                }
                if a == b {
                    dot -= 1.0;
                }
                m[a * w.cols + b] = dot;
            }
        }
        // d/dW ||M||_F^2 = 4 W M
        for r in 0..w.rows {
            for c in 0..w.cols {
                let mut g = 0.0;
                for k in 0..w.cols {
                    g += w.at(r, k) * m[k * w.cols + c];
                }
                flat.push(4.0 * reg * g);
            }
        }
        flat.extend(std::iter::repeat(0.0).take(layer.b.len()));
    }
    flat
}

/// One trained model: the predictor, optional auxiliary pair, provenance,
/// and the training-set statistics some measures need.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub predictor: Predictor,
    pub auxiliary: Option<AuxiliaryPair>,
    pub algorithm: Algorithm,
    pub hyperparams: HyperParams,
    pub training_log: Vec<EpochLog>,
    pub seeds: RunSeeds,
    /// Mean training input (the Mixup-native reference point).
    pub train_input_mean: Vec<f64>,
    /// Mean training one-hot label (class proportions).
    pub train_label_mean: Vec<f64>,
}

impl TrainedModel {
    /// Validation NLL of the final epoch; the model-selection statistic.
    pub fn final_val_nll(&self) -> f64 {
        self.training_log.last().map_or(f64::INFINITY, |l| l.val_nll)
    }

    pub fn num_classes(&self) -> usize {
        self.predictor.config().num_classes
    }

    /// The logit vectors behind one prediction: a single set for
    /// deterministic models, `T` head blocks for MIMO, `T` seeded
    /// stochastic passes for MC-Dropout.
    pub fn logit_sets(&self, x: &[f64], key: u64) -> Result<Vec<Vec<f64>>> {
        logit_sets_raw(
            &self.predictor,
            self.algorithm,
            &self.hyperparams,
            self.seeds.run_seed,
            x,
            key,
        )
    }

    /// Full prediction rule at temperature `tau`: the mean over
    /// [`TrainedModel::logit_sets`] of their tempered softmaxes.
    pub fn prob(&self, x: &[f64], tau: f64, key: u64) -> Result<Vec<f64>> {
        prob_from_logit_sets(&self.logit_sets(x, key)?, tau)
    }

    /// Featurizer output in eval mode.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.predictor.config().subnetworks();
        let net_x = net::replicate_input(x, t);
        let (_, trace) = self.predictor.forward(&net_x, Mode::Eval)?;
        Ok(trace.features().to_vec())
    }

    /// Student/teacher squared disagreement on `x`, when the model has an
    /// auxiliary pair.
    pub fn aux_disagreement(&self, x: &[f64]) -> Result<f64> {
        let pair = self.auxiliary.as_ref().ok_or_else(|| {
            Error::MeasureIncompatible(format!(
                "{} has no auxiliary student/teacher pair",
                self.algorithm
            ))
        })?;
        student_teacher_loss(&self.features(x)?, pair)
    }
}

pub(crate) fn logit_sets_raw(
    predictor: &Predictor,
    algorithm: Algorithm,
    hp: &HyperParams,
    run_seed: u64,
    x: &[f64],
    key: u64,
) -> Result<Vec<Vec<f64>>> {
    match algorithm {
        Algorithm::McDropout => {
            let mut sets = Vec::with_capacity(hp.num_passes);
            for pass in 0..hp.num_passes {
                let seed = rng::derive_seed_indexed(run_seed, "mcpass", &[key, pass as u64]);
                let (logits, _) = predictor.forward(x, Mode::Train { dropout_seed: seed })?;
                sets.push(logits);
            }
            Ok(sets)
        }
        Algorithm::Mimo => {
            let t = predictor.config().subnetworks();
            let c = predictor.config().num_classes;
            let net_x = net::replicate_input(x, t);
            let (logits, _) = predictor.forward(&net_x, Mode::Eval)?;
            Ok((0..t)
                .map(|b| logits[b * c..(b + 1) * c].to_vec())
                .collect())
        }
        _ => Ok(vec![predictor.forward(x, Mode::Eval)?.0]),
    }
}

pub(crate) fn prob_from_logit_sets(sets: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if sets.is_empty() {
        return Err(Error::contract("prediction needs at least one logit set"));
    }
    let c = sets[0].len();
    let mut mean = vec![0.0; c];
    for set in sets {
        let p = net::softmax(set, tau)?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / sets.len() as f64;
        }
    }
    Ok(mean)
}

fn predictor_config_for(
    algorithm: Algorithm,
    base: &PredictorConfig,
    hp: &HyperParams,
) -> PredictorConfig {
    let mut cfg = base.clone();
    cfg.head_kind = match algorithm {
        Algorithm::Mimo => HeadKind::Mimo(hp.subnetworks),
        Algorithm::Rbf => HeadKind::Rbf,
        _ => HeadKind::Linear,
    };
    cfg.dropout_rate = if algorithm == Algorithm::McDropout {
        hp.dropout_rate
    } else {
        0.0
    };
    cfg
}

fn compose_batch(
    algorithm: Algorithm,
    xs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    hp: &HyperParams,
    rng: &mut rng::Rng,
) -> Result<ComposedBatch> {
    let one_hots = || -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                let mut v = vec![0.0; num_classes];
                v[l] = 1.0;
                v
            })
            .collect()
    };
    match algorithm {
        Algorithm::Mixup => mixup_batch(xs, labels, num_classes, hp.mixing_alpha, rng),
        Algorithm::SoftLabeler => {
            let targets = one_hots()
                .iter()
                .map(|y| soften_labels(y, hp.soft_label_value))
                .collect::<Result<Vec<_>>>()?;
            Ok(ComposedBatch {
                inputs: xs.to_vec(),
                targets,
            })
        }
        Algorithm::Mimo => mimo_compose(
            xs,
            labels,
            num_classes,
            hp.subnetworks,
            hp.input_repetition_prob,
            hp.batch_repetition,
            rng,
        ),
        _ => Ok(ComposedBatch {
            inputs: xs.to_vec(),
            targets: one_hots(),
        }),
    }
}

/// Trains one model with the shared loop. Deterministic given seeds: epoch
/// shuffles, batch transforms, dropout masks, and auxiliary initialization
/// all flow from `seeds.run_seed` through independent labelled streams, so
/// algorithms that never draw from a stream leave the others untouched.
pub fn train_run(
    algorithm: Algorithm,
    base_config: &PredictorConfig,
    hp: &HyperParams,
    train: &Dataset,
    val: &Dataset,
    seeds: &RunSeeds,
    schedule: &TrainSchedule,
) -> Result<TrainedModel> {
    let num_classes = base_config.num_classes;
    hp.validate(algorithm, num_classes)?;
    if schedule.epochs == 0 || schedule.batch_size == 0 || schedule.decay_every == 0 {
        return Err(Error::parameter("schedule fields must be positive"));
    }
    if train.class_count() != num_classes || val.class_count() != num_classes {
        return Err(Error::data(format!(
            "datasets must carry contiguous labels over {num_classes} classes"
        )));
    }
    if train.dim() != base_config.input_dim {
        return Err(Error::shape(format!(
            "training dim {} does not match config input dim {}",
            train.dim(),
            base_config.input_dim
        )));
    }

    let cfg = predictor_config_for(algorithm, base_config, hp);
    let mut predictor = Predictor::init(cfg, seeds.init_seed)?;
    let mut optimizer = SgdState::new(
        hp.learning_rate,
        hp.momentum,
        hp.weight_decay,
        Some(schedule.decay_every),
        predictor.param_count(),
    )?;
    let mut auxiliary = if algorithm.has_auxiliary() {
        let kind = if algorithm == Algorithm::Oc {
            AuxKind::Oc
        } else {
            AuxKind::Rnd
        };
        let pair = AuxiliaryPair::init(
            kind,
            base_config.feature_dim,
            num_classes,
            hp,
            seeds.run_seed,
        )?;
        let opt = SgdState::new(
            hp.learning_rate,
            hp.momentum,
            hp.weight_decay,
            Some(schedule.decay_every),
            pair.student.param_count(),
        )?;
        Some((pair, opt))
    } else {
        None
    };

    let mut transform_rng = rng::stream(seeds.run_seed, &["transform"]);
    let mut training_log = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            rng::rng_from_seed(rng::derive_seed_indexed(seeds.run_seed, "shuffle", &[
                epoch as u64,
            ]));
        crate::data::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train.row(i).to_vec()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let composed =
                compose_batch(algorithm, &xs, &labels, num_classes, hp, &mut transform_rng)?;

            predictor.refresh_spectral(1);
            let rows = composed.inputs.len();
            let scale = 1.0 / rows as f64;
            let mut grads = predictor.zero_gradients();
            let mut batch_loss = 0.0;
            let mut feature_cache: Vec<Vec<f64>> = Vec::new();
            for (row_idx, (x, target)) in composed
                .inputs
                .iter()
                .zip(&composed.targets)
                .enumerate()
            {
                let dropout_seed = rng::derive_seed_indexed(
                    seeds.run_seed,
                    "dropout",
                    &[epoch as u64, batch_idx as u64, row_idx as u64],
                );
                let (logits, trace) = predictor.forward(x, Mode::Train { dropout_seed })?;
                let eval = cross_entropy_blocks(&logits, target, num_classes)?;
                batch_loss += scale * eval.loss;
                let row_grads = predictor.backward(&trace, &eval.dlogits)?;
                grads.accumulate(&row_grads, scale);
                if auxiliary.is_some() {
                    feature_cache.push(trace.features().to_vec());
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss in {algorithm} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let mut params = predictor.flatten_params();
            optimizer.step_at_epoch(&mut params, &grads.flatten(), epoch)?;
            predictor.set_params(&params)?;

            if let Some((pair, aux_opt)) = auxiliary.as_mut() {
                let aux_loss = auxiliary_step(pair, aux_opt, &feature_cache, epoch)?;
                if !aux_loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite auxiliary loss in {algorithm} at epoch {epoch}, batch {batch_idx}"
                    )));
                }
                batch_loss += aux_loss;
            }

            epoch_loss += batch_loss;
            batches += 1;
        }

        let val_nll = validation_nll(&predictor, algorithm, hp, seeds.run_seed, val)?;
        training_log.push(EpochLog {
            train_loss: epoch_loss / batches as f64,
            val_nll,
        });
    }

    Ok(TrainedModel {
        predictor,
        auxiliary: auxiliary.map(|(pair, _)| pair),
        algorithm,
        hyperparams: hp.clone(),
        training_log,
        seeds: *seeds,
        train_input_mean: train.mean_row(),
        train_label_mean: train.label_distribution(),
    })
}

/// One SGD step on the student: squared distance to the teacher plus the
/// weighted orthogonality penalty. Featurizer inputs are constants here;
/// nothing propagates back into the predictor.
fn auxiliary_step(
    pair: &mut AuxiliaryPair,
    optimizer: &mut SgdState,
    features: &[Vec<f64>],
    epoch: usize,
) -> Result<f64> {
    let scale = 1.0 / features.len() as f64;
    let mut grads = pair.student.zero_gradients();
    let mut loss = 0.0;
    for f in features {
        let (student_out, trace) = pair.student.forward(f, Mode::Eval)?;
        let teacher_out = pair.teacher_output(f)?;
        let mut dlogits = vec![0.0; student_out.len()];
        for (d, (s, t)) in dlogits.iter_mut().zip(student_out.iter().zip(&teacher_out)) {
            loss += scale * (s - t) * (s - t);
            *d = 2.0 * (s - t);
        }
        let row_grads = pair.student.backward(&trace, &dlogits)?;
        grads.accumulate(&row_grads, scale);
    }
    let mut flat = grads.flatten();
    if pair.kind == AuxKind::Oc && pair.regularization > 0.0 {
        let weights: Vec<&net::Mat> = pair.student.all_layers().iter().map(|l| &l.w).collect();
        loss += pair.regularization * oc_penalty(&weights);
        for (g, p) in flat
            .iter_mut()
            .zip(oc_penalty_grad_flat(&pair.student, pair.regularization))
        {
            *g += p;
        }
    }
    let mut params = pair.student.flatten_params();
    optimizer.step_at_epoch(&mut params, &flat, epoch)?;
    pair.student.set_params(&params)?;
    Ok(loss)
}

fn validation_nll(
    predictor: &Predictor,
    algorithm: Algorithm,
    hp: &HyperParams,
    run_seed: u64,
    val: &Dataset,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..val.len() {
        let sets = logit_sets_raw(predictor, algorithm, hp, run_seed, val.row(i), i as u64)?;
        let p = prob_from_logit_sets(&sets, 1.0)?;
        total -= p[val.label(i)].max(NLL_PROB_FLOOR).ln();
    }
    Ok(total / val.len() as f64)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
struct AuxMeta {
    kind: AuxKind,
    config: PredictorConfig,
    teacher_seed: u64,
    student_seed: u64,
    regularization: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    algorithm: Algorithm,
    hyperparams: HyperParams,
    seeds: RunSeeds,
    training_log: Vec<EpochLog>,
    predictor_config: PredictorConfig,
    predictor_init_seed: u64,
    auxiliary: Option<AuxMeta>,
}

fn push_predictor_sections(container: &mut Container, prefix: &str, predictor: &Predictor) {
    container.push_section(format!("{prefix}_params"), predictor.flatten_params());
    for (idx, state) in predictor.spectral_states().iter().enumerate() {
        container.push_section(format!("{prefix}_spectral_u_{idx}"), state.u.clone());
        container.push_section(format!("{prefix}_spectral_v_{idx}"), state.v.clone());
    }
}

fn restore_predictor(
    container: &Container,
    prefix: &str,
    config: PredictorConfig,
    init_seed: u64,
) -> Result<Predictor> {
    let mut predictor = Predictor::init(config.clone(), init_seed)?;
    predictor.set_params(container.section(&format!("{prefix}_params"))?)?;
    if config.spectral_norm {
        let mut states = Vec::new();
        for idx in 0.. {
            let u_name = format!("{prefix}_spectral_u_{idx}");
            if container.sections.iter().all(|(n, _)| n != &u_name) {
                break;
            }
            states.push(SpectralState {
                u: container.section(&u_name)?.to_vec(),
                v: container
                    .section(&format!("{prefix}_spectral_v_{idx}"))?
                    .to_vec(),
            });
        }
        predictor.restore_spectral_states(states);
    }
    Ok(predictor)
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "trained_model".to_string(),
            algorithm: self.algorithm,
            hyperparams: self.hyperparams.clone(),
            seeds: self.seeds,
            training_log: self.training_log.clone(),
            predictor_config: self.predictor.config().clone(),
            predictor_init_seed: self.predictor.init_seed(),
            auxiliary: self.auxiliary.as_ref().map(|pair| AuxMeta {
                kind: pair.kind,
                config: pair.teacher.config().clone(),
                teacher_seed: pair.teacher.init_seed(),
                student_seed: pair.student.init_seed(),
                regularization: pair.regularization,
            }),
        };
        let mut container =
            Container::new(serde_json::to_value(&meta).map_err(|e| Error::format(e.to_string()))?);
        push_predictor_sections(&mut container, "predictor", &self.predictor);
        if let Some(pair) = &self.auxiliary {
            push_predictor_sections(&mut container, "teacher", &pair.teacher);
            push_predictor_sections(&mut container, "student", &pair.student);
        }
        container.push_section("input_mean", self.train_input_mean.clone());
        container.push_section("label_mean", self.train_label_mean.clone());
        container.write_to(path)
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let container = Container::read_from(path)?;
        let meta: ModelMeta = serde_json::from_value(container.meta.clone())
            .map_err(|e| Error::format(format!("model checkpoint meta: {e}")))?;
        let predictor = restore_predictor(
            &container,
            "predictor",
            meta.predictor_config.clone(),
            meta.predictor_init_seed,
        )?;
        let auxiliary = match &meta.auxiliary {
            Some(aux) => Some(AuxiliaryPair {
                kind: aux.kind,
                teacher: restore_predictor(
                    &container,
                    "teacher",
                    aux.config.clone(),
                    aux.teacher_seed,
                )?,
                student: restore_predictor(
                    &container,
                    "student",
                    aux.config.clone(),
                    aux.student_seed,
                )?,
                regularization: aux.regularization,
            }),
            None => None,
        };
        Ok(TrainedModel {
            predictor,
            auxiliary,
            algorithm: meta.algorithm,
            hyperparams: meta.hyperparams,
            training_log: meta.training_log,
            seeds: meta.seeds,
            train_input_mean: container.section("input_mean")?.to_vec(),
            train_label_mean: container.section("label_mean")?.to_vec(),
        })
    }
}
