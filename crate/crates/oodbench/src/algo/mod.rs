//! The eight training procedures, factored into a shared loop
//! ([`train::train_run`]) plus per-algorithm batch transforms and loss
//! terms.

pub mod train;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, Predictor};
use crate::rng::Rng;

pub use train::{train_run, AuxiliaryPair, EpochLog, RunSeeds, TrainSchedule, TrainedModel};

/// The benchmarked training algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    Erm,
    Mixup,
    SoftLabeler,
    Rbf,
    Rnd,
    Oc,
    McDropout,
    Mimo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Erm,
        Algorithm::Mixup,
        Algorithm::SoftLabeler,
        Algorithm::Rbf,
        Algorithm::Rnd,
        Algorithm::Oc,
        Algorithm::McDropout,
        Algorithm::Mimo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::Mixup => "mixup",
            Algorithm::SoftLabeler => "soft_labeler",
            Algorithm::Rbf => "rbf",
            Algorithm::Rnd => "rnd",
            Algorithm::Oc => "oc",
            Algorithm::McDropout => "mc_dropout",
            Algorithm::Mimo => "mimo",
        }
    }

    pub fn from_name(name: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::parameter(format!("unknown algorithm {name:?}")))
    }

    /// Whether the algorithm trains an auxiliary student/teacher pair.
    pub fn has_auxiliary(self) -> bool {
        matches!(self, Algorithm::Rnd | Algorithm::Oc)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Union of all per-algorithm hyper-parameters. Every model carries the
/// full struct; fields irrelevant to its algorithm keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Mixup Beta-distribution parameter.
    pub mixing_alpha: f64,
    /// MC-Dropout rate.
    pub dropout_rate: f64,
    /// MC-Dropout stochastic passes at evaluation time.
    pub num_passes: usize,
    /// MIMO subnetwork count.
    pub subnetworks: usize,
    /// MIMO probability that a composed row repeats its first example.
    pub input_repetition_prob: f64,
    /// MIMO batch repetition factor.
    pub batch_repetition: usize,
    /// Auxiliary network width (RND/OC).
    pub teacher_width: usize,
    /// Auxiliary network depth in linear layers (RND/OC).
    pub teacher_depth: usize,
    /// Orthogonality penalty weight (OC).
    pub regularization: f64,
    /// Soft-labeler positive target.
    pub soft_label_value: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            mixing_alpha: 0.3,
            dropout_rate: 0.05,
            num_passes: 10,
            subnetworks: 2,
            input_repetition_prob: 0.6,
            batch_repetition: 2,
            teacher_width: 128,
            teacher_depth: 3,
            regularization: 0.0,
            soft_label_value: 0.9,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, algorithm: Algorithm, num_classes: usize) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::parameter("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::parameter("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::parameter("weight decay must be nonnegative"));
        }
        match algorithm {
            Algorithm::Mixup if self.mixing_alpha <= 0.0 => {
                Err(Error::parameter("mixing alpha must be positive"))
            }
            Algorithm::McDropout if !(0.0..1.0).contains(&self.dropout_rate) => {
                Err(Error::parameter("dropout rate must lie in [0, 1)"))
            }
            Algorithm::McDropout if self.num_passes == 0 => {
                Err(Error::parameter("number of passes must be positive"))
            }
            Algorithm::Mimo
                if self.subnetworks == 0
                    || self.batch_repetition == 0
                    || !(0.0..=1.0).contains(&self.input_repetition_prob) =>
            {
                Err(Error::parameter("invalid mimo hyper-parameters"))
            }
            Algorithm::Rnd | Algorithm::Oc
                if self.teacher_width == 0 || self.teacher_depth < 2 =>
            {
                Err(Error::parameter(
                    "teacher needs width >= 1 and depth >= 2 linear layers",
                ))
            }
            Algorithm::Oc if self.regularization < 0.0 => {
                Err(Error::parameter("regularization must be nonnegative"))
            }
            Algorithm::SoftLabeler
                if !(self.soft_label_value > 1.0 / num_classes as f64
                    && self.soft_label_value <= 1.0) =>
            {
                Err(Error::parameter(format!(
                    "soft label value must lie in (1/{num_classes}, 1]"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A batch after its algorithm-specific transform: one input row and one
/// blockwise probability target per composed example.
#[derive(Clone, Debug)]
pub struct ComposedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

/// Mixup with one shared lambda per batch and a seeded in-batch pairing
/// permutation: `x~ = l x_i + (1-l) x_j`, same for the one-hot targets.
pub fn mixup_batch(
    xs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<ComposedBatch> {
    if alpha <= 0.0 {
        return Err(Error::parameter("mixup alpha must be positive"));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::parameter(format!("invalid mixup alpha: {e}")))?;
    let lambda = beta.sample(rng);
    mixup_batch_with_lambda(xs, labels, num_classes, lambda, rng)
}

/// Mixup with a caller-forced lambda (the sampling-free code path).
pub fn mixup_batch_with_lambda(
    xs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<ComposedBatch> {
    let n = xs.len();
    if n != labels.len() {
        return Err(Error::shape("mixup inputs and labels disagree"));
    }
    let mut partner: Vec<usize> = (0..n).collect();
    crate::data::shuffle(&mut partner, rng);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let j = partner[i];
        let x: Vec<f64> = xs[i]
            .iter()
            .zip(&xs[j])
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let yi = one_hot(labels[i], num_classes);
        let yj = one_hot(labels[j], num_classes);
        let y: Vec<f64> = yi
            .iter()
            .zip(&yj)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        inputs.push(x);
        targets.push(y);
    }
    Ok(ComposedBatch { inputs, targets })
}

/// Label smoothing: the solitary one becomes `lmax`, every zero becomes
/// `(1 - lmax) / (C - 1)`, keeping the target on the simplex.
pub fn soften_labels(onehot: &[f64], lmax: f64) -> Result<Vec<f64>> {
    let c = onehot.len();
    if c < 2 {
        return Err(Error::parameter("soft labels need at least two classes"));
    }
    if !(lmax > 1.0 / c as f64 && lmax <= 1.0) {
        return Err(Error::parameter(format!(
            "soft label value must lie in (1/{c}, 1], got {lmax}"
        )));
    }
    let lmin = (1.0 - lmax) / (c as f64 - 1.0);
    Ok(onehot
        .iter()
        .map(|&v| if v == 1.0 { lmax } else { lmin })
        .collect())
}

/// Orthogonality penalty: sum of `||W^T W - I||_F^2` over weight matrices.
pub fn oc_penalty(matrices: &[&net::Mat]) -> f64 {
    let mut total = 0.0;
    for w in matrices {
        // G = W^T W - I, accumulated column-pair by column-pair.
        for a in 0..w.cols {
            for b in 0..w.cols {
                let mut dot = 0.0;
                for r in 0..w.rows {
                    dot += w.at(r, a) * w.at(r, b);
                }
                if a == b {
                    dot -= 1.0;
                }
                total += dot * dot;
            }
        }
    }
    total
}

/// MIMO batch composition: the batch is repeated `batch_repetition` times;
/// each composed row keeps its own example in slot one, and with
/// probability `rho` repeats it across all slots, otherwise fills the
/// remaining slots with independent draws from the batch.
pub fn mimo_compose(
    xs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    subnetworks: usize,
    rho: f64,
    batch_repetition: usize,
    rng: &mut Rng,
) -> Result<ComposedBatch> {
    use rand::Rng as _;
    if subnetworks == 0 || batch_repetition == 0 {
        return Err(Error::parameter("mimo needs T >= 1 and repetition >= 1"));
    }
    let n = xs.len();
    if n != labels.len() {
        return Err(Error::shape("mimo inputs and labels disagree"));
    }
    let mut inputs = Vec::with_capacity(n * batch_repetition);
    let mut targets = Vec::with_capacity(n * batch_repetition);
    for _rep in 0..batch_repetition {
        for i in 0..n {
            let mut slots = Vec::with_capacity(subnetworks);
            slots.push(i);
            if subnetworks > 1 {
                if rng.gen::<f64>() < rho {
                    slots.resize(subnetworks, i);
                } else {
                    for _ in 1..subnetworks {
                        slots.push(rng.gen_range(0..n));
                    }
                }
            }
            let mut x = Vec::with_capacity(subnetworks * xs[i].len());
            let mut y = Vec::with_capacity(subnetworks * num_classes);
            for &s in &slots {
                x.extend_from_slice(&xs[s]);
                y.extend_from_slice(&one_hot(labels[s], num_classes));
            }
            inputs.push(x);
            targets.push(y);
        }
    }
    Ok(ComposedBatch { inputs, targets })
}

/// Replicate-and-average MIMO prediction: `T` copies of `x` go in, the `T`
/// per-block softmax vectors are averaged.
pub fn mimo_predict(predictor: &Predictor, x: &[f64]) -> Result<Vec<f64>> {
    mimo_predict_tempered(predictor, x, 1.0)
}

pub(crate) fn mimo_predict_tempered(predictor: &Predictor, x: &[f64], tau: f64) -> Result<Vec<f64>> {
    let t = predictor.config().subnetworks();
    let c = predictor.config().num_classes;
    let net_x = net::replicate_input(x, t);
    let (logits, _) = predictor.forward(&net_x, net::Mode::Eval)?;
    let mut mean = vec![0.0; c];
    for block in 0..t {
        let p = net::softmax(&logits[block * c..(block + 1) * c], tau)?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / t as f64;
        }
    }
    Ok(mean)
}

/// The RBF logit transform `z -> exp(-z^2)`, applied before the final
/// softmax.
pub fn rbf_transform(logits: &[f64]) -> Vec<f64> {
    net::rbf_map(logits)
}

/// Loss value and upstream logit gradient of one composed example.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub dlogits: Vec<f64>,
}

/// Blockwise cross-entropy of logits against a blockwise probability
/// target (one block per MIMO subnetwork; a single block otherwise).
///
/// The target must be a probability vector per block within 1e-6.
pub fn loss_for(
    algorithm: Algorithm,
    logits: &[f64],
    target: &[f64],
    num_classes: usize,
) -> Result<LossEval> {
    let _ = algorithm; // every algorithm's predictor objective is blockwise CE
    cross_entropy_blocks(logits, target, num_classes)
}

pub(crate) fn cross_entropy_blocks(
    logits: &[f64],
    target: &[f64],
    num_classes: usize,
) -> Result<LossEval> {
    if logits.len() != target.len() || logits.len() % num_classes != 0 {
        return Err(Error::shape(format!(
            "logits/target of length {}/{} are not blocks of {num_classes}",
            logits.len(),
            target.len()
        )));
    }
    let blocks = logits.len() / num_classes;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for b in 0..blocks {
        let z = &logits[b * num_classes..(b + 1) * num_classes];
        let y = &target[b * num_classes..(b + 1) * num_classes];
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || y.iter().any(|v| *v < 0.0) {
            return Err(Error::contract(format!(
                "target block {b} is not a probability vector (sum {sum})"
            )));
        }
        // log-softmax with max subtraction
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut block_loss = 0.0;
        for c in 0..num_classes {
            block_loss -= y[c] * (z[c] - lse);
        }
        loss += block_loss;
        let p = net::softmax_unchecked(z, 1.0);
        for c in 0..num_classes {
            dlogits[b * num_classes + c] = p[c] - y[c];
        }
    }
    Ok(LossEval { loss, dlogits })
}
