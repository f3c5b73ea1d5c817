//! Uncertainty measures: a real-valued score per (model, input), small for
//! in-domain inputs and large for out-domain ones.
//!
//! Stateless measures (largest, gap, entropy, Jacobian) read the model's
//! prediction directly; fitted measures carry state estimated on an
//! in-domain validation set (GMM); Native measures dispatch on the
//! algorithm exactly as the compatibility matrix allows.

pub mod gmm;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algo::Algorithm;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net;
use crate::posthoc::Ensemble;
use crate::rng;

pub use gmm::{fit_gmm, score_gmm, GmmModel};

/// Number of seeded Beta draws the Native Mixup measure averages over.
pub const NATIVE_MIXUP_DRAWS: usize = 8;

/// The measure family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasureId {
    Largest,
    Gap,
    Entropy,
    Jacobian,
    Gmm,
    Augment,
    Native,
}

impl MeasureId {
    pub const ALL: [MeasureId; 7] = [
        MeasureId::Largest,
        MeasureId::Gap,
        MeasureId::Entropy,
        MeasureId::Jacobian,
        MeasureId::Gmm,
        MeasureId::Augment,
        MeasureId::Native,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeasureId::Largest => "largest",
            MeasureId::Gap => "gap",
            MeasureId::Entropy => "entropy",
            MeasureId::Jacobian => "jacobian",
            MeasureId::Gmm => "gmm",
            MeasureId::Augment => "augment",
            MeasureId::Native => "native",
        }
    }

    pub fn from_name(name: &str) -> Result<MeasureId> {
        MeasureId::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::parameter(format!("unknown measure {name:?}")))
    }
}

impl std::fmt::Display for MeasureId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::shape("empty probability vector"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
        return Err(Error::contract(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Minus the largest softmax score.
pub fn score_largest(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(-p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Second-largest minus largest softmax score; in [-1, 0].
pub fn score_gap(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    if p.len() < 2 {
        return Err(Error::parameter("gap needs at least two classes"));
    }
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
    Ok(sorted[1] - sorted[0])
}

/// Shannon entropy with natural log; zero entries contribute zero.
pub fn score_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Squared Frobenius norm of the Jacobian of the model's softmax output
/// with respect to the input (dropout off; temperature applied; member
/// Jacobians averaged before taking the norm).
pub fn score_jacobian(model: &Ensemble, x: &[f64]) -> Result<f64> {
    let classes = model.num_classes();
    let k = model.members().len() as f64;
    let mut total = 0.0;
    for class in 0..classes {
        let mut dx_mean = vec![0.0; x.len()];
        for member in model.members() {
            let dx =
                net::softmax_input_gradient(&member.model.predictor, x, member.tau, class)?;
            for (m, v) in dx_mean.iter_mut().zip(&dx) {
                *m += v / k;
            }
        }
        total += dx_mean.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Test-time augmentation family and budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Number of augmented passes `A`.
    pub count: usize,
    /// Scale of the additive Gaussian input noise.
    pub noise_scale: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            count: 8,
            noise_scale: 0.1,
        }
    }
}

/// Minus the largest coordinate of the prediction averaged over `A` seeded
/// Gaussian input perturbations.
pub fn score_augment(
    model: &Ensemble,
    x: &[f64],
    spec: &AugmentSpec,
    seed: u64,
    key: u64,
) -> Result<f64> {
    if spec.count == 0 {
        return Err(Error::parameter("augmentation needs at least one pass"));
    }
    let mut mean = vec![0.0; model.num_classes()];
    for a in 0..spec.count {
        let mut noise_rng =
            rng::rng_from_seed(rng::derive_seed_indexed(seed, "augment", &[key, a as u64]));
        let xa: Vec<f64> = x
            .iter()
            .map(|&v| {
                let g: f64 = noise_rng.sample(StandardNormal);
                v + spec.noise_scale * g
            })
            .collect();
        let p = model.prob(&xa, key)?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / spec.count as f64;
        }
    }
    Ok(-mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Squared deviation of the largest softmax score from the soft-label
/// target.
pub fn native_softlabel(p: &[f64], lmax: f64) -> Result<f64> {
    check_simplex(p)?;
    let s1 = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((s1 - lmax) * (s1 - lmax))
}

/// Jensen-Shannon-style disagreement: entropy of the member mean minus the
/// mean member entropy. Zero iff all members coincide; at most `ln K`.
pub fn native_js(members: &[Vec<f64>]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::parameter("js divergence needs at least one member"));
    }
    let c = members[0].len();
    let mut mean = vec![0.0; c];
    let mut mean_entropy = 0.0;
    for p in members {
        check_simplex(p)?;
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / members.len() as f64;
        }
        mean_entropy += entropy_unchecked(p) / members.len() as f64;
    }
    Ok(entropy_unchecked(&mean) - mean_entropy)
}

/// Mean squared violation of the Mixup criterion against the training
/// average `(x_mean, y_mean)`, over the supplied lambda draws.
pub fn native_mixup_with_lambdas(
    model: &Ensemble,
    x: &[f64],
    key: u64,
    lambdas: &[f64],
    x_mean: &[f64],
    y_mean: &[f64],
) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(Error::parameter("native mixup needs at least one lambda"));
    }
    if x_mean.len() != x.len() || y_mean.len() != model.num_classes() {
        return Err(Error::contract(
            "training averages do not match the model's shapes",
        ));
    }
    let fx = model.prob(x, key)?;
    let mut total = 0.0;
    for &lambda in lambdas {
        let mixed_x: Vec<f64> = x
            .iter()
            .zip(x_mean)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let f_mixed = model.prob(&mixed_x, key)?;
        let deviation: f64 = fx
            .iter()
            .zip(y_mean)
            .zip(&f_mixed)
            .map(|((fa, ya), fm)| {
                let v = lambda * fa + (1.0 - lambda) * ya - fm;
                v * v
            })
            .sum();
        total += deviation;
    }
    Ok(total / lambdas.len() as f64)
}

/// Whether the Native measure is defined for this model.
pub fn native_compatible(model: &Ensemble) -> bool {
    if model.k() > 1 {
        return true;
    }
    matches!(
        model.algorithm(),
        Algorithm::Mixup
            | Algorithm::Rnd
            | Algorithm::Oc
            | Algorithm::SoftLabeler
            | Algorithm::McDropout
    )
}

/// Scoring context shared across a whole evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ScorerConfig {
    pub augment: AugmentSpec,
    /// Context seed for augmentation noise and Native-Mixup lambda draws.
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

/// A measure plus its fitted state, ready to score examples.
pub struct Scorer {
    pub measure: MeasureId,
    /// One fitted GMM per ensemble member (GMM measure only).
    gmms: Vec<GmmModel>,
    /// Seeded Beta draws (Native Mixup only).
    mixup_lambdas: Vec<f64>,
    augment: AugmentSpec,
    seed: u64,
}

impl Scorer {
    /// Fits whatever state the measure needs on the in-domain validation
    /// set, and rejects incompatible (measure, model) pairs up front.
    pub fn fit(
        measure: MeasureId,
        model: &Ensemble,
        val: &Dataset,
        config: &ScorerConfig,
    ) -> Result<Scorer> {
        let mut scorer = Scorer {
            measure,
            gmms: Vec::new(),
            mixup_lambdas: Vec::new(),
            augment: config.augment,
            seed: config.seed,
        };
        match measure {
            MeasureId::Gmm => {
                for member in model.members() {
                    let features: Vec<Vec<f64>> = (0..val.len())
                        .map(|i| member.model.features(val.row(i)))
                        .collect::<Result<_>>()?;
                    scorer
                        .gmms
                        .push(fit_gmm(&features, val.labels(), val.class_count())?);
                }
            }
            MeasureId::Native => {
                if !native_compatible(model) {
                    return Err(Error::MeasureIncompatible(format!(
                        "native measure is undefined for a single {} model",
                        model.algorithm()
                    )));
                }
                if model.k() == 1 && model.algorithm() == Algorithm::Mixup {
                    let alpha = model.members()[0].model.hyperparams.mixing_alpha;
                    let beta = Beta::new(alpha, alpha)
                        .map_err(|e| Error::parameter(format!("invalid mixup alpha: {e}")))?;
                    let mut lambda_rng = rng::stream(config.seed, &["native-mixup"]);
                    scorer.mixup_lambdas = (0..NATIVE_MIXUP_DRAWS)
                        .map(|_| beta.sample(&mut lambda_rng))
                        .collect();
                }
            }
            _ => {}
        }
        Ok(scorer)
    }

    /// Scores one example. Deterministic given `(model, x, key)` and the
    /// scorer's context seed.
    pub fn score(&self, model: &Ensemble, x: &[f64], key: u64) -> Result<f64> {
        match self.measure {
            MeasureId::Largest => score_largest(&model.prob(x, key)?),
            MeasureId::Gap => score_gap(&model.prob(x, key)?),
            MeasureId::Entropy => score_entropy(&model.prob(x, key)?),
            MeasureId::Jacobian => score_jacobian(model, x),
            MeasureId::Gmm => {
                if self.gmms.len() != model.members().len() {
                    return Err(Error::contract("gmm state does not match the model"));
                }
                let mut total = 0.0;
                for (member, g) in model.members().iter().zip(&self.gmms) {
                    total += score_gmm(g, &member.model.features(x)?)?;
                }
                Ok(total / self.gmms.len() as f64)
            }
            MeasureId::Augment => score_augment(model, x, &self.augment, self.seed, key),
            MeasureId::Native => self.score_native(model, x, key),
        }
    }

    fn score_native(&self, model: &Ensemble, x: &[f64], key: u64) -> Result<f64> {
        if model.k() > 1 {
            return native_js(&model.member_probs(x, key)?);
        }
        let member = &model.members()[0];
        match model.algorithm() {
            Algorithm::Mixup => native_mixup_with_lambdas(
                model,
                x,
                key,
                &self.mixup_lambdas,
                &member.model.train_input_mean,
                &member.model.train_label_mean,
            ),
            Algorithm::Rnd | Algorithm::Oc => member.model.aux_disagreement(x),
            Algorithm::SoftLabeler => native_softlabel(
                &model.prob(x, key)?,
                member.model.hyperparams.soft_label_value,
            ),
            Algorithm::McDropout => native_js(&model.member_probs(x, key)?),
            other => Err(Error::MeasureIncompatible(format!(
                "native measure is undefined for a single {other} model"
            ))),
        }
    }

    /// Scores a whole dataset; per-example keys are derived from the split
    /// tag so validation/test pools never share stochastic passes.
    pub fn score_dataset(&self, model: &Ensemble, data: &Dataset, tag: &str) -> Result<Vec<f64>> {
        (0..data.len())
            .map(|i| {
                let key = rng::derive_seed_indexed(self.seed, tag, &[i as u64]);
                self.score(model, data.row(i), key)
            })
            .collect()
    }
}

/// One line of the score dump consumed by the metrics stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub example_id: u64,
    /// Split tag: `in`, `out`, or `val`.
    pub split: String,
    pub measure: String,
    pub score: f64,
}

/// Writes score records as tab-separated lines
/// (`example_id<TAB>split<TAB>measure<TAB>score`), one record per line.
/// Scores use shortest round-trip formatting, so reading back is exact.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        writeln!(file, "{}\t{}\t{}\t{}", r.example_id, r.split, r.measure, r.score)?;
    }
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        records.push(ScoreRecord {
            example_id: fields[0].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: "bad example id".into(),
            })?,
            split: fields[1].to_string(),
            measure: fields[2].to_string(),
            score: fields[3].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: "bad score".into(),
            })?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests;
