//! Temperature calibration and best-k ensembling.

use std::sync::Arc;

use crate::algo::{Algorithm, TrainedModel};
use crate::error::{Error, Result};
use crate::metric::NLL_PROB_FLOOR;
use crate::net;

/// One ensemble member: a trained model evaluated at a fixed temperature.
#[derive(Clone)]
pub struct CalibratedMember {
    pub model: Arc<TrainedModel>,
    pub tau: f64,
}

/// An evaluation-side model: `k = 1` wraps a single trained model, larger
/// `k` averages the members' probability vectors. Members are calibrated
/// individually before averaging.
#[derive(Clone)]
pub struct Ensemble {
    members: Vec<CalibratedMember>,
    /// Which trials were selected, and by what statistic.
    pub provenance: String,
}

impl Ensemble {
    pub fn new(members: Vec<CalibratedMember>, provenance: String) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::parameter("an ensemble needs at least one member"));
        }
        for (i, a) in members.iter().enumerate() {
            if a.tau <= 0.0 || !a.tau.is_finite() {
                return Err(Error::parameter("member temperature must be positive"));
            }
            for b in &members[i + 1..] {
                if Arc::ptr_eq(&a.model, &b.model) {
                    return Err(Error::parameter("ensemble members must be distinct"));
                }
            }
        }
        let algorithm = members[0].model.algorithm;
        let classes = members[0].model.num_classes();
        if members
            .iter()
            .any(|m| m.model.algorithm != algorithm || m.model.num_classes() != classes)
        {
            return Err(Error::parameter(
                "ensemble members must share algorithm and class count",
            ));
        }
        Ok(Ensemble {
            members,
            provenance,
        })
    }

    pub fn single(model: Arc<TrainedModel>, tau: f64) -> Result<Self> {
        Ensemble::new(
            vec![CalibratedMember { model, tau }],
            "single model".to_string(),
        )
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[CalibratedMember] {
        &self.members
    }

    pub fn algorithm(&self) -> Algorithm {
        self.members[0].model.algorithm
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].model.num_classes()
    }

    /// The averaged prediction rule
    /// (each member contributes its own tempered prediction).
    pub fn prob(&self, x: &[f64], key: u64) -> Result<Vec<f64>> {
        let k = self.members.len() as f64;
        let mut mean = vec![0.0; self.num_classes()];
        for member in &self.members {
            let p = member.model.prob(x, member.tau, key)?;
            for (m, v) in mean.iter_mut().zip(&p) {
                *m += v / k;
            }
        }
        Ok(mean)
    }

    /// The probability vectors behind one prediction: member outputs for a
    /// real ensemble, the stochastic passes (or head blocks) of the single
    /// member otherwise.
    pub fn member_probs(&self, x: &[f64], key: u64) -> Result<Vec<Vec<f64>>> {
        if self.members.len() > 1 {
            self.members
                .iter()
                .map(|m| m.model.prob(x, m.tau, key))
                .collect()
        } else {
            let member = &self.members[0];
            let sets = member.model.logit_sets(x, key)?;
            sets.iter().map(|z| net::softmax(z, member.tau)).collect()
        }
    }
}

/// Outcome of a temperature search.
#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub tau: f64,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    /// Every `(tau, nll)` the search evaluated, in evaluation order.
    pub trace: Vec<(f64, f64)>,
}

/// Mean NLL of the tempered prediction rule over per-example logit sets.
fn nll_at_tau(logit_sets: &[Vec<Vec<f64>>], labels: &[usize], tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for (sets, &label) in logit_sets.iter().zip(labels) {
        let k = sets.len() as f64;
        let mut p_true = 0.0;
        for z in sets {
            p_true += net::softmax(z, tau)?[label] / k;
        }
        total -= p_true.max(NLL_PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

const LOG_TAU_LO: f64 = -3.0;
const LOG_TAU_HI: f64 = 3.0;
const LOG_TAU_TOL: f64 = 1e-4;

/// Fits the softmax temperature by minimizing validation NLL with a
/// golden-section search on `ln(tau)` over [-3, 3] to absolute tolerance
/// 1e-4 in log-space.
///
/// Each example contributes a set of logit vectors (a single vector for
/// deterministic predictors, `T` for multi-pass ones); the NLL is taken on
/// the set's averaged tempered softmax. If the search lands above the
/// untempered NLL (`tau = 1` is inside the bracket), the identity
/// temperature is returned instead.
pub fn calibrate_temperature(
    logit_sets: &[Vec<Vec<f64>>],
    labels: &[usize],
) -> Result<CalibrationResult> {
    if logit_sets.is_empty() || logit_sets.len() != labels.len() {
        return Err(Error::parameter(
            "calibration needs a nonempty validation set with matching labels",
        ));
    }
    if logit_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::parameter("every example needs at least one logit set"));
    }

    let mut trace = Vec::new();
    let mut eval = |t: f64| -> Result<f64> {
        let nll = nll_at_tau(logit_sets, labels, t.exp())?;
        trace.push((t.exp(), nll));
        Ok(nll)
    };

    // Golden-section over t = ln(tau).
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_TAU_LO, LOG_TAU_HI);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    while (b - a).abs() > LOG_TAU_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
    }
    let t_star = 0.5 * (a + b);
    let nll_star = nll_at_tau(logit_sets, labels, t_star.exp())?;
    trace.push((t_star.exp(), nll_star));

    let val_nll_before = nll_at_tau(logit_sets, labels, 1.0)?;
    let (tau, val_nll_after) = if nll_star <= val_nll_before {
        (t_star.exp(), nll_star)
    } else {
        (1.0, val_nll_before)
    };
    Ok(CalibrationResult {
        tau,
        val_nll_before,
        val_nll_after,
        trace,
    })
}

/// One selection candidate: a finished run's validation NLL.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub trial_index: usize,
    pub data_seed: u64,
    pub val_nll: f64,
}

/// Ranks hyper-parameter trials by mean validation NLL across data seeds
/// and returns the best `k` trial indices (ties by lowest trial index).
pub fn select_trials(candidates: &[Candidate], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Selection("k must be at least 1".into()));
    }
    let mut trials: Vec<usize> = candidates.iter().map(|c| c.trial_index).collect();
    trials.sort_unstable();
    trials.dedup();
    if trials.len() < k {
        return Err(Error::Selection(format!(
            "need {k} trials, only {} available",
            trials.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = trials
        .into_iter()
        .map(|trial| {
            let nlls: Vec<f64> = candidates
                .iter()
                .filter(|c| c.trial_index == trial)
                .map(|c| c.val_nll)
                .collect();
            let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
            (mean, trial)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite nll").then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, trial)| trial).collect())
}
