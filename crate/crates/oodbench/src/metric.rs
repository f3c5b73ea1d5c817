//! In-domain metrics (top-k accuracy, NLL, ECE) and out-domain metrics
//! (rank-based AUC, quantile thresholding, confusion rates of the
//! abstention rule).

use crate::error::{Error, Result};

/// Floor applied to the true-class probability inside [`nll`] so a
/// saturated softmax cannot produce an infinite metric.
pub const NLL_PROB_FLOOR: f64 = 1e-12;

/// Default number of equal-width confidence bins for [`ece`].
pub const DEFAULT_ECE_BINS: usize = 15;

/// A batch of probability predictions with their true labels.
///
/// Rows must lie on the simplex within 1e-9 and labels must be in range.
#[derive(Clone, Debug)]
pub struct PredictionBatch {
    probabilities: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl PredictionBatch {
    pub fn new(probabilities: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probabilities.is_empty() || probabilities.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} probability rows vs {} labels",
                probabilities.len(),
                labels.len()
            )));
        }
        let num_classes = probabilities[0].len();
        if num_classes == 0 {
            return Err(Error::shape("probability rows are empty"));
        }
        for (i, row) in probabilities.iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::shape(format!("row {i} has ragged width")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < -1e-12 || !p.is_finite()) {
                return Err(Error::contract(format!(
                    "row {i} is not on the simplex (sum {sum})"
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(PredictionBatch {
            probabilities,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probabilities[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Index of the largest probability; ties resolve to the lowest class.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose true label is among the `k` largest
/// probabilities, ties broken by lowest class index.
pub fn acc_topk(batch: &PredictionBatch, k: usize) -> Result<f64> {
    if k == 0 || k > batch.num_classes() {
        return Err(Error::parameter(format!(
            "k = {k} out of range for {} classes",
            batch.num_classes()
        )));
    }
    let mut hits = 0usize;
    for i in 0..batch.len() {
        let row = batch.row(i);
        let label = batch.label(i);
        // The label is in the top k iff fewer than k classes strictly beat
        // it, counting equal-probability classes with lower index as ahead.
        let p_true = row[label];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|(c, p)| **p > p_true || (**p == p_true && *c < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Mean negative log-probability of the true class, floored at
/// [`NLL_PROB_FLOOR`].
pub fn nll(batch: &PredictionBatch) -> f64 {
    let total: f64 = (0..batch.len())
        .map(|i| -batch.row(i)[batch.label(i)].max(NLL_PROB_FLOOR).ln())
        .sum();
    total / batch.len() as f64
}

/// Expected calibration error over `num_bins` equal-width confidence bins.
///
/// Confidence is the largest probability of a row; bins partition [0, 1]
/// left-closed with a right-closed last bin; empty bins contribute zero.
pub fn ece(batch: &PredictionBatch, num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::parameter("ece needs at least one bin"));
    }
    let n = batch.len();
    let mut bin_count = vec![0usize; num_bins];
    let mut bin_conf = vec![0.0f64; num_bins];
    let mut bin_correct = vec![0usize; num_bins];
    for i in 0..n {
        let row = batch.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let bin = ((conf * num_bins as f64) as usize).min(num_bins - 1);
        bin_count[bin] += 1;
        bin_conf[bin] += conf;
        if pred == batch.label(i) {
            bin_correct[bin] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..num_bins {
        if bin_count[b] == 0 {
            continue;
        }
        let weight = bin_count[b] as f64 / n as f64;
        let acc = bin_correct[b] as f64 / bin_count[b] as f64;
        let conf = bin_conf[b] / bin_count[b] as f64;
        total += weight * (acc - conf).abs();
    }
    Ok(total)
}

/// Probability that a random out-domain score exceeds a random in-domain
/// score, ties counted 1/2 (the Mann-Whitney convention), computed with
/// midranks in `O(n log n)`.
pub fn auc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::parameter("auc needs nonempty score pools"));
    }
    if in_scores.iter().chain(out_scores).any(|v| !v.is_finite()) {
        return Err(Error::numeric("auc scores must be finite"));
    }
    let n_in = in_scores.len();
    let n_out = out_scores.len();
    let mut tagged: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, false))
        .chain(out_scores.iter().map(|&s| (s, true)))
        .collect();
    tagged.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Midranks are exact multiples of 1/2, so the rank sum is exact for
    // any pool size this crate handles.
    let mut rank_sum_out = 0.0f64;
    let mut i = 0;
    while i < tagged.len() {
        let mut j = i;
        while j + 1 < tagged.len() && tagged[j + 1].0 == tagged[i].0 {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for item in &tagged[i..=j] {
            if item.1 {
                rank_sum_out += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_out - (n_out * (n_out + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

/// Nearest-rank upper quantile: the `ceil(level * n)`-th smallest value.
/// The result is a member of the pool by construction.
pub fn quantile_threshold(val_scores: &[f64], level: f64) -> Result<f64> {
    if val_scores.is_empty() {
        return Err(Error::parameter("quantile of an empty pool"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::parameter(format!(
            "quantile level must lie in (0, 1), got {level}"
        )));
    }
    let mut sorted = val_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let rank = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Confusion rates of the abstention rule "declare out-domain when the
/// uncertainty score strictly exceeds `theta`".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionRates {
    pub in_as_in: f64,
    pub in_as_out: f64,
    pub out_as_in: f64,
    pub out_as_out: f64,
}

/// Computes the four confusion rates. The complements are derived by
/// subtraction so the identities `InAsIn + InAsOut = 1` and
/// `OutAsIn + OutAsOut = 1` hold exactly.
pub fn confusion_rates(
    in_scores: &[f64],
    out_scores: &[f64],
    theta: f64,
) -> Result<ConfusionRates> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::parameter("confusion rates need nonempty pools"));
    }
    let in_as_in =
        in_scores.iter().filter(|&&s| s <= theta).count() as f64 / in_scores.len() as f64;
    let out_as_out =
        out_scores.iter().filter(|&&s| s > theta).count() as f64 / out_scores.len() as f64;
    Ok(ConfusionRates {
        in_as_in,
        in_as_out: 1.0 - in_as_in,
        out_as_in: 1.0 - out_as_out,
        out_as_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn batch(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PredictionBatch {
        PredictionBatch::new(rows, labels).unwrap()
    }

    #[test]
    fn topk_hand_cases() {
        let b = batch(
            vec![
                vec![0.9, 0.05, 0.05],
                vec![0.1, 0.8, 0.1],
                vec![0.2, 0.3, 0.5],
            ],
            vec![0, 1, 2],
        );
        assert_eq!(acc_topk(&b, 1).unwrap(), 1.0);
        assert_eq!(acc_topk(&b, 3).unwrap(), 1.0);

        // top-2 membership {yes, no, yes} -> 2/3
        let b = batch(
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.3, 0.5],
            ],
            vec![1, 2, 2],
        );
        assert!((acc_topk(&b, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn topk_ties_prefer_lower_class_index() {
        let b = batch(vec![vec![0.5, 0.5]], vec![1]);
        // Class 0 wins the tie, so label 1 misses at k = 1.
        assert_eq!(acc_topk(&b, 1).unwrap(), 0.0);
        let b = batch(vec![vec![0.5, 0.5]], vec![0]);
        assert_eq!(acc_topk(&b, 1).unwrap(), 1.0);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let b = batch(vec![vec![1.0, 0.0]], vec![0]);
        assert!(acc_topk(&b, 0).is_err());
        assert!(acc_topk(&b, 3).is_err());
    }

    #[test]
    fn nll_hand_cases() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        assert_eq!(nll(&b), 0.0);

        let e_inv = (-1.0f64).exp();
        let b = batch(vec![vec![e_inv, 1.0 - e_inv]], vec![0]);
        assert!((nll(&b) - 1.0).abs() < 1e-12);

        let b = batch(vec![vec![0.5, 0.5], vec![0.25, 0.75]], vec![0, 0]);
        assert!((nll(&b) - 1.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ece_perfectly_calibrated_is_zero() {
        let b = batch(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![0, 0]);
        assert_eq!(ece(&b, DEFAULT_ECE_BINS).unwrap(), 0.0);
    }

    #[test]
    fn ece_hand_binning_case() {
        // confidences (0.6, 0.6, 0.9, 0.9), correctness (1, 0, 1, 1):
        // (2/4)*|0.5 - 0.6| + (2/4)*|1.0 - 0.9| = 0.1
        let b = batch(
            vec![
                vec![0.6, 0.4],
                vec![0.6, 0.4],
                vec![0.9, 0.1],
                vec![0.9, 0.1],
            ],
            vec![0, 1, 0, 0],
        );
        assert!((ece(&b, DEFAULT_ECE_BINS).unwrap() - 0.1).abs() < 1e-12);
    }

    /// Direct-summation ECE oracle: explicit per-bin membership lists.
    pub(crate) fn ece_oracle(batch: &PredictionBatch, num_bins: usize) -> f64 {
        let n = batch.len();
        let mut total = 0.0;
        for b in 0..num_bins {
            let lo = b as f64 / num_bins as f64;
            let hi = (b + 1) as f64 / num_bins as f64;
            let members: Vec<usize> = (0..n)
                .filter(|&i| {
                    let conf = batch.row(i)[argmax(batch.row(i))];
                    if b == num_bins - 1 {
                        conf >= lo && conf <= hi
                    } else {
                        conf >= lo && conf < hi
                    }
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let acc = members
                .iter()
                .filter(|&&i| argmax(batch.row(i)) == batch.label(i))
                .count() as f64
                / members.len() as f64;
            let conf = members
                .iter()
                .map(|&i| batch.row(i)[argmax(batch.row(i))])
                .sum::<f64>()
                / members.len() as f64;
            total += members.len() as f64 / n as f64 * (acc - conf).abs();
        }
        total
    }

    #[test]
    fn ece_matches_direct_summation_oracle() {
        let mut r = rng::rng_from_seed(42);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let a: f64 = r.gen_range(0.01..10.0);
            let b: f64 = r.gen_range(0.01..10.0);
            let c: f64 = r.gen_range(0.01..10.0);
            let sum = a + b + c;
            rows.push(vec![a / sum, b / sum, c / sum]);
            labels.push(r.gen_range(0..3));
        }
        let batch = PredictionBatch::new(rows, labels).unwrap();
        let fast = ece(&batch, DEFAULT_ECE_BINS).unwrap();
        let slow = ece_oracle(&batch, DEFAULT_ECE_BINS);
        assert!((fast - slow).abs() < 1e-12);
    }

    /// O(n^2) pairwise AUC oracle on integer half-counts.
    pub(crate) fn auc_oracle(in_scores: &[f64], out_scores: &[f64]) -> f64 {
        let mut twice_wins: u64 = 0;
        for &o in out_scores {
            for &i in in_scores {
                if o > i {
                    twice_wins += 2;
                } else if o == i {
                    twice_wins += 1;
                }
            }
        }
        (twice_wins as f64 / 2.0) / (in_scores.len() as f64 * out_scores.len() as f64)
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.5);
        assert!((auc(&[0.1, 0.4], &[0.2, 0.5]).unwrap() - 0.75).abs() < 1e-15);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_oracle_exactly() {
        let mut r = rng::rng_from_seed(7);
        for case in 0..30 {
            let n_in = r.gen_range(1..=120);
            let n_out = r.gen_range(1..=120);
            // Quantized scores produce plenty of ties.
            let quant = if case % 2 == 0 { 4.0 } else { 1024.0 };
            let draw = |r: &mut rng::Rng| (r.gen_range(0.0..1.0) * quant).round() / quant;
            let in_scores: Vec<f64> = (0..n_in).map(|_| draw(&mut r)).collect();
            let out_scores: Vec<f64> = (0..n_out).map(|_| draw(&mut r)).collect();
            let fast = auc(&in_scores, &out_scores).unwrap();
            let slow = auc_oracle(&in_scores, &out_scores);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}");
        }
    }

    #[test]
    fn auc_complement_identity_for_tie_free_pools() {
        let in_scores = [0.11, 0.32, 0.53];
        let out_scores = [0.22, 0.74];
        let a = auc(&in_scores, &out_scores).unwrap();
        let b = auc(&out_scores, &in_scores).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_nearest_rank_cases() {
        let scores: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(quantile_threshold(&scores, 0.95).unwrap(), 95.0);
        assert_eq!(quantile_threshold(&[3.3; 7], 0.95).unwrap(), 3.3);
        let pool: Vec<f64> = (0..37).map(|v| (v * 7 % 37) as f64).collect();
        assert!(
            quantile_threshold(&pool, 0.90).unwrap() <= quantile_threshold(&pool, 0.95).unwrap()
        );
        assert!(quantile_threshold(&scores, 0.0).is_err());
        assert!(quantile_threshold(&scores, 1.0).is_err());
    }

    #[test]
    fn quantile_covers_the_requested_mass() {
        let mut r = rng::rng_from_seed(3);
        for _ in 0..50 {
            let n = r.gen_range(1..=200);
            let pool: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
            let theta = quantile_threshold(&pool, 0.95).unwrap();
            let frac = pool.iter().filter(|&&s| s <= theta).count() as f64 / n as f64;
            assert!(frac >= 0.95);
            // Minimality over pool members: any strictly smaller member
            // covers less than the requested mass.
            for &candidate in &pool {
                if candidate < theta {
                    let f = pool.iter().filter(|&&s| s <= candidate).count() as f64 / n as f64;
                    assert!(f < 0.95);
                }
            }
        }
    }

    #[test]
    fn confusion_rates_hand_case() {
        // in = {1,2,3,4}, out = {3,5}, theta = 3: only 4 exceeds, 5 exceeds.
        let rates = confusion_rates(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0], 3.0).unwrap();
        assert_eq!(rates.in_as_in, 0.75);
        assert_eq!(rates.in_as_out, 0.25);
        assert_eq!(rates.out_as_out, 0.5);
        assert_eq!(rates.out_as_in, 0.5);
    }

    #[test]
    fn confusion_identities_hold_exactly() {
        let mut r = rng::rng_from_seed(11);
        for _ in 0..40 {
            let pool = |r: &mut rng::Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
            };
            let in_scores = pool(&mut r, r.gen_range(1..50));
            let out_scores = pool(&mut r, r.gen_range(1..50));
            let theta = r.gen_range(-1.0..1.0);
            let rates = confusion_rates(&in_scores, &out_scores, theta).unwrap();
            assert_eq!(rates.in_as_in + rates.in_as_out, 1.0);
            assert_eq!(rates.out_as_in + rates.out_as_out, 1.0);
        }
    }

    #[test]
    fn all_in_scores_below_theta_gives_in_as_in_one() {
        let rates = confusion_rates(&[0.1, 0.2, 0.3], &[0.9], 0.3).unwrap();
        assert_eq!(rates.in_as_in, 1.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ece_is_permutation_invariant_and_bounded(
                seed in 0u64..1000, bins in 1usize..20) {
                let mut r = rng::rng_from_seed(seed);
                let n = r.gen_range(1..60);
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                for _ in 0..n {
                    let a: f64 = r.gen_range(0.01..5.0);
                    let b: f64 = r.gen_range(0.01..5.0);
                    rows.push(vec![a / (a + b), b / (a + b)]);
                    labels.push(r.gen_range(0..2));
                }
                let batch = PredictionBatch::new(rows.clone(), labels.clone()).unwrap();
                let value = ece(&batch, bins).unwrap();
                prop_assert!((0.0..=1.0).contains(&value));

                let mut perm: Vec<usize> = (0..n).collect();
                crate::data::shuffle(&mut perm, &mut r);
                let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
                let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
                let batch_p = PredictionBatch::new(rows_p, labels_p).unwrap();
                prop_assert!((ece(&batch_p, bins).unwrap() - value).abs() < 1e-15);
            }

            #[test]
            fn monotone_transform_leaves_auc_and_rates_unchanged(seed in 0u64..1000) {
                let mut r = rng::rng_from_seed(seed);
                let pool = |r: &mut rng::Rng, n: usize| -> Vec<f64> {
                    (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()
                };
                let n_in = r.gen_range(2..40);
                let n_out = r.gen_range(2..40);
                let n_val = r.gen_range(2..40);
                let in_scores = pool(&mut r, n_in);
                let out_scores = pool(&mut r, n_out);
                let val_scores = pool(&mut r, n_val);

                // Strictly increasing transform.
                let f = |x: f64| (1.5 * x).exp() + 0.25 * x;

                let auc_before = auc(&in_scores, &out_scores).unwrap();
                let theta = quantile_threshold(&val_scores, 0.95).unwrap();
                let rates_before = confusion_rates(&in_scores, &out_scores, theta).unwrap();

                let tf = |v: &[f64]| v.iter().map(|&x| f(x)).collect::<Vec<f64>>();
                let auc_after = auc(&tf(&in_scores), &tf(&out_scores)).unwrap();
                let theta_after = quantile_threshold(&tf(&val_scores), 0.95).unwrap();
                let rates_after =
                    confusion_rates(&tf(&in_scores), &tf(&out_scores), theta_after).unwrap();

                prop_assert!((auc_before - auc_after).abs() < 1e-12);
                prop_assert_eq!(rates_before, rates_after);
            }
        }
    }
}
