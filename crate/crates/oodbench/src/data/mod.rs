//! Dataset generation, ingestion, featurization, and splits.

pub mod reference;
pub mod tabular;
pub mod ward;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Mode, Predictor};
use crate::rng;

pub use ward::{root_partition, ward_tree, ClassPartition, Merge, MergeTree};

/// Which leg of the protocol a dataset plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// A dense labelled dataset: `n x dim` features in row-major order.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    pub role: Role,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
        role: Role,
        provenance: String,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::shape(format!(
                "features length {} does not match {} rows of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if labels.is_empty() {
            return Err(Error::data("dataset must contain at least one row"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("dataset contains non-finite features"));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            class_count,
            role,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Content digest over features and labels; part of run provenance.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        for v in &self.features {
            hasher.update(v.to_le_bytes());
        }
        for l in &self.labels {
            hasher.update((*l as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Rows whose label is in `class_ids`. With `remap`, labels become the
    /// position of their class in `class_ids` (contiguous `0..m`).
    pub fn filter_classes(&self, class_ids: &[usize], remap: bool, role: Role) -> Result<Dataset> {
        let mut position = vec![None; self.class_count];
        for (pos, &c) in class_ids.iter().enumerate() {
            if c >= self.class_count {
                return Err(Error::data(format!("class {c} not present in dataset")));
            }
            position[c] = Some(pos);
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(pos) = position[self.labels[i]] {
                features.extend_from_slice(self.row(i));
                labels.push(if remap { pos } else { self.labels[i] });
            }
        }
        if labels.is_empty() {
            return Err(Error::data("class filter selected no rows"));
        }
        let class_count = if remap {
            class_ids.len()
        } else {
            self.class_count
        };
        Dataset::new(
            features,
            self.dim,
            labels,
            class_count,
            role,
            format!("{} [filtered {} classes]", self.provenance, class_ids.len()),
        )
    }

    /// Mean feature vector over all rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.len() as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        mean
    }

    /// Class proportions as a probability vector over `class_count`.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut dist = vec![0.0; self.class_count];
        for &l in &self.labels {
            dist[l] += 1.0;
        }
        let n = self.len() as f64;
        for d in dist.iter_mut() {
            *d /= n;
        }
        dist
    }
}

/// Parameters of the synthetic Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Number of well-separated super-clusters the class means live in.
    pub supercluster_count: usize,
    /// Scatter of class means around their super-cluster center.
    pub spread: f64,
    /// Isotropic point noise around each class mean.
    pub noise: f64,
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::parameter("blob spec needs at least 2 classes"));
        }
        if self.per_class == 0 {
            return Err(Error::parameter("per_class must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::parameter("dim must be at least 1"));
        }
        if self.supercluster_count == 0 || self.supercluster_count > self.classes {
            return Err(Error::parameter(
                "supercluster_count must lie in 1..=classes",
            ));
        }
        if self.spread < 0.0 || self.noise < 0.0 {
            return Err(Error::parameter("spread and noise must be nonnegative"));
        }
        Ok(())
    }
}

/// Class-mean layout for a blob spec: super-cluster centers are drawn at a
/// 10x larger scale than the within-cluster spread, classes assigned
/// round-robin. Deterministic per seed.
pub fn blob_class_means(spec: &BlobSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut center_rng = rng::stream(seed, &["blobs", "centers"]);
    let center_scale = 10.0 * spec.spread.max(spec.noise).max(1.0);
    let centers: Vec<Vec<f64>> = (0..spec.supercluster_count)
        .map(|_| {
            (0..spec.dim)
                .map(|_| center_scale * sample_normal(&mut center_rng))
                .collect()
        })
        .collect();
    let mut mean_rng = rng::stream(seed, &["blobs", "means"]);
    Ok((0..spec.classes)
        .map(|c| {
            let center = &centers[c % spec.supercluster_count];
            center
                .iter()
                .map(|&v| v + spec.spread * sample_normal(&mut mean_rng))
                .collect()
        })
        .collect())
}

/// Synthetic dataset: isotropic Gaussian blobs around per-class means that
/// live inside well-separated super-clusters. Rows are grouped by class in
/// class order.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    let means = blob_class_means(spec, seed)?;
    let mut point_rng = rng::stream(seed, &["blobs", "points"]);
    let mut features = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in mean {
                features.push(m + spec.noise * sample_normal(&mut point_rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        features,
        spec.dim,
        labels,
        spec.classes,
        Role::Train,
        format!(
            "blobs(classes={},per_class={},dim={},superclusters={},spread={},noise={},seed={})",
            spec.classes,
            spec.per_class,
            spec.dim,
            spec.supercluster_count,
            spec.spread,
            spec.noise,
            seed
        ),
    )
}

fn sample_normal(rng: &mut rng::Rng) -> f64 {
    use rand::Rng as _;
    rng.sample(StandardNormal)
}

/// Per-class mean of `phi(x)`, one row per class. Without a featurizer,
/// `phi` is the identity on raw features.
pub fn class_prototypes(dataset: &Dataset, featurizer: Option<&Predictor>) -> Result<Vec<Vec<f64>>> {
    let out_dim = match featurizer {
        Some(p) => {
            if p.config().network_input_dim() != dataset.dim() {
                return Err(Error::shape(format!(
                    "featurizer expects input dim {}, dataset has {}",
                    p.config().network_input_dim(),
                    dataset.dim()
                )));
            }
            p.config().feature_dim
        }
        None => dataset.dim(),
    };
    let mut sums = vec![vec![0.0; out_dim]; dataset.class_count()];
    let mut counts = vec![0usize; dataset.class_count()];
    for i in 0..dataset.len() {
        let label = dataset.label(i);
        counts[label] += 1;
        match featurizer {
            Some(p) => {
                let (_, trace) = p.forward(dataset.row(i), Mode::Eval)?;
                for (s, v) in sums[label].iter_mut().zip(trace.features()) {
                    *s += v;
                }
            }
            None => {
                for (s, v) in sums[label].iter_mut().zip(dataset.row(i)) {
                    *s += v;
                }
            }
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("class {empty} has no examples")));
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        for v in sum.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(sums)
}

/// Seeded train/validation split description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub data_seed: u64,
    pub train_fraction: f64,
}

impl SplitSpec {
    pub fn new(data_seed: u64) -> Self {
        SplitSpec {
            data_seed,
            train_fraction: 0.9,
        }
    }
}

/// Seeded permutation split: the first `ceil(fraction * n)` permuted rows
/// become the training set, the remainder the validation set.
pub fn split_train_val(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(0.0 < spec.train_fraction && spec.train_fraction < 1.0) {
        return Err(Error::parameter(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::parameter("need at least 2 rows to split"));
    }
    let train_count = (spec.train_fraction * n as f64).ceil() as usize;
    if train_count == 0 || train_count >= n {
        return Err(Error::parameter(format!(
            "split of {n} rows at fraction {} leaves one side empty",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(spec.data_seed, &["split"]);
    shuffle(&mut order, &mut rng);

    let gather = |indices: &[usize], role: Role| -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * dataset.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(dataset.row(i));
            labels.push(dataset.label(i));
        }
        Dataset::new(
            features,
            dataset.dim(),
            labels,
            dataset.class_count(),
            role,
            format!(
                "{} [split seed={} fraction={} role={role:?}]",
                dataset.provenance, spec.data_seed, spec.train_fraction
            ),
        )
    };
    let train = gather(&order[..train_count], Role::Train)?;
    let val = gather(&order[train_count..], Role::Val)?;
    Ok((train, val))
}

/// Fisher-Yates driven by the crate RNG.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut rng::Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
