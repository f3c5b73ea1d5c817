//! Per-class Gaussian density model over featurizer outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One Gaussian per class plus class proportions, fitted on in-domain
/// validation features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmModel {
    dim: usize,
    means: Vec<Vec<f64>>,
    /// Lower Cholesky factor of each regularized covariance, row-major.
    chol: Vec<Vec<f64>>,
    /// Log-determinant of each regularized covariance.
    log_det: Vec<f64>,
    weights: Vec<f64>,
}

impl GmmModel {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }
}

/// Fits class-conditional Gaussians: per-class mean, sample covariance with
/// an `n_c` denominator plus `eps * I` regularization
/// (`eps = 1e-6 * trace / dim`), and weights `n_c / N`.
pub fn fit_gmm(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<GmmModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Fit("features and labels disagree or are empty".into()));
    }
    let dim = features[0].len();
    let n_total = features.len() as f64;

    let mut means = Vec::with_capacity(num_classes);
    let mut chol = Vec::with_capacity(num_classes);
    let mut log_det = Vec::with_capacity(num_classes);
    let mut weights = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let rows: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(f, _)| f)
            .collect();
        if rows.len() < 2 {
            return Err(Error::Fit(format!(
                "class {class} has {} validation examples; need at least 2",
                rows.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for row in &rows {
            for i in 0..dim {
                let di = row[i] - mean[i];
                for j in 0..dim {
                    cov[i * dim + j] += di * (row[j] - mean[j]) / n;
                }
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        let mut eps = 1e-6 * trace / dim as f64;
        if eps <= 0.0 {
            eps = 1e-12;
        }
        for i in 0..dim {
            cov[i * dim + i] += eps;
        }
        let factor = cholesky(&cov, dim).ok_or_else(|| {
            Error::Fit(format!("class {class} covariance is not positive definite"))
        })?;
        let ld = 2.0
            * (0..dim)
                .map(|i| factor[i * dim + i].ln())
                .sum::<f64>();
        means.push(mean);
        chol.push(factor);
        log_det.push(ld);
        weights.push(n / n_total);
    }
    Ok(GmmModel {
        dim,
        means,
        chol,
        log_det,
        weights,
    })
}

/// Minus the weight-averaged density value (density, not log-density):
/// large (near zero) far from every class, very negative near a mean.
pub fn score_gmm(gmm: &GmmModel, feature: &[f64]) -> Result<f64> {
    if feature.len() != gmm.dim {
        return Err(Error::shape(format!(
            "feature dim {} does not match gmm dim {}",
            feature.len(),
            gmm.dim
        )));
    }
    let mut total = 0.0;
    for class in 0..gmm.num_classes() {
        total += gmm.weights[class] * density(gmm, class, feature);
    }
    Ok(-total)
}

fn density(gmm: &GmmModel, class: usize, feature: &[f64]) -> f64 {
    let dim = gmm.dim;
    let delta: Vec<f64> = feature
        .iter()
        .zip(&gmm.means[class])
        .map(|(x, m)| x - m)
        .collect();
    // Solve L w = delta; the quadratic form is ||w||^2.
    let l = &gmm.chol[class];
    let mut w = vec![0.0; dim];
    for i in 0..dim {
        let mut acc = delta[i];
        for j in 0..i {
            acc -= l[i * dim + j] * w[j];
        }
        w[i] = acc / l[i * dim + i];
    }
    let quad: f64 = w.iter().map(|v| v * v).sum();
    (-0.5 * quad - 0.5 * gmm.log_det[class] - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln())
        .exp()
}

/// Standard Cholesky factorization; `None` when the matrix is not
/// positive definite.
fn cholesky(matrix: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut acc = matrix[i * dim + j];
            for k in 0..j {
                acc -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l[i * dim + i] = acc.sqrt();
            } else {
                l[i * dim + j] = acc / l[j * dim + j];
            }
        }
    }
    Some(l)
}
