//! Spectral weight normalization via power iteration.

use serde::{Deserialize, Serialize};

use super::Mat;
use crate::rng::Rng;

/// Below this estimate a matrix is treated as zero and left unnormalized.
pub const EPS: f64 = 1e-12;

/// Power iterations used when normalizing statically (a fresh matrix);
/// training steps refresh with a single iteration. Random square matrices
/// have small top spectral gaps, so a static pass needs on the order of a
/// hundred iterations before the estimate is good to three digits.
pub const STATIC_ITERS: usize = 100;

/// Persistent singular-vector estimate for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Left singular-vector estimate, length `rows`.
    pub u: Vec<f64>,
    /// Right singular-vector estimate, length `cols`.
    pub v: Vec<f64>,
}

impl SpectralState {
    /// Random unit vectors; the standard warm start for power iteration.
    pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralState { u, v }
    }

    /// One or more power-iteration rounds:
    /// `v <- normalize(W^T u)`, `u <- normalize(W v)`.
    pub fn power_iterate(&mut self, w: &Mat, iters: usize) {
        for _ in 0..iters {
            let mut v = w.matvec_t(&self.u);
            if !normalize(&mut v) {
                return; // zero matrix: keep previous estimates
            }
            let mut u = w.matvec(&v);
            if !normalize(&mut u) {
                return;
            }
            self.u = u;
            self.v = v;
        }
    }

    /// Current largest-singular-value estimate `u^T W v`.
    pub fn sigma_estimate(&self, w: &Mat) -> f64 {
        let wv = w.matvec(&self.v);
        self.u.iter().zip(&wv).map(|(a, b)| a * b).sum()
    }
}

fn normalize(x: &mut [f64]) -> bool {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < EPS {
        return false;
    }
    for v in x.iter_mut() {
        *v /= norm;
    }
    true
}

/// Divides `w` by its power-iteration spectral-norm estimate, updating the
/// persistent state in place. A matrix whose estimate falls below [`EPS`]
/// (the zero-matrix guard) is returned unchanged.
pub fn spectral_normalize(w: &Mat, power_iters: usize, state: &mut SpectralState) -> Mat {
    state.power_iterate(w, power_iters);
    let sigma = state.sigma_estimate(w);
    if sigma < EPS {
        return w.clone();
    }
    w.scale(1.0 / sigma)
}
