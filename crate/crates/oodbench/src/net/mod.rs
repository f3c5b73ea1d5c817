//! Minimal differentiable feedforward engine.
//!
//! A [`Predictor`] is a fully connected featurizer (ReLU activations,
//! optional dropout and spectral weight normalization) followed by a
//! classification head. Forward passes record a [`ForwardTrace`] holding
//! everything reverse mode needs; [`Predictor::backward`] turns an upstream
//! logit gradient into parameter gradients.
//!
//! The engine is deliberately small: dense layers only, `f64` everywhere,
//! and all randomness drawn from caller-supplied seeds so that every pass
//! is a pure function of `(params, x, seed, mode)`.

pub mod checkpoint;
pub mod sgd;
pub mod spectral;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use sgd::SgdState;
pub use spectral::{spectral_normalize, SpectralState};

/// Classification head variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Plain linear map to `num_classes` logits.
    Linear,
    /// Linear map followed by the elementwise transform `z -> exp(-z^2)`.
    Rbf,
    /// `T` subnetwork heads over a shared trunk: consumes `T` stacked
    /// inputs and emits `T * num_classes` logits.
    Mimo(usize),
}

/// Desk-scale stand-in for the backbone-size ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeTier {
    Small,
    Large,
}

impl SizeTier {
    pub fn hidden_widths(self) -> Vec<usize> {
        match self {
            SizeTier::Small => vec![64, 64],
            SizeTier::Large => vec![256, 256, 256],
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            SizeTier::Small => 32,
            SizeTier::Large => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeTier::Small => "small",
            SizeTier::Large => "large",
        }
    }
}

/// Architecture and regularization description of a predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub input_dim: usize,
    /// Featurizer hidden widths; the featurizer ends with one extra linear
    /// layer onto `feature_dim`.
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub head_kind: HeadKind,
    /// Dropout rate applied after every hidden featurizer layer.
    pub dropout_rate: f64,
    /// Normalize every featurizer weight matrix by its spectral norm.
    pub spectral_norm: bool,
    pub size_tier: SizeTier,
}

impl PredictorConfig {
    /// Config for a size tier with the tier's standard widths.
    pub fn for_tier(tier: SizeTier, input_dim: usize, num_classes: usize) -> Self {
        PredictorConfig {
            input_dim,
            hidden_widths: tier.hidden_widths(),
            feature_dim: tier.feature_dim(),
            num_classes,
            head_kind: HeadKind::Linear,
            dropout_rate: 0.0,
            spectral_norm: false,
            size_tier: tier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::parameter("input_dim must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::parameter("feature_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::parameter("num_classes must be at least 2"));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::parameter("every hidden width must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::parameter("dropout_rate must lie in [0, 1)"));
        }
        if let HeadKind::Mimo(t) = self.head_kind {
            if t == 0 {
                return Err(Error::parameter("mimo requires at least one subnetwork"));
            }
        }
        Ok(())
    }

    /// Number of subnetworks (1 for non-MIMO heads).
    pub fn subnetworks(&self) -> usize {
        match self.head_kind {
            HeadKind::Mimo(t) => t,
            _ => 1,
        }
    }

    /// Width of the vector `forward` consumes (`T * input_dim` for MIMO).
    pub fn network_input_dim(&self) -> usize {
        self.input_dim * self.subnetworks()
    }

    /// Length of the logit vector (`T * num_classes` for MIMO).
    pub fn logit_dim(&self) -> usize {
        self.num_classes * self.subnetworks()
    }

    /// Featurizer layer dimensions as `(in, out)` pairs.
    fn featurizer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.network_input_dim();
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.feature_dim));
        dims
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `y = W x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            y[r] = acc;
        }
        y
    }

    /// `y = W^T x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (yc, w) in y.iter_mut().zip(row) {
                *yc += w * xr;
            }
        }
        y
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// One dense layer: `y = W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// Uniform fan-in/fan-out scaled init (Glorot), biases zero.
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Mat::zeros(out_dim, in_dim);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        Linear {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.data.len() + self.b.len()
    }
}

/// Forward-pass execution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Eval,
    /// Dropout masks drawn from the given seed.
    Train { dropout_seed: u64 },
}

struct LayerTrace {
    /// Activation entering the layer.
    input: Vec<f64>,
    /// `W x + b` before the nonlinearity.
    pre: Vec<f64>,
    /// Activation leaving the layer (post ReLU and dropout).
    post: Vec<f64>,
    /// Inverted-dropout scaling mask, when dropout was applied.
    mask: Option<Vec<f64>>,
}

/// Complete record of one forward pass, sufficient for reverse mode and
/// for bitwise replay.
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    /// Head linear output before any logit transform.
    head_pre: Vec<f64>,
    logits: Vec<f64>,
    param_version: u64,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Featurizer output `phi(x)` of this pass.
    pub fn features(&self) -> &[f64] {
        &self.layers.last().expect("featurizer is never empty").post
    }
}

/// Per-layer parameter gradients, same shapes as the parameters.
pub struct Gradients {
    pub featurizer: Vec<Linear>,
    pub head: Linear,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.featurizer {
            out.extend_from_slice(&layer.w.data);
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(&self.head.w.data);
        out.extend_from_slice(&self.head.b);
        out
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.featurizer.iter_mut().zip(&other.featurizer) {
            for (x, y) in a.w.data.iter_mut().zip(&b.w.data) {
                *x += scale * y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += scale * y;
            }
        }
        for (x, y) in self.head.w.data.iter_mut().zip(&other.head.w.data) {
            *x += scale * y;
        }
        for (x, y) in self.head.b.iter_mut().zip(&other.head.b) {
            *x += scale * y;
        }
    }
}

/// A feedforward predictor: featurizer plus classification head.
#[derive(Clone, Debug)]
pub struct Predictor {
    config: PredictorConfig,
    featurizer: Vec<Linear>,
    head: Linear,
    /// One power-iteration state per featurizer layer when spectral
    /// normalization is enabled.
    spectral: Vec<SpectralState>,
    init_seed: u64,
    /// Bumped on every parameter or spectral-state mutation; traces carry
    /// the version they were produced under.
    param_version: u64,
}

impl Predictor {
    /// Initializes a predictor from a seed: Glorot-uniform weights, zero
    /// biases. With spectral normalization enabled, the singular-vector
    /// estimates are warmed up with [`spectral::STATIC_ITERS`] iterations.
    pub fn init(config: PredictorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(init_seed, &["net", "init"]);
        let mut featurizer = Vec::new();
        for (in_dim, out_dim) in config.featurizer_dims() {
            featurizer.push(Linear::glorot(in_dim, out_dim, &mut rng));
        }
        let head = Linear::glorot(config.feature_dim, config.logit_dim(), &mut rng);
        let mut predictor = Predictor {
            config,
            featurizer,
            head,
            spectral: Vec::new(),
            init_seed,
            param_version: 0,
        };
        if predictor.config.spectral_norm {
            let mut spectral_rng = rng::stream(init_seed, &["net", "spectral"]);
            predictor.spectral = predictor
                .featurizer
                .iter()
                .map(|layer| SpectralState::random(layer.w.rows, layer.w.cols, &mut spectral_rng))
                .collect();
            predictor.refresh_spectral(spectral::STATIC_ITERS);
        }
        Ok(predictor)
    }

    /// Builds a predictor with all weights and biases zero (test helper).
    pub fn zeroed(config: PredictorConfig) -> Result<Self> {
        let mut p = Predictor::init(config, 0)?;
        let n = p.param_count();
        p.set_params(&vec![0.0; n])?;
        Ok(p)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    pub fn param_count(&self) -> usize {
        self.featurizer
            .iter()
            .map(Linear::param_count)
            .sum::<usize>()
            + self.head.param_count()
    }

    /// Flat parameter vector in layer order (each layer: row-major weights,
    /// then biases; featurizer layers first, head last).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.featurizer {
            out.extend_from_slice(&layer.w.data);
            out.extend_from_slice(&layer.b);
        }
        out.extend_from_slice(&self.head.w.data);
        out.extend_from_slice(&self.head.b);
        out
    }

    /// Replaces all parameters from a flat vector (inverse of
    /// [`Predictor::flatten_params`]).
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.featurizer {
            let nw = layer.w.data.len();
            layer.w.data.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        let nw = self.head.w.data.len();
        self.head.w.data.copy_from_slice(&flat[offset..offset + nw]);
        offset += nw;
        self.head.b.copy_from_slice(&flat[offset..]);
        self.param_version += 1;
        Ok(())
    }

    pub(crate) fn featurizer_layers(&self) -> &[Linear] {
        &self.featurizer
    }

    /// All linear layers in parameter order (featurizer first, head last).
    pub fn all_layers(&self) -> Vec<&Linear> {
        self.featurizer.iter().chain(std::iter::once(&self.head)).collect()
    }

    pub(crate) fn spectral_states(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub(crate) fn restore_spectral_states(&mut self, states: Vec<SpectralState>) {
        self.spectral = states;
        self.param_version += 1;
    }

    /// Runs `iters` power-iteration updates on every featurizer layer's
    /// singular-vector estimate. Call once per optimization step during
    /// training; no-op when spectral normalization is disabled.
    pub fn refresh_spectral(&mut self, iters: usize) {
        if !self.config.spectral_norm {
            return;
        }
        for (layer, state) in self.featurizer.iter().zip(self.spectral.iter_mut()) {
            state.power_iterate(&layer.w, iters);
        }
        self.param_version += 1;
    }

    /// Effective weight matrix of featurizer layer `idx` as used by the
    /// forward pass (spectral-normalized when enabled).
    fn effective_weight(&self, idx: usize) -> Mat {
        let layer = &self.featurizer[idx];
        if self.config.spectral_norm {
            let sigma = self.spectral[idx].sigma_estimate(&layer.w);
            if sigma >= spectral::EPS {
                return layer.w.scale(1.0 / sigma);
            }
        }
        layer.w.clone()
    }

    /// Forward pass. Returns the logit vector (`num_classes`, or
    /// `T * num_classes` for MIMO heads) and the trace backward consumes.
    ///
    /// Dropout is applied only in [`Mode::Train`]; callers wanting
    /// stochastic evaluation passes (MC-Dropout) request train mode
    /// explicitly with their own seed.
    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<(Vec<f64>, ForwardTrace)> {
        let expect = self.config.network_input_dim();
        if x.len() != expect {
            return Err(Error::shape(format!(
                "input length {} does not match expected {}",
                x.len(),
                expect
            )));
        }
        let mut dropout_rng = match mode {
            Mode::Train { dropout_seed } if self.config.dropout_rate > 0.0 => {
                Some(rng::stream(dropout_seed, &["net", "dropout"]))
            }
            _ => None,
        };

        let hidden_count = self.config.hidden_widths.len();
        let mut layers = Vec::with_capacity(hidden_count + 1);
        let mut activation = x.to_vec();
        for idx in 0..self.featurizer.len() {
            let w = self.effective_weight(idx);
            let mut pre = w.matvec(&activation);
            for (p, b) in pre.iter_mut().zip(&self.featurizer[idx].b) {
                *p += b;
            }
            let mut post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mask = if idx < hidden_count {
                dropout_rng.as_mut().map(|rng| {
                    let mask = dropout_mask(post.len(), self.config.dropout_rate, rng);
                    for (p, m) in post.iter_mut().zip(&mask) {
                        *p *= m;
                    }
                    mask
                })
            } else {
                None
            };
            let input = std::mem::replace(&mut activation, post.clone());
            layers.push(LayerTrace {
                input,
                pre,
                post,
                mask,
            });
        }

        let mut head_pre = self.head.w.matvec(&activation);
        for (p, b) in head_pre.iter_mut().zip(&self.head.b) {
            *p += b;
        }
        let logits = match self.config.head_kind {
            HeadKind::Rbf => rbf_map(&head_pre),
            _ => head_pre.clone(),
        };

        let trace = ForwardTrace {
            layers,
            head_pre,
            logits: logits.clone(),
            param_version: self.param_version,
        };
        Ok((logits, trace))
    }

    /// Recomputes the trace's logits from its stored inputs and masks.
    /// Used to check trace completeness: the result must be bitwise equal
    /// to [`ForwardTrace::logits`].
    pub fn replay(&self, trace: &ForwardTrace) -> Result<Vec<f64>> {
        self.check_version(trace)?;
        let mut activation = trace.layers[0].input.clone();
        for (idx, layer) in trace.layers.iter().enumerate() {
            let w = self.effective_weight(idx);
            let mut pre = w.matvec(&activation);
            for (p, b) in pre.iter_mut().zip(&self.featurizer[idx].b) {
                *p += b;
            }
            let mut post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            if let Some(mask) = &layer.mask {
                for (p, m) in post.iter_mut().zip(mask) {
                    *p *= m;
                }
            }
            activation = post;
        }
        let mut head_pre = self.head.w.matvec(&activation);
        for (p, b) in head_pre.iter_mut().zip(&self.head.b) {
            *p += b;
        }
        Ok(match self.config.head_kind {
            HeadKind::Rbf => rbf_map(&head_pre),
            _ => head_pre,
        })
    }

    fn check_version(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.param_version != self.param_version {
            return Err(Error::contract(
                "stale trace: parameters changed since the forward pass",
            ));
        }
        Ok(())
    }

    /// Reverse-mode pass: turns `dLoss/dlogits` into parameter gradients.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Gradients> {
        self.backward_impl(trace, dlogits).map(|(g, _)| g)
    }

    /// Like [`Predictor::backward`] but also returns `dLoss/dx`.
    pub fn backward_with_input(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
    ) -> Result<(Gradients, Vec<f64>)> {
        self.backward_impl(trace, dlogits)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
    ) -> Result<(Gradients, Vec<f64>)> {
        self.check_version(trace)?;
        if dlogits.len() != self.config.logit_dim() {
            return Err(Error::shape(format!(
                "dlogits length {} does not match logit dim {}",
                dlogits.len(),
                self.config.logit_dim()
            )));
        }

        // Head: undo the RBF transform if present, then the linear map.
        let dhead_pre: Vec<f64> = match self.config.head_kind {
            HeadKind::Rbf => trace
                .head_pre
                .iter()
                .zip(dlogits)
                .map(|(&z, &g)| g * (-2.0 * z * (-z * z).exp()))
                .collect(),
            _ => dlogits.to_vec(),
        };
        let features = trace.features();
        let mut head_grad = Linear::zeros(self.head.w.cols, self.head.w.rows);
        outer_accumulate(&mut head_grad.w, &dhead_pre, features);
        head_grad.b.copy_from_slice(&dhead_pre);
        let mut delta = self.head.w.matvec_t(&dhead_pre);

        let mut featurizer_grads: Vec<Linear> = self
            .featurizer
            .iter()
            .map(|l| Linear::zeros(l.w.cols, l.w.rows))
            .collect();

        for idx in (0..self.featurizer.len()).rev() {
            let layer_trace = &trace.layers[idx];
            if let Some(mask) = &layer_trace.mask {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            for (d, &pre) in delta.iter_mut().zip(&layer_trace.pre) {
                if pre <= 0.0 {
                    *d = 0.0;
                }
            }
            let grad = &mut featurizer_grads[idx];
            grad.b.copy_from_slice(&delta);
            if self.config.spectral_norm {
                let layer = &self.featurizer[idx];
                let sigma = self.spectral[idx].sigma_estimate(&layer.w);
                if sigma >= spectral::EPS {
                    // Forward used y = (W / sigma) a + b with sigma = u' W v
                    // and u, v constants, so
                    // dW = (delta (x) a) / sigma - (delta . (W a / sigma)) / sigma * (u (x) v).
                    // The recorded pre-activation gives W a / sigma = pre - b.
                    let dot: f64 = delta
                        .iter()
                        .zip(layer_trace.pre.iter().zip(&layer.b))
                        .map(|(d, (pre, b))| d * (pre - b))
                        .sum();
                    outer_accumulate(&mut grad.w, &delta, &layer_trace.input);
                    let state = &self.spectral[idx];
                    for r in 0..grad.w.rows {
                        for c in 0..grad.w.cols {
                            let v = grad.w.data[r * grad.w.cols + c] / sigma
                                - dot / sigma * state.u[r] * state.v[c];
                            grad.w.data[r * grad.w.cols + c] = v;
                        }
                    }
                    delta = layer.w.matvec_t(&delta).iter().map(|v| v / sigma).collect();
                    continue;
                }
            }
            outer_accumulate(&mut grad.w, &delta, &layer_trace.input);
            delta = self.featurizer[idx].w.matvec_t(&delta);
        }

        Ok((
            Gradients {
                featurizer: featurizer_grads,
                head: head_grad,
            },
            delta,
        ))
    }

    /// Zero-shaped gradient buffer for accumulation.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            featurizer: self
                .featurizer
                .iter()
                .map(|l| Linear::zeros(l.w.cols, l.w.rows))
                .collect(),
            head: Linear::zeros(self.head.w.cols, self.head.w.rows),
        }
    }
}

fn outer_accumulate(grad: &mut Mat, delta: &[f64], input: &[f64]) {
    debug_assert_eq!(grad.rows, delta.len());
    debug_assert_eq!(grad.cols, input.len());
    for (r, d) in delta.iter().enumerate() {
        let row = &mut grad.data[r * grad.cols..(r + 1) * grad.cols];
        for (g, a) in row.iter_mut().zip(input) {
            *g += d * a;
        }
    }
}

/// Elementwise `z -> exp(-z^2)`, the RBF logit transform.
pub fn rbf_map(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| (-v * v).exp()).collect()
}

/// Temperature softmax with max-subtraction for overflow safety.
///
/// Entries are positive and sum to one within 1e-12 for logit magnitudes
/// up to 1e4.
pub fn softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::parameter(format!(
            "softmax temperature must be positive and finite, got {tau}"
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax input contains non-finite logits"));
    }
    if z.is_empty() {
        return Err(Error::shape("softmax input is empty"));
    }
    Ok(softmax_unchecked(z, tau))
}

pub(crate) fn softmax_unchecked(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    use rand::Rng as _;
    let keep_scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

/// Inverted dropout on an activation vector: surviving units are scaled by
/// `1/(1 - rate)` so the expectation is preserved.
pub fn apply_dropout(activations: &[f64], rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(activations.to_vec());
    }
    let mask = dropout_mask(activations.len(), rate, rng);
    Ok(activations
        .iter()
        .zip(&mask)
        .map(|(a, m)| a * m)
        .collect())
}

/// Gradient of the tempered softmax output w.r.t. the input, for one output
/// class: backpropagates `d softmax(z/tau)_class / dx` through the network.
///
/// For MIMO heads `x` is the raw (un-replicated) input; the softmax in
/// question is the T-head average on the replicated input, and slot
/// gradients are folded back onto `x`.
pub fn softmax_input_gradient(
    predictor: &Predictor,
    x: &[f64],
    tau: f64,
    class: usize,
) -> Result<Vec<f64>> {
    let config = predictor.config();
    let classes = config.num_classes;
    if class >= classes {
        return Err(Error::parameter(format!(
            "class {class} out of range for {classes} classes"
        )));
    }
    let t = config.subnetworks();
    let net_x = replicate_input(x, t);
    let (logits, trace) = predictor.forward(&net_x, Mode::Eval)?;

    let mut dlogits = vec![0.0; logits.len()];
    for block in 0..t {
        let z = &logits[block * classes..(block + 1) * classes];
        let p = softmax_unchecked(z, tau);
        // d/dz_j of softmax(z/tau)_c = p_c (1{c=j} - p_j) / tau; MIMO output
        // averages the T blocks.
        let weight = 1.0 / (t as f64);
        for j in 0..classes {
            let indicator = if j == class { 1.0 } else { 0.0 };
            dlogits[block * classes + j] = weight * p[class] * (indicator - p[j]) / tau;
        }
    }
    let (_, dx_full) = predictor.backward_with_input(&trace, &dlogits)?;
    Ok(fold_input_gradient(&dx_full, x.len(), t))
}

/// Squared Frobenius norm of the Jacobian of the softmax output w.r.t. the
/// input, computed with one reverse-mode pass per class. Dropout is off.
pub fn input_jacobian_sqnorm(predictor: &Predictor, x: &[f64]) -> Result<f64> {
    input_jacobian_sqnorm_tempered(predictor, x, 1.0)
}

/// [`input_jacobian_sqnorm`] with the softmax taken at temperature `tau`.
pub fn input_jacobian_sqnorm_tempered(predictor: &Predictor, x: &[f64], tau: f64) -> Result<f64> {
    let classes = predictor.config().num_classes;
    let mut total = 0.0;
    for class in 0..classes {
        let dx = softmax_input_gradient(predictor, x, tau, class)?;
        total += dx.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

pub(crate) fn replicate_input(x: &[f64], t: usize) -> Vec<f64> {
    if t == 1 {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(x.len() * t);
    for _ in 0..t {
        out.extend_from_slice(x);
    }
    out
}

fn fold_input_gradient(dx_full: &[f64], input_dim: usize, t: usize) -> Vec<f64> {
    if t == 1 {
        return dx_full.to_vec();
    }
    let mut dx = vec![0.0; input_dim];
    for block in 0..t {
        for i in 0..input_dim {
            dx[i] += dx_full[block * input_dim + i];
        }
    }
    dx
}
