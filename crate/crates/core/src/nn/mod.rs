//! Minimal neural engine: dense layers on a reverse-mode tape, the
//! contrastive objectives, and the three bottlenecked projector variants.

mod losses;
mod tape;

pub use losses::{
    barlow_loss, barlow_value, bottleneck_regularized_loss, infonce_loss, infonce_value,
    supervised_head_loss, HeadLossGrad, LossGrad, RegularizedLoss,
};
pub(crate) use losses::sanitize_rows;
pub use tape::{NodeId, Tape};

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::minfo::InfoError;
use crate::tensor::{DenseMatrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("batch of {rows} rows is too small, need at least {min}")]
    BatchTooSmall { rows: usize, min: usize },
    #[error("k = {k} outside [1, {len}]")]
    KOutOfRange { k: usize, len: usize },
    #[error("quantizer needs at least one level, got {levels}")]
    BadLevels { levels: usize },
    #[error("temperature must be positive, got {temperature}")]
    NonPositiveTemperature { temperature: f64 },
    #[error("feature dimension {dim} has near-zero batch norm")]
    ZeroVariance { dim: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label count {labels} does not match batch rows {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Info(#[from] InfoError),
}

/// Weight + bias with matching gradient accumulators.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    pub grad_weight: DenseMatrix,
    pub grad_bias: DenseMatrix,
}

impl LayerParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(input, output),
            bias: DenseMatrix::zeros(1, output),
            grad_weight: DenseMatrix::zeros(input, output),
            grad_bias: DenseMatrix::zeros(1, output),
        }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / libm::sqrt(input.max(1) as f64);
        let weight = gaussian_matrix(input, output, scale, rng);
        Self {
            weight,
            bias: DenseMatrix::zeros(1, output),
            grad_weight: DenseMatrix::zeros(input, output),
            grad_bias: DenseMatrix::zeros(1, output),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    /// SGD with decoupled weight decay on the weights (biases undecayed).
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        if weight_decay != 0.0 {
            let decay = self.weight.scaled(-lr * weight_decay)?;
            self.weight.add_scaled_assign(1.0, &decay)?;
        }
        self.weight.add_scaled_assign(-lr, &self.grad_weight)?;
        self.bias.add_scaled_assign(-lr, &self.grad_bias)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.data().len()
    }
}

pub(crate) fn gaussian_matrix(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let g: f64 = StandardNormal.sample(rng);
        data.push(scale * g);
    }
    DenseMatrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// Stack of dense layers. Hidden layers are ReLU, the last is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
    activations: Vec<Activation>,
}

/// Tape ids of one MLP forward: the output plus per-layer (weight, bias)
/// leaves for gradient extraction.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub out: NodeId,
    bindings: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]` with ReLU between layers and a linear head.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::new();
        let mut activations = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerParams::init(w[0], w[1], rng));
            activations.push(Activation::Relu);
        }
        *activations.last_mut().expect("nonempty") = Activation::Linear;
        Self {
            layers,
            activations,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.cols()
    }

    /// Record `x -> layers` on the tape.
    pub fn forward_on(&self, tape: &mut Tape, x: NodeId) -> Result<MlpTrace, NnError> {
        let mut cur = x;
        let mut bindings = Vec::with_capacity(self.layers.len());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            cur = tape.matmul(cur, w)?;
            cur = tape.add_bias(cur, b)?;
            if *act == Activation::Relu {
                cur = tape.relu(cur);
            }
            bindings.push((w, b));
        }
        Ok(MlpTrace {
            out: cur,
            bindings,
        })
    }

    /// One-shot forward for inference paths; no tape kept.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix, NnError> {
        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone());
        let trace = self.forward_on(&mut tape, x_id)?;
        Ok(tape.value(trace.out).clone())
    }

    /// Pull tape gradients into the layer accumulators after a backward pass.
    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &MlpTrace) -> Result<(), NnError> {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&trace.bindings) {
            if let Some(g) = tape.grad(*w) {
                layer.grad_weight.add_scaled_assign(1.0, g)?;
            }
            if let Some(g) = tape.grad(*b) {
                layer.grad_bias.add_scaled_assign(1.0, g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.zero_grads();
        }
    }

    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        for l in &mut self.layers {
            l.sgd_step(lr, weight_decay)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }
}

/// Top-k sparse autoencoder parameters:
/// `h = TopK(W_enc (x - b_pre))`, `z = W_dec h + b_pre`.
#[derive(Debug, Clone)]
pub struct SaeParams {
    pub w_enc: DenseMatrix,
    pub w_dec: DenseMatrix,
    pub b_pre: DenseMatrix,
    pub grad_w_enc: DenseMatrix,
    pub grad_w_dec: DenseMatrix,
    pub grad_b_pre: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct SaeTrace {
    pub hidden: NodeId,
    pub out: NodeId,
    w_enc: NodeId,
    w_dec: NodeId,
    b_pre: NodeId,
}

impl SaeParams {
    pub fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let enc_scale = 1.0 / libm::sqrt(dim.max(1) as f64);
        let dec_scale = 1.0 / libm::sqrt(hidden.max(1) as f64);
        Self {
            w_enc: gaussian_matrix(dim, hidden, enc_scale, rng),
            w_dec: gaussian_matrix(hidden, dim, dec_scale, rng),
            b_pre: DenseMatrix::zeros(1, dim),
            grad_w_enc: DenseMatrix::zeros(dim, hidden),
            grad_w_dec: DenseMatrix::zeros(hidden, dim),
            grad_b_pre: DenseMatrix::zeros(1, dim),
        }
    }

    pub fn from_parts(
        w_enc: DenseMatrix,
        w_dec: DenseMatrix,
        b_pre: DenseMatrix,
    ) -> Result<Self, NnError> {
        if w_enc.rows() != w_dec.cols()
            || w_enc.cols() != w_dec.rows()
            || b_pre.rows() != 1
            || b_pre.cols() != w_enc.rows()
        {
            return Err(NnError::Tensor(TensorError::DimMismatch {
                lhs_rows: w_enc.rows(),
                lhs_cols: w_enc.cols(),
                rhs_rows: w_dec.rows(),
                rhs_cols: w_dec.cols(),
            }));
        }
        let (dim, hidden) = (w_enc.rows(), w_enc.cols());
        Ok(Self {
            w_enc,
            w_dec,
            b_pre,
            grad_w_enc: DenseMatrix::zeros(dim, hidden),
            grad_w_dec: DenseMatrix::zeros(hidden, dim),
            grad_b_pre: DenseMatrix::zeros(1, dim),
        })
    }

    /// Record the autoencoder on the tape. `b_pre` appears on both sides of
    /// the bottleneck, so its gradient collects two contributions.
    pub fn forward_on(&self, tape: &mut Tape, x: NodeId, k: usize) -> Result<SaeTrace, NnError> {
        let w_enc = tape.leaf(self.w_enc.clone());
        let w_dec = tape.leaf(self.w_dec.clone());
        let b_pre = tape.leaf(self.b_pre.clone());
        let centered = tape.sub_bias(x, b_pre)?;
        let pre = tape.matmul(centered, w_enc)?;
        let hidden = tape.topk(pre, k)?;
        let decoded = tape.matmul(hidden, w_dec)?;
        let out = tape.add_bias(decoded, b_pre)?;
        Ok(SaeTrace {
            hidden,
            out,
            w_enc,
            w_dec,
            b_pre,
        })
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &SaeTrace) -> Result<(), NnError> {
        for (acc, id) in [
            (&mut self.grad_w_enc, trace.w_enc),
            (&mut self.grad_w_dec, trace.w_dec),
            (&mut self.grad_b_pre, trace.b_pre),
        ] {
            if let Some(g) = tape.grad(id) {
                acc.add_scaled_assign(1.0, g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grad_w_enc.fill(0.0);
        self.grad_w_dec.fill(0.0);
        self.grad_b_pre.fill(0.0);
    }

    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        for (param, grad) in [
            (&mut self.w_enc, &self.grad_w_enc),
            (&mut self.w_dec, &self.grad_w_dec),
        ] {
            if weight_decay != 0.0 {
                let decay = param.scaled(-lr * weight_decay)?;
                param.add_scaled_assign(1.0, &decay)?;
            }
            param.add_scaled_assign(-lr, grad)?;
        }
        self.b_pre.add_scaled_assign(-lr, &self.grad_b_pre)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w_enc.data().len() + self.w_dec.data().len() + self.b_pre.data().len()
    }
}

/// Projector architecture selector plus the bottleneck-regularizer weight.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProjectorSpec {
    pub variant: ProjectorVariant,
    /// Coefficient of the matrix-MI regularizer added to the objective.
    #[cfg_attr(feature = "serde", serde(default))]
    pub bottleneck_lambda: f64,
    /// Optional quantization applied after the projector output, so the
    /// structural methods compose (e.g. sparse autoencoder + discretization).
    #[cfg_attr(feature = "serde", serde(default))]
    pub quantize_levels: Option<usize>,
    /// Single-level quantization collapses the representation; it stays
    /// rejected unless this override is set.
    #[cfg_attr(feature = "serde", serde(default))]
    pub allow_collapsed_levels: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ProjectorVariant {
    /// Two-layer ReLU projector.
    Mlp { hidden: usize, out: usize },
    /// Linear map followed by per-dimension finite scalar quantization.
    Fsq { levels: usize, out: usize },
    /// Top-k sparse autoencoder; output dimension equals the input.
    TopKSae { hidden: usize, k: usize },
}

impl ProjectorSpec {
    pub fn mlp(hidden: usize, out: usize) -> Self {
        Self {
            variant: ProjectorVariant::Mlp { hidden, out },
            bottleneck_lambda: 0.0,
            quantize_levels: None,
            allow_collapsed_levels: false,
        }
    }

    pub fn fsq(levels: usize, out: usize) -> Self {
        Self {
            variant: ProjectorVariant::Fsq { levels, out },
            bottleneck_lambda: 0.0,
            quantize_levels: None,
            allow_collapsed_levels: false,
        }
    }

    pub fn top_k_sae(hidden: usize, k: usize) -> Self {
        Self {
            variant: ProjectorVariant::TopKSae { hidden, k },
            bottleneck_lambda: 0.0,
            quantize_levels: None,
            allow_collapsed_levels: false,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.bottleneck_lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.bottleneck_lambda < 0.0 || !self.bottleneck_lambda.is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        let min_levels = if self.allow_collapsed_levels { 1 } else { 2 };
        match self.variant {
            ProjectorVariant::Mlp { hidden, out } => {
                if hidden == 0 || out == 0 {
                    return Err(NnError::KOutOfRange { k: 0, len: 0 });
                }
            }
            ProjectorVariant::Fsq { levels, out } => {
                if out == 0 {
                    return Err(NnError::KOutOfRange { k: 0, len: 0 });
                }
                if levels < min_levels {
                    return Err(NnError::BadLevels { levels });
                }
            }
            ProjectorVariant::TopKSae { hidden, k } => {
                if k == 0 || k > hidden {
                    return Err(NnError::KOutOfRange { k, len: hidden });
                }
            }
        }
        if let Some(levels) = self.quantize_levels {
            if levels < min_levels {
                return Err(NnError::BadLevels { levels });
            }
        }
        Ok(())
    }

    /// Number of representable values per quantized dimension,
    /// `2*floor(L/2) + 1`, if any quantization is active.
    pub fn effective_levels(&self) -> Option<usize> {
        let l = match self.variant {
            ProjectorVariant::Fsq { levels, .. } => Some(levels),
            _ => self.quantize_levels,
        }?;
        Some(2 * (l / 2) + 1)
    }
}

/// A parametrized projector network built from a [`ProjectorSpec`].
#[derive(Debug, Clone)]
pub enum Projector {
    Mlp(Mlp),
    Fsq { linear: Mlp, levels: usize },
    Sae { params: SaeParams, k: usize },
}

#[derive(Debug, Clone)]
pub struct ProjectorTrace {
    pub out: NodeId,
    /// Sparse-autoencoder hidden activations, when the variant has them.
    pub hidden: Option<NodeId>,
    detail: ProjectorTraceDetail,
}

#[derive(Debug, Clone)]
enum ProjectorTraceDetail {
    Mlp(MlpTrace),
    Sae(SaeTrace),
}

impl Projector {
    pub fn build(
        spec: &ProjectorSpec,
        input_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(match spec.variant {
            ProjectorVariant::Mlp { hidden, out } => {
                Self::Mlp(Mlp::new(&[input_dim, hidden, out], rng))
            }
            ProjectorVariant::Fsq { levels, out } => Self::Fsq {
                linear: Mlp::new(&[input_dim, out], rng),
                levels,
            },
            ProjectorVariant::TopKSae { hidden, k } => Self::Sae {
                params: SaeParams::init(input_dim, hidden, rng),
                k,
            },
        })
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Self::Mlp(mlp) => mlp.output_dim(),
            Self::Fsq { linear, .. } => linear.output_dim(),
            Self::Sae { .. } => input_dim,
        }
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: NodeId,
        quantize_levels: Option<usize>,
    ) -> Result<ProjectorTrace, NnError> {
        let (mut out, hidden, detail) = match self {
            Self::Mlp(mlp) => {
                let trace = mlp.forward_on(tape, x)?;
                (trace.out, None, ProjectorTraceDetail::Mlp(trace))
            }
            Self::Fsq { linear, levels } => {
                let trace = linear.forward_on(tape, x)?;
                let q = tape.fsq(trace.out, *levels)?;
                (q, None, ProjectorTraceDetail::Mlp(trace))
            }
            Self::Sae { params, k } => {
                let trace = params.forward_on(tape, x, *k)?;
                (trace.out, Some(trace.hidden), ProjectorTraceDetail::Sae(trace))
            }
        };
        if let Some(levels) = quantize_levels {
            if !matches!(self, Self::Fsq { .. }) {
                out = tape.fsq(out, levels)?;
            }
        }
        Ok(ProjectorTrace {
            out,
            hidden,
            detail,
        })
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &ProjectorTrace) -> Result<(), NnError> {
        match (self, &trace.detail) {
            (Self::Mlp(mlp), ProjectorTraceDetail::Mlp(t)) => mlp.accumulate_grads(tape, t),
            (Self::Fsq { linear, .. }, ProjectorTraceDetail::Mlp(t)) => {
                linear.accumulate_grads(tape, t)
            }
            (Self::Sae { params, .. }, ProjectorTraceDetail::Sae(t)) => {
                params.accumulate_grads(tape, t)
            }
            _ => unreachable!("trace built by a different projector"),
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Self::Mlp(mlp) => mlp.zero_grads(),
            Self::Fsq { linear, .. } => linear.zero_grads(),
            Self::Sae { params, .. } => params.zero_grads(),
        }
    }

    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        match self {
            Self::Mlp(mlp) => mlp.sgd_step(lr, weight_decay),
            Self::Fsq { linear, .. } => linear.sgd_step(lr, weight_decay),
            Self::Sae { params, .. } => params.sgd_step(lr, weight_decay),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Mlp(mlp) => mlp.param_count(),
            Self::Fsq { linear, .. } => linear.param_count(),
            Self::Sae { params, .. } => params.param_count(),
        }
    }
}

/// Objective, regularizer and their weighted total for one step, plus the
/// same objective recomputed on encoder features (the `I(Z1;R)` surrogate,
/// never differentiated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub objective: f64,
    pub regularizer: f64,
    pub total: f64,
    pub encoder_feature_objective: f64,
}

/// Finite scalar quantization, forward only:
/// `floor(m tanh(x) + 1/2)` per entry with `m = floor(levels/2)`.
pub fn fsq_project(v: &DenseMatrix, levels: usize) -> Result<DenseMatrix, NnError> {
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let q = tape.fsq(x, levels)?;
    Ok(tape.value(q).clone())
}

/// Straight-through backward of [`fsq_project`]: the rounding is treated as
/// identity, so the gradient is `upstream * m * (1 - tanh^2(v))`.
pub fn fsq_backward(
    v: &DenseMatrix,
    levels: usize,
    upstream: &DenseMatrix,
) -> Result<DenseMatrix, NnError> {
    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let q = tape.fsq(x, levels)?;
    tape.backward(vec![(q, upstream.clone())])?;
    Ok(tape.grad(x).expect("seeded path reaches the leaf").clone())
}

/// Keep the k largest entries of a vector, zero the rest. Returns the
/// surviving-position mask alongside, which is exactly the backward gate.
pub fn topk_activate(v: &[f64], k: usize) -> Result<(Vec<f64>, Vec<bool>), NnError> {
    if k == 0 || k > v.len() {
        return Err(NnError::KOutOfRange { k, len: v.len() });
    }
    let mask = tape::topk_mask(v, k);
    let out = v
        .iter()
        .zip(&mask)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    Ok((out, mask))
}

/// One-shot sparse-autoencoder projection; returns `(z2, hidden)`.
pub fn sae_project(
    x: &DenseMatrix,
    params: &SaeParams,
    k: usize,
) -> Result<(DenseMatrix, DenseMatrix), NnError> {
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone());
    let trace = params.forward_on(&mut tape, x_id, k)?;
    Ok((
        tape.value(trace.out).clone(),
        tape.value(trace.hidden).clone(),
    ))
}
