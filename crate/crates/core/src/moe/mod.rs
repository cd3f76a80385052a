//! Single mixture-of-experts block applied after the base encoder.
//!
//! Each expert is a bottleneck feed-forward layer with a skip connection,
//! `f(x) = x + W_up·act(W_down·x + b_down) + b_up`, with hidden width `⌈d/2⌉`.
//! The gate is a one-hidden-layer network (`d → ⌈d/2⌉ → n`, ReLU) producing
//! one logit per expert. Inference pools either the arg-max expert (TOP-1) or
//! the softmax-weighted sum of all experts (ALL). The same block refines both
//! queries and documents.

pub mod checkpoint;

use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{argmax_tiebreak, derive_seed, softmax, softplus, Matrix, Scalar, SeededRng};

/// Expert hidden nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Gelu => 0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
                0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// How expert outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Pooling {
    #[default]
    Top1,
    All,
    /// Random expert weights replace the learned gate (see [`RandomGate`]).
    RandomGate,
}

impl Pooling {
    pub fn id(self) -> u32 {
        match self {
            Pooling::Top1 => 0,
            Pooling::All => 1,
            Pooling::RandomGate => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Pooling::Top1),
            1 => Some(Pooling::All),
            2 => Some(Pooling::RandomGate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Top1 => "top1",
            Pooling::All => "all",
            Pooling::RandomGate => "random-gate",
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top1" | "top-1" => Ok(Pooling::Top1),
            "all" => Ok(Pooling::All),
            "random" | "random-gate" | "random_gate" => Ok(Pooling::RandomGate),
            other => Err(Error::invalid(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Hidden width of experts and gate for input dimension `d`.
pub fn hidden_dim(d: usize) -> usize {
    d.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    /// hidden × d
    pub w_down: Matrix<T>,
    pub b_down: Vec<T>,
    /// d × hidden
    pub w_up: Matrix<T>,
    pub b_up: Vec<T>,
}

/// Intermediate values of one expert evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertActivations {
    /// `W_down·x + b_down`
    pub pre_hidden: Vec<f64>,
    /// `W_up·act(pre_hidden) + b_up`, i.e. `f(x) - x`
    pub residual: Vec<f64>,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn zeros(d: usize) -> Self {
        let h = hidden_dim(d);
        Self {
            w_down: Matrix::zeros(h, d),
            b_down: vec![T::default(); h],
            w_up: Matrix::zeros(d, h),
            b_up: vec![T::default(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_down.cols()
    }

    pub fn forward_parts<X: Scalar>(&self, x: &[X], act: Activation) -> Result<ExpertActivations> {
        check_dim(self.dim(), x.len())?;
        let mut pre_hidden = self.w_down.matvec_f64(x)?;
        for (p, b) in pre_hidden.iter_mut().zip(&self.b_down) {
            *p += b.to_f64();
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&u| act.apply(u)).collect();
        let mut residual = self.w_up.matvec_f64(&hidden)?;
        for (r, b) in residual.iter_mut().zip(&self.b_up) {
            *r += b.to_f64();
        }
        Ok(ExpertActivations {
            pre_hidden,
            residual,
        })
    }

    fn cast<U: Scalar>(&self) -> ExpertParams<U> {
        ExpertParams {
            w_down: self.w_down.cast(),
            b_down: cast_vec(&self.b_down),
            w_up: self.w_up.cast(),
            b_up: cast_vec(&self.b_up),
        }
    }
}

/// `f_e(x)`: the expert output including the skip connection.
pub fn expert_forward<T: Scalar>(x: &[T], e: &ExpertParams<T>, act: Activation) -> Result<Vec<T>> {
    let parts = e.forward_parts(x, act)?;
    Ok(add_residual(x, &parts.residual))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// hidden × d
    pub w_hidden: Matrix<T>,
    pub b_hidden: Vec<T>,
    /// n × hidden
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
    /// Pre-softplus scale of the training-time routing noise, one per expert.
    pub noise_scale: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub pre_hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl<T: Scalar> GateParams<T> {
    pub fn zeros(d: usize, n: usize) -> Self {
        let h = hidden_dim(d);
        Self {
            w_hidden: Matrix::zeros(h, d),
            b_hidden: vec![T::default(); h],
            w_out: Matrix::zeros(n, h),
            b_out: vec![T::default(); n],
            noise_scale: vec![T::default(); n],
        }
    }

    pub fn forward_parts<X: Scalar>(&self, x: &[X]) -> Result<GateActivations> {
        check_dim(self.w_hidden.cols(), x.len())?;
        let mut pre_hidden = self.w_hidden.matvec_f64(x)?;
        for (p, b) in pre_hidden.iter_mut().zip(&self.b_hidden) {
            *p += b.to_f64();
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&u| u.max(0.0)).collect();
        let mut logits = self.w_out.matvec_f64(&hidden)?;
        for (l, b) in logits.iter_mut().zip(&self.b_out) {
            *l += b.to_f64();
        }
        Ok(GateActivations { pre_hidden, logits })
    }

    fn cast<U: Scalar>(&self) -> GateParams<U> {
        GateParams {
            w_hidden: self.w_hidden.cast(),
            b_hidden: cast_vec(&self.b_hidden),
            w_out: self.w_out.cast(),
            b_out: cast_vec(&self.b_out),
            noise_scale: cast_vec(&self.noise_scale),
        }
    }
}

pub fn gate_logits<T: Scalar>(x: &[T], g: &GateParams<T>) -> Result<Vec<f64>> {
    Ok(g.forward_parts(x)?.logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock<T> {
    dim: usize,
    pub activation: Activation,
    pub pooling: Pooling,
    pub experts: Vec<ExpertParams<T>>,
    pub gate: GateParams<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Zero up-projection and biases: every expert starts as the identity.
    #[default]
    NearIdentity,
    /// All weight matrices random; used for gradient checks.
    Dense,
}

impl<T: Scalar> MoeBlock<T> {
    /// All-zero parameters.
    pub fn zeros(dim: usize, n: usize, activation: Activation) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("block dimension must be >= 2, got {dim}")));
        }
        if n < 1 {
            return Err(Error::invalid("block needs at least one expert"));
        }
        Ok(Self {
            dim,
            activation,
            pooling: Pooling::Top1,
            experts: (0..n).map(|_| ExpertParams::zeros(dim)).collect(),
            gate: GateParams::zeros(dim, n),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_dim(&self) -> usize {
        hidden_dim(self.dim)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn cast<U: Scalar>(&self) -> MoeBlock<U> {
        MoeBlock {
            dim: self.dim,
            activation: self.activation,
            pooling: self.pooling,
            experts: self.experts.iter().map(ExpertParams::cast).collect(),
            gate: self.gate.cast(),
        }
    }

    /// Same shapes, zero parameters.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dim, self.num_experts(), self.activation).expect("valid shape");
        z.pooling = self.pooling;
        z
    }

    /// Parameter slices in checkpoint order: per expert `w_down, b_down, w_up,
    /// b_up`, then gate `w_hidden, b_hidden, w_out, b_out, noise_scale`.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(4 * self.experts.len() + 5);
        for e in &self.experts {
            out.push(e.w_down.as_slice());
            out.push(e.b_down.as_slice());
            out.push(e.w_up.as_slice());
            out.push(e.b_up.as_slice());
        }
        let g = &self.gate;
        out.push(g.w_hidden.as_slice());
        out.push(g.b_hidden.as_slice());
        out.push(g.w_out.as_slice());
        out.push(g.b_out.as_slice());
        out.push(g.noise_scale.as_slice());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(4 * self.experts.len() + 5);
        for e in &mut self.experts {
            out.push(e.w_down.as_mut_slice());
            out.push(e.b_down.as_mut_slice());
            out.push(e.w_up.as_mut_slice());
            out.push(e.b_up.as_mut_slice());
        }
        let g = &mut self.gate;
        out.push(g.w_hidden.as_mut_slice());
        out.push(g.b_hidden.as_mut_slice());
        out.push(g.w_out.as_mut_slice());
        out.push(g.b_out.as_mut_slice());
        out.push(g.noise_scale.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.to_f64().is_finite()))
    }

    pub fn check_input<X>(&self, x: &[X]) -> Result<()> {
        check_dim(self.dim, x.len())
    }
}

/// Random initialization: `W_down`, `W_hidden`, `W_out` ~ N(0, 1/fan_in),
/// noise scales at softplus⁻¹(1). Under [`InitScheme::NearIdentity`] the
/// up-projections and all biases are zero.
pub fn init_block(d: usize, n: usize, seed: u64, scheme: InitScheme) -> Result<MoeBlock<f32>> {
    init_block_with(d, n, seed, scheme, Activation::Relu)
}

pub fn init_block_with(
    d: usize,
    n: usize,
    seed: u64,
    scheme: InitScheme,
    activation: Activation,
) -> Result<MoeBlock<f32>> {
    let mut block = MoeBlock::<f32>::zeros(d, n, activation)?;
    let h = hidden_dim(d);
    let mut rng = SeededRng::new(seed);
    let fill = |m: &mut Matrix<f32>, fan_in: usize, rng: &mut SeededRng| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in m.as_mut_slice() {
            *v = (rng.normal() * scale) as f32;
        }
    };
    let fill_vec = |v: &mut [f32], scale: f64, rng: &mut SeededRng| {
        for x in v {
            *x = (rng.normal() * scale) as f32;
        }
    };
    for e in &mut block.experts {
        fill(&mut e.w_down, d, &mut rng);
        if scheme == InitScheme::Dense {
            fill(&mut e.w_up, h, &mut rng);
            fill_vec(&mut e.b_down, 0.1, &mut rng);
            fill_vec(&mut e.b_up, 0.1, &mut rng);
        }
    }
    fill(&mut block.gate.w_hidden, d, &mut rng);
    fill(&mut block.gate.w_out, h, &mut rng);
    if scheme == InitScheme::Dense {
        fill_vec(&mut block.gate.b_hidden, 0.1, &mut rng);
        fill_vec(&mut block.gate.b_out, 0.1, &mut rng);
    }
    // softplus(ln(e - 1)) == 1
    let rho = (std::f64::consts::E - 1.0).ln() as f32;
    block.gate.noise_scale.iter_mut().for_each(|v| *v = rho);
    Ok(block)
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::from_f64(x.to_f64())).collect()
}

/// `x + r`, computed in `f64`. A zero residual returns `x` unchanged.
fn add_residual<T: Scalar>(x: &[T], r: &[f64]) -> Vec<T> {
    x.iter()
        .zip(r)
        .map(|(&xi, &ri)| if ri == 0.0 { xi } else { T::from_f64(xi.to_f64() + ri) })
        .collect()
}

/// TOP-1 pooling: `y = f_m(x)` with `m` the arg-max gate logit.
pub fn pool_top1<T: Scalar>(x: &[T], block: &MoeBlock<T>) -> Result<(Vec<T>, usize)> {
    block.check_input(x)?;
    let logits = gate_logits(x, &block.gate)?;
    let m = argmax_tiebreak(&logits)?;
    let y = expert_forward(x, &block.experts[m], block.activation)?;
    Ok((y, m))
}

/// ALL pooling: `y = Σ wᵢ·fᵢ(x)` with `w = softmax(logits)`.
pub fn pool_all<T: Scalar>(x: &[T], block: &MoeBlock<T>) -> Result<(Vec<T>, Vec<f64>)> {
    block.check_input(x)?;
    let weights = softmax(&gate_logits(x, &block.gate)?)?;
    let y = weighted_sum(x, block, &weights)?;
    Ok((y, weights))
}

/// `Σ wᵢ·fᵢ(x)` for a probability vector `w`, evaluated as `x + Σ wᵢ·rᵢ`
/// where `rᵢ = fᵢ(x) - x` (the two agree because `Σ wᵢ = 1`).
fn weighted_sum<T: Scalar>(x: &[T], block: &MoeBlock<T>, weights: &[f64]) -> Result<Vec<T>> {
    let mut acc = vec![0.0f64; block.dim];
    for (e, &w) in block.experts.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let parts = e.forward_parts(x, block.activation)?;
        for (a, r) in acc.iter_mut().zip(&parts.residual) {
            *a += w * r;
        }
    }
    Ok(add_residual(x, &acc))
}

/// Noisy routing decision: `Hᵢ = logitᵢ + εᵢ·softplus(ρᵢ)`, `m = argmax H`.
pub fn noisy_select<T: Scalar>(logits: &[f64], noise: &[f64], noise_scale: &[T]) -> Result<usize> {
    check_dim(logits.len(), noise.len())?;
    check_dim(logits.len(), noise_scale.len())?;
    let noisy: Vec<f64> = logits
        .iter()
        .zip(noise)
        .zip(noise_scale)
        .map(|((l, e), r)| l + e * softplus(r.to_f64()))
        .collect();
    argmax_tiebreak(&noisy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyOutput<T> {
    pub y: Vec<T>,
    pub selected: usize,
    /// Clean softmax probability of the selected expert.
    pub p_selected: f64,
}

/// Training-time noisy TOP-1 routing. With `scaled` the output is
/// `p_m · f_m(x)` so that the gate receives gradient; otherwise `f_m(x)`.
pub fn noisy_top1_train<T: Scalar>(
    x: &[T],
    block: &MoeBlock<T>,
    rng: &mut SeededRng,
    scaled: bool,
) -> Result<NoisyOutput<T>> {
    block.check_input(x)?;
    let logits = gate_logits(x, &block.gate)?;
    let noise = rng.gaussian(block.num_experts());
    let m = noisy_select(&logits, &noise, &block.gate.noise_scale)?;
    let p = softmax(&logits)?[m];
    let f = expert_forward(x, &block.experts[m], block.activation)?;
    let y = if scaled {
        f.iter().map(|v| T::from_f64(p * v.to_f64())).collect()
    } else {
        f
    };
    Ok(NoisyOutput {
        y,
        selected: m,
        p_selected: p,
    })
}

/// Random-gate ablation. `base == Top1` applies one uniformly drawn expert;
/// otherwise the weights are a softmax of `n` standard-normal draws.
pub fn random_gate<T: Scalar>(
    x: &[T],
    block: &MoeBlock<T>,
    base: Pooling,
    rng: &mut SeededRng,
) -> Result<(Vec<T>, Vec<f64>)> {
    block.check_input(x)?;
    let n = block.num_experts();
    match base {
        Pooling::Top1 => {
            let m = rng.uniform_index(n);
            let mut w = vec![0.0; n];
            w[m] = 1.0;
            Ok((expert_forward(x, &block.experts[m], block.activation)?, w))
        }
        Pooling::All | Pooling::RandomGate => {
            let w = softmax(&rng.gaussian(n))?;
            Ok((weighted_sum(x, block, &w)?, w))
        }
    }
}

/// Per-row routing telemetry from a batch refinement.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// No block applied.
    Identity(usize),
    /// TOP-1: selected expert per row.
    Selected(Vec<usize>),
    /// ALL / random gate: weight vector per row (rows × n).
    Weights(Matrix<f64>),
}

impl Routing {
    pub fn len(&self) -> usize {
        match self {
            Routing::Identity(n) => *n,
            Routing::Selected(s) => s.len(),
            Routing::Weights(w) => w.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest-weighted expert for row `i`, if any block was applied.
    pub fn top_expert(&self, i: usize) -> Option<usize> {
        match self {
            Routing::Identity(_) => None,
            Routing::Selected(s) => Some(s[i]),
            Routing::Weights(w) => argmax_tiebreak(w.row(i)).ok(),
        }
    }
}

/// Stream tags that keep random-gate draws for queries and documents apart.
pub const QUERY_STREAM: u64 = 0x5155_4552;
pub const DOC_STREAM: u64 = 0x0044_4f43;

/// Seed and style of the random-gate ablation; `style` is [`Pooling::Top1`]
/// (one uniformly drawn expert) or [`Pooling::All`] (softmax of Gaussian
/// weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomGate {
    pub seed: u64,
    pub style: Pooling,
}

/// Single-vector refinement. [`Pooling::RandomGate`] needs an rng and a
/// style.
pub fn refine<T: Scalar>(
    x: &[T],
    block: &MoeBlock<T>,
    mode: Pooling,
    random: Option<(&mut SeededRng, Pooling)>,
) -> Result<(Vec<T>, RowRouting)> {
    match mode {
        Pooling::Top1 => pool_top1(x, block).map(|(y, m)| (y, RowRouting::Selected(m))),
        Pooling::All => pool_all(x, block).map(|(y, w)| (y, RowRouting::Weights(w))),
        Pooling::RandomGate => {
            let (rng, style) = random.ok_or_else(|| Error::invalid("random-gate pooling needs a seed"))?;
            random_gate(x, block, style, rng).map(|(y, w)| (y, RowRouting::Weights(w)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowRouting {
    Selected(usize),
    Weights(Vec<f64>),
}

/// Rowwise refinement of a whole matrix; ids are preserved. Rows are
/// processed in parallel; random-gate rows draw from per-row streams
/// `(derive_seed(seed, stream_tag), row)` so results do not depend on
/// scheduling.
pub fn refine_batch(
    x: &EmbeddingMatrix,
    block: &MoeBlock<f32>,
    mode: Pooling,
    random: Option<RandomGate>,
    stream_tag: u64,
) -> Result<(EmbeddingMatrix, Routing)> {
    check_dim(block.dim(), x.dim())?;
    if mode == Pooling::RandomGate && random.is_none() {
        return Err(Error::invalid("random-gate pooling needs a seed"));
    }
    let row_seed = random.map(|r| (derive_seed(r.seed, stream_tag), r.style));
    let rows: Vec<(Vec<f32>, RowRouting)> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = row_seed.map(|(s, style)| (SeededRng::with_stream(s, i as u64), style));
            refine(x.row(i), block, mode, rng.as_mut().map(|(r, style)| (r, *style)))
        })
        .collect::<Result<_>>()?;

    let n = block.num_experts();
    let mut data = Vec::with_capacity(x.len() * x.dim());
    let mut selected = Vec::new();
    let mut weights = Vec::new();
    for (y, r) in rows {
        data.extend_from_slice(&y);
        match r {
            RowRouting::Selected(m) => selected.push(m),
            RowRouting::Weights(w) => weights.extend_from_slice(&w),
        }
    }
    let routing = match mode {
        Pooling::Top1 => Routing::Selected(selected),
        _ => Routing::Weights(Matrix::from_vec(x.len(), n, weights)?),
    };
    let vectors = Matrix::from_vec(x.len(), x.dim(), data)?;
    Ok((EmbeddingMatrix::new(x.ids().to_vec(), vectors)?, routing))
}
