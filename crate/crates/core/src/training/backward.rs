//! Training-time forward pass with recorded activations and its exact
//! reverse-mode gradient.
//!
//! Per input row the forward pass computes gate logits `z`, clean
//! probabilities `p = softmax(z)`, the noisy selection `m` and the selected
//! expert's output `f = x + r_m(x)`. The emitted vector is `y = p_m · f`
//! (gate-scaled) or `y = f` (unscaled). The selection is piecewise constant,
//! so the noise scales receive no gradient.

use crate::error::{check_dim, Error, Result};
use crate::moe::{noisy_select, MoeBlock};
use crate::numerics::{softmax, Matrix};

/// Forward record of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub gate_pre_hidden: Vec<f64>,
    pub probs: Vec<f64>,
    pub selected: usize,
    pub expert_pre_hidden: Vec<f64>,
    /// `f_m(x)`, before gate scaling.
    pub expert_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub outputs: Matrix<f64>,
    pub traces: Vec<SampleTrace>,
    pub scaled: bool,
}

/// Noisy TOP-1 forward pass over `inputs` with pre-drawn noise
/// (`noise.row(i)` perturbs the logits of row `i`).
pub fn forward_noisy(
    block: &MoeBlock<f64>,
    inputs: &Matrix<f64>,
    noise: &Matrix<f64>,
    scaled: bool,
) -> Result<ForwardRecord> {
    check_dim(block.dim(), inputs.cols())?;
    check_dim(inputs.rows(), noise.rows())?;
    check_dim(block.num_experts(), noise.cols())?;
    let mut outputs = Matrix::zeros(inputs.rows(), inputs.cols());
    let mut traces = Vec::with_capacity(inputs.rows());
    for (i, x) in inputs.iter_rows().enumerate() {
        let gate = block.gate.forward_parts(x)?;
        let probs = softmax(&gate.logits)?;
        let m = noisy_select(&gate.logits, noise.row(i), &block.gate.noise_scale)?;
        let parts = block.experts[m].forward_parts(x, block.activation)?;
        let expert_out: Vec<f64> = x.iter().zip(&parts.residual).map(|(a, r)| a + r).collect();
        let scale = if scaled { probs[m] } else { 1.0 };
        for (o, f) in outputs.row_mut(i).iter_mut().zip(&expert_out) {
            *o = scale * f;
        }
        traces.push(SampleTrace {
            gate_pre_hidden: gate.pre_hidden,
            probs,
            selected: m,
            expert_pre_hidden: parts.pre_hidden,
            expert_out,
        });
    }
    Ok(ForwardRecord {
        outputs,
        traces,
        scaled,
    })
}

/// Accumulates `∂loss/∂θ` into `grads` (same shape as `block`) given the
/// upstream gradient `∂loss/∂y` for every row recorded in `record`.
pub fn backward_block(
    inputs: &Matrix<f64>,
    upstream: &Matrix<f64>,
    block: &MoeBlock<f64>,
    record: &ForwardRecord,
    grads: &mut MoeBlock<f64>,
) -> Result<()> {
    check_dim(inputs.rows(), upstream.rows())?;
    check_dim(block.dim(), upstream.cols())?;
    check_dim(block.num_experts(), grads.num_experts())?;
    check_dim(block.dim(), grads.dim())?;
    for i in 0..inputs.rows() {
        let trace = record.traces.get(i).ok_or(Error::MissingForwardRecord(i))?;
        backward_sample(inputs.row(i), upstream.row(i), block, trace, record.scaled, grads);
    }
    Ok(())
}

fn backward_sample(
    x: &[f64],
    g: &[f64],
    block: &MoeBlock<f64>,
    trace: &SampleTrace,
    scaled: bool,
    grads: &mut MoeBlock<f64>,
) {
    let m = trace.selected;
    let p_m = trace.probs[m];
    let (d_expert_out, d_p_m): (Vec<f64>, f64) = if scaled {
        (
            g.iter().map(|v| v * p_m).collect(),
            g.iter().zip(&trace.expert_out).map(|(a, b)| a * b).sum(),
        )
    } else {
        (g.to_vec(), 0.0)
    };

    // expert m: r = W_up·act(u) + b_up, u = W_down·x + b_down
    let expert = &block.experts[m];
    let ge = &mut grads.experts[m];
    let act = block.activation;
    let hidden: Vec<f64> = trace.expert_pre_hidden.iter().map(|&u| act.apply(u)).collect();
    for (i, &dr) in d_expert_out.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        ge.b_up[i] += dr;
        for (w, h) in ge.w_up.row_mut(i).iter_mut().zip(&hidden) {
            *w += dr * h;
        }
    }
    let d_hidden = expert
        .w_up
        .matvec_transposed_f64(&d_expert_out)
        .expect("shapes checked");
    for (j, (&dh, &u)) in d_hidden.iter().zip(&trace.expert_pre_hidden).enumerate() {
        let du = dh * act.derivative(u);
        if du == 0.0 {
            continue;
        }
        ge.b_down[j] += du;
        for (w, xv) in ge.w_down.row_mut(j).iter_mut().zip(x) {
            *w += du * xv;
        }
    }

    if d_p_m == 0.0 {
        return;
    }
    // p_m = softmax(z)_m  ⇒  ∂p_m/∂z_j = p_m (δ_mj − p_j)
    let d_logits: Vec<f64> = trace
        .probs
        .iter()
        .enumerate()
        .map(|(j, &p_j)| d_p_m * p_m * (if j == m { 1.0 } else { 0.0 } - p_j))
        .collect();
    let gg = &mut grads.gate;
    let gate_hidden: Vec<f64> = trace.gate_pre_hidden.iter().map(|u| u.max(0.0)).collect();
    for (j, &dz) in d_logits.iter().enumerate() {
        gg.b_out[j] += dz;
        for (w, h) in gg.w_out.row_mut(j).iter_mut().zip(&gate_hidden) {
            *w += dz * h;
        }
    }
    let d_gate_hidden = block
        .gate
        .w_out
        .matvec_transposed_f64(&d_logits)
        .expect("shapes checked");
    for (k, (&dh, &u)) in d_gate_hidden.iter().zip(&trace.gate_pre_hidden).enumerate() {
        if u <= 0.0 || dh == 0.0 {
            continue;
        }
        gg.b_hidden[k] += dh;
        for (w, xv) in gg.w_hidden.row_mut(k).iter_mut().zip(x) {
            *w += dh * xv;
        }
    }
}
