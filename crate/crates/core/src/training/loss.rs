use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot, log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_queries: Matrix<f64>,
    pub grad_docs: Matrix<f64>,
}

/// InfoNCE with in-batch negatives. Row `b` of `docs` is the positive for
/// row `b` of `queries`; every other row is a negative:
///
/// `loss = -(1/B) Σ_b log softmax_j(q_b·d_j / τ)_b`
pub fn contrastive_loss(queries: &Matrix<f64>, docs: &Matrix<f64>, tau: f64) -> Result<LossOutput> {
    let b = queries.rows();
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_dim(b, docs.rows())?;
    check_dim(queries.cols(), docs.cols())?;

    let mut grad_queries = Matrix::zeros(b, queries.cols());
    let mut grad_docs = Matrix::zeros(b, docs.cols());
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let q = queries.row(i);
        let scores: Vec<f64> = docs.iter_rows().map(|d| dot(q, d) / tau).collect();
        let lse = log_sum_exp(&scores);
        loss += lse - scores[i];
        // d loss / d score_ij = (softmax_ij - [i == j]) / B
        for (j, s) in scores.iter().enumerate() {
            let mut g = (s - lse).exp();
            if i == j {
                g -= 1.0;
            }
            let g = g * inv_b / tau;
            if g == 0.0 {
                continue;
            }
            let d = docs.row(j);
            for (gq, dv) in grad_queries.row_mut(i).iter_mut().zip(d) {
                *gq += g * dv;
            }
            for (gd, qv) in grad_docs.row_mut(j).iter_mut().zip(q) {
                *gd += g * qv;
            }
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grad_queries,
        grad_docs,
    })
}
