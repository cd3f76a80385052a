mod common;

use common::{check_gradients, grad_case, GRAD_TOL};
use sbmoe::numerics::Matrix;
use sbmoe::training::backward::{backward_block, forward_noisy};
use sbmoe::training::loss::contrastive_loss;

#[test]
fn twenty_random_configurations_match_central_differences() {
    for seed in 0..20 {
        let r = check_gradients(&grad_case(seed));
        assert!(
            r.max_rel_err <= GRAD_TOL,
            "seed {seed}: d={} n={} B={} max rel err {:.3e}",
            r.d,
            r.n,
            r.batch,
            r.max_rel_err
        );
    }
}

#[test]
fn configurations_cover_both_sizes() {
    let cases: Vec<_> = (0..20).map(grad_case).collect();
    for d in [4, 8] {
        assert!(cases.iter().any(|c| c.block.dim() == d));
    }
    for n in [2, 4] {
        assert!(cases.iter().any(|c| c.block.num_experts() == n));
    }
    assert!(cases.iter().all(|c| c.queries.rows() <= 8));
}

#[test]
fn noise_scale_receives_no_gradient() {
    let c = grad_case(3);
    let fq = forward_noisy(&c.block, &c.queries, &c.query_noise, true).unwrap();
    let fd = forward_noisy(&c.block, &c.docs, &c.doc_noise, true).unwrap();
    let loss = contrastive_loss(&fq.outputs, &fd.outputs, 1.0).unwrap();
    let mut g = c.block.zeros_like();
    backward_block(&c.queries, &loss.grad_queries, &c.block, &fq, &mut g).unwrap();
    backward_block(&c.docs, &loss.grad_docs, &c.block, &fd, &mut g).unwrap();
    assert!(g.gate.noise_scale.iter().all(|v| *v == 0.0));
    assert!(g.gate.w_out.as_slice().iter().any(|v| *v != 0.0));
}

#[test]
fn unscaled_training_leaves_the_gate_untouched() {
    let c = grad_case(5);
    let fq = forward_noisy(&c.block, &c.queries, &c.query_noise, false).unwrap();
    let fd = forward_noisy(&c.block, &c.docs, &c.doc_noise, false).unwrap();
    let loss = contrastive_loss(&fq.outputs, &fd.outputs, 1.0).unwrap();
    let mut g = c.block.zeros_like();
    backward_block(&c.queries, &loss.grad_queries, &c.block, &fq, &mut g).unwrap();
    backward_block(&c.docs, &loss.grad_docs, &c.block, &fd, &mut g).unwrap();
    let gate_zero = |m: &Matrix<f64>| m.as_slice().iter().all(|v| *v == 0.0);
    assert!(gate_zero(&g.gate.w_hidden) && gate_zero(&g.gate.w_out));
    assert!(g.experts.iter().any(|e| !gate_zero(&e.w_up)));
}
