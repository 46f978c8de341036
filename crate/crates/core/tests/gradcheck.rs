//! Central finite-difference checks for every differentiable graph op and
//! for the complete forward-plus-loss pipeline, 24 random instances per op.
//!
//! Step 1e-5, relative error bound 1e-4, all in f64. The helpers live in
//! `common` so the acceptance target can run the same sweeps under a clock.

mod common;

use ssounds_core::alignment::Pooling;
use ssounds_core::graph::Graph;
use ssounds_core::tensor::Tensor;

const INSTANCES: usize = 24;

#[test]
fn matmul_gradients_match_finite_differences() {
    common::sweep_matmul(INSTANCES);
}

#[test]
fn add_gradients_match_finite_differences() {
    common::sweep_add(INSTANCES);
}

#[test]
fn add_bias_gradients_match_finite_differences() {
    common::sweep_add_bias(INSTANCES);
}

#[test]
fn scale_gradients_match_finite_differences() {
    common::sweep_scale(INSTANCES);
}

#[test]
fn gelu_gradients_match_finite_differences() {
    common::sweep_gelu(INSTANCES);
}

#[test]
fn softmax_rows_gradients_match_finite_differences() {
    common::sweep_softmax_rows(INSTANCES);
}

#[test]
fn transpose_gradients_match_finite_differences() {
    common::sweep_transpose(INSTANCES);
}

#[test]
fn slice_rows_gradients_match_finite_differences() {
    common::sweep_slice_rows(INSTANCES);
}

#[test]
fn slice_cols_gradients_match_finite_differences() {
    common::sweep_slice_cols(INSTANCES);
}

#[test]
fn concat_cols_gradients_match_finite_differences() {
    common::sweep_concat_cols(INSTANCES);
}

#[test]
fn segment_mean_rows_gradients_match_finite_differences() {
    common::sweep_segment_mean_rows(INSTANCES);
}

#[test]
fn mse_gradients_match_finite_differences() {
    common::sweep_mse(INSTANCES);
}

#[test]
fn attention_pipeline_gradients_match_finite_differences() {
    common::sweep_pipeline(20, Pooling::Attention);
}

#[test]
fn mean_pooling_pipeline_gradients_match_finite_differences() {
    common::sweep_pipeline(20, Pooling::Mean);
}

/// mse([3, 5], [1, 2]) = (4 + 9) / 2; d/da_i = 2 (a_i - b_i) / 2 = a_i - b_i.
#[test]
fn mse_gradient_matches_hand_arithmetic() {
    let a = Tensor::from_vec(vec![1, 2], vec![3.0, 5.0]).unwrap().with_grad();
    let b = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let na = g.leaf(&a);
    let nb = g.leaf(&b);
    let loss = g.mse(na, nb).unwrap();
    assert_eq!(g.value(loss), &[6.5]);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(na).unwrap(), &[2.0, 3.0]);
    assert_eq!(g.grad(nb).unwrap(), &[-2.0, -3.0]);
}

/// softmax([0, 0]) = [1/2, 1/2]; against target [1, 0] the mse is 1/4 and
/// the chain through the softmax Jacobian gives d/dx = [-1/4, 1/4].
#[test]
fn softmax_gradient_matches_hand_arithmetic() {
    let x = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let nx = g.leaf(&x);
    let s = g.softmax_rows(nx).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);
    let t = g.constant(1, 2, vec![1.0, 0.0]);
    let loss = g.mse(s, t).unwrap();
    assert_eq!(g.value(loss), &[0.25]);
    g.backward(loss).unwrap();
    let grad = g.grad(nx).unwrap();
    assert!((grad[0] + 0.25).abs() < 1e-15 && (grad[1] - 0.25).abs() < 1e-15);
}
