//! Finite-difference gradient machinery shared by the integration test
//! targets.
//!
//! Numeric gradients come from central differences on graphs rebuilt from
//! scratch for every probe, so nothing computed by `backward` can leak into
//! the reference values. The sweep functions panic with coordinates and
//! values on the first tolerance breach and return the worst relative error
//! seen, which the acceptance target aggregates.

#![allow(dead_code)]

use ssounds_core::alignment::{
    alignment_loss_on_graph, AlignmentModel, ModelConfig, Pooling,
};
use ssounds_core::graph::{Graph, NodeId};
use ssounds_core::rng::Rng;
use ssounds_core::tensor::Tensor;

/// Central-difference step. Large enough that f64 rounding in the two loss
/// evaluations stays well below the truncation error, small enough that the
/// quadratic term does not dominate for the curvatures these ops produce.
pub const STEP: f64 = 1e-5;

/// Acceptable relative disagreement between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

const SWEEP_SEED: u64 = 0x6ad5_0c7e_57a1_b3e9;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut probe = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let saved = probe[i];
        probe[i] = saved + STEP;
        let up = f(&probe);
        probe[i] = saved - STEP;
        let down = f(&probe);
        probe[i] = saved;
        grad.push((up - down) / (2.0 * STEP));
    }
    grad
}

/// Compares gradients coordinate by coordinate; returns the worst relative
/// error, panics if any coordinate exceeds [`TOLERANCE`].
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], what: &str) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "{what}: gradient length mismatch");
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        assert!(
            err < TOLERANCE,
            "{what}: coordinate {i}: analytic {a:.12e}, numeric {n:.12e}, \
             relative error {err:.3e} >= {TOLERANCE:.0e}"
        );
        worst = worst.max(err);
    }
    worst
}

/// Checks one scalar-valued graph construction against central differences,
/// once per input tensor. `build` is called on fresh graphs with one leaf
/// per input and must return a 1x1 node.
pub fn check_op(
    inputs: &[Tensor],
    what: &str,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &ids);
    let (r, c) = g.shape_of(loss);
    assert_eq!((r, c), (1, 1), "{what}: check target must be scalar");
    g.backward(loss).expect("backward on a freshly built graph");

    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .unwrap_or_else(|| panic!("{what}: input {k} has no gradient"))
            .to_vec();
        let numeric = numeric_gradient(
            |x| {
                let mut probe = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            let patched = Tensor::from_vec(t.shape().to_vec(), x.to_vec())
                                .expect("probe tensor shape")
                                .with_grad();
                            probe.leaf(&patched)
                        } else {
                            probe.leaf(t)
                        }
                    })
                    .collect();
                let loss = build(&mut probe, &ids);
                probe.value(loss)[0]
            },
            inputs[k].data(),
        );
        worst = worst.max(compare_gradients(&analytic, &numeric, &format!("{what}, input {k}")));
    }
    worst
}

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("random tensor shape").with_grad()
}

fn rand_dim(rng: &mut Rng, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

fn sweep_rng(op: &str, instance: usize) -> Rng {
    Rng::derive(SWEEP_SEED, &format!("gradcheck:{op}:{instance}"))
}

/// Random target of the node's shape so the loss `mse(node, target)` probes
/// the op with a generic, nonzero downstream gradient.
fn mse_against_target(g: &mut Graph, node: NodeId, target: &[f64]) -> NodeId {
    let (r, c) = g.shape_of(node);
    assert_eq!(r * c, target.len(), "target shape mismatch");
    let t = g.constant(r, c, target.to_vec());
    g.mse(node, t).expect("mse against same-shape target")
}

fn target_for(rng: &mut Rng, numel: usize) -> Vec<f64> {
    (0..numel).map(|_| rng.uniform(-1.5, 1.5)).collect()
}

pub fn sweep_matmul(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("matmul", i);
        let (m, k, n) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 4));
        let a = rand_tensor(&mut rng, m, k, 1.5);
        let b = rand_tensor(&mut rng, k, n, 1.5);
        let target = target_for(&mut rng, m * n);
        worst = worst.max(check_op(
            &[a, b],
            &format!("matmul #{i} ({m}x{k})({k}x{n})"),
            &|g, ids| {
                let y = g.matmul(ids[0], ids[1]).expect("matmul shapes");
                mse_against_target(g, y, &target)
            },
        ));
    }
    worst
}

pub fn sweep_add(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("add", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let b = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a, b], &format!("add #{i} ({r}x{c})"), &|g, ids| {
            let y = g.add(ids[0], ids[1]).expect("add shapes");
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_add_bias(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("add_bias", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let bias = rand_tensor(&mut rng, 1, c, 1.5);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a, bias], &format!("add_bias #{i} ({r}x{c})"), &|g, ids| {
            let y = g.add_bias(ids[0], ids[1]).expect("bias shape");
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_scale(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("scale", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let factor = rng.uniform(-2.0, 2.0);
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a], &format!("scale #{i} (x{factor:.3})"), &|g, ids| {
            let y = g.scale(ids[0], factor);
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_gelu(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("gelu", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        // Wider range than the other ops: the interesting curvature sits in
        // the tails as well as around zero.
        let a = rand_tensor(&mut rng, r, c, 3.0);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a], &format!("gelu #{i} ({r}x{c})"), &|g, ids| {
            let y = g.gelu(ids[0]);
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_softmax_rows(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("softmax_rows", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, r, c, 2.0);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a], &format!("softmax_rows #{i} ({r}x{c})"), &|g, ids| {
            let y = g.softmax_rows(ids[0]).expect("softmax on finite input");
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_transpose(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("transpose", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, r * c);
        worst = worst.max(check_op(&[a], &format!("transpose #{i} ({r}x{c})"), &|g, ids| {
            let y = g.transpose(ids[0]);
            mse_against_target(g, y, &target)
        }));
    }
    worst
}

pub fn sweep_slice_rows(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("slice_rows", i);
        let (r, c) = (rand_dim(&mut rng, 2, 6), rand_dim(&mut rng, 1, 4));
        let start = rand_dim(&mut rng, 0, (r - 1) as u64);
        let len = rand_dim(&mut rng, 1, (r - start) as u64);
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, len * c);
        worst = worst.max(check_op(
            &[a],
            &format!("slice_rows #{i} [{start}, {}) of {r}x{c}", start + len),
            &|g, ids| {
                let y = g.slice_rows(ids[0], start, len).expect("slice bounds");
                mse_against_target(g, y, &target)
            },
        ));
    }
    worst
}

pub fn sweep_slice_cols(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("slice_cols", i);
        let (r, c) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 2, 6));
        let start = rand_dim(&mut rng, 0, (c - 1) as u64);
        let len = rand_dim(&mut rng, 1, (c - start) as u64);
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, r * len);
        worst = worst.max(check_op(
            &[a],
            &format!("slice_cols #{i} [{start}, {}) of {r}x{c}", start + len),
            &|g, ids| {
                let y = g.slice_cols(ids[0], start, len).expect("slice bounds");
                mse_against_target(g, y, &target)
            },
        ));
    }
    worst
}

pub fn sweep_concat_cols(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("concat_cols", i);
        let r = rand_dim(&mut rng, 1, 4);
        let part_count = rand_dim(&mut rng, 2, 4);
        let mut parts = Vec::with_capacity(part_count);
        let mut total_cols = 0;
        for _ in 0..part_count {
            let c = rand_dim(&mut rng, 1, 3);
            total_cols += c;
            parts.push(rand_tensor(&mut rng, r, c, 1.5));
        }
        let target = target_for(&mut rng, r * total_cols);
        worst = worst.max(check_op(
            &parts,
            &format!("concat_cols #{i} ({part_count} parts, {r}x{total_cols})"),
            &|g, ids| {
                let y = g.concat_cols(ids).expect("concat shapes");
                mse_against_target(g, y, &target)
            },
        ));
    }
    worst
}

pub fn sweep_segment_mean_rows(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("segment_mean_rows", i);
        let (r, c) = (rand_dim(&mut rng, 1, 8), rand_dim(&mut rng, 1, 4));
        // out_rows both below and above r: segments shrink or repeat rows.
        let out_rows = rand_dim(&mut rng, 1, 8);
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let target = target_for(&mut rng, out_rows * c);
        worst = worst.max(check_op(
            &[a],
            &format!("segment_mean_rows #{i} ({r} -> {out_rows} rows)"),
            &|g, ids| {
                let y = g.segment_mean_rows(ids[0], out_rows).expect("nonzero out_rows");
                mse_against_target(g, y, &target)
            },
        ));
    }
    worst
}

pub fn sweep_mse(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = sweep_rng("mse", i);
        let (r, c) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 5));
        let a = rand_tensor(&mut rng, r, c, 1.5);
        let b = rand_tensor(&mut rng, r, c, 1.5);
        worst = worst.max(check_op(&[a, b], &format!("mse #{i} ({r}x{c})"), &|g, ids| {
            g.mse(ids[0], ids[1]).expect("mse shapes")
        }));
    }
    worst
}

/// Every differentiable op, `instances` random cases each. Returns
/// `(op name, worst relative error)` per op; panics on any breach.
pub fn all_op_sweeps(instances: usize) -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", sweep_matmul(instances)),
        ("add", sweep_add(instances)),
        ("add_bias", sweep_add_bias(instances)),
        ("scale", sweep_scale(instances)),
        ("gelu", sweep_gelu(instances)),
        ("softmax_rows", sweep_softmax_rows(instances)),
        ("transpose", sweep_transpose(instances)),
        ("slice_rows", sweep_slice_rows(instances)),
        ("slice_cols", sweep_slice_cols(instances)),
        ("concat_cols", sweep_concat_cols(instances)),
        ("segment_mean_rows", sweep_segment_mean_rows(instances)),
        ("mse", sweep_mse(instances)),
    ]
}

/// Loss of one (tokens, targets) pair under the current parameters, no
/// gradient bookkeeping. Rebuilt from scratch per call so it can serve as
/// the probe function for finite differences over parameters.
fn pipeline_loss(model: &AlignmentModel, tokens: &Tensor, z_t: &Tensor, z_v_row: &Tensor) -> f64 {
    let mut g = Graph::new();
    let binding = model.bind(&mut g);
    let tok = g.leaf(tokens);
    let (zt_hat, zv_hat) = model
        .forward(&mut g, &binding, tok, z_t.rows())
        .expect("forward on in-contract shapes");
    let tt = g.leaf(z_t);
    let tv = g.leaf(z_v_row);
    let (total, _, _) =
        alignment_loss_on_graph(&mut g, zt_hat, tt, zv_hat, tv).expect("loss shapes");
    g.value(total)[0]
}

fn plain_tensor(rng: &mut Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("tensor shape")
}

/// Full forward + loss, differentiated with respect to every parameter
/// tensor of a small model. Returns the worst relative error over all
/// instances, parameters and coordinates.
pub fn sweep_pipeline(instances: usize, pooling: Pooling) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let label = format!("pipeline:{pooling:?}:{i}");
        let mut rng = Rng::derive(SWEEP_SEED, &format!("gradcheck:{label}"));

        let mut config = ModelConfig::new(5, 4, 2, 3);
        config.d_hidden = 3;
        config.head_count = 2;
        config.pooling = pooling;
        let model_seed = 9000 + i as u64;
        let mut model = AlignmentModel::new(config.clone(), model_seed).expect("valid config");

        let m = rand_dim(&mut rng, 4, 9);
        let l = rand_dim(&mut rng, 1, config.q_max as u64);
        let tokens = plain_tensor(&mut rng, m, config.d_a, 1.5);
        let z_t = plain_tensor(&mut rng, l, config.d_t, 1.5);
        let z_v_row = plain_tensor(&mut rng, 1, config.d_v, 1.5);

        // Analytic pass: one graph, one backward, grads gathered into the
        // parameter tensors.
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let tok = g.leaf(&tokens);
        let (zt_hat, zv_hat) =
            model.forward(&mut g, &binding, tok, l).expect("forward on in-contract shapes");
        let tt = g.leaf(&z_t);
        let tv = g.leaf(&z_v_row);
        let (total, _, _) =
            alignment_loss_on_graph(&mut g, zt_hat, tt, zv_hat, tv).expect("loss shapes");
        g.backward(total).expect("backward");
        model.zero_grads();
        model.accumulate_grads(&g, &binding);

        // Numeric pass: a second model with identical parameters, perturbed
        // in place one coordinate at a time.
        let mut probe = AlignmentModel::new(config.clone(), model_seed).expect("valid config");
        for name in model.param_names() {
            let analytic = model
                .param(name)
                .expect("named param")
                .grad()
                .expect("gradient buffer")
                .to_vec();
            let base = model.param(name).expect("named param").data().to_vec();
            let numeric = numeric_gradient(
                |x| {
                    probe
                        .param_mut(name)
                        .expect("named param")
                        .data_mut()
                        .copy_from_slice(x);
                    pipeline_loss(&probe, &tokens, &z_t, &z_v_row)
                },
                &base,
            );
            probe.param_mut(name).expect("named param").data_mut().copy_from_slice(&base);
            worst =
                worst.max(compare_gradients(&analytic, &numeric, &format!("{label}, {name}")));
        }
    }
    worst
}
