//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for every forward pass: each operation appends
//! a node holding its inputs, its computed value, and enough saved state to
//! replay the local derivative. Node ids are indices into the tape, so the
//! tape order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Values are owned `Vec<f64>` buffers shaped as `rows x cols` (a rank-1
//! tensor enters as a single row, a scalar as 1 x 1). Everything is 64-bit
//! and sequential, so gradients are bit-reproducible for a given graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `a` is rows x cols, `bias` is 1 x cols, broadcast over rows.
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: f64 },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    Transpose { a: NodeId },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Mean over row segments: output row j averages input rows
    /// [floor(j*p/q), ceil((j+1)*p/q)).
    SegmentMeanRows { a: NodeId },
    Mse { a: NodeId, b: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Dynamic computation graph (tape) for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients, indexed like `nodes`. Empty until the first
    /// `backward`; repeated backward calls add into these buffers.
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Insert a tensor as a leaf. The data is copied; `requires_grad` is
    /// taken from the tensor. Rank-1 tensors become a single row.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            rows: t.rows(),
            cols: t.cols(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
        })
    }

    /// Leaf from raw parts, never differentiated.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        assert_eq!(rows * cols, data.len(), "constant shape/data mismatch");
        self.push(Node { op: Op::Leaf, rows, cols, value: data, requires_grad: false })
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    /// Copy a node's value out as a tensor (scalar nodes become shape `[1]`).
    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        let shape = if n.rows == 1 && n.cols == 1 {
            vec![1]
        } else {
            vec![n.rows, n.cols]
        };
        Tensor::from_vec(shape, n.value.clone()).expect("node value is consistent")
    }

    /// Gradient buffer of a node, if `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).map(|g| g.as_slice())
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    // ---- operations -----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape_of(a);
        let (k2, n) = self.shape_of(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: lhs is {m}x{k}, rhs is {k2}x{n}"
            )));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let requires_grad = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Node { op: Op::MatMul { a, b }, rows: m, cols: n, value, requires_grad }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::Shape(format!("add: {sa:?} vs {sb:?}")));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let requires_grad = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Node { op: Op::Add { a, b }, rows: sa.0, cols: sa.1, value, requires_grad }))
    }

    /// Row-broadcast add: `a` (p x q) + `bias` (1 x q).
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (p, q) = self.shape_of(a);
        let (br, bq) = self.shape_of(bias);
        if br != 1 || bq != q {
            return Err(Error::Shape(format!(
                "add_bias: input is {p}x{q}, bias is {br}x{bq}, want 1x{q}"
            )));
        }
        let bv = self.value(bias).to_vec();
        let mut value = self.value(a).to_vec();
        for r in 0..p {
            for c in 0..q {
                value[r * q + c] += bv[c];
            }
        }
        let requires_grad = self.node(a).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(Node { op: Op::AddBias { a, bias }, rows: p, cols: q, value, requires_grad }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (p, q) = self.shape_of(a);
        let value: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let requires_grad = self.node(a).requires_grad;
        self.push(Node { op: Op::Scale { a, factor }, rows: p, cols: q, value, requires_grad })
    }

    /// GELU with the tanh approximation:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (p, q) = self.shape_of(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let requires_grad = self.node(a).requires_grad;
        self.push(Node { op: Op::Gelu { a }, rows: p, cols: q, value, requires_grad })
    }

    /// Numerically stable row-wise softmax. Rejects NaN inputs: a NaN here
    /// always means an upstream computation already went wrong.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (p, q) = self.shape_of(a);
        let av = self.value(a);
        if av.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax over NaN input".into()));
        }
        let mut value = vec![0.0; p * q];
        for r in 0..p {
            let row = &av[r * q..(r + 1) * q];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..q {
                let e = (row[c] - max).exp();
                value[r * q + c] = e;
                sum += e;
            }
            for c in 0..q {
                value[r * q + c] /= sum;
            }
        }
        let requires_grad = self.node(a).requires_grad;
        Ok(self.push(Node { op: Op::SoftmaxRows { a }, rows: p, cols: q, value, requires_grad }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (p, q) = self.shape_of(a);
        let av = self.value(a);
        let mut value = vec![0.0; p * q];
        for r in 0..p {
            for c in 0..q {
                value[c * p + r] = av[r * q + c];
            }
        }
        let requires_grad = self.node(a).requires_grad;
        self.push(Node { op: Op::Transpose { a }, rows: q, cols: p, value, requires_grad })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (p, q) = self.shape_of(a);
        if len == 0 || start + len > p {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) of a {p}-row matrix",
                start + len
            )));
        }
        let value = self.value(a)[start * q..(start + len) * q].to_vec();
        let requires_grad = self.node(a).requires_grad;
        Ok(self.push(Node { op: Op::SliceRows { a, start }, rows: len, cols: q, value, requires_grad }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (p, q) = self.shape_of(a);
        if len == 0 || start + len > q {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of a {q}-column matrix",
                start + len
            )));
        }
        let av = self.value(a);
        let mut value = vec![0.0; p * len];
        for r in 0..p {
            value[r * len..(r + 1) * len]
                .copy_from_slice(&av[r * q + start..r * q + start + len]);
        }
        let requires_grad = self.node(a).requires_grad;
        Ok(self.push(Node { op: Op::SliceCols { a, start }, rows: p, cols: len, value, requires_grad }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        };
        let (p, _) = self.shape_of(first);
        let mut total = 0;
        for &part in parts {
            let (pr, pc) = self.shape_of(part);
            if pr != p {
                return Err(Error::Shape(format!(
                    "concat_cols: rows {pr} vs {p}"
                )));
            }
            total += pc;
        }
        let mut value = vec![0.0; p * total];
        let mut col = 0;
        for &part in parts {
            let (_, pc) = self.shape_of(part);
            let pv = self.value(part).to_vec();
            for r in 0..p {
                value[r * total + col..r * total + col + pc]
                    .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
            col += pc;
        }
        let requires_grad = parts.iter().any(|&id| self.node(id).requires_grad);
        Ok(self.push(Node {
            op: Op::ConcatCols { parts: parts.to_vec() },
            rows: p,
            cols: total,
            value,
            requires_grad,
        }))
    }

    /// Adaptive mean over rows: p input rows averaged into `out_rows`
    /// segments. `out_rows = 1` is plain mean pooling.
    pub fn segment_mean_rows(&mut self, a: NodeId, out_rows: usize) -> Result<NodeId> {
        let (p, q) = self.shape_of(a);
        if out_rows == 0 {
            return Err(Error::Shape("segment_mean_rows to zero rows".into()));
        }
        let av = self.value(a);
        let mut value = vec![0.0; out_rows * q];
        for j in 0..out_rows {
            let (lo, hi) = segment_bounds(p, out_rows, j);
            let inv = 1.0 / (hi - lo) as f64;
            for r in lo..hi {
                for c in 0..q {
                    value[j * q + c] += av[r * q + c] * inv;
                }
            }
        }
        let requires_grad = self.node(a).requires_grad;
        Ok(self.push(Node {
            op: Op::SegmentMeanRows { a },
            rows: out_rows,
            cols: q,
            value,
            requires_grad,
        }))
    }

    /// Mean squared error over all elements: `sum((a - b)^2) / numel`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(Error::Shape(format!("mse: {sa:?} vs {sb:?}")));
        }
        let n = (sa.0 * sa.1) as f64;
        let sum: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let requires_grad = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Node {
            op: Op::Mse { a, b },
            rows: 1,
            cols: 1,
            value: vec![sum / n],
            requires_grad,
        }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients accumulate into the
    /// graph's buffers: calling `backward` twice without `zero_grads` yields
    /// exactly twice the gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.shape_of(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        // Fresh pass into scratch buffers, then fold into the persistent
        // accumulators; re-propagating over already-accumulated values would
        // double-count interior contributions.
        let mut scratch: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        scratch[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if scratch[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = scratch[i].clone();
            self.propagate(i, &g, &mut scratch);
        }

        if self.grads.len() < self.nodes.len() {
            let start = self.grads.len();
            for n in &self.nodes[start..] {
                self.grads.push(vec![0.0; n.value.len()]);
            }
        }
        for (acc, s) in self.grads.iter_mut().zip(&scratch) {
            for (a, b) in acc.iter_mut().zip(s) {
                *a += b;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let (p, q) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape_of(*a);
                let (_, n) = self.shape_of(*b);
                if self.node(*a).requires_grad {
                    // dA = g . B^T
                    let bv = self.value(*b);
                    let da = &mut scratch[a.0];
                    for r in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for cc in 0..n {
                                acc += g[r * n + cc] * bv[kk * n + cc];
                            }
                            da[r * k + kk] += acc;
                        }
                    }
                }
                if self.node(*b).requires_grad {
                    // dB = A^T . g
                    let av = self.value(*a);
                    let db = &mut scratch[b.0];
                    for kk in 0..k {
                        for cc in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += av[r * k + kk] * g[r * n + cc];
                            }
                            db[kk * n + cc] += acc;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.node(id).requires_grad {
                        for (dst, src) in scratch[id.0].iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.node(*a).requires_grad {
                    for (dst, src) in scratch[a.0].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.node(*bias).requires_grad {
                    let db = &mut scratch[bias.0];
                    for r in 0..p {
                        for c in 0..q {
                            db[c] += g[r * q + c];
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.node(*a).requires_grad {
                    for (dst, src) in scratch[a.0].iter_mut().zip(g) {
                        *dst += src * factor;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.node(*a).requires_grad {
                    let av = self.value(*a);
                    let da = &mut scratch[a.0];
                    for idx in 0..av.len() {
                        da[idx] += g[idx] * gelu_grad_scalar(av[idx]);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.node(*a).requires_grad {
                    // dx = s * (g - <g, s>) per row
                    let s = &node.value;
                    let da = &mut scratch[a.0];
                    for r in 0..p {
                        let row = r * q;
                        let mut dot = 0.0;
                        for c in 0..q {
                            dot += g[row + c] * s[row + c];
                        }
                        for c in 0..q {
                            da[row + c] += s[row + c] * (g[row + c] - dot);
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if self.node(*a).requires_grad {
                    let da = &mut scratch[a.0];
                    // node is q0 x p0 where a is p0 x q0; here p = a.cols
                    for r in 0..p {
                        for c in 0..q {
                            da[c * p + r] += g[r * q + c];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.node(*a).requires_grad {
                    let da = &mut scratch[a.0];
                    let offset = start * q;
                    for idx in 0..g.len() {
                        da[offset + idx] += g[idx];
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.node(*a).requires_grad {
                    let (_, aq) = self.shape_of(*a);
                    let da = &mut scratch[a.0];
                    for r in 0..p {
                        for c in 0..q {
                            da[r * aq + start + c] += g[r * q + c];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut col = 0;
                for &part in parts {
                    let (_, pc) = self.shape_of(part);
                    if self.node(part).requires_grad {
                        let dp = &mut scratch[part.0];
                        for r in 0..p {
                            for c in 0..pc {
                                dp[r * pc + c] += g[r * q + col + c];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::SegmentMeanRows { a } => {
                if self.node(*a).requires_grad {
                    let (ap, _) = self.shape_of(*a);
                    let da = &mut scratch[a.0];
                    for j in 0..p {
                        let (lo, hi) = segment_bounds(ap, p, j);
                        let inv = 1.0 / (hi - lo) as f64;
                        for r in lo..hi {
                            for c in 0..q {
                                da[r * q + c] += g[j * q + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.len() as f64;
                let gs = g[0];
                if self.node(*a).requires_grad {
                    let da = &mut scratch[a.0];
                    for idx in 0..av.len() {
                        da[idx] += gs * 2.0 * (av[idx] - bv[idx]) / n;
                    }
                }
                if self.node(*b).requires_grad {
                    let db = &mut scratch[b.0];
                    for idx in 0..av.len() {
                        db[idx] -= gs * 2.0 * (av[idx] - bv[idx]) / n;
                    }
                }
            }
        }
    }
}

/// Row segment [lo, hi) feeding output row `j` when `p` rows are pooled
/// into `q` rows. Segments are non-empty for every j < q, including q > p.
fn segment_bounds(p: usize, q: usize, j: usize) -> (usize, usize) {
    let lo = j * p / q;
    // hi > lo always holds: ceil((j+1)p/q) > floor(jp/q) for p > 0.
    let hi = ((j + 1) * p).div_ceil(q);
    (lo, hi)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_COEF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = k * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let dinner = k * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_column() {
        let mut g = Graph::new();
        let eye = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(1, 2, vec![1.0, 2.0]);
        let col = g.constant(2, 1, vec![3.0, 4.0]);
        let s = g.matmul(row, col).unwrap();
        assert_eq!(g.value(s), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]);
        let b = g.constant(2, 3, vec![0.0; 6]);
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(2, 2, vec![0.0; 4]);
        let b = g.constant(1, 4, vec![0.0; 4]);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_equal_inputs_are_uniform() {
        let mut g = Graph::new();
        let a = g.constant(2, 4, vec![5.0, 5.0, 5.0, 5.0, -1.0, 0.0, 1.0, 2.0]);
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for c in 0..4 {
            assert!((v[c] - 0.25).abs() < 1e-15);
        }
        let sum: f64 = v[4..8].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for &x in v {
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn softmax_of_nan_is_a_numeric_error() {
        let mut g = Graph::new();
        let a = g.constant(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(g.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn mse_hand_values() {
        let mut g = Graph::new();
        let a = g.constant(1, 2, vec![1.0, 0.0]);
        let b = g.constant(1, 2, vec![0.0, 0.0]);
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l), &[0.5]);

        let c = g.constant(1, 2, vec![1.0, 0.0]);
        let l0 = g.mse(a, c).unwrap();
        assert_eq!(g.value(l0), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let t = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let a = g.leaf(&t);
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_and_zeroes() {
        let mut g = Graph::new();
        let t = tensor2(1, 2, &[3.0, -1.0]).with_grad();
        let a = g.leaf(&t);
        let target = g.constant(1, 2, vec![0.0, 0.0]);
        let loss = g.mse(a, target).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(a).unwrap().to_vec();
        // d/da of mean((a)^2) = 2a / n = a here (n = 2)
        assert_eq!(once, vec![3.0, -1.0]);
        g.backward(loss).unwrap();
        let twice = g.grad(a).unwrap().to_vec();
        assert_eq!(twice, vec![6.0, -2.0]);
        g.zero_grads();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn disconnected_leaf_keeps_zero_grad() {
        let mut g = Graph::new();
        let used = tensor2(1, 2, &[1.0, 2.0]).with_grad();
        let unused = tensor2(1, 2, &[5.0, 5.0]).with_grad();
        let a = g.leaf(&used);
        let b = g.leaf(&unused);
        let target = g.constant(1, 2, vec![0.0, 0.0]);
        let loss = g.mse(a, target).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0]);
        let _ = b;
    }

    #[test]
    fn identical_value_rows_pool_to_projection_of_that_row() {
        // segment mean of identical rows is that row, any segment count
        let mut g = Graph::new();
        let a = g.constant(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let m = g.segment_mean_rows(a, 2).unwrap();
        assert_eq!(g.value(m), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn segment_bounds_cover_all_rows_without_gaps() {
        for p in 1..12 {
            for q in 1..12 {
                let mut covered = vec![false; p];
                let mut prev_hi = 0;
                for j in 0..q {
                    let (lo, hi) = segment_bounds(p, q, j);
                    assert!(lo < hi, "empty segment p={p} q={q} j={j}");
                    assert!(hi <= p);
                    assert!(lo <= prev_hi, "gap p={p} q={q} j={j}");
                    prev_hi = prev_hi.max(hi);
                    for r in lo..hi {
                        covered[r] = true;
                    }
                }
                assert!(covered.iter().all(|&c| c), "rows uncovered p={p} q={q}");
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = g.transpose(a);
        assert_eq!(g.shape_of(t), (3, 2));
        let tt = g.transpose(t);
        assert_eq!(g.value(tt), g.value(a));
    }

    #[test]
    fn slice_and_concat_are_inverses() {
        let mut g = Graph::new();
        let a = g.constant(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = g.slice_cols(a, 0, 2).unwrap();
        let right = g.slice_cols(a, 2, 2).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back), g.value(a));

        let top = g.slice_rows(a, 0, 1).unwrap();
        assert_eq!(g.value(top), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let w = tensor2(3, 3, &[0.1, -0.2, 0.3, 0.5, 0.4, -0.6, 0.7, 0.8, 0.9]).with_grad();
            let x = g.constant(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
            let wn = g.leaf(&w);
            let y = g.matmul(x, wn).unwrap();
            let act = g.gelu(y);
            let sm = g.softmax_rows(act).unwrap();
            let target = g.constant(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            let loss = g.mse(sm, target).unwrap();
            g.backward(loss).unwrap();
            g.grad(wn).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        // bitwise equality, not approximate
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
