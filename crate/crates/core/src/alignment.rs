//! Adapters, attention poolers and the alignment model.
//!
//! The trainable part of the system. Frozen audio tokens `f` (m x d_a) are
//! mapped into each target space by a token-wise MLP adapter, then compressed
//! to the target token count by an attention pooler with learned query
//! tokens:
//!
//! ```text
//! z_hat_t = pool_t(adapt_t(f), l)    -> l x d_t
//! z_hat_v = pool_v(adapt_v(f), 1)    -> d_v
//! ```
//!
//! The training loss is `mse(z_hat_t, z_t) + mse(z_hat_v, z_v)`, each term
//! normalized by its own element count so neither branch dominates by mere
//! width.
//!
//! Poolers allocate `q_max` query tokens up front and slice the first `l`
//! per forward pass, so one model serves captions of any length up to
//! `q_max`. A `Mean` pooling mode (adaptive segment averaging, no learned
//! queries) exists for ablation comparisons.

use serde::{Deserialize, Serialize};

use crate::encoders::{AudioTokens, CaptionRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which parameter group a parameter belongs to. The two branches are
/// optimized by separate optimizers with separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Text,
    Vision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Cross-attention from learned query tokens (the full model).
    Attention,
    /// Adaptive mean over token segments; no learned pooling parameters.
    /// Kept for ablations.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_t: usize,
    pub d_v: usize,
    /// Adapter hidden width. Defaults to `2 * max(d_t, d_v)`.
    pub d_hidden: usize,
    pub head_count: usize,
    /// Query tokens allocated per pooler; the longest caption this model can
    /// target.
    pub q_max: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn new(d_a: usize, d_t: usize, d_v: usize, q_max: usize) -> Self {
        ModelConfig {
            d_a,
            d_t,
            d_v,
            d_hidden: 2 * d_t.max(d_v),
            head_count: 4,
            q_max,
            pooling: Pooling::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_t == 0 || self.d_v == 0 || self.d_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.q_max == 0 {
            return Err(Error::Config("q_max must be at least 1".into()));
        }
        if self.head_count == 0 {
            return Err(Error::Config("head_count must be at least 1".into()));
        }
        if self.pooling == Pooling::Attention {
            for (name, d) in [("d_t", self.d_t), ("d_v", self.d_v)] {
                if d % self.head_count != 0 {
                    return Err(Error::Config(format!(
                        "{name} = {d} is not divisible by head_count = {}",
                        self.head_count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Token-wise two-layer MLP: `x -> gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Adapter {
    /// Fan-in scaled uniform init for the weights, zero biases.
    fn init(d_in: usize, d_hidden: usize, d_out: usize, seed: u64, name: &str) -> Self {
        let lim1 = 1.0 / (d_in as f64).sqrt();
        let lim2 = 1.0 / (d_hidden as f64).sqrt();
        let mut r1 = Rng::derive(seed, &format!("init/{name}.w1"));
        let mut r2 = Rng::derive(seed, &format!("init/{name}.w2"));
        Adapter {
            w1: Tensor::uniform(d_in, d_hidden, lim1, &mut r1).with_grad(),
            b1: Tensor::zeros(vec![1, d_hidden]).with_grad(),
            w2: Tensor::uniform(d_hidden, d_out, lim2, &mut r2).with_grad(),
            b2: Tensor::zeros(vec![1, d_out]).with_grad(),
        }
    }

    fn bind(&self, g: &mut Graph) -> AdapterNodes {
        AdapterNodes {
            w1: g.leaf(&self.w1),
            b1: g.leaf(&self.b1),
            w2: g.leaf(&self.w2),
            b2: g.leaf(&self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl AdapterNodes {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_bias(h, self.b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, self.w2)?;
        g.add_bias(out, self.b2)
    }
}

/// Cross-attention pooler: `q_max` learned query tokens attend over the
/// adapted audio tokens; the first `out_len` queries are used per call.
#[derive(Debug, Clone)]
pub struct AttentionPooler {
    pub queries: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub head_count: usize,
}

impl AttentionPooler {
    fn init(d: usize, q_max: usize, head_count: usize, seed: u64, name: &str) -> Self {
        let sigma = 0.02;
        let draw = |suffix: &str, rows: usize| {
            let mut rng = Rng::derive(seed, &format!("init/{name}.{suffix}"));
            Tensor::normal(rows, d, sigma, &mut rng).with_grad()
        };
        AttentionPooler {
            queries: draw("queries", q_max),
            w_q: draw("w_q", d),
            w_k: draw("w_k", d),
            w_v: draw("w_v", d),
            w_o: draw("w_o", d),
            head_count,
        }
    }

    fn bind(&self, g: &mut Graph) -> PoolerNodes {
        PoolerNodes {
            queries: g.leaf(&self.queries),
            w_q: g.leaf(&self.w_q),
            w_k: g.leaf(&self.w_k),
            w_v: g.leaf(&self.w_v),
            w_o: g.leaf(&self.w_o),
            head_count: self.head_count,
            q_max: self.queries.rows(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolerNodes {
    queries: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
    head_count: usize,
    q_max: usize,
}

impl PoolerNodes {
    /// Multi-head cross-attention: out_len queries over the input tokens.
    fn forward(&self, g: &mut Graph, x: NodeId, out_len: usize) -> Result<NodeId> {
        if out_len == 0 {
            return Err(Error::Contract("pooling to zero tokens".into()));
        }
        if out_len > self.q_max {
            return Err(Error::Capacity(format!(
                "requested {out_len} pooled tokens, but only {} query tokens are allocated",
                self.q_max
            )));
        }
        let (_, d) = g.shape_of(x);
        let heads = self.head_count;
        let d_head = d / heads;
        let q_sel = g.slice_rows(self.queries, 0, out_len)?;
        let q = g.matmul(q_sel, self.w_q)?;
        let k = g.matmul(x, self.w_k)?;
        let v = g.matmul(x, self.w_v)?;
        let mut parts = Vec::with_capacity(heads);
        let inv_sqrt = 1.0 / (d_head as f64).sqrt();
        for h in 0..heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax_rows(scores)?;
            parts.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&parts)?;
        g.matmul(merged, self.w_o)
    }
}

/// One pooler, either kind.
#[derive(Debug, Clone)]
pub enum Pooler {
    Attention(AttentionPooler),
    Mean,
}

#[derive(Debug, Clone, Copy)]
enum PoolerBinding {
    Attention(PoolerNodes),
    Mean { q_max: usize },
}

impl PoolerBinding {
    fn forward(&self, g: &mut Graph, x: NodeId, out_len: usize) -> Result<NodeId> {
        match self {
            PoolerBinding::Attention(nodes) => nodes.forward(g, x, out_len),
            PoolerBinding::Mean { q_max } => {
                if out_len == 0 {
                    return Err(Error::Contract("pooling to zero tokens".into()));
                }
                if out_len > *q_max {
                    return Err(Error::Capacity(format!(
                        "requested {out_len} pooled tokens, but q_max is {q_max}"
                    )));
                }
                g.segment_mean_rows(x, out_len)
            }
        }
    }
}

/// The trainable alignment model: two adapters, two poolers.
#[derive(Debug, Clone)]
pub struct AlignmentModel {
    config: ModelConfig,
    pub adapter_t: Adapter,
    pub adapter_v: Adapter,
    pub pooler_t: Pooler,
    pub pooler_v: Pooler,
}

/// Node ids of every bound parameter for one graph.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    adapter_t: AdapterNodes,
    adapter_v: AdapterNodes,
    pooler_t: PoolerBinding,
    pooler_v: PoolerBinding,
}

/// Predicted conditioning signals for one clip.
#[derive(Debug, Clone)]
pub struct ConditioningPair {
    /// `l x d_t`.
    pub z_hat_t: Tensor,
    /// `d_v` (rank 1).
    pub z_hat_v: Tensor,
}

impl AlignmentModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let make_pooler = |d: usize, name: &str| match config.pooling {
            Pooling::Attention => {
                Pooler::Attention(AttentionPooler::init(d, config.q_max, config.head_count, seed, name))
            }
            Pooling::Mean => Pooler::Mean,
        };
        Ok(AlignmentModel {
            adapter_t: Adapter::init(config.d_a, config.d_hidden, config.d_t, seed, "adapter_t"),
            adapter_v: Adapter::init(config.d_a, config.d_hidden, config.d_v, seed, "adapter_v"),
            pooler_t: make_pooler(config.d_t, "pooler_t"),
            pooler_v: make_pooler(config.d_v, "pooler_v"),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Names of all trainable parameters, in canonical order.
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec!["adapter_t.w1", "adapter_t.b1", "adapter_t.w2", "adapter_t.b2"];
        if matches!(self.pooler_t, Pooler::Attention(_)) {
            names.extend([
                "pooler_t.queries",
                "pooler_t.w_q",
                "pooler_t.w_k",
                "pooler_t.w_v",
                "pooler_t.w_o",
            ]);
        }
        names.extend(["adapter_v.w1", "adapter_v.b1", "adapter_v.w2", "adapter_v.b2"]);
        if matches!(self.pooler_v, Pooler::Attention(_)) {
            names.extend([
                "pooler_v.queries",
                "pooler_v.w_q",
                "pooler_v.w_k",
                "pooler_v.w_v",
                "pooler_v.w_o",
            ]);
        }
        names
    }

    /// Which optimizer group a parameter belongs to.
    pub fn branch_of(name: &str) -> Branch {
        if name.starts_with("adapter_t") || name.starts_with("pooler_t") {
            Branch::Text
        } else {
            Branch::Vision
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let (component, field) = name.split_once('.')?;
        match component {
            "adapter_t" | "adapter_v" => {
                let a = if component == "adapter_t" { &self.adapter_t } else { &self.adapter_v };
                match field {
                    "w1" => Some(&a.w1),
                    "b1" => Some(&a.b1),
                    "w2" => Some(&a.w2),
                    "b2" => Some(&a.b2),
                    _ => None,
                }
            }
            "pooler_t" | "pooler_v" => {
                let p = if component == "pooler_t" { &self.pooler_t } else { &self.pooler_v };
                match p {
                    Pooler::Attention(at) => match field {
                        "queries" => Some(&at.queries),
                        "w_q" => Some(&at.w_q),
                        "w_k" => Some(&at.w_k),
                        "w_v" => Some(&at.w_v),
                        "w_o" => Some(&at.w_o),
                        _ => None,
                    },
                    Pooler::Mean => None,
                }
            }
            _ => None,
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (component, field) = name.split_once('.')?;
        let target: Option<&mut Tensor> = match component {
            "adapter_t" | "adapter_v" => {
                let a = if component == "adapter_t" { &mut self.adapter_t } else { &mut self.adapter_v };
                match field {
                    "w1" => Some(&mut a.w1),
                    "b1" => Some(&mut a.b1),
                    "w2" => Some(&mut a.w2),
                    "b2" => Some(&mut a.b2),
                    _ => None,
                }
            }
            "pooler_t" | "pooler_v" => {
                let p = if component == "pooler_t" { &mut self.pooler_t } else { &mut self.pooler_v };
                match p {
                    Pooler::Attention(at) => match field {
                        "queries" => Some(&mut at.queries),
                        "w_q" => Some(&mut at.w_q),
                        "w_k" => Some(&mut at.w_k),
                        "w_v" => Some(&mut at.w_v),
                        "w_o" => Some(&mut at.w_o),
                        _ => None,
                    },
                    Pooler::Mean => None,
                }
            }
            _ => None,
        };
        target
    }

    /// Total trainable scalar count. Stable across runs for a fixed config.
    pub fn parameter_count(&self) -> usize {
        self.param_names()
            .iter()
            .map(|n| self.param(n).expect("listed param exists").numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for name in self.param_names() {
            self.param_mut(name).unwrap().zero_grad();
        }
    }

    /// Register every parameter on a fresh graph.
    pub fn bind(&self, g: &mut Graph) -> ModelBinding {
        let bind_pooler = |p: &Pooler, g: &mut Graph| match p {
            Pooler::Attention(at) => PoolerBinding::Attention(at.bind(g)),
            Pooler::Mean => PoolerBinding::Mean { q_max: self.config.q_max },
        };
        ModelBinding {
            adapter_t: self.adapter_t.bind(g),
            adapter_v: self.adapter_v.bind(g),
            pooler_t: bind_pooler(&self.pooler_t, g),
            pooler_v: bind_pooler(&self.pooler_v, g),
        }
    }

    /// Forward pass: audio tokens to `(z_hat_t [l x d_t], z_hat_v [1 x d_v])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        tokens: NodeId,
        target_len: usize,
    ) -> Result<(NodeId, NodeId)> {
        let (_, width) = g.shape_of(tokens);
        if width != self.config.d_a {
            return Err(Error::Shape(format!(
                "audio tokens have width {width}, model expects {}",
                self.config.d_a
            )));
        }
        let adapted_t = binding.adapter_t.forward(g, tokens)?;
        let z_hat_t = binding.pooler_t.forward(g, adapted_t, target_len)?;
        let adapted_v = binding.adapter_v.forward(g, tokens)?;
        let z_hat_v = binding.pooler_v.forward(g, adapted_v, 1)?;
        Ok((z_hat_t, z_hat_v))
    }

    /// Collect `graph` gradients into the parameter tensors' buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &ModelBinding) {
        for (name, node) in binding_pairs(binding) {
            let grad = g
                .grad(node)
                .expect("backward must run before accumulate_grads")
                .to_vec();
            self.param_mut(name).expect("bound param exists").accumulate_grad(&grad);
        }
    }

    /// Forward without gradient bookkeeping; for evaluation and export.
    pub fn infer(&self, tokens: &AudioTokens, target_len: usize) -> Result<ConditioningPair> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let f = g.leaf(tokens.tensor());
        let (zt, zv) = self.forward(&mut g, &binding, f, target_len)?;
        let z_hat_t = g.value_tensor(zt);
        let z_hat_v_row = g.value_tensor(zv);
        let d_v = self.config.d_v;
        Ok(ConditioningPair {
            z_hat_t,
            z_hat_v: z_hat_v_row.reshaped(vec![d_v])?,
        })
    }
}

fn binding_pairs(binding: &ModelBinding) -> Vec<(&'static str, NodeId)> {
    let a_t = &binding.adapter_t;
    let a_v = &binding.adapter_v;
    let mut out = vec![
        ("adapter_t.w1", a_t.w1),
        ("adapter_t.b1", a_t.b1),
        ("adapter_t.w2", a_t.w2),
        ("adapter_t.b2", a_t.b2),
    ];
    if let PoolerBinding::Attention(p) = &binding.pooler_t {
        out.extend([
            ("pooler_t.queries", p.queries),
            ("pooler_t.w_q", p.w_q),
            ("pooler_t.w_k", p.w_k),
            ("pooler_t.w_v", p.w_v),
            ("pooler_t.w_o", p.w_o),
        ]);
    }
    out.extend([
        ("adapter_v.w1", a_v.w1),
        ("adapter_v.b1", a_v.b1),
        ("adapter_v.w2", a_v.w2),
        ("adapter_v.b2", a_v.b2),
    ]);
    if let PoolerBinding::Attention(p) = &binding.pooler_v {
        out.extend([
            ("pooler_v.queries", p.queries),
            ("pooler_v.w_q", p.w_q),
            ("pooler_v.w_k", p.w_k),
            ("pooler_v.w_v", p.w_v),
            ("pooler_v.w_o", p.w_o),
        ]);
    }
    out
}

/// Both MSE terms of the alignment loss on an existing graph. Returns
/// `(total, text_term, vision_term)` nodes.
pub fn alignment_loss_on_graph(
    g: &mut Graph,
    z_hat_t: NodeId,
    z_t: NodeId,
    z_hat_v: NodeId,
    z_v: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let loss_t = g.mse(z_hat_t, z_t)?;
    let loss_v = g.mse(z_hat_v, z_v)?;
    let total = g.add(loss_t, loss_v)?;
    Ok((total, loss_t, loss_v))
}

/// Loss value for one (clip tokens, caption) pair without touching
/// gradients. Used for validation.
pub fn alignment_loss_value(
    model: &AlignmentModel,
    tokens: &AudioTokens,
    caption: &CaptionRecord,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g);
    let f = g.leaf(tokens.tensor());
    let (zt, zv) = model.forward(&mut g, &binding, f, caption.token_count())?;
    let t_target = g.leaf(&caption.text_embedding);
    let v_row = caption.vision_embedding.reshaped(vec![1, caption.vision_embedding.numel()])?;
    let v_target = g.leaf(&v_row);
    let (total, lt, lv) = alignment_loss_on_graph(&mut g, zt, t_target, zv, v_target)?;
    Ok(LossParts {
        total: g.value(total)[0],
        text: g.value(lt)[0],
        vision: g.value(lv)[0],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub text: f64,
    pub vision: f64,
}
