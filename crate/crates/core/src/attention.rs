//! Multi-head, multi-layer self-attention over column blocks.
//!
//! Scores follow `S = (W_Q X)ᵀ (W_K X) / scale`; column `c` of the output is a
//! weighted sum of the value columns with weights taken from column `c` of
//! `softmax(S + M)` (or `S` itself for linear attention). The causal mask lets
//! column `c` see rows `r <= c` only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

impl Direction {
    pub fn is_causal(self) -> bool {
        self == Direction::Unidirectional
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Divide scores by the embedding dimension.
    #[default]
    Dim,
    SqrtDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub heads: usize,
    pub residual: bool,
    /// Hidden width of the ReLU feed-forward block, if any.
    pub ffn_width: Option<usize>,
    pub layer_norm: bool,
}

impl LayerShape {
    /// One head, nothing else.
    pub fn plain() -> Self {
        LayerShape {
            heads: 1,
            residual: false,
            ffn_width: None,
            layer_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: Vec<LayerShape>,
    pub kind: AttentionKind,
    #[serde(default)]
    pub scale: ScaleRule,
}

/// Forward result of a stack; `weights[l][m]` is the attention node of head `m`
/// in layer `l`.
pub struct StackOutput {
    pub out: Var,
    pub weights: Vec<Vec<Var>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub fn head_name(prefix: &str, layer: usize, head: usize, which: &str) -> String {
    format!("{prefix}layer{layer}.head{head}.{which}")
}

fn layer_name(prefix: &str, layer: usize, which: &str) -> String {
    format!("{prefix}layer{layer}.{which}")
}

impl StackConfig {
    pub fn new(layers: Vec<LayerShape>, kind: AttentionKind) -> Self {
        StackConfig {
            layers,
            kind,
            scale: ScaleRule::Dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads == 0 {
                return Err(Error::Config(format!("layer {l} has no heads")));
            }
            if layer.ffn_width == Some(0) {
                return Err(Error::Config(format!("layer {l} has a zero-width feed-forward block")));
            }
        }
        Ok(())
    }

    pub fn scale_for(&self, dim: usize) -> f64 {
        match self.scale {
            ScaleRule::Dim => dim as f64,
            ScaleRule::SqrtDim => (dim as f64).sqrt(),
        }
    }

    pub fn init(&self, prefix: &str, dim: usize, store: &mut ParamStore, init: &mut Initializer) {
        for (l, layer) in self.layers.iter().enumerate() {
            for m in 0..layer.heads {
                for w in ["query", "key", "value"] {
                    store.insert(head_name(prefix, l, m, w), init.uniform(dim, dim));
                }
            }
            if let Some(width) = layer.ffn_width {
                store.insert(layer_name(prefix, l, "ffn.w1"), init.uniform(width, dim));
                store.insert(layer_name(prefix, l, "ffn.w2"), init.uniform(dim, width));
            }
            if layer.layer_norm {
                store.insert(layer_name(prefix, l, "norm.gamma"), Tensor::filled(dim, 1, 1.0));
                store.insert(layer_name(prefix, l, "norm.beta"), Tensor::zeros(dim, 1));
            }
        }
    }

    /// Runs every layer on `x` (`dim × N`), where consecutive column blocks of
    /// the given lengths attend only within themselves.
    pub fn forward(&self, g: &mut Graph, bind: &Bindings, prefix: &str, x: Var, blocks: &[usize], causal: bool) -> Result<StackOutput> {
        let dim = g.value(x).rows();
        let scale = self.scale_for(dim);
        let softmax = self.kind == AttentionKind::Softmax;
        let mut h = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut sum: Option<Var> = None;
            let mut layer_weights = Vec::with_capacity(layer.heads);
            for m in 0..layer.heads {
                let wq = bind.get(&head_name(prefix, l, m, "query"))?;
                let wk = bind.get(&head_name(prefix, l, m, "key"))?;
                let wv = bind.get(&head_name(prefix, l, m, "value"))?;
                let q = g.matmul(wq, h)?;
                let k = g.matmul(wk, h)?;
                let v = g.matmul(wv, h)?;
                let a = g.block_attention(q, k, v, blocks, causal, softmax, scale)?;
                layer_weights.push(a);
                sum = Some(match sum {
                    None => a,
                    Some(s) => g.add(s, a)?,
                });
            }
            let mut out = sum.expect("at least one head");
            if layer.residual {
                out = g.add(out, h)?;
            }
            if layer.ffn_width.is_some() {
                let w1 = bind.get(&layer_name(prefix, l, "ffn.w1"))?;
                let w2 = bind.get(&layer_name(prefix, l, "ffn.w2"))?;
                let hidden = g.matmul(w1, out)?;
                let hidden = g.relu(hidden)?;
                let f = g.matmul(w2, hidden)?;
                out = if layer.residual { g.add(out, f)? } else { f };
            }
            if layer.layer_norm {
                let gamma = bind.get(&layer_name(prefix, l, "norm.gamma"))?;
                let beta = bind.get(&layer_name(prefix, l, "norm.beta"))?;
                out = g.layer_norm_columns(out, gamma, beta, LAYER_NORM_EPS)?;
            }
            weights.push(layer_weights);
            h = out;
        }
        Ok(StackOutput { out: h, weights })
    }
}

/// Additive mask (`0`/`-inf`) for softmax attention, multiplicative (`1`/`0`)
/// for linear attention. Entry `(r, c)` admits row `r` into column `c` iff `r <= c`.
pub fn causal_mask(len: usize, kind: AttentionKind) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::Contract("mask length must be positive".into()));
    }
    let (keep, drop) = match kind {
        AttentionKind::Softmax => (0.0, f64::NEG_INFINITY),
        AttentionKind::Linear => (1.0, 0.0),
    };
    Ok(Tensor::from_fn(len, len, |r, c| if r <= c { keep } else { drop }))
}

/// Query, key and value matrices of one head.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Single-head attention on a plain `d × I` matrix.
pub fn attend(x: &Tensor, head: &HeadWeights, causal: bool, kind: AttentionKind, scale: ScaleRule) -> Result<Tensor> {
    let d = x.rows();
    for w in [&head.query, &head.key, &head.value] {
        if w.rows() != d || w.cols() != d {
            return Err(Error::shape("attend", format!("weight {:?} for dimension {d}", w.shape())));
        }
    }
    let mut store = ParamStore::new();
    store.insert(head_name("", 0, 0, "query"), head.query.clone());
    store.insert(head_name("", 0, 0, "key"), head.key.clone());
    store.insert(head_name("", 0, 0, "value"), head.value.clone());
    let cfg = StackConfig {
        layers: vec![LayerShape::plain()],
        kind,
        scale,
    };
    multi_head_multi_layer(x, &store, "", &cfg, causal)
}

/// Applies a whole stack whose weights live in `store` under `prefix`.
pub fn multi_head_multi_layer(x: &Tensor, store: &ParamStore, prefix: &str, cfg: &StackConfig, causal: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = cfg.forward(&mut g, &bind, prefix, xv, &[x.cols()], causal)?;
    Ok(g.value(out.out).clone())
}
