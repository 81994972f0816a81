//! Exponential family attention: a categorical component for tokens and an
//! exponential-family component for the values attached to them.
//!
//! Every prediction masks its target position and runs the attention stack on
//! the resulting matrix. Bidirectional models see the whole sequence; causal
//! models see the prefix up to and including the masked position, which gives
//! the same column as a causally masked pass over the full sequence.

use serde::{Deserialize, Serialize};

use crate::attention::{Direction, StackConfig, StackOutput};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::heads::ExpFamHead;
use crate::model::SequenceModel;
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{matmul, Graph, Tensor, Var};

/// `g(τ) = G₂ relu(G₁ τ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeEncoderConfig {
    pub tau_dim: usize,
    pub hidden: usize,
    pub dim: usize,
}

/// Plain evaluation of the attribute encoder on one attribute vector.
pub fn attribute_encode(g1: &Tensor, g2: &Tensor, tau: &[f64]) -> Result<Vec<f64>> {
    if g1.cols() != tau.len() || g2.cols() != g1.rows() {
        return Err(Error::shape(
            "attribute_encode",
            format!("G1 {:?}, G2 {:?}, τ of length {}", g1.shape(), g2.shape(), tau.len()),
        ));
    }
    let hidden = matmul(g1, &Tensor::column(tau.to_vec()))?.map(|v| v.max(0.0));
    Ok(matmul(g2, &hidden)?.into_data())
}

/// Encodes every attribute row of `attributes` (`n × τ`) into a `dim × n` matrix.
pub(crate) fn encode_attributes(g: &mut Graph, g1: Var, g2: Var, attributes: &Tensor) -> Result<Var> {
    let a = g.constant(attributes.transpose());
    let h = g.matmul(g1, a)?;
    let h = g.relu(h)?;
    g.matmul(g2, h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueEmbed {
    /// The value itself as a one-row block.
    Identity,
    Affine {
        dim: usize,
    },
    Mlp {
        hidden: usize,
        dim: usize,
    },
    /// One learned column per admissible value.
    Table {
        levels: Vec<f64>,
        dim: usize,
    },
}

impl ValueEmbed {
    pub fn dim(&self) -> usize {
        match self {
            ValueEmbed::Identity => 1,
            ValueEmbed::Affine { dim } | ValueEmbed::Mlp { dim, .. } | ValueEmbed::Table { dim, .. } => *dim,
        }
    }

    fn level(&self, y: f64) -> Result<usize> {
        match self {
            ValueEmbed::Table { levels, .. } => levels
                .iter()
                .position(|&l| l == y)
                .ok_or_else(|| Error::Data(format!("value {y} is not one of the embedding levels {levels:?}"))),
            _ => Ok(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskEmbedding {
    Learned,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Readout {
    /// `z ↦ scale · z_last`.
    LastEntry { scale: f64 },
    /// Affine + ReLU layers of the given widths, then a linear map to one output.
    Mlp { hidden: Vec<usize>, final_bias: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueTokens {
    /// Context embeddings of the tokens, optionally stacked with center embeddings.
    Embeddings { dim: usize, center: bool },
    /// Attribute encoder applied to each token's attribute row.
    Attributes(AttributeEncoderConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub count: usize,
    pub dim: usize,
}

/// Column-wise `W₂ relu(W₁ y + b₁) + b₂` applied before attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputProjection {
    pub hidden: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalConfig {
    pub dim: usize,
    pub positional: bool,
    pub stack: StackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub tokens: ValueTokens,
    pub embed: ValueEmbed,
    pub mask: MaskEmbedding,
    #[serde(default)]
    pub segments: Option<SegmentConfig>,
    #[serde(default)]
    pub input_projection: Option<InputProjection>,
    pub positional: bool,
    pub stack: StackConfig,
    pub readout: Readout,
    pub head: ExpFamHead,
}

impl ValueConfig {
    fn token_rows(&self) -> usize {
        match &self.tokens {
            ValueTokens::Embeddings { dim, center } => dim * if *center { 2 } else { 1 },
            ValueTokens::Attributes(a) => a.dim,
        }
    }

    /// Height of the stacked matrix before any input projection.
    pub fn raw_dim(&self) -> usize {
        self.token_rows() + self.embed.dim() + self.segments.as_ref().map_or(0, |s| s.dim)
    }

    /// Height of the matrix the attention stack operates on.
    pub fn model_dim(&self) -> usize {
        self.input_projection.as_ref().map_or(self.raw_dim(), |p| p.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfaConfig {
    pub vocab: usize,
    /// Longest sequence the positional tables cover.
    pub max_len: usize,
    pub direction: Direction,
    #[serde(default)]
    pub categorical: Option<CategoricalConfig>,
    #[serde(default)]
    pub value: Option<ValueConfig>,
}

/// Which instantiation to build with [`instantiate_example`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Baskets,
    SpatioTemporalGaussian,
    MovieRatings,
}

/// Sizes for [`instantiate_example`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleDims {
    pub vocab: usize,
    pub max_len: usize,
    pub dim: usize,
    pub value_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub residual: bool,
    pub ffn_width: Option<usize>,
    pub layer_norm: bool,
    pub readout_hidden: Vec<usize>,
    /// Whether item order is meaningful (baskets only).
    pub ordered: bool,
    pub tau_dim: usize,
    pub attribute_hidden: usize,
    pub head: ExpFamHead,
}

impl ExampleDims {
    fn layer_shapes(&self) -> Vec<crate::attention::LayerShape> {
        (0..self.layers)
            .map(|_| crate::attention::LayerShape {
                heads: self.heads,
                residual: self.residual,
                ffn_width: self.ffn_width,
                layer_norm: self.layer_norm,
            })
            .collect()
    }
}

/// Builds the configuration of one of the three worked instantiations.
pub fn instantiate_example(kind: ExampleKind, dims: &ExampleDims, direction: Direction) -> Result<EfaConfig> {
    use crate::attention::AttentionKind::Softmax;
    if dims.vocab == 0 || dims.max_len == 0 || dims.dim == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    let stack = StackConfig::new(dims.layer_shapes(), Softmax);
    let readout = Readout::Mlp {
        hidden: dims.readout_hidden.clone(),
        final_bias: true,
    };
    let config = match kind {
        ExampleKind::Baskets => EfaConfig {
            vocab: dims.vocab,
            max_len: dims.max_len,
            direction,
            categorical: Some(CategoricalConfig {
                dim: dims.dim,
                positional: dims.ordered,
                stack,
            }),
            value: None,
        },
        ExampleKind::SpatioTemporalGaussian => {
            if direction != Direction::Bidirectional {
                return Err(Error::Config("the spatiotemporal model is bidirectional".into()));
            }
            if !matches!(dims.head, ExpFamHead::GaussianKnownVar { .. }) {
                return Err(Error::Config("the spatiotemporal model uses a Gaussian head".into()));
            }
            EfaConfig {
                vocab: dims.vocab,
                max_len: dims.max_len,
                direction,
                categorical: None,
                value: Some(ValueConfig {
                    tokens: ValueTokens::Attributes(AttributeEncoderConfig {
                        tau_dim: dims.tau_dim,
                        hidden: dims.attribute_hidden,
                        dim: dims.dim,
                    }),
                    embed: ValueEmbed::Mlp {
                        hidden: dims.attribute_hidden,
                        dim: dims.value_dim,
                    },
                    mask: MaskEmbedding::Learned,
                    segments: None,
                    input_projection: None,
                    positional: false,
                    stack,
                    readout,
                    head: dims.head,
                }),
            }
        }
        ExampleKind::MovieRatings => {
            if !matches!(dims.head, ExpFamHead::PoissonShifted | ExpFamHead::PoissonOnePlus) {
                return Err(Error::Config("the ratings model uses a Poisson head".into()));
            }
            EfaConfig {
                vocab: dims.vocab,
                max_len: dims.max_len,
                direction,
                categorical: Some(CategoricalConfig {
                    dim: dims.dim,
                    positional: true,
                    stack: stack.clone(),
                }),
                value: Some(ValueConfig {
                    tokens: ValueTokens::Embeddings {
                        dim: dims.dim,
                        center: true,
                    },
                    embed: ValueEmbed::Table {
                        levels: vec![1.0, 2.0, 3.0],
                        dim: dims.value_dim,
                    },
                    mask: MaskEmbedding::Learned,
                    segments: None,
                    input_projection: None,
                    positional: true,
                    stack,
                    readout,
                    head: dims.head,
                }),
            }
        }
    };
    config.validate()?;
    Ok(config)
}

impl EfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.categorical.is_none() && self.value.is_none() {
            return Err(Error::Config("a model needs a categorical or a value component".into()));
        }
        if let Some(c) = &self.categorical {
            if c.dim == 0 {
                return Err(Error::Config("categorical dimension must be positive".into()));
            }
            c.stack.validate()?;
        }
        if let Some(v) = &self.value {
            v.stack.validate()?;
            if matches!(v.head, ExpFamHead::Categorical { .. }) {
                return Err(Error::Config("the value component needs a scalar head".into()));
            }
            if v.embed.dim() == 0 || v.token_rows() == 0 {
                return Err(Error::Config("value component dimensions must be positive".into()));
            }
            if let ValueTokens::Attributes(a) = &v.tokens {
                if a.tau_dim == 0 || a.hidden == 0 {
                    return Err(Error::Config("attribute encoder dimensions must be positive".into()));
                }
            }
            if let ValueEmbed::Table { levels, .. } = &v.embed {
                if levels.is_empty() {
                    return Err(Error::Config("value table needs at least one level".into()));
                }
            }
            if let Readout::Mlp { hidden, .. } = &v.readout {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("readout widths must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfaModel {
    pub config: EfaConfig,
    pub params: ParamStore,
}

/// One masked pass: target position `target` of sequence `seq`, laid out in
/// columns `start..start + len`.
#[derive(Clone, Copy, Debug)]
struct Pass {
    seq: usize,
    target: usize,
    start: usize,
    len: usize,
}

struct Plan {
    passes: Vec<Pass>,
    cols: usize,
}

impl Plan {
    fn blocks(&self) -> Vec<usize> {
        self.passes.iter().map(|p| p.len).collect()
    }

    fn target_cols(&self) -> Vec<usize> {
        self.passes.iter().map(|p| p.start + p.target).collect()
    }
}

/// Forward products of one component over a plan.
pub struct ComponentForward {
    /// `vocab × P` logits or `1 × P` natural parameters.
    pub naturals: Var,
    /// Attention-transformed target columns (`dim × P`).
    pub columns: Var,
    /// Input of the final readout layer (value component only).
    pub penultimate: Option<Var>,
    pub weights: Vec<Vec<Var>>,
    /// `(sequence, position)` of each column of `naturals`.
    pub targets: Vec<(usize, usize)>,
    pub observations: Vec<f64>,
    /// Column blocks of the attention passes, one per target.
    pub blocks: Vec<usize>,
}

pub const CAT: &str = "cat.";
pub const VAL: &str = "val.";

impl EfaModel {
    pub fn new(config: EfaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let d = config.vocab;
        if let Some(c) = &config.categorical {
            params.insert("cat.context", init.uniform(c.dim, d + 1));
            params.insert("cat.center", init.uniform(c.dim, d));
            if c.positional {
                params.insert("cat.position", init.uniform(c.dim, config.max_len));
            }
            c.stack.init(CAT, c.dim, &mut params, &mut init);
        }
        if let Some(v) = &config.value {
            match &v.tokens {
                ValueTokens::Embeddings { dim, center } => {
                    params.insert("val.context", init.uniform(*dim, d));
                    if *center {
                        params.insert("val.center", init.uniform(*dim, d));
                    }
                }
                ValueTokens::Attributes(a) => {
                    params.insert("val.attr.g1", init.uniform(a.hidden, a.tau_dim));
                    params.insert("val.attr.g2", init.uniform(a.dim, a.hidden));
                }
            }
            let k = v.embed.dim();
            match &v.embed {
                ValueEmbed::Identity => {}
                ValueEmbed::Affine { dim } => {
                    params.insert("val.embed.w", init.uniform(*dim, 1));
                    params.insert("val.embed.b", init.uniform(*dim, 1));
                }
                ValueEmbed::Mlp { hidden, dim } => {
                    params.insert("val.embed.w1", init.uniform(*hidden, 1));
                    params.insert("val.embed.b1", init.uniform(*hidden, 1));
                    params.insert("val.embed.w2", init.uniform(*dim, *hidden));
                    params.insert("val.embed.b2", init.uniform(*dim, 1));
                }
                ValueEmbed::Table { levels, dim } => {
                    params.insert("val.embed.table", init.uniform(*dim, levels.len()));
                }
            }
            if v.mask == MaskEmbedding::Learned {
                params.insert("val.embed.mask", init.uniform(k, 1));
            }
            if let Some(s) = &v.segments {
                params.insert("val.segment", init.uniform(s.dim, s.count));
            }
            if let Some(p) = &v.input_projection {
                params.insert("val.input.w1", init.uniform(p.hidden, v.raw_dim()));
                params.insert("val.input.b1", init.uniform(p.hidden, 1));
                params.insert("val.input.w2", init.uniform(p.dim, p.hidden));
                params.insert("val.input.b2", init.uniform(p.dim, 1));
            }
            let dim = v.model_dim();
            if v.positional {
                params.insert("val.position", init.uniform(dim, config.max_len));
            }
            v.stack.init(VAL, dim, &mut params, &mut init);
            if let Readout::Mlp { hidden, final_bias } = &v.readout {
                let mut width = dim;
                for (i, &h) in hidden.iter().enumerate() {
                    params.insert(format!("val.readout.w{i}"), init.uniform(h, width));
                    params.insert(format!("val.readout.b{i}"), init.uniform(h, 1));
                    width = h;
                }
                params.insert("val.readout.out.w", Tensor::zeros(1, width));
                if *final_bias {
                    params.insert("val.readout.out.b", Tensor::zeros(1, 1));
                }
            }
        }
        Ok(EfaModel { config, params })
    }

    fn plan(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Plan> {
        let causal = self.config.direction.is_causal();
        let mut passes = Vec::new();
        let mut cols = 0;
        for &f in seqs {
            let s = batch.sequences.get(f).ok_or(Error::Index {
                index: f,
                len: batch.len(),
            })?;
            if s.len() > self.config.max_len {
                return Err(Error::Contract(format!(
                    "sequence {f} has length {} beyond the positional table ({})",
                    s.len(),
                    self.config.max_len
                )));
            }
            for i in s.target_positions() {
                let len = if causal { i + 1 } else { s.len() };
                passes.push(Pass {
                    seq: f,
                    target: i,
                    start: cols,
                    len,
                });
                cols += len;
            }
        }
        if passes.is_empty() {
            return Err(Error::Contract("no target positions".into()));
        }
        Ok(Plan { passes, cols })
    }

    fn check_vocab(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.vocab != self.config.vocab {
            return Err(Error::Data(format!(
                "batch vocabulary {} differs from model vocabulary {}",
                batch.vocab, self.config.vocab
            )));
        }
        Ok(())
    }

    /// Categorical component over the target positions of `seqs`.
    pub fn categorical_forward(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        batch: &SequenceBatch,
        seqs: &[usize],
    ) -> Result<Option<ComponentForward>> {
        let Some(c) = &self.config.categorical else { return Ok(None) };
        self.check_vocab(batch)?;
        let plan = self.plan(batch, seqs)?;
        let mask_token = self.config.vocab;
        let mut tokens = Vec::with_capacity(plan.cols);
        let mut positions = Vec::with_capacity(plan.cols);
        for p in &plan.passes {
            let s = &batch.sequences[p.seq];
            for j in 0..p.len {
                tokens.push(if j == p.target { mask_token } else { s.tokens[j] });
                positions.push(j);
            }
        }
        let context = bind.get("cat.context")?;
        let mut x = g.gather_cols(context, &tokens)?;
        if c.positional {
            let table = bind.get("cat.position")?;
            let pos = g.gather_cols(table, &positions)?;
            x = g.add(x, pos)?;
        }
        let StackOutput { out, weights } = c
            .stack
            .forward(g, bind, CAT, x, &plan.blocks(), self.config.direction.is_causal())?;
        let columns = g.gather_cols(out, &plan.target_cols())?;
        let center = bind.get("cat.center")?;
        let logits = g.matmul_tn(center, columns)?;
        let targets: Vec<(usize, usize)> = plan.passes.iter().map(|p| (p.seq, p.target)).collect();
        let observations = targets.iter().map(|&(f, i)| batch.sequences[f].tokens[i] as f64).collect();
        Ok(Some(ComponentForward {
            naturals: logits,
            columns,
            penultimate: None,
            weights,
            targets,
            observations,
            blocks: plan.blocks(),
        }))
    }

    /// Value component over the target positions of `seqs`.
    pub fn value_forward(&self, g: &mut Graph, bind: &Bindings, batch: &SequenceBatch, seqs: &[usize]) -> Result<Option<ComponentForward>> {
        let Some(v) = &self.config.value else { return Ok(None) };
        self.check_vocab(batch)?;
        let plan = self.plan(batch, seqs)?;
        let n = plan.cols;

        let mut tokens = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut levels = Vec::with_capacity(n);
        let mut pick = Vec::with_capacity(n);
        let mut segments = Vec::with_capacity(n);
        for p in &plan.passes {
            let s = &batch.sequences[p.seq];
            let values = s
                .values
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sequence {} has no values", p.seq)))?;
            for j in 0..p.len {
                let col = p.start + j;
                tokens.push(s.tokens[j]);
                positions.push(j);
                if j == p.target {
                    raw.push(0.0);
                    levels.push(0);
                    pick.push(n);
                } else {
                    raw.push(values[j]);
                    levels.push(v.embed.level(values[j])?);
                    pick.push(col);
                }
                if v.segments.is_some() {
                    let seg = s
                        .segments
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("sequence {} has no segments", p.seq)))?;
                    segments.push(seg[j]);
                }
            }
        }

        let mut blocks = Vec::new();
        match &v.tokens {
            ValueTokens::Embeddings { center, .. } => {
                let ctx = bind.get("val.context")?;
                blocks.push(g.gather_cols(ctx, &tokens)?);
                if *center {
                    let cen = bind.get("val.center")?;
                    blocks.push(g.gather_cols(cen, &tokens)?);
                }
            }
            ValueTokens::Attributes(a) => {
                let attrs = batch
                    .attributes
                    .as_ref()
                    .ok_or_else(|| Error::Data("the attribute encoder needs token attributes".into()))?;
                if attrs.cols() != a.tau_dim {
                    return Err(Error::shape(
                        "attributes",
                        format!("{} columns, encoder expects {}", attrs.cols(), a.tau_dim),
                    ));
                }
                let (g1, g2) = (bind.get("val.attr.g1")?, bind.get("val.attr.g2")?);
                let enc = encode_attributes(g, g1, g2, attrs)?;
                blocks.push(g.gather_cols(enc, &tokens)?);
            }
        }

        let row = g.constant(Tensor::row(raw));
        let embedded = match &v.embed {
            ValueEmbed::Identity => row,
            ValueEmbed::Affine { .. } => {
                let (w, b) = (bind.get("val.embed.w")?, bind.get("val.embed.b")?);
                g.affine(w, row, b)?
            }
            ValueEmbed::Mlp { .. } => {
                let (w1, b1) = (bind.get("val.embed.w1")?, bind.get("val.embed.b1")?);
                let (w2, b2) = (bind.get("val.embed.w2")?, bind.get("val.embed.b2")?);
                let h = g.affine(w1, row, b1)?;
                let h = g.relu(h)?;
                g.affine(w2, h, b2)?
            }
            ValueEmbed::Table { .. } => {
                let table = bind.get("val.embed.table")?;
                g.gather_cols(table, &levels)?
            }
        };
        let mask = match v.mask {
            MaskEmbedding::Learned => bind.get("val.embed.mask")?,
            MaskEmbedding::Zero => g.constant(Tensor::zeros(v.embed.dim(), 1)),
        };
        let with_mask = g.concat_cols(&[embedded, mask])?;
        blocks.push(g.gather_cols(with_mask, &pick)?);

        if v.segments.is_some() {
            let table = bind.get("val.segment")?;
            blocks.push(g.gather_cols(table, &segments)?);
        }
        let mut y = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };

        if v.input_projection.is_some() {
            let (w1, b1) = (bind.get("val.input.w1")?, bind.get("val.input.b1")?);
            let (w2, b2) = (bind.get("val.input.w2")?, bind.get("val.input.b2")?);
            let h = g.affine(w1, y, b1)?;
            let h = g.relu(h)?;
            y = g.affine(w2, h, b2)?;
        }
        if v.positional {
            let table = bind.get("val.position")?;
            let pos = g.gather_cols(table, &positions)?;
            y = g.add(y, pos)?;
        }

        let StackOutput { out, weights } = v
            .stack
            .forward(g, bind, VAL, y, &plan.blocks(), self.config.direction.is_causal())?;
        let columns = g.gather_cols(out, &plan.target_cols())?;
        let (naturals, penultimate) = self.readout(g, bind, v, columns)?;
        let targets: Vec<(usize, usize)> = plan.passes.iter().map(|p| (p.seq, p.target)).collect();
        let observations = targets
            .iter()
            .map(|&(f, i)| batch.sequences[f].values.as_ref().expect("checked above")[i])
            .collect();
        Ok(Some(ComponentForward {
            naturals,
            columns,
            penultimate,
            weights,
            targets,
            observations,
            blocks: plan.blocks(),
        }))
    }

    fn readout(&self, g: &mut Graph, bind: &Bindings, v: &ValueConfig, columns: Var) -> Result<(Var, Option<Var>)> {
        match &v.readout {
            Readout::LastEntry { scale } => {
                let t = g.value(columns);
                let (d, p) = (t.rows(), t.cols());
                let flat: Vec<usize> = (0..p).map(|j| (d - 1) * p + j).collect();
                let last = g.select(columns, &flat)?;
                let last = g.transpose(last)?;
                Ok((g.scale(last, *scale)?, None))
            }
            Readout::Mlp { hidden, final_bias } => {
                let mut h = columns;
                for i in 0..hidden.len() {
                    let w = bind.get(&format!("val.readout.w{i}"))?;
                    let b = bind.get(&format!("val.readout.b{i}"))?;
                    h = g.affine(w, h, b)?;
                    h = g.relu(h)?;
                }
                let w = bind.get("val.readout.out.w")?;
                let mut out = g.matmul(w, h)?;
                if *final_bias {
                    let b = bind.get("val.readout.out.b")?;
                    out = g.add_column(out, b)?;
                }
                Ok((out, Some(h)))
            }
        }
    }

    fn evaluate_graph<T>(&self, f: impl FnOnce(&mut Graph, &Bindings) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        f(&mut g, &bind)
    }

    /// Probability vectors `η_i` for every position of sequence `f` (`vocab × len`).
    pub fn categorical_probs(&self, batch: &SequenceBatch, f: usize) -> Result<Tensor> {
        let logits = self.token_logits(batch, &[f])?.remove(0);
        let (d, n) = (logits.rows(), logits.cols());
        let head = ExpFamHead::Categorical { classes: d };
        let mut out = Tensor::zeros(d, n);
        for i in 0..n {
            for (r, p) in head.mean(&logits.column_vec(i)).into_iter().enumerate() {
                out.set(r, i, p);
            }
        }
        Ok(out)
    }

    /// `κ_i` for every target position of sequence `f`.
    pub fn value_natural_params(&self, batch: &SequenceBatch, f: usize) -> Result<Vec<Option<f64>>> {
        Ok(self.value_naturals(batch, &[f])?.remove(0))
    }

    /// Average log-likelihood per position over the chosen components.
    pub fn joint_log_likelihood(&self, batch: &SequenceBatch, categorical: bool, value: bool) -> Result<f64> {
        let seqs: Vec<usize> = (0..batch.len()).collect();
        self.evaluate_graph(|g, bind| {
            let (total, count) = self.component_losses(g, bind, batch, &seqs, categorical, value)?;
            Ok(-g.value(total).item() / count as f64)
        })
    }

    fn component_losses(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        batch: &SequenceBatch,
        seqs: &[usize],
        categorical: bool,
        value: bool,
    ) -> Result<(Var, usize)> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        if categorical {
            if let Some(c) = self.categorical_forward(g, bind, batch, seqs)? {
                let head = ExpFamHead::Categorical {
                    classes: self.config.vocab,
                };
                let s = head.nll_sum(g, c.naturals, &c.observations)?;
                count = count.max(c.targets.len());
                total = Some(s);
            }
        }
        if value {
            if let Some(v) = self.value_forward(g, bind, batch, seqs)? {
                let head = self.config.value.as_ref().expect("value forward implies config").head;
                let s = head.nll_sum(g, v.naturals, &v.observations)?;
                count = count.max(v.targets.len());
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
        }
        let total = total.ok_or_else(|| Error::Contract("no component selected".into()))?;
        Ok((total, count))
    }

    /// Mean of the value head and log-probability of the held value at position `i`.
    pub fn predict_masked(&self, batch: &SequenceBatch, f: usize, i: usize) -> Result<(f64, f64)> {
        let s = batch.sequences.get(f).ok_or(Error::Index {
            index: f,
            len: batch.len(),
        })?;
        if i >= s.len() {
            return Err(Error::Index { index: i, len: s.len() });
        }
        let head = self
            .config
            .value
            .as_ref()
            .ok_or_else(|| Error::Structure("model has no value component".into()))?
            .head;
        let kappa = self.value_natural_params(batch, f)?[i].ok_or_else(|| Error::Contract(format!("position {i} is not a target")))?;
        let y = s.values.as_ref().ok_or_else(|| Error::Data("sequence has no values".into()))?[i];
        Ok((head.scalar_mean(kappa), head.log_prob(&[kappa], y)?))
    }
}

impl SequenceModel for EfaModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn direction(&self) -> Direction {
        self.config.direction
    }

    fn value_head(&self) -> Option<ExpFamHead> {
        self.config.value.as_ref().map(|v| v.head)
    }

    fn models_tokens(&self) -> bool {
        self.config.categorical.is_some()
    }

    fn loss_terms(&self, g: &mut Graph, bind: &Bindings, batch: &SequenceBatch, seqs: &[usize]) -> Result<(Var, usize)> {
        self.component_losses(g, bind, batch, seqs, true, true)
    }

    fn value_naturals(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Vec<Option<f64>>>> {
        self.evaluate_graph(|g, bind| {
            let v = self
                .value_forward(g, bind, batch, seqs)?
                .ok_or_else(|| Error::Structure("model has no value component".into()))?;
            let kappa = g.value(v.naturals).data();
            let mut out: Vec<Vec<Option<f64>>> = seqs.iter().map(|&f| vec![None; batch.sequences[f].len()]).collect();
            let slot: std::collections::HashMap<usize, usize> = seqs.iter().enumerate().map(|(k, &f)| (f, k)).collect();
            for (j, &(f, i)) in v.targets.iter().enumerate() {
                out[slot[&f]][i] = Some(kappa[j]);
            }
            Ok(out)
        })
    }

    fn token_logits(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Tensor>> {
        self.evaluate_graph(|g, bind| {
            let c = self
                .categorical_forward(g, bind, batch, seqs)?
                .ok_or_else(|| Error::Structure("model has no categorical component".into()))?;
            let logits = g.value(c.naturals);
            let d = logits.rows();
            let mut out: Vec<Tensor> = seqs.iter().map(|&f| Tensor::zeros(d, batch.sequences[f].len())).collect();
            let slot: std::collections::HashMap<usize, usize> = seqs.iter().enumerate().map(|(k, &f)| (f, k)).collect();
            for (j, &(f, i)) in c.targets.iter().enumerate() {
                for r in 0..d {
                    out[slot[&f]].set(r, i, logits.get(r, j));
                }
            }
            Ok(out)
        })
    }
}
