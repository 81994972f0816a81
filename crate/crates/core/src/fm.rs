//! Linear latent-factor baselines and the attention parameters that reproduce them.

use serde::{Deserialize, Serialize};

use crate::attention::{head_name, AttentionKind, Direction, LayerShape, StackConfig};
use crate::data::SequenceBatch;
use crate::efa::{
    encode_attributes, AttributeEncoderConfig, CategoricalConfig, EfaConfig, EfaModel, MaskEmbedding, Readout, ValueConfig, ValueEmbed,
    ValueTokens,
};
use crate::error::{Error, Result};
use crate::heads::ExpFamHead;
use crate::model::SequenceModel;
use crate::params::{Bindings, Initializer, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmVariant {
    /// Tokens from `softmax(ρᵀ ctx)`, `ctx` the averaged context embeddings.
    Categorical,
    /// Gaussian values with `h(τ_i)ᵀ Σ_j h(τ_j) y_j` over neighbouring sites.
    GaussianKnn,
    /// Gaussian values with `ρ_{x_i}ᵀ` times the averaged `α_{x_j} y_j`.
    GaussianRatings,
    /// `y - 1 ~ Poisson(exp κ)`.
    PoissonV1,
    /// `y ~ Poisson(1 + exp κ)`.
    PoissonV2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmConfig {
    pub variant: FmVariant,
    pub vocab: usize,
    pub dim: usize,
    pub direction: Direction,
    /// Attribute encoder `h` for the k-NN variant.
    #[serde(default)]
    pub attribute: Option<AttributeEncoderConfig>,
    /// Neighbour count for the k-NN variant; all other sites when absent.
    #[serde(default)]
    pub knn: Option<usize>,
    #[serde(default = "unit_variance")]
    pub variance: f64,
}

fn unit_variance() -> f64 {
    1.0
}

impl FmConfig {
    pub fn value_head(&self) -> Result<Option<ExpFamHead>> {
        Ok(match self.variant {
            FmVariant::Categorical => None,
            FmVariant::GaussianKnn | FmVariant::GaussianRatings => Some(ExpFamHead::gaussian(self.variance)?),
            FmVariant::PoissonV1 => Some(ExpFamHead::PoissonShifted),
            FmVariant::PoissonV2 => Some(ExpFamHead::PoissonOnePlus),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.dim == 0 {
            return Err(Error::Config("FM needs a vocabulary of at least 2 and a positive dimension".into()));
        }
        self.value_head()?;
        if self.variant == FmVariant::GaussianKnn {
            let a = self
                .attribute
                .as_ref()
                .ok_or_else(|| Error::Config("the k-NN variant needs an attribute encoder".into()))?;
            if a.dim != self.dim || a.tau_dim == 0 || a.hidden == 0 {
                return Err(Error::Config("attribute encoder dimensions do not match".into()));
            }
            if self.knn == Some(0) {
                return Err(Error::Config("k must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmModel {
    pub config: FmConfig,
    pub params: ParamStore,
    /// Neighbour lists per site for the k-NN variant.
    #[serde(default)]
    pub neighbors: Option<Vec<Vec<usize>>>,
}

impl FmModel {
    pub fn new(config: FmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        match config.variant {
            FmVariant::GaussianKnn => {
                let a = config.attribute.as_ref().expect("validated");
                params.insert("fm.h.g1", init.uniform(a.hidden, a.tau_dim));
                params.insert("fm.h.g2", init.uniform(a.dim, a.hidden));
            }
            _ => {
                params.insert("fm.rho", init.uniform(config.dim, config.vocab));
                params.insert("fm.alpha", init.uniform(config.dim, config.vocab));
            }
        }
        Ok(FmModel {
            config,
            params,
            neighbors: None,
        })
    }

    /// Installs `k`-nearest-neighbour lists (one per site, self excluded).
    pub fn set_neighbors(&mut self, lists: Vec<Vec<usize>>) -> Result<()> {
        let k = self
            .config
            .knn
            .ok_or_else(|| Error::Neighbor("model is not configured for k nearest neighbours".into()))?;
        if k >= self.config.vocab {
            return Err(Error::Neighbor(format!("k = {k} needs more than {} sites", self.config.vocab)));
        }
        if lists.len() != self.config.vocab {
            return Err(Error::Neighbor(format!("{} lists for {} sites", lists.len(), self.config.vocab)));
        }
        for (site, l) in lists.iter().enumerate() {
            if l.len() != k || l.contains(&site) || l.iter().any(|&j| j >= self.config.vocab) {
                return Err(Error::Neighbor(format!("invalid neighbour list for site {site}: {l:?}")));
            }
        }
        self.neighbors = Some(lists);
        Ok(())
    }

    fn normalized(&self) -> bool {
        self.config.variant != FmVariant::GaussianKnn
    }

    /// Context positions of position `i`.
    pub fn context(&self, tokens: &[usize], i: usize) -> Result<Vec<usize>> {
        let mut ctx: Vec<usize> = match self.config.direction {
            Direction::Bidirectional => (0..tokens.len()).filter(|&j| j != i).collect(),
            Direction::Unidirectional => (0..i).collect(),
        };
        if self.config.variant == FmVariant::GaussianKnn && self.config.knn.is_some() {
            let lists = self
                .neighbors
                .as_ref()
                .ok_or_else(|| Error::Neighbor("neighbour lists not built".into()))?;
            let near = &lists[tokens[i]];
            ctx.retain(|&j| near.contains(&tokens[j]));
        }
        Ok(ctx)
    }

    /// Per target: `(sequence, position)`, plus the sparse context weights
    /// mapping input columns to target columns.
    fn layout(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Layout> {
        if batch.vocab != self.config.vocab {
            return Err(Error::Data(format!(
                "batch vocabulary {} differs from model vocabulary {}",
                batch.vocab, self.config.vocab
            )));
        }
        let mut tokens = Vec::new();
        let mut values = Vec::new();
        let mut targets = Vec::new();
        let mut entries = Vec::new();
        let needs_values = self.config.variant != FmVariant::Categorical;
        for &f in seqs {
            let s = batch.sequences.get(f).ok_or(Error::Index {
                index: f,
                len: batch.len(),
            })?;
            let start = tokens.len();
            tokens.extend_from_slice(&s.tokens);
            if needs_values {
                let v = s
                    .values
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("sequence {f} has no values")))?;
                values.extend_from_slice(v);
            }
            for i in s.target_positions() {
                let ctx = self.context(&s.tokens, i)?;
                let w = if self.normalized() && !ctx.is_empty() {
                    1.0 / ctx.len() as f64
                } else {
                    1.0
                };
                for j in ctx {
                    entries.push((start + j, targets.len(), w));
                }
                targets.push((f, i, start + i));
            }
        }
        if targets.is_empty() {
            return Err(Error::Contract("no target positions".into()));
        }
        Ok(Layout {
            tokens,
            values,
            targets,
            entries,
        })
    }

    /// Natural parameters (`vocab × P` logits or `1 × P`) for the targets of `seqs`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Bindings,
        batch: &SequenceBatch,
        seqs: &[usize],
    ) -> Result<(Var, Vec<(usize, usize)>, Vec<f64>)> {
        let lay = self.layout(batch, seqs)?;
        let p = lay.targets.len();
        let target_tokens: Vec<usize> = lay.targets.iter().map(|&(_, _, c)| lay.tokens[c]).collect();
        let naturals = match self.config.variant {
            FmVariant::Categorical => {
                let alpha = bind.get("fm.alpha")?;
                let a = g.gather_cols(alpha, &lay.tokens)?;
                let ctx = g.sparse_mix(a, &lay.entries, p)?;
                let rho = bind.get("fm.rho")?;
                g.matmul_tn(rho, ctx)?
            }
            _ => {
                let (ctx_table, center_table) = if self.config.variant == FmVariant::GaussianKnn {
                    let attrs = batch
                        .attributes
                        .as_ref()
                        .ok_or_else(|| Error::Data("the k-NN variant needs site attributes".into()))?;
                    let (g1, g2) = (bind.get("fm.h.g1")?, bind.get("fm.h.g2")?);
                    let h = encode_attributes(g, g1, g2, attrs)?;
                    (h, h)
                } else {
                    (bind.get("fm.alpha")?, bind.get("fm.rho")?)
                };
                let k = self.config.dim;
                let a = g.gather_cols(ctx_table, &lay.tokens)?;
                let n = lay.tokens.len();
                let ys = g.constant(Tensor::from_fn(k, n, |_, c| lay.values[c]));
                let ay = g.mul(a, ys)?;
                let ctx = g.sparse_mix(ay, &lay.entries, p)?;
                let centers = g.gather_cols(center_table, &target_tokens)?;
                let prod = g.mul(centers, ctx)?;
                let ones = g.constant(Tensor::filled(1, k, 1.0));
                g.matmul(ones, prod)?
            }
        };
        let observations = lay
            .targets
            .iter()
            .map(|&(_, _, c)| {
                if self.config.variant == FmVariant::Categorical {
                    lay.tokens[c] as f64
                } else {
                    lay.values[c]
                }
            })
            .collect();
        let targets = lay.targets.iter().map(|&(f, i, _)| (f, i)).collect();
        Ok((naturals, targets, observations))
    }

    fn evaluate<T>(&self, f: impl FnOnce(&mut Graph, &Bindings) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        f(&mut g, &bind)
    }
}

struct Layout {
    tokens: Vec<usize>,
    values: Vec<f64>,
    /// `(sequence, position, column)`.
    targets: Vec<(usize, usize, usize)>,
    entries: Vec<(usize, usize, f64)>,
}

impl SequenceModel for FmModel {
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
        self.config.value_head().ok().flatten()
    }

    fn models_tokens(&self) -> bool {
        self.config.variant == FmVariant::Categorical
    }

    fn loss_terms(&self, g: &mut Graph, bind: &Bindings, batch: &SequenceBatch, seqs: &[usize]) -> Result<(Var, usize)> {
        let (nat, targets, obs) = self.forward(g, bind, batch, seqs)?;
        let head = match self.config.value_head()? {
            Some(h) => h,
            None => ExpFamHead::Categorical {
                classes: self.config.vocab,
            },
        };
        Ok((head.nll_sum(g, nat, &obs)?, targets.len()))
    }

    fn value_naturals(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Vec<Option<f64>>>> {
        if self.models_tokens() {
            return Err(Error::Structure("categorical FM has no value head".into()));
        }
        self.evaluate(|g, bind| {
            let (nat, targets, _) = self.forward(g, bind, batch, seqs)?;
            let kappa = g.value(nat).data();
            let mut out: Vec<Vec<Option<f64>>> = seqs.iter().map(|&f| vec![None; batch.sequences[f].len()]).collect();
            let slot: std::collections::HashMap<usize, usize> = seqs.iter().enumerate().map(|(k, &f)| (f, k)).collect();
            for (j, &(f, i)) in targets.iter().enumerate() {
                out[slot[&f]][i] = Some(kappa[j]);
            }
            Ok(out)
        })
    }

    fn token_logits(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Tensor>> {
        if !self.models_tokens() {
            return Err(Error::Structure("value FM has no token head".into()));
        }
        self.evaluate(|g, bind| {
            let (nat, targets, _) = self.forward(g, bind, batch, seqs)?;
            let logits = g.value(nat);
            let d = logits.rows();
            let mut out: Vec<Tensor> = seqs.iter().map(|&f| Tensor::zeros(d, batch.sequences[f].len())).collect();
            let slot: std::collections::HashMap<usize, usize> = seqs.iter().enumerate().map(|(k, &f)| (f, k)).collect();
            for (j, &(f, i)) in targets.iter().enumerate() {
                for r in 0..d {
                    out[slot[&f]].set(r, i, logits.get(r, j));
                }
            }
            Ok(out)
        })
    }
}

/// The three latent-factor reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Categorical tokens via zero query/key softmax attention.
    P1,
    /// Gaussian values over attributes via diagonal linear attention.
    P2,
    /// Poisson ratings via block linear attention.
    P3,
}

fn single_layer(kind: AttentionKind) -> StackConfig {
    StackConfig::new(vec![LayerShape::plain()], kind)
}

fn set_head(params: &mut ParamStore, prefix: &str, q: Tensor, k: Tensor, v: Tensor) -> Result<()> {
    params.set(&head_name(prefix, 0, 0, "query"), q)?;
    params.set(&head_name(prefix, 0, 0, "key"), k)?;
    params.set(&head_name(prefix, 0, 0, "value"), v)
}

/// Attention parameters that reproduce a bidirectional latent-factor model on
/// sequences of length exactly `len`.
pub fn construct_equivalent_efa(reduction: Reduction, fm: &FmModel, len: usize) -> Result<EfaModel> {
    if len < 2 {
        return Err(Error::Contract("the reductions need sequences of length at least 2".into()));
    }
    if fm.config.direction != Direction::Bidirectional {
        return Err(Error::Contract("the reductions are stated for bidirectional models".into()));
    }
    let (k, d) = (fm.config.dim, fm.config.vocab);
    let shrink = 1.0 / (len - 1) as f64;
    match reduction {
        Reduction::P1 => {
            if fm.config.variant != FmVariant::Categorical {
                return Err(Error::Contract("P1 needs a categorical FM".into()));
            }
            let config = EfaConfig {
                vocab: d,
                max_len: len,
                direction: Direction::Bidirectional,
                categorical: Some(CategoricalConfig {
                    dim: k,
                    positional: true,
                    stack: single_layer(AttentionKind::Softmax),
                }),
                value: None,
            };
            let mut m = EfaModel::new(config, 0)?;
            let (rho, alpha) = (fm.params.get("fm.rho")?, fm.params.get("fm.alpha")?);
            let context = Tensor::from_fn(k, d + 1, |r, c| if c < d { alpha.get(r, c) } else { 0.0 });
            m.params.set("cat.context", context)?;
            m.params.set("cat.center", rho.scaled(len as f64 * shrink))?;
            m.params.set("cat.position", Tensor::zeros(k, len))?;
            set_head(
                &mut m.params,
                crate::efa::CAT,
                Tensor::zeros(k, k),
                Tensor::zeros(k, k),
                Tensor::identity(k),
            )?;
            Ok(m)
        }
        Reduction::P2 => {
            if fm.config.variant != FmVariant::GaussianKnn || fm.config.knn.is_some() {
                return Err(Error::Contract("P2 needs a full-context attribute FM".into()));
            }
            let attr = fm.config.attribute.clone().expect("validated");
            let dim = k + 1;
            let config = EfaConfig {
                vocab: d,
                max_len: len,
                direction: Direction::Bidirectional,
                categorical: None,
                value: Some(ValueConfig {
                    tokens: ValueTokens::Attributes(attr),
                    embed: ValueEmbed::Identity,
                    mask: MaskEmbedding::Zero,
                    segments: None,
                    input_projection: None,
                    positional: false,
                    stack: single_layer(AttentionKind::Linear),
                    readout: Readout::LastEntry { scale: dim as f64 },
                    head: ExpFamHead::gaussian(fm.config.variance)?,
                }),
            };
            let mut m = EfaModel::new(config, 0)?;
            m.params.set("val.attr.g1", fm.params.get("fm.h.g1")?.clone())?;
            m.params.set("val.attr.g2", fm.params.get("fm.h.g2")?.clone())?;
            let qk: Vec<f64> = (0..dim).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
            let v: Vec<f64> = (0..dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
            set_head(
                &mut m.params,
                crate::efa::VAL,
                Tensor::diag(&qk),
                Tensor::diag(&qk),
                Tensor::diag(&v),
            )?;
            Ok(m)
        }
        Reduction::P3 => {
            let head = match fm.config.variant {
                FmVariant::PoissonV1 => ExpFamHead::PoissonShifted,
                FmVariant::PoissonV2 => ExpFamHead::PoissonOnePlus,
                FmVariant::GaussianRatings => ExpFamHead::gaussian(fm.config.variance)?,
                _ => return Err(Error::Contract("P3 needs a ratings FM".into())),
            };
            let dim = 2 * k + 1;
            let config = EfaConfig {
                vocab: d,
                max_len: len,
                direction: Direction::Bidirectional,
                categorical: None,
                value: Some(ValueConfig {
                    tokens: ValueTokens::Embeddings { dim: k, center: true },
                    embed: ValueEmbed::Identity,
                    mask: MaskEmbedding::Zero,
                    segments: None,
                    input_projection: None,
                    positional: false,
                    stack: single_layer(AttentionKind::Linear),
                    readout: Readout::LastEntry { scale: dim as f64 },
                    head,
                }),
            };
            let mut m = EfaModel::new(config, 0)?;
            m.params.set("val.context", fm.params.get("fm.rho")?.clone())?;
            m.params.set("val.center", fm.params.get("fm.alpha")?.scaled(shrink))?;
            let (q, key, v) = p3_matrices(k);
            set_head(&mut m.params, crate::efa::VAL, q, key, v)?;
            Ok(m)
        }
    }
}

/// Query, key and value matrices of the ratings reduction for dimension `k`.
///
/// The key matrix moves the first `k` rows into rows `k..2k`, so the score of
/// row `j` in column `i` is the center block of `j` against the context block
/// of `i`.
pub fn p3_matrices(k: usize) -> (Tensor, Tensor, Tensor) {
    let dim = 2 * k + 1;
    let q: Vec<f64> = (0..dim).map(|i| if (k..2 * k).contains(&i) { 1.0 } else { 0.0 }).collect();
    let v: Vec<f64> = (0..dim).map(|i| if i == 2 * k { 1.0 } else { 0.0 }).collect();
    let key = Tensor::from_fn(dim, dim, |r, c| if r >= k && r < 2 * k && c == r - k { 1.0 } else { 0.0 });
    (Tensor::diag(&q), key, Tensor::diag(&v))
}
