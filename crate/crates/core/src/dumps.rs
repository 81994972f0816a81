//! Plot-ready exports: attention maps, query/key/value embeddings and
//! co-purchase rankings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{head_name, Direction};
use crate::data::SequenceBatch;
use crate::efa::{EfaModel, CAT, VAL};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Categorical,
    Value,
}

/// Attention of one layer over one sequence. Row `i` holds the weights the
/// masked position `i` places on every position; rows sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub heads: Vec<Tensor>,
    pub average: Tensor,
}

pub fn export_attention_weights(
    model: &EfaModel,
    batch: &SequenceBatch,
    f: usize,
    layer: usize,
    component: Component,
) -> Result<AttentionDump> {
    let s = batch.sequences.get(f).ok_or(Error::Index {
        index: f,
        len: batch.len(),
    })?;
    let n = s.len();
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g, false);
    let forward = match component {
        Component::Categorical => model.categorical_forward(&mut g, &bind, batch, &[f])?,
        Component::Value => model.value_forward(&mut g, &bind, batch, &[f])?,
    }
    .ok_or_else(|| Error::Structure(format!("model has no {component:?} component")))?;
    let layers = forward.weights.len();
    let per_head = forward.weights.get(layer).ok_or(Error::Index { index: layer, len: layers })?;
    let mut heads = Vec::with_capacity(per_head.len());
    for &w in per_head {
        let blocks = g
            .attention_weights(w)
            .ok_or_else(|| Error::Structure("layer output carries no attention weights".into()))?;
        let mut dump = Tensor::zeros(n, n);
        for (block, &(_, i)) in blocks.iter().zip(&forward.targets) {
            for j in 0..block.rows() {
                dump.set(i, j, block.get(j, i));
            }
        }
        heads.push(dump);
    }
    let m = heads.len() as f64;
    let average = Tensor::from_fn(n, n, |r, c| heads.iter().map(|h| h.get(r, c)).sum::<f64>() / m);
    Ok(AttentionDump { heads, average })
}

/// Uniform weights `1/|c_i|` over each position's context, the implicit
/// attention of the latent-factor baseline.
pub fn uniform_context_weights(len: usize, direction: Direction) -> Tensor {
    Tensor::from_fn(len, len, |i, j| {
        let (inside, size) = match direction {
            Direction::Bidirectional => (j != i, len.saturating_sub(1)),
            Direction::Unidirectional => (j < i, i),
        };
        if inside && size > 0 {
            1.0 / size as f64
        } else {
            0.0
        }
    })
}

/// `(W^Q β, W^K β, W^V β)` for a layer and head, one column per token.
pub fn export_qkv_embeddings(model: &EfaModel, layer: usize, head: usize, component: Component) -> Result<[Tensor; 3]> {
    let (prefix, table, stack) = match component {
        Component::Categorical => {
            let c = model
                .config
                .categorical
                .as_ref()
                .ok_or_else(|| Error::Structure("model has no categorical component".into()))?;
            (CAT, "cat.context", &c.stack)
        }
        Component::Value => {
            let v = model
                .config
                .value
                .as_ref()
                .ok_or_else(|| Error::Structure("model has no value component".into()))?;
            (VAL, "val.context", &v.stack)
        }
    };
    let shape = stack.layers.get(layer).ok_or(Error::Index {
        index: layer,
        len: stack.layers.len(),
    })?;
    if head >= shape.heads {
        return Err(Error::Index {
            index: head,
            len: shape.heads,
        });
    }
    let beta = model.params.get(table)?;
    let vocab = model.config.vocab;
    let beta = Tensor::from_fn(beta.rows(), vocab, |r, c| beta.get(r, c));
    let mut out = Vec::with_capacity(3);
    for which in ["query", "key", "value"] {
        let w = model.params.get(&head_name(prefix, layer, head, which))?;
        if w.cols() != beta.rows() {
            return Err(Error::Structure("the stack does not act on raw token embeddings".into()));
        }
        out.push(matmul(w, &beta)?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

/// Items `Γ ≠ Δ` ranked by `δ_Δᵀβ_Γ + β_Γᵀδ_Δ`, best first, ties by index.
pub fn top_copurchase(model: &EfaModel, item: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let d = model.config.vocab;
    if item >= d {
        return Err(Error::Vocab { token: item, vocab: d });
    }
    if k == 0 || k >= d {
        return Err(Error::Contract(format!("k = {k} must be in 1..{d}")));
    }
    let delta = model.params.get("cat.center")?;
    let beta = model.params.get("cat.context")?;
    let dot = |a: usize, b: usize| (0..delta.rows()).map(|r| delta.get(r, a) * beta.get(r, b)).sum::<f64>();
    let mut scored: Vec<(usize, f64)> = (0..d).filter(|&g| g != item).map(|g| (g, dot(item, g) + dot(item, g))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Writes a matrix with a header row of `column_names` and a leading
/// column of `row_names`.
pub fn write_matrix_csv(path: &Path, corner: &str, row_names: &[String], column_names: &[String], m: &Tensor) -> Result<()> {
    if row_names.len() != m.rows() || column_names.len() != m.cols() {
        return Err(Error::shape(
            "write_matrix_csv",
            format!("{:?} with {} × {} names", m.shape(), row_names.len(), column_names.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(column_names.iter().cloned());
    w.write_record(&header)?;
    for (r, name) in row_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend((0..m.cols()).map(|c| format!("{}", m.get(r, c))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    Ok(Tensor::from_rows(&rows))
}

/// Position names `"{i}:{label}"` for a sequence.
pub fn position_names(batch: &SequenceBatch, f: usize) -> Vec<String> {
    batch.sequences[f]
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| match &batch.labels {
            Some(l) => format!("{i}:{}", l[t]),
            None => format!("{i}:{t}"),
        })
        .collect()
}
