//! Interface shared by the attention models and the latent-factor baselines.

use crate::attention::Direction;
use crate::data::SequenceBatch;
use crate::error::Result;
use crate::heads::ExpFamHead;
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub trait SequenceModel {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn direction(&self) -> Direction;

    /// Head of the value component, if values are modelled.
    fn value_head(&self) -> Option<ExpFamHead>;

    /// Whether tokens themselves are modelled.
    fn models_tokens(&self) -> bool;

    /// Summed negative log-likelihood over every target position of the
    /// sequences `seqs`, together with the number of positions it covers.
    fn loss_terms(&self, g: &mut Graph, bind: &Bindings, batch: &SequenceBatch, seqs: &[usize]) -> Result<(Var, usize)>;

    /// Value natural parameter per position (`None` off-target) for each sequence.
    fn value_naturals(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Vec<Option<f64>>>>;

    /// Token logits (`vocab × len`) for each sequence.
    fn token_logits(&self, batch: &SequenceBatch, seqs: &[usize]) -> Result<Vec<Tensor>>;
}

/// Sequences evaluated per graph when no gradients are needed.
pub const EVAL_CHUNK: usize = 256;

/// Mean negative log-likelihood of `seqs` under the current parameters.
pub fn mean_nll<M: SequenceModel + ?Sized>(model: &M, batch: &SequenceBatch, seqs: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bind = model.params().bind(&mut g, false);
        let (loss, n) = model.loss_terms(&mut g, &bind, batch, chunk)?;
        total += g.value(loss).item();
        count += n;
    }
    Ok(total / count as f64)
}
