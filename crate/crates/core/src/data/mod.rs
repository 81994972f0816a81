//! Sequence containers, the synthetic ratings generator and CSV preprocessors.

pub mod baskets;
pub mod geo;
pub mod ratings;
pub mod synthetic;
pub mod temperature;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One observed sequence. Tokens are 0-based; `values[i]` pairs with `tokens[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Segment index of each position (e.g. a day-lag indicator).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<usize>>,
    /// Positions whose observations enter the loss; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<bool>>,
}

impl Sequence {
    pub fn tokens(tokens: Vec<usize>) -> Self {
        Sequence {
            tokens,
            values: None,
            segments: None,
            targets: None,
        }
    }

    pub fn with_values(tokens: Vec<usize>, values: Vec<f64>) -> Self {
        Sequence {
            tokens,
            values: Some(values),
            segments: None,
            targets: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_target(&self, i: usize) -> bool {
        self.targets.as_ref().map_or(true, |t| t[i])
    }

    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_target(i)).collect()
    }
}

/// A collection of sequences over a shared vocabulary.
///
/// Sequences may differ in length; they are stored unpadded and every model
/// processes each one at its own length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub vocab: usize,
    pub sequences: Vec<Sequence>,
    /// Per-token attribute rows (`vocab × τ_dim`), e.g. site coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl SequenceBatch {
    pub fn new(vocab: usize, sequences: Vec<Sequence>) -> Result<Self> {
        let b = SequenceBatch {
            vocab,
            sequences,
            attributes: None,
            labels: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Sequence::len).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.attributes {
            if a.rows() != self.vocab {
                return Err(Error::Data(format!("{} attribute rows for vocabulary {}", a.rows(), self.vocab)));
            }
        }
        for (f, s) in self.sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Data(format!("sequence {f} is empty")));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::Vocab {
                    token: t,
                    vocab: self.vocab,
                });
            }
            let n = s.len();
            let lens = [
                s.values.as_ref().map(Vec::len),
                s.segments.as_ref().map(Vec::len),
                s.targets.as_ref().map(Vec::len),
            ];
            if lens.iter().flatten().any(|&l| l != n) {
                return Err(Error::Data(format!("sequence {f} has mismatched field lengths")));
            }
            if let Some(v) = &s.values {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!("sequence {f} has a non-finite value")));
                }
            }
        }
        Ok(())
    }

    /// A batch holding the sequences at `indices`, sharing vocabulary and attributes.
    pub fn subset(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch {
            vocab: self.vocab,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            attributes: self.attributes.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Total number of target positions.
    pub fn target_count(&self) -> usize {
        self.sequences.iter().map(|s| s.target_positions().len()).sum()
    }

    /// Fraction of the `sequences × vocab` matrix left unobserved.
    pub fn sparsity(&self) -> f64 {
        let observed: usize = self.sequences.iter().map(Sequence::len).sum();
        1.0 - observed as f64 / (self.len() * self.vocab) as f64
    }
}

/// Train / validation / test partition of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SequenceBatch,
    pub val: SequenceBatch,
    pub test: SequenceBatch,
}
