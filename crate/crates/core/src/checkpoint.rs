//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so reloading reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::efa::EfaModel;
use crate::error::{Error, Result};
use crate::fm::FmModel;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SavedModel {
    Efa(EfaModel),
    Fm(FmModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: SavedModel,
    /// Token names, when the data provides them.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    /// Per-token attribute rows the model was trained with.
    #[serde(default)]
    pub attributes: Option<Tensor>,
}

impl Checkpoint {
    pub fn new(model: SavedModel, labels: Option<Vec<String>>) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            model,
            labels,
            attributes: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath { path: path.to_path_buf() },
            _ => Error::Io(e),
        })?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if c.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", c.version)));
        }
        let params = match &c.model {
            SavedModel::Efa(m) => &m.params,
            SavedModel::Fm(m) => &m.params,
        };
        for (name, t) in params.iter() {
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(Error::Checkpoint(format!("parameter {name} has inconsistent shape")));
            }
        }
        Ok(c)
    }

    pub fn with_attributes(mut self, attributes: Option<Tensor>) -> Self {
        self.attributes = attributes;
        self
    }

    pub fn vocab(&self) -> usize {
        match &self.model {
            SavedModel::Efa(m) => m.config.vocab,
            SavedModel::Fm(m) => m.config.vocab,
        }
    }

    pub fn efa(&self) -> Result<&EfaModel> {
        match &self.model {
            SavedModel::Efa(m) => Ok(m),
            SavedModel::Fm(_) => Err(Error::Structure("checkpoint holds a latent-factor model".into())),
        }
    }

    /// Index of a token given by name or by number.
    pub fn token(&self, item: &str) -> Result<usize> {
        let vocab = self.vocab();
        if let Some(pos) = self.labels.as_ref().and_then(|l| l.iter().position(|s| s == item)) {
            return Ok(pos);
        }
        match item.parse::<usize>() {
            Ok(t) if t < vocab => Ok(t),
            _ => Err(Error::Data(format!("unknown item {item:?}"))),
        }
    }
}
