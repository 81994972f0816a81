//! Adam with validation-based early stopping, and evaluation metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::heads::ExpFamHead;
use crate::model::{mean_nll, SequenceModel, EVAL_CHUNK};
use crate::params::ParamStore;
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Sequences per gradient step; the whole training set when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 10,
            batch_size: None,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.patience == 0 || self.batch_size == Some(0) {
            return Err(Error::Config("learning rate, patience and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, config: &FitConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let (g, m, v) = (&grads[k], &mut state.m[k], &mut state.v[k]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {k}: {} values, {} gradients", p.len(), g.len()),
            ));
        }
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            *x -= config.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    #[serde(default)]
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
}

fn divergence(epoch: usize, loss: f64) -> Error {
    Error::Divergence { epoch, loss }
}

/// Minimizes the mean negative (pseudo) log-likelihood of `train`, keeping
/// the parameters of the epoch with the lowest validation loss.
pub fn fit<M: SequenceModel + ?Sized>(model: &mut M, train: &SequenceBatch, val: &SequenceBatch, config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::default();
    let all_val: Vec<usize> = (0..val.len()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_size = config.batch_size.unwrap_or(train.len()).min(train.len());

    let mut report = FitReport {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        final_metrics: BTreeMap::new(),
        wall_clock_secs: 0.0,
    };
    let mut best = model.params().clone();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch_size) {
            let mut g = Graph::new();
            let bind = model.params().bind(&mut g, true);
            let (sum, n) = match model.loss_terms(&mut g, &bind, train, chunk) {
                Err(Error::NonFinite { .. }) => return Err(divergence(epoch, f64::NAN)),
                r => r?,
            };
            let value = g.value(sum).item();
            if !value.is_finite() {
                return Err(divergence(epoch, value));
            }
            let loss = g.scale(sum, 1.0 / n as f64)?;
            match g.backward(loss) {
                Err(Error::NonFinite { .. }) => return Err(divergence(epoch, value)),
                r => r?,
            }
            let grads = model.params().gradients(&g, &bind);
            if grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(divergence(epoch, value));
            }
            adam_step(model.params_mut(), &grads, &mut state, config)?;
            total += value;
            count += n;
        }
        report.train_losses.push(total / count as f64);
        let val_loss = match mean_nll(model, val, &all_val) {
            Err(Error::NonFinite { .. }) => return Err(divergence(epoch, f64::NAN)),
            r => r?,
        };
        if !val_loss.is_finite() {
            return Err(divergence(epoch, val_loss));
        }
        report.val_losses.push(val_loss);
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = model.params().clone();
        } else if epoch - report.best_epoch >= config.patience {
            report.stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    CrossEntropy,
    PoissonNll,
    /// Mean predicted value grouped by the observed value.
    MeanByActual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Grouped(BTreeMap<String, f64>),
}

impl MetricValue {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            MetricValue::Scalar(v) => Some(*v),
            MetricValue::Grouped(_) => None,
        }
    }
}

/// `(κ, y)` at every target position of `data`.
fn value_pairs<M: SequenceModel + ?Sized>(model: &M, data: &SequenceBatch) -> Result<Vec<(f64, f64)>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    for chunk in all.chunks(EVAL_CHUNK) {
        for (k, naturals) in model.value_naturals(data, chunk)?.into_iter().enumerate() {
            let s = &data.sequences[chunk[k]];
            let ys = s.values.as_ref().ok_or_else(|| Error::Data("sequences carry no values".into()))?;
            out.extend(naturals.iter().zip(ys).filter_map(|(k, &y)| k.map(|k| (k, y))));
        }
    }
    Ok(out)
}

pub fn evaluate<M: SequenceModel + ?Sized>(model: &M, data: &SequenceBatch, metric: Metric) -> Result<MetricValue> {
    if data.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let value_head = || {
        model
            .value_head()
            .ok_or_else(|| Error::Contract(format!("{metric:?} needs a value head")))
    };
    match metric {
        Metric::Mse => {
            let head = value_head()?;
            let pairs = value_pairs(model, data)?;
            let sse: f64 = pairs.iter().map(|&(k, y)| (head.scalar_mean(k) - y).powi(2)).sum();
            Ok(MetricValue::Scalar(sse / pairs.len() as f64))
        }
        Metric::PoissonNll => {
            let head = value_head()?;
            if !matches!(head, ExpFamHead::PoissonShifted | ExpFamHead::PoissonOnePlus) {
                return Err(Error::Contract("Poisson NLL needs a Poisson head".into()));
            }
            let pairs = value_pairs(model, data)?;
            let mut total = 0.0;
            for &(k, y) in &pairs {
                total -= head.log_prob(&[k], y)?;
            }
            Ok(MetricValue::Scalar(total / pairs.len() as f64))
        }
        Metric::MeanByActual => {
            let head = value_head()?;
            let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for (k, y) in value_pairs(model, data)? {
                let e = groups.entry(format!("{}", y.round() as i64)).or_default();
                e.0 += head.scalar_mean(k);
                e.1 += 1;
            }
            Ok(MetricValue::Grouped(
                groups.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            ))
        }
        Metric::CrossEntropy => {
            if !model.models_tokens() {
                return Err(Error::Contract("cross-entropy needs a token model".into()));
            }
            let all: Vec<usize> = (0..data.len()).collect();
            let mut total = 0.0;
            let mut count = 0;
            for chunk in all.chunks(EVAL_CHUNK) {
                for (k, logits) in model.token_logits(data, chunk)?.into_iter().enumerate() {
                    let s = &data.sequences[chunk[k]];
                    let head = ExpFamHead::Categorical { classes: logits.rows() };
                    for i in s.target_positions() {
                        total -= head.log_prob(&logits.column_vec(i), s.tokens[i] as f64)?;
                        count += 1;
                    }
                }
            }
            Ok(MetricValue::Scalar(total / count as f64))
        }
    }
}
