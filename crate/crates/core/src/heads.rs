//! Conditional output distributions driven by a natural parameter.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Output family for one observation.
///
/// Scalar heads take a `1×n` row of natural parameters, the categorical head a
/// `classes×n` matrix of logits. Categorical observations are 0-based class
/// indices stored as `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpFamHead {
    Categorical {
        classes: usize,
    },
    /// `y ~ N(κ, variance)`.
    GaussianKnownVar {
        variance: f64,
    },
    /// `y - 1 ~ Poisson(exp κ)`.
    PoissonShifted,
    /// `y ~ Poisson(1 + exp κ)`.
    PoissonOnePlus,
}

impl ExpFamHead {
    pub fn categorical(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("categorical head needs at least 2 classes, got {classes}")));
        }
        Ok(ExpFamHead::Categorical { classes })
    }

    pub fn gaussian(variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Config(format!("variance must be positive, got {variance}")));
        }
        Ok(ExpFamHead::GaussianKnownVar { variance })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExpFamHead::Categorical { .. } => "categorical",
            ExpFamHead::GaussianKnownVar { .. } => "gaussian",
            ExpFamHead::PoissonShifted => "poisson_shifted",
            ExpFamHead::PoissonOnePlus => "poisson_one_plus",
        }
    }

    /// Width of the natural parameter.
    pub fn natural_dim(&self) -> usize {
        match self {
            ExpFamHead::Categorical { classes } => *classes,
            _ => 1,
        }
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        let integral = y.fract() == 0.0;
        let ok = match self {
            ExpFamHead::Categorical { classes } => integral && y >= 0.0 && y < *classes as f64,
            ExpFamHead::GaussianKnownVar { .. } => y.is_finite(),
            ExpFamHead::PoissonShifted => integral && y >= 1.0,
            ExpFamHead::PoissonOnePlus => integral && y >= 0.0,
        };
        if ok && y.is_finite() {
            Ok(())
        } else {
            Err(Error::Support {
                head: self.name(),
                value: y,
            })
        }
    }

    fn check_natural(&self, natural: &[f64]) -> Result<()> {
        if natural.len() != self.natural_dim() {
            return Err(Error::shape(
                "log_prob",
                format!("{} natural parameters for {}", natural.len(), self.name()),
            ));
        }
        Ok(())
    }

    pub fn log_prob(&self, natural: &[f64], y: f64) -> Result<f64> {
        self.check_natural(natural)?;
        self.check_support(y)?;
        Ok(match *self {
            ExpFamHead::Categorical { .. } => {
                let max = natural.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + natural.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                natural[y as usize] - lse
            }
            ExpFamHead::GaussianKnownVar { variance } => {
                let k = natural[0];
                -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - (y - k).powi(2) / (2.0 * variance)
            }
            ExpFamHead::PoissonShifted => {
                let k = natural[0];
                (y - 1.0) * k - k.exp() - ln_gamma(y)
            }
            ExpFamHead::PoissonOnePlus => {
                let rate = 1.0 + natural[0].exp();
                y * rate.ln() - rate - ln_gamma(y + 1.0)
            }
        })
    }

    /// Mean of the distribution: class probabilities for the categorical head.
    pub fn mean(&self, natural: &[f64]) -> Vec<f64> {
        match self {
            ExpFamHead::Categorical { .. } => {
                let max = natural.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = natural.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            }
            ExpFamHead::GaussianKnownVar { .. } => vec![natural[0]],
            ExpFamHead::PoissonShifted | ExpFamHead::PoissonOnePlus => vec![1.0 + natural[0].exp()],
        }
    }

    /// Scalar mean; panics for the categorical head.
    pub fn scalar_mean(&self, kappa: f64) -> f64 {
        assert!(self.natural_dim() == 1, "scalar mean of a categorical head");
        self.mean(&[kappa])[0]
    }

    /// Sum of `-log p(y_j | naturals[:, j])` as a differentiable node.
    pub fn nll_sum(&self, g: &mut Graph, naturals: Var, ys: &[f64]) -> Result<Var> {
        let t = g.value(naturals);
        if t.rows() != self.natural_dim() || t.cols() != ys.len() {
            return Err(Error::shape(
                "nll",
                format!("naturals {:?} for {} observations of {}", t.shape(), ys.len(), self.name()),
            ));
        }
        for &y in ys {
            self.check_support(y)?;
        }
        let n = ys.len();
        match *self {
            ExpFamHead::Categorical { .. } => {
                let ls = g.log_softmax_columns(naturals)?;
                let picks: Vec<usize> = ys.iter().enumerate().map(|(j, &y)| y as usize * n + j).collect();
                let picked = g.select(ls, &picks)?;
                let s = g.sum(picked)?;
                g.scale(s, -1.0)
            }
            ExpFamHead::GaussianKnownVar { variance } => {
                let y = g.constant(Tensor::row(ys.to_vec()));
                let r = g.sub(naturals, y)?;
                let sq = g.mul(r, r)?;
                let s = g.sum(sq)?;
                let s = g.scale(s, 0.5 / variance)?;
                g.add_scalar(s, 0.5 * n as f64 * (2.0 * std::f64::consts::PI * variance).ln())
            }
            ExpFamHead::PoissonShifted => {
                let e = g.exp(naturals)?;
                let shift = g.constant(Tensor::row(ys.iter().map(|y| y - 1.0).collect()));
                let lin = g.mul(naturals, shift)?;
                let d = g.sub(e, lin)?;
                let s = g.sum(d)?;
                g.add_scalar(s, ys.iter().map(|&y| ln_gamma(y)).sum())
            }
            ExpFamHead::PoissonOnePlus => {
                let e = g.exp(naturals)?;
                let rate = g.add_scalar(e, 1.0)?;
                let lr = g.log(rate)?;
                let y = g.constant(Tensor::row(ys.to_vec()));
                let ylr = g.mul(lr, y)?;
                let d = g.sub(rate, ylr)?;
                let s = g.sum(d)?;
                g.add_scalar(s, ys.iter().map(|&y| ln_gamma(y + 1.0)).sum())
            }
        }
    }

    /// Mean negative log-likelihood as a differentiable node.
    pub fn nll_mean(&self, g: &mut Graph, naturals: Var, ys: &[f64]) -> Result<Var> {
        if ys.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let s = self.nll_sum(g, naturals, ys)?;
        g.scale(s, 1.0 / ys.len() as f64)
    }

    /// Mean negative log-likelihood of `ys` under the given natural parameters.
    pub fn nll_batch(&self, naturals: &Tensor, ys: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(naturals.clone());
        let out = self.nll_mean(&mut g, v, ys)?;
        Ok(g.value(out).item())
    }

    /// Differential entropy (Gaussian) used as the floor of the achievable NLL.
    pub fn gaussian_entropy(variance: f64) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * variance).ln()
    }
}
