//! Diagnostics for identifiability, the parameter norm functional and the
//! generalization bound.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{head_name, StackConfig};
use crate::data::SequenceBatch;
use crate::efa::{EfaModel, Readout, ValueTokens, CAT, VAL};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

pub use crate::tensor::clip;

/// Embeddings behind one prediction `(f, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    /// Context embedding: the transformed masked column of the categorical component.
    pub context: Option<Vec<f64>>,
    /// Center embeddings, one column per token.
    pub centers: Option<Tensor>,
    /// Value embedding whose inner product with `readout` is `κ_i`.
    pub value: Option<Vec<f64>>,
    pub readout: Option<Vec<f64>>,
    pub kappa: Option<f64>,
}

/// Readout vector of an affine readout.
fn affine_readout(model: &EfaModel) -> Result<Option<Vec<f64>>> {
    let Some(v) = &model.config.value else { return Ok(None) };
    match &v.readout {
        Readout::LastEntry { scale } => {
            let dim = v.model_dim();
            Ok(Some((0..dim).map(|r| if r + 1 == dim { *scale } else { 0.0 }).collect()))
        }
        Readout::Mlp { final_bias: false, .. } => Ok(Some(model.params.get("val.readout.out.w")?.data().to_vec())),
        Readout::Mlp { final_bias: true, .. } => Err(Error::Structure(
            "the value readout has a bias, so κ does not factor as an inner product".into(),
        )),
    }
}

pub fn extract_embeddings(model: &EfaModel, batch: &SequenceBatch, f: usize, i: usize) -> Result<Embeddings> {
    let s = batch.sequences.get(f).ok_or(Error::Index {
        index: f,
        len: batch.len(),
    })?;
    if i >= s.len() || !s.is_target(i) {
        return Err(Error::Contract(format!("position {i} of sequence {f} is not a target")));
    }
    let readout = affine_readout(model)?;
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g, false);
    let pick = |targets: &[(usize, usize)]| targets.iter().position(|&t| t == (f, i)).expect("target present");
    let mut out = Embeddings {
        context: None,
        centers: None,
        value: None,
        readout: None,
        kappa: None,
    };
    if let Some(c) = model.categorical_forward(&mut g, &bind, batch, &[f])? {
        let col = pick(&c.targets);
        out.context = Some(g.value(c.columns).column_vec(col));
        out.centers = Some(model.params.get("cat.center")?.clone());
    }
    if let Some(v) = model.value_forward(&mut g, &bind, batch, &[f])? {
        let col = pick(&v.targets);
        let emb = v.penultimate.unwrap_or(v.columns);
        out.value = Some(g.value(emb).column_vec(col));
        out.kappa = Some(g.value(v.naturals).get(0, col));
        out.readout = readout;
    }
    Ok(out)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn columns_to_matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let rows = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// Ratio of the largest to the smallest singular value; infinite when the
/// matrix is numerically rank deficient.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= max * f64::EPSILON * m.nrows().max(m.ncols()) as f64 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Least-squares map `X` minimizing `‖target − X · source‖_F`, its relative
/// residual and the condition number of `source`.
fn fit_map(target: &DMatrix<f64>, source: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, f64)> {
    let svd = source.transpose().svd(true, true);
    let xt = svd
        .solve(&target.transpose(), 1e-12)
        .map_err(|e| Error::Contract(format!("least squares failed: {e}")))?;
    let x = xt.transpose();
    let denom = target.norm();
    let residual = if denom == 0.0 {
        (target - &x * source).norm()
    } else {
        (target - &x * source).norm() / denom
    };
    Ok((x, residual, condition_number(source)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityProbeReport {
    pub probe_count: usize,
    /// `H_A ≈ A H_B`.
    pub context_map: Option<Tensor>,
    pub context_residual: Option<f64>,
    pub context_condition: Option<f64>,
    /// `e_A ≈ B e_B`.
    pub center_map: Option<Tensor>,
    pub center_residual: Option<f64>,
    pub center_condition: Option<f64>,
    /// `K_A ≈ C K_B`.
    pub value_map: Option<Tensor>,
    pub value_residual: Option<f64>,
    pub value_condition: Option<f64>,
    /// Residual of `L_A ≈ C^{-T} L_B`.
    pub readout_residual: Option<f64>,
    pub warnings: Vec<String>,
}

/// Fits linear maps between the embeddings of two models over the probe
/// positions `(sequence, position)`. Reports only; nothing is asserted.
pub fn linear_identifiability_probe(
    a: &EfaModel,
    b: &EfaModel,
    batch: &SequenceBatch,
    probes: &[(usize, usize)],
) -> Result<IdentifiabilityProbeReport> {
    if a.config != b.config {
        return Err(Error::Contract("probed models must share a configuration".into()));
    }
    if probes.is_empty() {
        return Err(Error::Sampling("no probe positions".into()));
    }
    let mut report = IdentifiabilityProbeReport {
        probe_count: probes.len(),
        context_map: None,
        context_residual: None,
        context_condition: None,
        center_map: None,
        center_residual: None,
        center_condition: None,
        value_map: None,
        value_residual: None,
        value_condition: None,
        readout_residual: None,
        warnings: Vec::new(),
    };
    let (mut ha, mut hb, mut ka, mut kb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut la, mut lb) = (None, None);
    for &(f, i) in probes {
        let ea = extract_embeddings(a, batch, f, i)?;
        let eb = extract_embeddings(b, batch, f, i)?;
        ha.extend(ea.context);
        hb.extend(eb.context);
        ka.extend(ea.value);
        kb.extend(eb.value);
        la = ea.readout;
        lb = eb.readout;
    }
    let check = |name: &str, cond: f64, dim: usize, report: &mut IdentifiabilityProbeReport| {
        if !cond.is_finite() {
            report.warnings.push(format!("{name}: probe matrix of rank below {dim}"));
        }
    };
    if !ha.is_empty() {
        let (ta, tb) = (columns_to_matrix(&ha), columns_to_matrix(&hb));
        let (map, res, cond) = fit_map(&ta, &tb)?;
        check("context", cond, ta.nrows(), &mut report);
        report.context_map = Some(from_matrix(&map));
        report.context_residual = Some(res);
        report.context_condition = Some(cond);
        let (ca, cb) = (to_matrix(a.params.get("cat.center")?), to_matrix(b.params.get("cat.center")?));
        let (map, res, cond) = fit_map(&ca, &cb)?;
        check("center", cond, ca.nrows(), &mut report);
        report.center_map = Some(from_matrix(&map));
        report.center_residual = Some(res);
        report.center_condition = Some(cond);
    }
    if !ka.is_empty() {
        let (ta, tb) = (columns_to_matrix(&ka), columns_to_matrix(&kb));
        let (map, res, cond) = fit_map(&ta, &tb)?;
        check("value", cond, ta.nrows(), &mut report);
        if let (Some(la), Some(lb)) = (la, lb) {
            match map.clone().try_inverse() {
                Some(inv) => {
                    let (la, lb) = (
                        DMatrix::from_column_slice(la.len(), 1, &la),
                        DMatrix::from_column_slice(lb.len(), 1, &lb),
                    );
                    let diff = (&la - inv.transpose() * lb).norm();
                    let n = la.norm();
                    report.readout_residual = Some(if n == 0.0 { diff } else { diff / n });
                }
                None => report.warnings.push("value map is singular; readout map undefined".into()),
            }
        }
        report.value_map = Some(from_matrix(&map));
        report.value_residual = Some(res);
        report.value_condition = Some(cond);
    }
    Ok(report)
}

/// A copy of `model` whose context embeddings are `T` times the original and
/// whose center embeddings absorb `T^{-T}`, so both define the same
/// categorical conditionals. The last categorical layer must be a plain
/// attention layer.
pub fn plant_linear_map(model: &EfaModel, t: &Tensor) -> Result<EfaModel> {
    let c = model
        .config
        .categorical
        .as_ref()
        .ok_or_else(|| Error::Structure("model has no categorical component".into()))?;
    let last = c
        .stack
        .layers
        .last()
        .ok_or_else(|| Error::Structure("the categorical stack has no layers".into()))?;
    if last.residual || last.ffn_width.is_some() || last.layer_norm {
        return Err(Error::Structure("the last categorical layer must be plain attention".into()));
    }
    let tm = to_matrix(t);
    let inv = tm
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Contract("planted map must be invertible".into()))?;
    let mut out = model.clone();
    let l = c.stack.layers.len() - 1;
    for m in 0..last.heads {
        let name = head_name(CAT, l, m, "value");
        let v = to_matrix(out.params.get(&name)?);
        out.params.set(&name, from_matrix(&(&tm * v)))?;
    }
    let delta = to_matrix(out.params.get("cat.center")?);
    out.params.set("cat.center", from_matrix(&(inv.transpose() * delta)))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Columns `e(x_A) − e(x_B)` over the first `K` pairs.
    pub l_condition: Option<f64>,
    /// Columns `[−log Σ_x' exp(Hᵀ e(x')); H]` over the first `K + 1` probes.
    pub m_condition: Option<f64>,
    /// Value embeddings over the first `d_j` probes.
    pub n_condition: Option<f64>,
    pub singular: Vec<String>,
}

pub fn diversity_matrices(
    model: &EfaModel,
    batch: &SequenceBatch,
    probes: &[(usize, usize)],
    pairs: &[(usize, usize)],
) -> Result<DiversityReport> {
    let mut report = DiversityReport {
        l_condition: None,
        m_condition: None,
        n_condition: None,
        singular: Vec::new(),
    };
    let flag = |name: &str, cond: f64, report: &mut DiversityReport| {
        if !cond.is_finite() {
            report.singular.push(name.to_string());
        }
    };
    if let Some(c) = &model.config.categorical {
        let k = c.dim;
        let delta = model.params.get("cat.center")?;
        if pairs.len() < k {
            return Err(Error::Sampling(format!("{} token pairs, need {k}", pairs.len())));
        }
        if probes.len() < k + 1 {
            return Err(Error::Sampling(format!("{} probes, need {}", probes.len(), k + 1)));
        }
        for &(x, y) in &pairs[..k] {
            if x >= delta.cols() || y >= delta.cols() {
                return Err(Error::Vocab {
                    token: x.max(y),
                    vocab: delta.cols(),
                });
            }
        }
        let l = DMatrix::from_fn(k, k, |r, j| delta.get(r, pairs[j].0) - delta.get(r, pairs[j].1));
        let cond = condition_number(&l);
        flag("L", cond, &mut report);
        report.l_condition = Some(cond);

        let mut cols = Vec::with_capacity(k + 1);
        for &(f, i) in &probes[..k + 1] {
            let h = extract_embeddings(model, batch, f, i)?.context.expect("categorical component");
            let logits: Vec<f64> = (0..delta.cols()).map(|x| (0..k).map(|r| h[r] * delta.get(r, x)).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            let mut col = vec![-lse];
            col.extend(h);
            cols.push(col);
        }
        let cond = condition_number(&columns_to_matrix(&cols));
        flag("M", cond, &mut report);
        report.m_condition = Some(cond);
    }
    if model.config.value.is_some() {
        let first = probes.first().ok_or_else(|| Error::Sampling("no probes".into()))?;
        let dj = extract_embeddings(model, batch, first.0, first.1)?
            .value
            .expect("value component")
            .len();
        if probes.len() < dj {
            return Err(Error::Sampling(format!("{} probes, need {dj}", probes.len())));
        }
        let mut cols = Vec::with_capacity(dj);
        for &(f, i) in &probes[..dj] {
            cols.push(extract_embeddings(model, batch, f, i)?.value.expect("value component"));
        }
        let cond = condition_number(&columns_to_matrix(&cols));
        flag("N", cond, &mut report);
        report.n_condition = Some(cond);
    }
    Ok(report)
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn operator_norm(a: &Tensor) -> f64 {
    let (rows, cols) = (a.rows(), a.cols());
    if a.is_empty() || a.data().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    let apply = |v: &[f64]| -> Vec<f64> { (0..rows).map(|r| (0..cols).map(|c| a.get(r, c) * v[c]).sum()).collect() };
    let apply_t = |u: &[f64]| -> Vec<f64> { (0..cols).map(|c| (0..rows).map(|r| a.get(r, c) * u[r]).sum()).collect() };
    let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..100_000 {
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let av = apply(&v);
        let next = norm(&av);
        let w = apply_t(&av);
        if norm(&w) == 0.0 {
            return next;
        }
        let done = (next - sigma).abs() <= 1e-12 * next;
        sigma = next;
        v = w;
        if done {
            break;
        }
    }
    let n = norm(&v);
    sigma.max(norm(&apply(&v)) / n)
}

/// `‖θ‖` of one attention stack plus an optional attribute encoder.
pub fn stack_theta_norm(params: &ParamStore, prefix: &str, stack: &StackConfig, encoder: Option<(&Tensor, &Tensor)>) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (l, layer) in stack.layers.iter().enumerate() {
        let mut qk: f64 = 0.0;
        let mut values = 0.0;
        for m in 0..layer.heads {
            qk = qk
                .max(operator_norm(params.get(&head_name(prefix, l, m, "query"))?))
                .max(operator_norm(params.get(&head_name(prefix, l, m, "key"))?));
            values += operator_norm(params.get(&head_name(prefix, l, m, "value"))?);
        }
        let mut total = qk + values;
        if layer.ffn_width.is_some() {
            total += operator_norm(params.get(&format!("{prefix}layer{l}.ffn.w1"))?);
            total += operator_norm(params.get(&format!("{prefix}layer{l}.ffn.w2"))?);
        }
        best = best.max(total);
    }
    if let Some((g1, g2)) = encoder {
        best += operator_norm(g1) + operator_norm(g2);
    }
    Ok(best)
}

/// `‖θ‖` of the value stack (with the attribute encoder when present), or of
/// the categorical stack for token-only models.
pub fn theta_norm(model: &EfaModel) -> Result<f64> {
    if let Some(v) = &model.config.value {
        let enc = match &v.tokens {
            ValueTokens::Attributes(_) => Some((model.params.get("val.attr.g1")?, model.params.get("val.attr.g2")?)),
            ValueTokens::Embeddings { .. } => None,
        };
        return stack_theta_norm(&model.params, VAL, &v.stack, enc);
    }
    let c = model.config.categorical.as_ref().expect("validated config has a component");
    stack_theta_norm(&model.params, CAT, &c.stack, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBoundInputs {
    pub b_y: f64,
    pub b: f64,
    pub r: f64,
    pub layers: u64,
    pub heads: u64,
    pub d: u64,
    pub d_prime: u64,
    pub k: u64,
    pub k_prime: u64,
    pub tau_dim: u64,
    pub f: u64,
    pub xi: f64,
}

/// The excess-loss rate with its constant set to 1; a relative complexity
/// measure rather than a guarantee.
pub fn generalization_bound(x: &GeneralizationBoundInputs) -> Result<f64> {
    if !(x.xi > 0.0 && x.xi < 1.0) {
        return Err(Error::Contract(format!("ξ = {} must lie in (0, 1)", x.xi)));
    }
    let ints = [x.layers, x.heads, x.d, x.d_prime, x.k, x.k_prime, x.tau_dim, x.f];
    if !(x.b_y > 0.0 && x.b > 0.0 && x.r > 0.0) || ints.contains(&0) {
        return Err(Error::Contract("bound inputs must be positive".into()));
    }
    let iota = (2.0 + x.b.max(x.r).max(1.0 / (2.0 * x.b_y))).ln();
    let (l, m, d, dp, k, kp, tau) = (
        x.layers as f64,
        x.heads as f64,
        x.d as f64,
        x.d_prime as f64,
        x.k as f64,
        x.k_prime as f64,
        x.tau_dim as f64,
    );
    let complexity = 43.0 * l * (l * (3.0 * m * d * d + 2.0 * d * dp) + kp * (k + tau));
    Ok(x.b_y * x.b_y * ((complexity * iota + (1.0 / x.xi).ln()) / x.f as f64).sqrt())
}
