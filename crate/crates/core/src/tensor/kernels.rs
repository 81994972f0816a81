use super::Tensor;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(nt_raw(a.data(), a.rows(), a.cols(), &b.transpose().data, b.cols()))
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(nt_raw(a.data(), a.rows(), a.cols(), b.data(), b.rows()))
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data()[p * n..(p + 1) * n];
        let arow = &a.data()[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out).expect("positive extents"))
}

fn nt_raw(a: &[f64], m: usize, k: usize, bt: &[f64], n: usize) -> Tensor {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(arow, &bt[j * k..(j + 1) * k]));
        }
    }
    Tensor::matrix(m, n, out).expect("positive extents")
}

/// Converts an additive `{0, -inf}` mask into per-entry admission flags.
pub(crate) fn mask_admits(x: &Tensor, mask: &Tensor) -> Result<Vec<bool>> {
    if x.shape() != mask.shape() {
        return Err(Error::shape(
            "masked_softmax_columns",
            format!("input {:?} vs mask {:?}", x.shape(), mask.shape()),
        ));
    }
    let mut admit = Vec::with_capacity(mask.len());
    for (index, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            admit.push(true);
        } else if m == f64::NEG_INFINITY {
            admit.push(false);
        } else {
            return Err(Error::InvalidMask { index, value: m });
        }
    }
    Ok(admit)
}

/// Column-wise softmax restricted to admitted entries; excluded entries are exactly 0.
pub(crate) fn softmax_columns_admitted(x: &Tensor, admit: Option<&[bool]>) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    let xs = x.data();
    let ok = |idx: usize| admit.map_or(true, |a| a[idx]);
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..rows {
            let idx = r * cols + c;
            if ok(idx) && xs[idx] > max {
                max = xs[idx];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { column: c });
        }
        let mut total = 0.0;
        for r in 0..rows {
            let idx = r * cols + c;
            if ok(idx) {
                let e = (xs[idx] - max).exp();
                out[idx] = e;
                total += e;
            }
        }
        for r in 0..rows {
            out[r * cols + c] /= total;
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Softmax of `x[:, j] + mask[:, j]` for every column `j`.
///
/// `mask` entries must be `0` or `-inf`; every column needs at least one `0`.
pub fn masked_softmax_columns(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::NonFinite {
            op: "masked_softmax_columns",
        });
    }
    let admit = mask_admits(x, mask)?;
    softmax_columns_admitted(x, Some(&admit))
}

pub(crate) fn log_softmax_columns(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let xs = x.data();
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let max = (0..rows).map(|r| xs[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..rows).map(|r| (xs[r * cols + c] - max).exp()).sum::<f64>().ln();
        for r in 0..rows {
            out[r * cols + c] = xs[r * cols + c] - lse;
        }
    }
    Tensor::matrix(rows, cols, out).expect("same shape")
}
