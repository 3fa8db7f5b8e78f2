//! Pure forward kernels. The gradient tape in [`super::graph`] calls these
//! for its forward values, so the standalone functions and the recorded ops
//! always agree.

use super::tensor::Tensor;
use super::{NumError, NumResult};

/// Pointwise activation applied after a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// One MLP layer: `x · weight + bias` then `activation`.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

// ---- matrix kernels -------------------------------------------------------

/// `a [m×k] · b [k×n]`, accumulated row-by-row so the inner loop runs over
/// contiguous slices.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    let bv = b.values();
    for i in 0..m {
        let arow = a.row_slice(i);
        let crow = &mut out[i * n..(i + 1) * n];
        for (t, &ait) in arow.iter().enumerate() {
            if ait == 0.0 {
                continue;
            }
            let brow = &bv[t * n..(t + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += ait * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a [m×k] · bᵀ` for `b [n×k]`: every output entry is a dot of two rows.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    check_matrix("matmul_nt", a)?;
    check_matrix("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · g` for `a [m×k]`, `g [m×n]` → `[k×n]`; used by matmul backward.
pub(crate) fn matmul_tn(a: &Tensor, g: &Tensor) -> NumResult<Tensor> {
    check_matrix("matmul_tn", a)?;
    check_matrix("matmul_tn", g)?;
    let (m, k) = (a.rows(), a.cols());
    let (mg, n) = (g.rows(), g.cols());
    if m != mg {
        return Err(shape_err("matmul_tn", a, g));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let grow = g.row_slice(i);
        for (t, &ait) in arow.iter().enumerate() {
            if ait == 0.0 {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += ait * gv;
            }
        }
    }
    Tensor::matrix(k, n, out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_matrix(op: &'static str, t: &Tensor) -> NumResult<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(NumError::contract(
            op,
            format!("expected matrix, got shape {:?}", t.shape()),
        ))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

// ---- public forward ops ---------------------------------------------------

/// `x [n×a] · w [a×b] + bias [b]` broadcast over rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> NumResult<Tensor> {
    if bias.shape() != [w.cols()] {
        return Err(NumError::ShapeMismatch {
            op: "linear_forward",
            left: w.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = matmul(x, w)?;
    let cols = out.cols();
    for row in 0..out.rows() {
        let slot = &mut out.values_mut()[row * cols..(row + 1) * cols];
        for (o, b) in slot.iter_mut().zip(bias.values()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Chains `linear_forward` + activation over `layers`. An empty layer list is
/// a contract error: the caller always means at least one transform.
pub fn mlp_forward(x: &Tensor, layers: &[MlpLayer]) -> NumResult<Tensor> {
    if layers.is_empty() {
        return Err(NumError::contract("mlp_forward", "empty layer list"));
    }
    let mut cur = x.clone();
    for layer in layers {
        let mut z = linear_forward(&cur, &layer.weight, &layer.bias)?;
        for v in z.values_mut() {
            *v = layer.activation.apply(*v);
        }
        cur = z;
    }
    Ok(cur)
}

/// Cosine similarity with an epsilon floor on each norm; the result is
/// clamped to `[-1, 1]` to absorb rounding at parallel vectors.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> NumResult<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(NumError::ShapeMismatch {
            op: "cosine_sim",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = norm(a).max(eps);
    let nb = norm(b).max(eps);
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Temperature softmax with max-subtraction; output is renormalized so it
/// sums to 1 up to rounding.
pub fn softmax(x: &[f64], temperature: f64) -> NumResult<Vec<f64>> {
    if x.is_empty() {
        return Err(NumError::contract("softmax", "empty input"));
    }
    check_temperature("softmax", temperature)?;
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// `log Σ exp(x_i)` with max-subtraction.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// `−log( exp(pos/τ) / (exp(pos/τ) + Σ exp(neg/τ)) )`.
///
/// With no negatives the ratio is exactly 1, so the loss is exactly 0.
pub fn info_nce(pos: f64, negs: &[f64], temperature: f64) -> NumResult<f64> {
    check_temperature("info_nce", temperature)?;
    if negs.is_empty() {
        return Ok(0.0);
    }
    let mut logits = Vec::with_capacity(negs.len() + 1);
    logits.push(pos / temperature);
    logits.extend(negs.iter().map(|&v| v / temperature));
    Ok(logsumexp(&logits) - pos / temperature)
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> NumResult<f64> {
    if target >= logits.len() {
        return Err(NumError::IndexOutOfRange {
            op: "cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    Ok(logsumexp(logits) - logits[target])
}

pub(crate) fn check_temperature(op: &'static str, t: f64) -> NumResult<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(NumError::contract(op, format!("temperature {t} must be finite and > 0")))
    }
}
