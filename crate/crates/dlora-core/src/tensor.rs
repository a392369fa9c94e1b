//! Dense row-major tensors and the handful of kernels the backbone needs:
//! matmul (plus the two transposed products backward passes want), row
//! softmax, RMS normalization and token cross-entropy, each with a
//! hand-written backward.
//!
//! Determinism contract: every reduction accumulates in ascending index
//! order — `matmul` sums over `p = 0, 1, …` for each output element, row
//! reductions scan left to right. Two calls with the same inputs produce
//! bit-identical outputs, which is what lets the split runtime be compared
//! bit-for-bit against the single-process reference.

use crate::scalar::Scalar;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Operation requires a matrix (or a specific rank) and got something else.
    BadRank {
        op: &'static str,
        dims: Vec<usize>,
    },
    DataLength {
        dims: Vec<usize>,
        len: usize,
    },
    EmptyDims,
    NonFinite {
        op: &'static str,
    },
    TargetOutOfRange {
        target: usize,
        classes: usize,
    },
    Msg(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::BadRank { op, dims } => {
                write!(f, "{op}: unsupported tensor rank for shape {dims:?}")
            }
            TensorError::DataLength { dims, len } => {
                write!(f, "shape {dims:?} does not match buffer of {len} elements")
            }
            TensorError::EmptyDims => write!(f, "tensor must have at least one dimension"),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            TensorError::TargetOutOfRange { target, classes } => {
                write!(
                    f,
                    "target index {target} out of range for {classes} classes"
                )
            }
            TensorError::Msg(m) => f.write_str(m),
        }
    }
}

impl core::error::Error for TensorError {}

impl TensorError {
    pub fn msg(m: impl Into<String>) -> Self {
        TensorError::Msg(m.into())
    }
}

/// Row-major dense tensor. `dims` is non-empty and every extent is ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Validating constructor: checks the element count and that every value
    /// is finite.
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::EmptyDims);
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                dims,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { dims, data })
    }

    /// Trusted constructor for internally produced buffers.
    pub fn from_vec(dims: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        debug_assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0));
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), vec![S::ZERO; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows of a matrix (rank-2 view: product of leading dims × last dim).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Reinterprets the tensor with a new shape of equal element count.
    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != self.data.len() {
            return Err(TensorError::DataLength {
                dims,
                len: self.data.len(),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor::from_vec(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_vec(self.dims.clone(), data))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.dims.len() < 2 {
            return Err(TensorError::BadRank {
                op,
                dims: self.dims.clone(),
            });
        }
        Ok((self.rows(), self.cols()))
    }
}

/// C = A·B for A: [m×k], B: [k×n].
///
/// Leading axes of `a` are flattened into rows, so a [b, t, k] activation
/// against a [k, n] weight yields [b·t, n] (re-shape afterwards if needed).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (m, k) = a.as_matrix("matmul")?;
    let (kb, n) = b.as_matrix("matmul")?;
    if k != kb || b.dims().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = &mut out[i * n..(i + 1) * n];
        // p ascends, so each c[i][j] accumulates contributions in index order.
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    Ok(Tensor::from_vec(vec![m, n], out))
}

/// C = A·Bᵀ for A: [m×k], B: [n×k]. This is the `dA = dC·Bᵀ` shape of the
/// matmul backward contract.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (m, k) = a.as_matrix("matmul_nt")?;
    let (n, kb) = b.as_matrix("matmul_nt")?;
    if k != kb || b.dims().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = &mut out[i * n..(i + 1) * n];
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *c = acc;
        }
    }
    Ok(Tensor::from_vec(vec![m, n], out))
}

/// C = Aᵀ·B for A: [k×m], B: [k×n]. This is the `dB = Aᵀ·dC` shape of the
/// matmul backward contract.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (k, m) = a.as_matrix("matmul_tn")?;
    let (kb, n) = b.as_matrix("matmul_tn")?;
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![S::ZERO; m * n];
    // p (the contraction index) is the outer loop, so each output element
    // still accumulates in ascending p order.
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    Ok(Tensor::from_vec(vec![m, n], out))
}

fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = x.cols();
    let mut out = vec![S::ZERO; x.numel()];
    for i in 0..x.rows() {
        softmax_into(x.row(i), &mut out[i * n..(i + 1) * n]);
    }
    Tensor::from_vec(x.dims().to_vec(), out)
}

/// Backward of `softmax_rows`: dX[i] = Y[i] ⊙ (dY[i] − ⟨dY[i], Y[i]⟩).
pub fn softmax_rows_backward<S: Scalar>(
    y: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if y.dims() != dy.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_rows_backward",
            lhs: y.dims.clone(),
            rhs: dy.dims.clone(),
        });
    }
    let n = y.cols();
    let mut out = vec![S::ZERO; y.numel()];
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let mut dot = S::ZERO;
        for (&yv, &dv) in yr.iter().zip(dyr) {
            dot += yv * dv;
        }
        for ((o, &yv), &dv) in out[i * n..(i + 1) * n].iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    Ok(Tensor::from_vec(y.dims().to_vec(), out))
}

/// y = gain ⊙ x / sqrt(mean(x²) + eps), applied per row. Returns the output
/// and the per-row 1/rms values the backward pass reuses.
pub fn rmsnorm_rows<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, Vec<S>), TensorError> {
    let d = x.cols();
    if gain.dims() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm_rows",
            lhs: x.dims.clone(),
            rhs: gain.dims.clone(),
        });
    }
    let inv_d = S::ONE / S::from_f64(d as f64);
    let mut out = vec![S::ZERO; x.numel()];
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let mut ss = S::ZERO;
        for &v in xr {
            ss += v * v;
        }
        let r = S::ONE / (ss * inv_d + eps).sqrt();
        inv_rms.push(r);
        for ((o, &xv), &g) in out[i * d..(i + 1) * d].iter_mut().zip(xr).zip(gain.data()) {
            *o = g * xv * r;
        }
    }
    Ok((Tensor::from_vec(x.dims().to_vec(), out), inv_rms))
}

/// Backward of `rmsnorm_rows`. Returns dX and accumulates the gain gradient
/// into `dgain` when provided (pretraining needs it, fine-tuning does not).
pub fn rmsnorm_rows_backward<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    inv_rms: &[S],
    dy: &Tensor<S>,
    mut dgain: Option<&mut Tensor<S>>,
) -> Result<Tensor<S>, TensorError> {
    if x.dims() != dy.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm_rows_backward",
            lhs: x.dims.clone(),
            rhs: dy.dims.clone(),
        });
    }
    let d = x.cols();
    let inv_d = S::ONE / S::from_f64(d as f64);
    let mut out = vec![S::ZERO; x.numel()];
    for i in 0..x.rows() {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let r = inv_rms[i];
        // u = ⟨gain ⊙ dy, x⟩ for this row.
        let mut u = S::ZERO;
        for ((&g, &dv), &xv) in gain.data().iter().zip(dyr).zip(xr) {
            u += g * dv * xv;
        }
        let r3 = r * r * r;
        for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = r * gain.data()[j] * dyr[j] - r3 * inv_d * u * xr[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for (j, g) in dg.data_mut().iter_mut().enumerate() {
                *g += dyr[j] * xr[j] * r;
            }
        }
    }
    Ok(Tensor::from_vec(x.dims().to_vec(), out))
}

/// Mean negative log-likelihood over rows plus the logits gradient:
/// dlogits = (softmax(logits) − one-hot(target)) / rows.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
) -> Result<(S, Tensor<S>), TensorError> {
    let (rows, classes) = logits.as_matrix("cross_entropy")?;
    if targets.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.dims.clone(),
            rhs: vec![targets.len()],
        });
    }
    let inv_rows = S::ONE / S::from_f64(rows as f64);
    let mut dlogits = vec![S::ZERO; logits.numel()];
    let mut loss = S::ZERO;
    for i in 0..rows {
        let t = targets[i];
        if t >= classes {
            return Err(TensorError::TargetOutOfRange { target: t, classes });
        }
        let row = logits.row(i);
        let drow = &mut dlogits[i * classes..(i + 1) * classes];
        softmax_into(row, drow);
        // -log p[target], recomputed from the stabilized probabilities.
        loss += -(drow[t].ln());
        for p in drow.iter_mut() {
            *p *= inv_rows;
        }
        drow[t] -= inv_rows;
    }
    loss *= inv_rows;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok((loss, Tensor::from_vec(logits.dims().to_vec(), dlogits)))
}
