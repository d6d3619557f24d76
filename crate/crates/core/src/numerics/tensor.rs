//! Dense row-major tensors and the raw (non-differentiable) kernels.
//!
//! Everything here is single-threaded and allocation-explicit so that a
//! fixed seed reproduces bitwise-identical results on one machine.

use thiserror::Error;

use super::scalar::{normal_cdf, Scalar};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor, validating both the element count and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values produced by checked kernels.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Scalar payload of a 0-d or 1-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows/cols view of a 2-d tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "dims2 on shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Flatten all leading axes, keeping the last one: (rows, width).
    pub fn rows_view(&self) -> (usize, usize) {
        let width = *self.shape.last().unwrap_or(&1);
        (self.data.len() / width.max(1), width)
    }

    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }

    /// Standard matrix product for 2-d tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self::from_vec_unchecked(vec![m, n], out))
    }

    pub fn transpose2d(&self) -> Self {
        let (m, n) = self.dims2();
        let mut out = vec![S::zero(); m * n];
        transpose(m, n, &self.data, &mut out);
        Self::from_vec_unchecked(vec![n, m], out)
    }

    /// Elementwise exact GELU, x * Phi(x).
    pub fn gelu(&self) -> Self {
        self.map(|x| x * normal_cdf(x))
    }

    /// Numerically stable softmax along `axis`; lanes sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Self, NumericsError> {
        if axis >= self.shape.len() {
            return Err(NumericsError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); self.data.len()];
        softmax_lanes(&self.shape, axis, &self.data, &mut out);
        Ok(Self::from_vec_unchecked(self.shape.clone(), out))
    }
}

/// Trainable (or frozen) tensor with an accumulated gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

// ── gemm kernels ─────────────────────────────────────────────────────
//
// Register-blocked 4x16 microkernel; the 16-wide accumulator rows map onto
// two AVX-512 f64 vectors when built with target-cpu=native. All variants
// accumulate into `c`, so callers pass a zeroed buffer for a plain product.

const MR: usize = 4;
const NR: usize = 16;

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[S::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[S] = &b[p * n + j..p * n + j + NR];
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        acc[r][q] = av.mul_add(brow[q], acc[r][q]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    crow[q] += accr[q];
                }
            }
            j += NR;
        }
        if j < n {
            gemm_nn_scalar(i, i + MR, j, m, k, n, a, b, c);
        }
        i += MR;
    }
    if i < m {
        gemm_nn_scalar(i, m, 0, m, k, n, a, b, c);
    }
}

/// Scalar fallback covering row range [i0, i1) and column range [j0, n).
fn gemm_nn_scalar<S: Scalar>(
    i0: usize,
    i1: usize,
    j0: usize,
    _m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    c: &mut [S],
) {
    for i in i0..i1 {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + j0..(p + 1) * n];
            let crow = &mut c[i * n + j0..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(*bv, *cv);
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (i.e. C[i,j] = dot(A row i, B row j))
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // Transposing B costs O(nk) against the O(mnk) product and keeps the
    // inner loops on the fast nn path.
    let mut bt = vec![S::zero(); n * k];
    transpose(n, k, b, &mut bt);
    gemm_nn(m, k, n, a, &bt, c);
}

/// C[m,n] += A[r,m]^T * B[r,n]  (rank-r update streamed over rows of A and B)
pub fn gemm_tn<S: Scalar>(rows: usize, m: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    debug_assert_eq!(c.len(), m * n);
    const RB: usize = 4;
    let mut r = 0;
    while r + RB <= rows {
        let a0 = &a[r * m..(r + 1) * m];
        let a1 = &a[(r + 1) * m..(r + 2) * m];
        let a2 = &a[(r + 2) * m..(r + 3) * m];
        let a3 = &a[(r + 3) * m..(r + 4) * m];
        let b0 = &b[r * n..(r + 1) * n];
        let b1 = &b[(r + 1) * n..(r + 2) * n];
        let b2 = &b[(r + 2) * n..(r + 3) * n];
        let b3 = &b[(r + 3) * n..(r + 4) * n];
        for i in 0..m {
            let (v0, v1, v2, v3) = (a0[i], a1[i], a2[i], a3[i]);
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                let s = v0.mul_add(b0[j], v1.mul_add(b1[j], v2.mul_add(b2[j], v3 * b3[j])));
                crow[j] += s;
            }
        }
        r += RB;
    }
    while r < rows {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
        r += 1;
    }
}

pub fn transpose<S: Scalar>(m: usize, n: usize, a: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

// ── shared elementwise / lane kernels ────────────────────────────────

/// y = x * Phi(x); optionally records Phi(x) for the backward pass.
pub(crate) fn gelu_forward<S: Scalar>(x: &[S], y: &mut [S], phi_out: Option<&mut [S]>) {
    match phi_out {
        Some(phi) => {
            for ((xv, yv), pv) in x.iter().zip(y.iter_mut()).zip(phi.iter_mut()) {
                let p = normal_cdf(*xv);
                *pv = p;
                *yv = *xv * p;
            }
        }
        None => {
            for (xv, yv) in x.iter().zip(y.iter_mut()) {
                *yv = *xv * normal_cdf(*xv);
            }
        }
    }
}

/// Max-subtracted softmax over the lanes selected by `axis`.
pub(crate) fn softmax_lanes<S: Scalar>(shape: &[usize], axis: usize, x: &[S], out: &mut [S]) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if len == 0 {
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = x[base];
            for l in 1..len {
                let v = x[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for l in 0..len {
                out[base + l * inner] *= inv;
            }
        }
    }
}

/// Per-row mean/variance normalization with affine gain/bias.
///
/// Optionally stores the normalized rows and 1/std, which the backward
/// pass reuses.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_rows<S: Scalar>(
    rows: usize,
    width: usize,
    x: &[S],
    gain: &[S],
    bias: &[S],
    eps: S,
    y: &mut [S],
    mut xhat_out: Option<&mut [S]>,
    mut inv_std_out: Option<&mut [S]>,
) {
    let inv_w = S::one() / S::from_usize(width).unwrap();
    for r in 0..rows {
        let xrow = &x[r * width..(r + 1) * width];
        let mut mean = S::zero();
        for &v in xrow {
            mean += v;
        }
        mean *= inv_w;
        let mut var = S::zero();
        for &v in xrow {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_w;
        let inv_std = S::one() / (var + eps).sqrt();
        if let Some(buf) = inv_std_out.as_deref_mut() {
            buf[r] = inv_std;
        }
        let yrow = &mut y[r * width..(r + 1) * width];
        match xhat_out.as_deref_mut() {
            Some(xh) => {
                let xhrow = &mut xh[r * width..(r + 1) * width];
                for j in 0..width {
                    let norm = (xrow[j] - mean) * inv_std;
                    xhrow[j] = norm;
                    yrow[j] = norm * gain[j] + bias[j];
                }
            }
            None => {
                for j in 0..width {
                    yrow[j] = (xrow[j] - mean) * inv_std * gain[j] + bias[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn arb(m: usize, n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random fill, plenty for kernel checks.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..m * n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_nn_matches_naive_including_tails() {
        for &(m, k, n) in &[(4, 4, 16), (7, 5, 19), (33, 32, 33), (12, 128, 128), (5, 3, 2)] {
            let a = arb(m, k, 1);
            let b = arb(k, n, 2);
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            let expect = naive_matmul(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "nn mismatch at {m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn gemm_nt_and_tn_match_naive() {
        let (m, k, n) = (9, 17, 21);
        let a = arb(m, k, 3);
        let b = arb(n, k, 4);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &b, &mut c);
        let mut bt = vec![0.0; k * n];
        transpose(n, k, &b, &mut bt);
        let expect = naive_matmul(m, k, n, &a, &bt);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "nt mismatch");
        }

        let rows = 23;
        let a = arb(rows, m, 5);
        let b = arb(rows, n, 6);
        let mut c = vec![0.0; m * n];
        gemm_tn(rows, m, n, &a, &b, &mut c);
        let mut at = vec![0.0; m * rows];
        transpose(rows, m, &a, &mut at);
        let expect = naive_matmul(m, rows, n, &at, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12, "tn mismatch");
        }
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let a = Tensor::from_vec(&[3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let mut id = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            id.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(id.matmul(&a).unwrap().data(), a.data());
        let z = Tensor::zeros(&[3, 2]);
        let az = a.matmul(&z).unwrap();
        assert!(az.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
    }

    #[test]
    fn matmul_associativity_tolerance() {
        let a = Tensor::from_vec(&[8, 8], arb(8, 8, 7)).unwrap();
        let b = Tensor::from_vec(&[8, 8], arb(8, 8, 8)).unwrap();
        let c = Tensor::from_vec(&[8, 8], arb(8, 8, 9)).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_len() {
        let err = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { index: 1 }));
        let err = Tensor::from_vec(&[3], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, NumericsError::LengthMismatch { .. }));
    }

    #[test]
    fn softmax_axis_lanes() {
        // 2x3 tensor, softmax over axis 0 mixes columns.
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for j in 0..3 {
            assert!((s.data()[j] - 0.5).abs() < 1e-12);
            assert!((s.data()[3 + j] - 0.5).abs() < 1e-12);
        }
        assert!(t.softmax(2).is_err());
    }
}
