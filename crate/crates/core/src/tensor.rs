//! Dense tensor containers and the numerical kernels everything else
//! builds on: 2-D convolution, 1-/2-mode tensor-matrix products, norms
//! and a dense Cholesky solver for symmetric positive definite systems.
//!
//! All kernels are plain nested loops over `f64` data with a fixed
//! accumulation order, so identical inputs produce bit-identical
//! outputs on every run. Sizes stay small enough (a few thousand
//! unknowns at most) that nothing fancier is warranted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Channel-major 3-D tensor: shape `(c, w, h)`, data row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    c: usize,
    w: usize,
    h: usize,
    data: Vec<f64>,
}

/// Filter-bank tensor: shape `(m, n, k1, k2)`, data row-major.
/// `m` filters over `n` input channels with `k1 x k2` kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    m: usize,
    n: usize,
    k1: usize,
    k2: usize,
    data: Vec<f64>,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

fn check_finite(data: &[f64], context: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

impl Tensor3 {
    pub fn new(c: usize, w: usize, h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * w * h {
            return Err(Error::ShapeMismatch {
                context: "Tensor3::new",
                detail: format!("expected {} values, got {}", c * w * h, data.len()),
            });
        }
        check_finite(&data, "Tensor3::new")?;
        Ok(Self { c, w, h, data })
    }

    pub fn zeros(c: usize, w: usize, h: usize) -> Self {
        Self {
            c,
            w,
            h,
            data: vec![0.0; c * w * h],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.w, self.h)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.w + x) * self.h + y]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.w + x) * self.h + y] = v;
    }

    /// One channel as a contiguous slice of `w * h` values.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.w * self.h;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// New tensor keeping only the listed channels, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Result<Self> {
        let plane = self.w * self.h;
        let mut data = Vec::with_capacity(keep.len() * plane);
        for &c in keep {
            if c >= self.c {
                return Err(Error::ShapeMismatch {
                    context: "Tensor3::select_channels",
                    detail: format!("channel {} out of {}", c, self.c),
                });
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(Self {
            c: keep.len(),
            w: self.w,
            h: self.h,
            data,
        })
    }
}

impl Tensor4 {
    pub fn new(m: usize, n: usize, k1: usize, k2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n * k1 * k2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor4::new",
                detail: format!("expected {} values, got {}", m * n * k1 * k2, data.len()),
            });
        }
        check_finite(&data, "Tensor4::new")?;
        Ok(Self { m, n, k1, k2, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.m, self.n, self.k1, self.k2)
    }

    pub fn filters(&self) -> usize {
        self.m
    }

    pub fn in_channels(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, f: usize, c: usize, x: usize, y: usize) -> f64 {
        self.data[((f * self.n + c) * self.k1 + x) * self.k2 + y]
    }

    /// One filter as a contiguous slice of `n * k1 * k2` values.
    pub fn filter(&self, f: usize) -> &[f64] {
        let len = self.n * self.k1 * self.k2;
        &self.data[f * len..(f + 1) * len]
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::new",
                detail: format!("expected {} values, got {}", rows * cols, data.len()),
            });
        }
        check_finite(&data, "Matrix::new")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// One row as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    /// `self * v` for a matching vector.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::matvec",
                detail: format!("{}x{} matrix, vector of {}", self.rows, self.cols, v.len()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += self.at(r, c) * v.data[c];
            }
            out[r] = acc;
        }
        Ok(Vector::from(out))
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "Vector::new")?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// Norm order for [`tensor_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// Entrywise norm of any tensor's backing data: `L1 = sum |x|`,
/// `L2 = sqrt(sum x^2)`.
pub fn tensor_norm(data: &[f64], order: Norm) -> f64 {
    match order {
        Norm::L1 => data.iter().fold(0.0, |acc, &v| acc + math::abs(v)),
        Norm::L2 => math::sqrt(data.iter().fold(0.0, |acc, &v| acc + v * v)),
    }
}

/// 2-D cross-correlation of `input` with a bank of filters, zero padding.
///
/// Output spatial extent is `(w + 2*padding - k) / stride + 1` per axis;
/// the division must be exact and the result at least 1.
pub fn conv2d(input: &Tensor3, filters: &Tensor4, stride: usize, padding: usize) -> Result<Tensor3> {
    let (c_in, w, h) = input.shape();
    let (m, n, k1, k2) = filters.shape();
    if n != c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            detail: format!("input has {c_in} channels, filters expect {n}"),
        });
    }
    if k1 != k2 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            detail: format!("kernels must be square, got {k1}x{k2}"),
        });
    }
    if stride == 0 {
        return Err(Error::Geometry {
            detail: "stride must be positive".into(),
        });
    }
    let out_dim = |extent: usize| -> Result<usize> {
        let padded = extent + 2 * padding;
        if padded < k1 {
            return Err(Error::Geometry {
                detail: format!("kernel {k1} exceeds padded extent {padded}"),
            });
        }
        let span = padded - k1;
        if span % stride != 0 {
            return Err(Error::Geometry {
                detail: format!("stride {stride} does not divide extent {span}"),
            });
        }
        Ok(span / stride + 1)
    };
    let out_w = out_dim(w)?;
    let out_h = out_dim(h)?;

    let mut out = Tensor3::zeros(m, out_w, out_h);
    for oc in 0..m {
        for ox in 0..out_w {
            for oy in 0..out_h {
                let mut acc = 0.0;
                for ic in 0..n {
                    for kx in 0..k1 {
                        let ix = ox * stride + kx;
                        if ix < padding || ix - padding >= w {
                            continue;
                        }
                        for ky in 0..k2 {
                            let iy = oy * stride + ky;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            acc += input.at(ic, ix - padding, iy - padding)
                                * filters.at(oc, ic, kx, ky);
                        }
                    }
                }
                out.set(oc, ox, oy, acc);
            }
        }
    }
    Ok(out)
}

/// 1-mode product: contracts the filter axis with `st`.
///
/// `out[a, :, :, :] = sum_i st[a, i] * filters[i, :, :, :]`, so a
/// `t x m` selector reduces an `m`-filter bank to `t` filters.
pub fn mode1_product(filters: &Tensor4, st: &Matrix) -> Result<Tensor4> {
    let (m, n, k1, k2) = filters.shape();
    if st.cols() != m {
        return Err(Error::ShapeMismatch {
            context: "mode1_product",
            detail: format!("selector has {} columns, filter axis is {}", st.cols(), m),
        });
    }
    let t = st.rows();
    let flen = n * k1 * k2;
    let mut data = vec![0.0; t * flen];
    for a in 0..t {
        let out_block = &mut data[a * flen..(a + 1) * flen];
        for i in 0..m {
            let w = st.at(a, i);
            let src = filters.filter(i);
            for (o, s) in out_block.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    Tensor4::new(t, n, k1, k2, data)
}

/// 2-mode product: contracts the input-channel axis with `st`.
///
/// `out[:, a, :, :] = sum_i st[a, i] * filters[:, i, :, :]`.
pub fn mode2_product(filters: &Tensor4, st: &Matrix) -> Result<Tensor4> {
    let (m, n, k1, k2) = filters.shape();
    if st.cols() != n {
        return Err(Error::ShapeMismatch {
            context: "mode2_product",
            detail: format!("selector has {} columns, channel axis is {}", st.cols(), n),
        });
    }
    let t = st.rows();
    let klen = k1 * k2;
    let mut data = vec![0.0; m * t * klen];
    for f in 0..m {
        for a in 0..t {
            let base = (f * t + a) * klen;
            for i in 0..n {
                let w = st.at(a, i);
                let src_base = (f * n + i) * klen;
                for p in 0..klen {
                    data[base + p] += w * filters.data[src_base + p];
                }
            }
        }
    }
    Tensor4::new(m, t, k1, k2, data)
}

const SYMMETRY_TOL: f64 = 1e-12;

/// Solves `a * x = b` for symmetric positive definite `a` by dense
/// Cholesky factorization, with one step of iterative refinement.
pub fn spd_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.rows();
    if a.cols() != n || b.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            context: "spd_solve",
            detail: format!("{}x{} system, rhs of {}", a.rows(), a.cols(), b.len()),
        });
    }
    let scale = a.data.iter().fold(0.0_f64, |acc, &v| acc.max(math::abs(v)));
    for r in 0..n {
        for c in (r + 1)..n {
            if math::abs(a.at(r, c) - a.at(c, r)) > SYMMETRY_TOL * scale {
                return Err(Error::AsymmetricInput { row: r, col: c });
            }
        }
    }

    let factor = cholesky(a)?;
    let mut x = chol_solve(&factor, b.data());

    // One refinement pass keeps the residual within the promised bound on
    // mildly ill-conditioned systems.
    let r = residual(a, &x, b.data());
    let rnorm = tensor_norm(&r, Norm::L2);
    if rnorm > 1e-9 * (1.0 + tensor_norm(b.data(), Norm::L2)) {
        let d = chol_solve(&factor, &r);
        for i in 0..n {
            x[i] += d[i];
        }
    }
    Ok(Vector::from(x))
}

fn residual(a: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut r = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a.at(i, j) * x[j];
        }
        r[i] = b[i] - acc;
    }
    r
}

/// Lower-triangular Cholesky factor, stored dense.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.at(j, j);
        for k in 0..j {
            let v = l.at(j, k);
            diag -= v * v;
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = math::sqrt(diag);
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, acc / d);
        }
    }
    Ok(l)
}

fn chol_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.at(i, k) * y[k];
        }
        y[i] = acc / l.at(i, i);
    }
    // backward: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in (i + 1)..n {
            acc -= l.at(k, i) * x[k];
        }
        x[i] = acc / l.at(i, i);
    }
    x
}
