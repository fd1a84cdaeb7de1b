//! Dense row-major tensors and the matrix product kernel.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{dim_err, Result};

/// Element type of a [`Tensor`]: `f64` for training, `f32` for inference.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

/// Dense tensor with a row-major payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!("shape {shape:?} needs {numel} elements, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return dim_err("no rows");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Copies rows `idx` into a new `idx.len() × cols` matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return dim_err(format!("row {i} out of {}", self.rows()));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, data)
    }
}

/// Matrix view with arbitrary strides; `t()` gives a free transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub(crate) fn of(t: &'a Tensor<T>) -> Self {
        let cols = t.cols();
        Self {
            data: t.data(),
            rows: t.rows(),
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// View over `data` with non-negative strides.
    pub(crate) fn strided(data: &'a [T], rows: usize, cols: usize, rs: isize, cs: isize) -> Self {
        assert!(rs >= 0 && cs >= 0, "negative stride");
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
            assert!(last < data.len(), "strided view out of bounds");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), `out` being row-major
/// `a.rows × b.cols`.
pub(crate) fn gemm_into<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) -> Result<()> {
    if a.cols != b.rows {
        return dim_err(format!(
            "inner dimensions {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    if out.len() != a.rows * b.cols {
        return dim_err("output buffer size");
    }
    if a.rows <= SMALL_ROWS {
        small_gemm(a, b, out, accumulate);
        return Ok(());
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: both views describe in-bounds matrices of their backing slices
    // (checked at construction), `out` is a distinct mutable slice of the
    // right size, and the kernel reads/writes only within those bounds.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
        );
    }
    Ok(())
}

/// Up to this many rows a direct loop beats the packing kernel.
const SMALL_ROWS: usize = 2;

/// Row-by-row `out (+)= a·b`.
fn small_gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (ars, acs, brs, bcs) = (a.rs as usize, a.cs as usize, b.rs as usize, b.cs as usize);
    if !accumulate {
        out.fill(T::zero());
    }
    if b.cols == 0 {
        return;
    }
    for (i, orow) in out.chunks_mut(b.cols).enumerate() {
        for kk in 0..a.cols {
            let aik = a.data[i * ars + kk * acs];
            let base = kk * brs;
            if bcs == 1 {
                for (o, &bv) in orow.iter_mut().zip(&b.data[base..base + b.cols]) {
                    *o = *o + aik * bv;
                }
            } else {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = *o + aik * b.data[base + j * bcs];
                }
            }
        }
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); a.rows() * b.cols()];
    gemm_into(MatRef::of(a), MatRef::of(b), &mut out, false)?;
    Tensor::matrix(a.rows(), b.cols(), out)
}
