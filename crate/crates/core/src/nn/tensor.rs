use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar type the substrate computes in: `f32` for training and
/// inference, `f64` for gradient checking.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self;

    /// `c = alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions
    /// and strides; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    fn lit(x: f64) -> Self {
        x
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                left: shape,
                right: vec![data.len()],
                context: "tensor data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                left: self.shape,
                right: shape,
                context: "reshape",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() > 2 || other.shape.len() != 2 || self.cols() != other.shape[0] {
            return Err(Error::Shape {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context: "matmul",
            });
        }
        let (m, n) = (self.rows(), other.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), View::of(self), View::of(other), T::zero(), &mut out.data, n);
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let mut out = self.clone();
        out.scale_assign(s);
        out
    }

    /// Concatenates along the last axis; all inputs need the same row count.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
            return Err(Error::Shape {
                left: parts[0].shape.clone(),
                right: bad.shape.clone(),
                context: "concat",
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub(crate) fn same_shape(&self, other: &Tensor<T>, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context,
            });
        }
        Ok(())
    }
}

/// Read-only strided matrix view used to feed `gemm`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Float> View<'a, T> {
    pub fn of(t: &'a Tensor<T>) -> Self {
        View::dense(&t.data, t.rows(), t.cols())
    }

    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `[start, start + len)` of a dense `rows x stride` matrix.
    pub fn col_block(data: &'a [T], rows: usize, stride: usize, start: usize, len: usize) -> Self {
        View {
            data,
            off: start,
            rows,
            cols: len,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds buffer");
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is dense with row stride `ldc`.
pub(crate) fn gemm<T: Float>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    gemm_strided(alpha, a, b, beta, c, 0, ldc);
}

/// As [`gemm`], writing into the column block of `c` starting at `c_off`.
pub(crate) fn gemm_strided<T: Float>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_off: usize,
    ldc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check();
    b.check();
    assert!(c_off + (m - 1) * ldc + n - 1 < c.len(), "gemm output exceeds buffer");
    // SAFETY: extents were bounds-checked above; `c` is uniquely borrowed
    // and therefore cannot alias the shared inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let x = Tensor::<f32>::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_shapes() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn add_scale_concat() {
        let a = Tensor::<f32>::new(vec![2, 1], vec![1., 2.]).unwrap();
        let b = Tensor::<f32>::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap();
        assert!(a.add(&b).is_err());
        assert_eq!(a.add(&a).unwrap().data(), &[2., 4.]);
        assert_eq!(a.scale(0.5).data(), &[0.5, 1.0]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
    }

    #[test]
    fn strided_column_block_gemm() {
        // Multiply the second column block of a 2x4 matrix by a 2x2 identity.
        let data = [1., 2., 3., 4., 5., 6., 7., 8.];
        let eye = [1., 0., 0., 1.];
        let mut out = vec![0.0f64; 4];
        gemm(
            1.0,
            View::col_block(&data, 2, 4, 2, 2),
            View::dense(&eye, 2, 2),
            0.0,
            &mut out,
            2,
        );
        assert_eq!(out, vec![3., 4., 7., 8.]);
        let mut out_t = vec![0.0f64; 4];
        gemm(1.0, View::col_block(&data, 2, 4, 2, 2).t(), View::dense(&eye, 2, 2), 0.0, &mut out_t, 2);
        assert_eq!(out_t, vec![3., 7., 4., 8.]);
    }
}
