//! Dense row-major matrices and the GEMM kernel everything else is built on.

use serde::{Deserialize, Serialize};

/// A row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strided view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self { row_stride: cols as isize, col_stride: 1 }
    }

    pub const fn transposed(cols: usize) -> Self {
        Self { row_stride: 1, col_stride: cols as isize }
    }
}

/// `c = alpha * a · b + beta * c` where `a` is `m × k`, `b` is `k × n` and `c` is `m × n`.
///
/// Strides are in elements and may describe overlapping rows (used by the
/// convolution kernels to avoid an im2col copy).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(extent(m, k, la) <= a.len());
    debug_assert!(extent(k, n, lb) <= b.len());
    debug_assert!(extent(m, n, lc) <= c.len());
    // SAFETY: the extents of all three views were checked against the slice
    // lengths above (in debug builds) and callers construct layouts from the
    // matrix shapes they own.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            lc.row_stride,
            lc.col_stride,
        );
    }
}

fn extent(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.row_stride as usize + (cols - 1) * l.col_stride as usize + 1
}

/// Plain matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        Layout::row_major(a.cols),
        &b.data,
        Layout::row_major(b.cols),
        0.0,
        &mut out.data,
        Layout::row_major(b.cols),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.5 - 2.0).collect());
        let b = Matrix::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect());
        let fast = matmul(&a, &b);
        let slow = naive(&a, &b);
        for (x, y) in fast.data.iter().zip(&slow.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_layout_reads_columns() {
        // aᵀ · b with a stored as 2×3
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Matrix::from_vec(2, 1, vec![1., 1.]);
        let mut c = vec![0.0; 3];
        gemm(3, 2, 1, 1.0, &a.data, Layout::transposed(3), &b.data, Layout::row_major(1), 0.0, &mut c, Layout::row_major(1));
        assert_eq!(c, vec![5., 7., 9.]);
    }
}
