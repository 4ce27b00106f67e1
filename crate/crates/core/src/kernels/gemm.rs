//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// A strided view used as a GEMM operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major using `out_row_stride`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64], out_row_stride: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension mismatch");
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() > a.max_offset() || k == 0);
    assert!(b.data.len() > b.max_offset() || k == 0);
    assert!(out.len() > (m - 1) * out_row_stride + (n - 1));
    if k == 0 {
        for i in 0..m {
            for v in &mut out[i * out_row_stride..i * out_row_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the max offsets asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            out_row_stride as isize,
            1,
        );
    }
}
