//! Thin safe wrappers around `matrixmultiply::dgemm` plus a few row-wise kernels
//! shared between the eager tensor API and the tape.

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` block.
    pub fn transposed(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn strided(data: &'a [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// `c = beta * c + a · b` where `a` is `[m, k]`, `b` is `[k, n]` and `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    c_col_stride: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(c_offset, m, n, c_row_stride, c_col_stride) < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_offset + i * c_row_stride + j * c_col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.row_stride, a.col_stride) < a.data.len());
    assert!(last_index(b.offset, k, n, b.row_stride, b.col_stride) < b.data.len());
    // SAFETY: every addressed element was bounds-checked above, and `c` is
    // borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            c_col_stride as isize,
        );
    }
}

/// In-place numerically stable softmax of one row. Entries with `allowed[j] == false`
/// receive probability zero. A row with nothing allowed becomes all zeros.
pub(crate) fn softmax_row(row: &mut [f64], allowed: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed.is_none_or(|a| a[j]) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed.is_none_or(|a| a[j]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `log(sum(exp(row)))` computed with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
