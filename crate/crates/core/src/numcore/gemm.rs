//! Strided `C (+)= A·B` kernel.

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` m×k and `b` k×n
/// addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    c_strides: (isize, isize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every addressed element inside its slice,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}
