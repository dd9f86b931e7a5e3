//! Dense kernels shared by the forward and backward passes.

/// Logical orientation of a row-major operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major storage.
///
/// `a` is stored as `ar x ac`, `b` as `br x bc`; `op` transposes when asked.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: Trans,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k) = if ta == Trans::No { (ar, ac) } else { (ac, ar) };
    let (k2, n) = if tb == Trans::No { (br, bc) } else { (bc, br) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (ac as isize, 1),
        Trans::Yes => (1, ac as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (bc as isize, 1),
        Trans::Yes => (1, bc as isize),
    };
    // SAFETY: the slice lengths were checked against the logical extents and
    // strides above, so every index the kernel touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// In-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
