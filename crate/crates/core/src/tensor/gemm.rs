/// `c (+)= op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// With `a_t` set, `a` is stored as `[k, m]`; with `b_t` set, `b` is stored as
/// `[n, k]`. `accumulate` adds into `c` instead of overwriting it.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs buffer length");
    assert_eq!(b.len(), k * n, "rhs buffer length");
    assert_eq!(c.len(), m * n, "output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths are asserted above and the strides address
    // exactly the m×k, k×n and m×n elements of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
