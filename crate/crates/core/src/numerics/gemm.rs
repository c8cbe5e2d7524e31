//! Row-major matrix product kernels over raw slices.
//!
//! Every kernel accumulates each output entry over the shared dimension in
//! ascending order starting from zero (or from the existing value when
//! accumulating), so results are bit-identical to the textbook triple loop.

const MR: usize = 4;
const NR: usize = 8;

/// `c (+)= A · b` where `A[i][p] = a[i * rs + p * cs]`. Output entries are
/// computed in register tiles but each one still sums over `p` in order.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                if accumulate {
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&c[(i + r) * ldc + j..(i + r) * ldc + j + NR]);
                    }
                }
                for p in 0..k {
                    let brow: &[f64; NR] = b[p * ldb + j..p * ldb + j + NR].try_into().expect("tile width");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * rs + p * cs];
                        for (cv, &bv) in row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * ldc + j..(i + r) * ldc + j + NR].copy_from_slice(row);
                }
            } else {
                for r in i..i + mr {
                    for col in j..j + nr {
                        let mut s = if accumulate { c[r * ldc + col] } else { 0.0 };
                        for p in 0..k {
                            s += a[r * rs + p * cs] * b[p * ldb + col];
                        }
                        c[r * ldc + col] = s;
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nn(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    gemm_strided(m, n, k, a, lda, 1, b, ldb, c, ldc, accumulate);
}

/// `c[m×n] (+)= aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_tn(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    gemm_strided(m, n, k, a, 1, lda, b, ldb, c, ldc, accumulate);
}
