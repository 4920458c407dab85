//! Dense matrix products over fixed-size row blocks.
//!
//! Block boundaries depend only on the problem size, never on the worker
//! count, so results are bitwise identical for any degree of parallelism.

use rayon::prelude::*;

const ROW_BLOCK: usize = 256;

/// Raw `c = a · b` (+ `c` when `accumulate`) on row-major buffers with
/// arbitrary strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass buffers whose extents cover the strided
    // m×k, k×n and m×n views; c is densely row-major with n columns.
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

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(ROW_BLOCK * n)
        .zip(a.par_chunks(ROW_BLOCK * k.max(1)))
        .for_each(|(c, a)| {
            let rows = c.len() / n;
            gemm(rows, k, n, a, k as isize, 1, b, n as isize, 1, c, false);
        });
    out
}

/// `g (m×n) · wᵀ` where `w` is `k×n`; result `m×k`.
pub(crate) fn matmul_bt(g: &[f64], m: usize, n: usize, w: &[f64], k: usize) -> Vec<f64> {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    out.par_chunks_mut(ROW_BLOCK * k)
        .zip(g.par_chunks(ROW_BLOCK * n.max(1)))
        .for_each(|(c, g)| {
            let rows = c.len() / k;
            gemm(rows, n, k, g, n as isize, 1, w, 1, n as isize, c, false);
        });
    out
}

/// `aᵀ (k×m) · g (m×n)` where `a` is `m×k`; result `k×n`.
///
/// The reduction over `m` is split into fixed blocks whose partial sums are
/// added in block order.
pub(crate) fn matmul_at(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return vec![0.0; k * n];
    }
    let blocks = m.div_ceil(ROW_BLOCK * 4);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * ROW_BLOCK * 4;
            let hi = (lo + ROW_BLOCK * 4).min(m);
            let mut c = vec![0.0; k * n];
            gemm(
                k,
                hi - lo,
                n,
                &a[lo * k..hi * k],
                1,
                k as isize,
                &g[lo * n..hi * n],
                n as isize,
                1,
                &mut c,
                false,
            );
            c
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut out = iter.next().unwrap_or_else(|| vec![0.0; k * n]);
    for p in iter {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn products_match_naive() {
        let (m, k, n) = (1500, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 29) as f64 - 14.0) / 7.0).collect();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        assert!(close(&matmul(&a, m, k, &b, n), &naive(&a, m, k, &b, n)));

        let g: Vec<f64> = (0..m * n).map(|i| ((i * 7 % 23) as f64 - 11.0) / 5.0).collect();
        assert!(close(&matmul_bt(&g, m, n, &b, k), &naive(&g, m, n, &transpose(&b, k, n), k)));
        assert!(close(&matmul_at(&a, m, k, &g, n), &naive(&transpose(&a, m, k), k, m, &g, n)));
    }
}
