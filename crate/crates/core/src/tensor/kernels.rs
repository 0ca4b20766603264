// Row-major matrix kernels. Each accumulates into `out`.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MR: usize = 4;
const NR: usize = 8;

/// Inner products in plain index order, for the ragged edges of a block.
#[inline]
fn edge(a: &[f64], b: &[f64], out: &mut [f64], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, n: usize) {
    for i in rows {
        for j in cols.clone() {
            let mut acc = out[i * n + j];
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
///
/// Register-blocked over 4×8 output tiles; every output element accumulates
/// over `p` in increasing order, so the result does not depend on blocking.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let (mb, nb) = (m / MR * MR, n / NR * NR);
    let mut panel = vec![[0.0f64; MR]; k];
    for i0 in (0..mb).step_by(MR) {
        for (p, col) in panel.iter_mut().enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = a[(i0 + r) * k + p];
            }
        }
        for j0 in (0..nb).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for (av, brow) in panel.iter().zip(b.chunks_exact(n)) {
                let bv: &[f64; NR] = brow[j0..j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    for c in 0..NR {
                        acc[r][c] += av[r] * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        edge(a, b, out, i0..i0 + MR, nb..n, k, n);
    }
    edge(a, b, out, mb..m, 0..n, k, n);
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, out, m, n, k);
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    matmul_acc(&at, g, out, k, m, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        for (m, k, n) in [(5, 7, 3), (9, 6, 17), (4, 1, 8), (1, 3, 1)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        // a·bᵀ where b is stored [n,k]: use bt = transpose of b
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out2 = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut out2, m, n, k);
        for (x, y) in out2.iter().zip(&out) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c with a [m,k] and c [m,n] gives [k,n]
        let c: Vec<f64> = (0..m * n).map(|i| i as f64 - 3.0).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out3 = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut out3, m, k, n);
        for (x, y) in out3.iter().zip(naive(&at, &c, k, m, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
