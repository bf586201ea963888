//! Blocked f64 matrix kernels.
//!
//! Everything trains on one core, so these kernels are the throughput floor
//! for the whole framework. The layout is the usual one: pack a block of B
//! into contiguous memory, then run a 4x16 register tile over it. Every
//! output element is accumulated in a fixed order, so results are
//! bit-reproducible regardless of matrix size.

const KC: usize = 256;
const NC: usize = 128;
const MR: usize = 4;
const NR: usize = 16;

/// c[m,n] += a[m,k] @ b[k,n]
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_packed(a, c, m, k, n, |kk0, kc, jj0, nc, pack| {
        for kk in 0..kc {
            let src = (kk0 + kk) * n + jj0;
            pack[kk * nc..kk * nc + nc].copy_from_slice(&b[src..src + nc]);
        }
    });
}

/// c[m,n] += a[m,k] @ bt[n,k]^T  (bt holds B transposed, row-major [n,k])
pub fn gemm_nt_acc(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if k >= 4096 {
        // long-reduction case (conv weight gradients): both operands are
        // row-contiguous in k, so run chunked row dots instead of packing
        gemm_nt_dots(a, bt, c, m, k, n);
        return;
    }
    gemm_packed(a, c, m, k, n, |kk0, kc, jj0, nc, pack| {
        // contiguous reads from bt rows, strided writes into the small pack
        for j in 0..nc {
            let src = &bt[(jj0 + j) * k + kk0..(jj0 + j) * k + kk0 + kc];
            for kk in 0..kc {
                pack[kk * nc + j] = src[kk];
            }
        }
    });
}

/// Row-dot form of a @ bt^T with k-chunking for cache reuse.
fn gemm_nt_dots(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const TC: usize = 512;
    let mut t0 = 0;
    while t0 < k {
        let tc = TC.min(k - t0);
        for i in 0..m {
            let arow = &a[i * k + t0..i * k + t0 + tc];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &bt[j * k + t0..j * k + t0 + tc];
                let mut s = 0.0;
                for t in 0..tc {
                    s += arow[t] * brow[t];
                }
                crow[j] += s;
            }
        }
        t0 += TC;
    }
}

/// c[m,n] += at[t,m]^T @ b[t,n]  (t-chunked rank-1 updates)
pub fn gemm_tn_acc(at: &[f64], b: &[f64], c: &mut [f64], m: usize, t: usize, n: usize) {
    debug_assert_eq!(at.len(), t * m);
    debug_assert_eq!(b.len(), t * n);
    debug_assert_eq!(c.len(), m * n);
    const TC: usize = 64;
    let mut t0 = 0;
    while t0 < t {
        let tc = TC.min(t - t0);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for tt in t0..t0 + tc {
                let av = at[tt * m + i];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[tt * n..tt * n + n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        t0 += TC;
    }
}

thread_local! {
    static PACK_SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Shared blocked driver; `pack_block` fills the packed B block
/// ([kc rows, nc cols], row-major) for the given block coordinates.
fn gemm_packed(
    a: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    pack_block: impl Fn(usize, usize, usize, usize, &mut [f64]),
) {
    PACK_SCRATCH.with(|scratch| {
        let mut bpack = scratch.borrow_mut();
        let need = KC.min(k) * NC.min(n);
        if bpack.len() < need {
            bpack.resize(need, 0.0);
        }
        gemm_packed_inner(a, c, m, k, n, pack_block, &mut bpack);
    });
}

fn gemm_packed_inner(
    a: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    pack_block: impl Fn(usize, usize, usize, usize, &mut [f64]),
    bpack: &mut [f64],
) {
    let mut kk0 = 0;
    while kk0 < k {
        let kc = KC.min(k - kk0);
        let mut jj0 = 0;
        while jj0 < n {
            let nc = NC.min(n - jj0);
            pack_block(kk0, kc, jj0, nc, bpack);
            let mut i = 0;
            while i + MR <= m {
                micro_tile(a, c, &bpack, i, kk0, jj0, kc, nc, k, n);
                i += MR;
            }
            while i < m {
                for kk in 0..kc {
                    let av = a[i * k + kk0 + kk];
                    let brow = &bpack[kk * nc..kk * nc + nc];
                    let crow = &mut c[i * n + jj0..i * n + jj0 + nc];
                    for jj in 0..nc {
                        crow[jj] += av * brow[jj];
                    }
                }
                i += 1;
            }
            jj0 += nc;
        }
        kk0 += kc;
    }
}

#[inline]
fn micro_tile(
    a: &[f64],
    c: &mut [f64],
    bpack: &[f64],
    i: usize,
    kk0: usize,
    jj0: usize,
    kc: usize,
    nc: usize,
    k: usize,
    n: usize,
) {
    let mut j = 0;
    while j + NR <= nc {
        tile_block::<NR>(a, c, bpack, i, kk0, jj0 + j, kc, nc, j, k, n);
        j += NR;
    }
    while j + 8 <= nc {
        tile_block::<8>(a, c, bpack, i, kk0, jj0 + j, kc, nc, j, k, n);
        j += 8;
    }
    while j + 4 <= nc {
        tile_block::<4>(a, c, bpack, i, kk0, jj0 + j, kc, nc, j, k, n);
        j += 4;
    }
    // narrow tail of the n block
    while j < nc {
        for ii in 0..MR {
            let mut s = 0.0;
            for kk in 0..kc {
                s += a[(i + ii) * k + kk0 + kk] * bpack[kk * nc + j];
            }
            c[(i + ii) * n + jj0 + j] += s;
        }
        j += 1;
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn tile_block<const JW: usize>(
    a: &[f64],
    c: &mut [f64],
    bpack: &[f64],
    i: usize,
    kk0: usize,
    jc: usize,
    kc: usize,
    nc: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; JW]; MR];
    for kk in 0..kc {
        let bk = &bpack[kk * nc + j..kk * nc + j + JW];
        for ii in 0..MR {
            let av = a[(i + ii) * k + kk0 + kk];
            let accr = &mut acc[ii];
            for jj in 0..JW {
                accr[jj] += av * bk[jj];
            }
        }
    }
    for ii in 0..MR {
        let crow = (i + ii) * n + jc;
        for jj in 0..JW {
            c[crow + jj] += acc[ii][jj];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn fill(n: usize, seed: u64) -> Vec<f64> {
        // simple LCG; no need for quality here
        let mut x = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        (0..n)
            .map(|_| {
                x = x.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_matches_naive_over_shapes() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 16, 16), (9, 33, 50), (17, 128, 31)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_acc(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_acc {}x{}x{}", m, k, n);
            }

            // bt = b transposed
            let mut bt = vec![0.0; k * n];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_nt_acc(&a, &bt, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_nt_acc {}x{}x{}", m, k, n);
            }

            // at = a transposed
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a[i * k + kk];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_tn_acc(&at, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_tn_acc {}x{}x{}", m, k, n);
            }
        }
    }

    #[test]
    fn gemm_accumulates_into_c() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![10.0];
        gemm_acc(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }
}
