//! Dense kernels with a fixed per-element reduction order.
//!
//! `matmul_nt` computes every output element as the same lane-split dot
//! product regardless of how the surrounding loop is tiled, and the
//! accumulate kernels add contributions in ascending index order. Results for
//! a given row never depend on the other rows in the call.

use super::Float;

const LANES: usize = 8;

#[inline(always)]
fn reduce<S: Float>(acc: &[S; LANES]) -> S {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn lanes<S>(xs: &[S], off: usize) -> &[S; LANES] {
    xs[off..off + LANES].try_into().expect("lane slice")
}

#[inline(always)]
fn dot_tile<S: Float, const MR: usize, const NR: usize>(
    a: [&[S]; MR],
    b: [&[S]; NR],
    k: usize,
) -> [[S; NR]; MR] {
    let chunks = k / LANES;
    let mut acc = [[[S::zero(); LANES]; NR]; MR];
    for c in 0..chunks {
        let off = c * LANES;
        for i in 0..MR {
            let av = lanes(a[i], off);
            for j in 0..NR {
                let bv = lanes(b[j], off);
                let cell = &mut acc[i][j];
                for l in 0..LANES {
                    cell[l] = cell[l] + av[l] * bv[l];
                }
            }
        }
    }
    let mut out = [[S::zero(); NR]; MR];
    for i in 0..MR {
        for j in 0..NR {
            let mut tail = S::zero();
            for t in chunks * LANES..k {
                tail = tail + a[i][t] * b[j][t];
            }
            out[i][j] = reduce(&acc[i][j]) + tail;
        }
    }
    out
}

#[inline(always)]
fn dot_generic<S: Float>(a: &[S], b: &[S]) -> S {
    dot_tile::<S, 1, 1>([a], [b], a.len())[0][0]
}

#[inline(always)]
fn nt_generic<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    let arow = |i: usize| &a[i * k..(i + 1) * k];
    let brow = |j: usize| &b[j * k..(j + 1) * k];
    let mut i = 0;
    while i + 4 <= m {
        let ar = [arow(i), arow(i + 1), arow(i + 2), arow(i + 3)];
        let mut j = 0;
        while j + 2 <= n {
            let t = dot_tile::<S, 4, 2>(ar, [brow(j), brow(j + 1)], k);
            for (r, row) in t.iter().enumerate() {
                out[(i + r) * n + j] = row[0];
                out[(i + r) * n + j + 1] = row[1];
            }
            j += 2;
        }
        while j < n {
            let t = dot_tile::<S, 4, 1>(ar, [brow(j)], k);
            for (r, row) in t.iter().enumerate() {
                out[(i + r) * n + j] = row[0];
            }
            j += 1;
        }
        i += 4;
    }
    while i < m {
        let ar = [arow(i)];
        let mut j = 0;
        while j + 8 <= n {
            let br = [
                brow(j),
                brow(j + 1),
                brow(j + 2),
                brow(j + 3),
                brow(j + 4),
                brow(j + 5),
                brow(j + 6),
                brow(j + 7),
            ];
            let t = dot_tile::<S, 1, 8>(ar, br, k);
            out[i * n + j..i * n + j + 8].copy_from_slice(&t[0]);
            j += 8;
        }
        while j < n {
            out[i * n + j] = dot_tile::<S, 1, 1>(ar, [brow(j)], k)[0][0];
            j += 1;
        }
        i += 1;
    }
}

#[inline(always)]
fn nn_acc_generic<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (s0, s1, s2, s3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                crow[j] = (((crow[j] + s0 * b0[j]) + s1 * b1[j]) + s2 * b2[j]) + s3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let s = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + s * brow[j];
            }
            kk += 1;
        }
    }
}

/// `a · b` for equal-length slices.
pub fn dot<S: Float>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_generic(a, b)
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ` (both operands row-major).
pub fn matmul_nt<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { nt_avx2(m, k, n, a, b, out) };
    }
    nt_generic(m, k, n, a, b, out)
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_nn_acc<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { nn_acc_avx2(m, k, n, a, b, out) };
    }
    nn_acc_generic(m, k, n, a, b, out)
}

/// `out[m×n] += a[r×m]ᵀ · b[r×n]`.
pub fn matmul_tn_acc<S: Float>(r: usize, m: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    assert!(a.len() == r * m && b.len() == r * n && out.len() == m * n);
    let mut at = vec![S::zero(); m * r];
    for row in 0..r {
        for col in 0..m {
            at[col * r + row] = a[row * m + col];
        }
    }
    matmul_nn_acc(m, r, n, &at, b, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2<S: Float>(a: &[S], b: &[S]) -> S {
    dot_generic(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nt_avx2<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    nt_generic(m, k, n, a, b, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nn_acc_avx2<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    nn_acc_generic(m, k, n, a, b, out)
}
