//! Raw numeric kernels shared by the direct forward path and the tape ops.
//!
//! Everything here works on flat slices with explicit dimensions; shape
//! checking happens in the callers.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

// ── Matrix products ─────────────────────────────────────────────────
//
// All variants accumulate each output element over ascending k, so
// blocking changes traversal order (for cache reuse of b rows) without
// changing any result bit.

/// c += a @ b, a: [m,k], b: [k,n], c: [m,n]. Rows are processed four at a
/// time so each b row is loaded once per row block.
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

/// Row-major transpose: a: [rows, cols] -> [cols, rows].
pub fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![S::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// a @ b into a fresh buffer.
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a^T @ b, a: [k,m], b: [k,n], c: [m,n]. The k rows stream in
/// blocks of four so each c row in the inner loop takes four updates per
/// pass over the output.
pub fn matmul_tn_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut p = 0;
    while p + 4 <= k {
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for i in 0..m {
            let a0 = a[p * m + i];
            let a1 = a[(p + 1) * m + i];
            let a2 = a[(p + 2) * m + i];
            let a3 = a[(p + 3) * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j];
                crow[j] += a1 * b1[j];
                crow[j] += a2 * b2[j];
                crow[j] += a3 * b3[j];
            }
        }
        p += 4;
    }
    while p < k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        p += 1;
    }
}

/// Adds `bias` (length n) to every row of `x` ([rows, n]) in place.
pub fn add_row_bias<S: Real>(x: &mut [S], bias: &[S], rows: usize) {
    let n = bias.len();
    debug_assert_eq!(x.len(), rows * n);
    for r in 0..rows {
        for (xv, &bv) in x[r * n..(r + 1) * n].iter_mut().zip(bias) {
            *xv += bv;
        }
    }
}

// ── Row-wise nonlinearities ─────────────────────────────────────────

/// SiLU x * sigmoid(x), elementwise.
pub fn silu<S: Real>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v * v.sigmoid()).collect()
}

/// d/dx of SiLU given the input value.
pub fn silu_grad<S: Real>(x: S) -> S {
    let s = x.sigmoid();
    s * (S::ONE + x * (S::ONE - s))
}

/// Per-row layer norm with affine output: for each row of x ([rows, n]),
/// y = (x - mean) / sqrt(var + eps) * gamma + beta.
pub fn layer_norm_rows<S: Real>(x: &[S], gamma: &[S], beta: &[S], rows: usize, eps: S) -> Vec<S> {
    let n = gamma.len();
    debug_assert_eq!(x.len(), rows * n);
    debug_assert_eq!(beta.len(), n);
    let inv_n = S::ONE / S::from_f64(n as f64);
    let mut out = vec![S::ZERO; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = S::ONE / (var + eps).sqrt();
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    out
}

/// Numerically stable log-softmax along the last axis of [rows, n].
pub fn log_softmax_rows<S: Real>(x: &[S], rows: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * n);
    let mut out = vec![S::ZERO; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.max(v);
        }
        let mut z = S::ZERO;
        for &v in row {
            z += (v - mx).exp();
        }
        let lz = z.ln() + mx;
        for j in 0..n {
            out[r * n + j] = row[j] - lz;
        }
    }
    out
}

/// Softmax along the last axis of [rows, n]. Computed directly (max-shift,
/// exponentiate, normalize) so each row sums to 1 up to elementwise
/// rounding even when the shifted logits span a wide range.
pub fn softmax_rows<S: Real>(x: &[S], rows: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * n);
    let mut out = vec![S::ZERO; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.max(v);
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut z = S::ZERO;
        for j in 0..n {
            orow[j] = (row[j] - mx).exp();
            z += orow[j];
        }
        let inv = S::ONE / z;
        for v in orow.iter_mut() {
            *v *= inv;
        }
    }
    out
}

// ── Per-channel state drive ─────────────────────────────────────────

/// drive[t, c*state+s] = x[t, c] * b[c, s]; x: [t_len, channels],
/// b: [channels, state].
pub fn channel_drive<S: Real>(x: &[S], b: &[S], t_len: usize, channels: usize, state: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), t_len * channels);
    debug_assert_eq!(b.len(), channels * state);
    let mut out = vec![S::ZERO; t_len * channels * state];
    for t in 0..t_len {
        let xrow = &x[t * channels..(t + 1) * channels];
        let orow = &mut out[t * channels * state..(t + 1) * channels * state];
        for c in 0..channels {
            let xv = xrow[c];
            let brow = &b[c * state..(c + 1) * state];
            let opart = &mut orow[c * state..(c + 1) * state];
            for (ov, &bv) in opart.iter_mut().zip(brow) {
                *ov = xv * bv;
            }
        }
    }
    out
}

// ── Linear scans ────────────────────────────────────────────────────
//
// The recurrence h_t = a ⊙ h_{t-1} + u_t over vectors of width `w`,
// evaluated either step by step or by a Blelloch prefix scan over the
// associative pairs (a_t, u_t) with
//     (a1, u1) ∘ (a2, u2) = (a2*a1, a2*u1 + u2).
// Composition order matters: the left element is the earlier timestep.

/// Step-by-step evaluation. `u` is [t_len, w] row-major, `a` and `h0`
/// have length w; returns h as [t_len, w].
pub fn scan_sequential<S: Real>(a: &[S], u: &[S], h0: &[S], t_len: usize) -> Vec<S> {
    let w = a.len();
    debug_assert_eq!(u.len(), t_len * w);
    debug_assert_eq!(h0.len(), w);
    let mut out = vec![S::ZERO; t_len * w];
    let mut h = h0.to_vec();
    for t in 0..t_len {
        let urow = &u[t * w..(t + 1) * w];
        for j in 0..w {
            h[j] = a[j] * h[j] + urow[j];
        }
        out[t * w..(t + 1) * w].copy_from_slice(&h);
    }
    out
}

/// Work-efficient Blelloch scan: an up-sweep builds a reduction tree over
/// the pair elements, a down-sweep distributes exclusive prefixes, and the
/// initial state is folded in at the end. O(t_len) pair compositions,
/// logarithmic depth, fixed tree shape (deterministic for a given t_len).
pub fn scan_parallel<S: Real>(a: &[S], u: &[S], h0: &[S], t_len: usize) -> Vec<S> {
    let w = a.len();
    debug_assert_eq!(u.len(), t_len * w);
    debug_assert_eq!(h0.len(), w);

    // Pair elements (ea[t], eu[t]) for the map h -> ea ⊙ h + eu.
    let mut ea = vec![S::ZERO; t_len * w];
    for t in 0..t_len {
        ea[t * w..(t + 1) * w].copy_from_slice(a);
    }
    let mut eu = u.to_vec();

    // compose_into: element j := element i ∘ element j (i earlier than j).
    let compose = |ea: &mut [S], eu: &mut [S], i: usize, j: usize| {
        debug_assert!(i < j);
        let (lo, hi) = ea.split_at_mut(j * w);
        let eai = &lo[i * w..(i + 1) * w];
        let eaj = &mut hi[..w];
        let (ulo, uhi) = eu.split_at_mut(j * w);
        let eui = &ulo[i * w..(i + 1) * w];
        let euj = &mut uhi[..w];
        for x in 0..w {
            euj[x] = eaj[x] * eui[x] + euj[x];
            eaj[x] = eaj[x] * eai[x];
        }
    };

    // Up-sweep.
    let mut d = 1;
    while d < t_len {
        let mut right = 2 * d - 1;
        while right < t_len {
            compose(&mut ea, &mut eu, right - d, right);
            right += 2 * d;
        }
        d *= 2;
    }

    // Down-sweep: push prefixes from internal nodes to their right children.
    d /= 2;
    while d >= 1 {
        let mut left = 2 * d - 1;
        while left + d < t_len {
            compose(&mut ea, &mut eu, left, left + d);
            left += 2 * d;
        }
        d /= 2;
    }

    // Prefix t is now the composition of elements 0..=t; apply it to h0.
    for t in 0..t_len {
        let row = &mut eu[t * w..(t + 1) * w];
        let arow = &ea[t * w..(t + 1) * w];
        for j in 0..w {
            row[j] += arow[j] * h0[j];
        }
    }
    eu
}

/// Adjoint of the scan: given upstream gradients g[t] = dL/dh_t, returns
/// (d_u, d_a, d_h0). The reverse recurrence lam_t = g_t + a ⊙ lam_{t+1}
/// yields d_u[t] = lam_t, d_a = sum_t lam_t ⊙ h_{t-1}, d_h0 = a ⊙ lam_1.
pub fn scan_backward<S: Real>(
    a: &[S],
    h: &[S],
    h0: &[S],
    g: &[S],
    t_len: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let w = a.len();
    debug_assert_eq!(g.len(), t_len * w);
    let mut d_u = vec![S::ZERO; t_len * w];
    let mut d_a = vec![S::ZERO; w];
    let mut lam = vec![S::ZERO; w];
    for t in (0..t_len).rev() {
        let grow = &g[t * w..(t + 1) * w];
        let prev = if t == 0 {
            h0
        } else {
            &h[(t - 1) * w..t * w]
        };
        for j in 0..w {
            lam[j] = grow[j] + a[j] * lam[j];
            d_a[j] += lam[j] * prev[j];
        }
        d_u[t * w..(t + 1) * w].copy_from_slice(&lam);
    }
    let mut d_h0 = vec![S::ZERO; w];
    for j in 0..w {
        d_h0[j] = a[j] * lam[j];
    }
    (d_u, d_a, d_h0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngKey, Role};

    fn randu(key: RngKey, comp: u32, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let s = key.stream(Role::Init, 0, comp);
        (0..n)
            .map(|i| lo + (hi - lo) * s.uniform(i as u64))
            .collect()
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variant_agrees_with_plain_matmul() {
        let key = RngKey::new(11);
        for (m, k, n) in [(4usize, 5usize, 3usize), (9, 7, 6), (1, 13, 2)] {
            let a = randu(key.child(m as u64), 0, m * k, -1.0, 1.0);
            let b = randu(key.child(m as u64), 1, k * n, -1.0, 1.0);
            let c = matmul(&a, &b, m, k, n);

            // a @ b == (a^T)^T @ b via matmul_tn with at: [k, m].
            let at = transpose(&a, m, k);
            let mut c_tn = vec![0.0; m * n];
            matmul_tn_acc(&at, &b, &mut c_tn, m, k, n);
            for i in 0..m * n {
                assert!((c[i] - c_tn[i]).abs() < 1e-12);
            }

            // transpose twice is the identity.
            assert_eq!(transpose(&transpose(&a, m, k), k, m), a);
        }
    }

    #[test]
    fn log_softmax_is_stable_and_normalized() {
        let out = log_softmax_rows(&[1000.0f64, 0.0], 1, 2);
        assert!(out[0].abs() < 1e-9);
        assert!((out[1] + 1000.0).abs() < 1e-9);

        let x = randu(RngKey::new(3), 0, 7, -4.0, 4.0);
        let ls = log_softmax_rows(&x, 1, 7);
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scan_memoryless_and_cumulative_cases() {
        // a = 0: h_t = u_t.
        let u = vec![1.0f64, 2.0, 3.0, 4.0];
        let h = scan_sequential(&[0.0], &u, &[5.0], 4);
        assert_eq!(h, u);
        // a = 1, u_t = c, h0 = 0: h_t = t*c.
        let h = scan_sequential(&[1.0], &[2.0, 2.0, 2.0], &[0.0], 3);
        assert_eq!(h, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn parallel_scan_matches_sequential() {
        let key = RngKey::new(17);
        for &t_len in &[1usize, 2, 3, 5, 8, 64, 257, 1000] {
            let w = 4;
            let a = randu(key.child(t_len as u64), 0, w, -0.99, 0.99);
            let u = randu(key.child(t_len as u64), 1, t_len * w, -1.0, 1.0);
            let h0 = randu(key.child(t_len as u64), 2, w, -1.0, 1.0);
            let hs = scan_sequential(&a, &u, &h0, t_len);
            let hp = scan_parallel(&a, &u, &h0, t_len);
            for i in 0..t_len * w {
                let denom = hs[i].abs().max(1.0);
                assert!(
                    (hs[i] - hp[i]).abs() / denom < 1e-12,
                    "t_len={t_len} i={i}: {} vs {}",
                    hs[i],
                    hp[i]
                );
            }
        }
    }

    #[test]
    fn scan_single_element_is_exact() {
        let a = vec![0.5f64, -0.25];
        let u = vec![1.0, 2.0];
        let h0 = vec![4.0, 8.0];
        let h = scan_parallel(&a, &u, &h0, 1);
        assert_eq!(h, vec![0.5 * 4.0 + 1.0, -0.25 * 8.0 + 2.0]);
    }

    #[test]
    fn scan_backward_matches_finite_differences() {
        let key = RngKey::new(23);
        let (t_len, w) = (6, 3);
        let a = randu(key, 0, w, -0.9, 0.9);
        let u = randu(key, 1, t_len * w, -1.0, 1.0);
        let h0 = randu(key, 2, w, -1.0, 1.0);
        // Loss: weighted sum of all h values.
        let wts = randu(key, 3, t_len * w, -1.0, 1.0);
        let loss = |a: &[f64], u: &[f64], h0: &[f64]| -> f64 {
            scan_sequential(a, u, h0, t_len)
                .iter()
                .zip(&wts)
                .map(|(h, w)| h * w)
                .sum()
        };
        let h = scan_sequential(&a, &u, &h0, t_len);
        let (d_u, d_a, d_h0) = scan_backward(&a, &h, &h0, &wts, t_len);

        let eps = 1e-6;
        for j in 0..w {
            let mut ap = a.clone();
            ap[j] += eps;
            let mut am = a.clone();
            am[j] -= eps;
            let fd = (loss(&ap, &u, &h0) - loss(&am, &u, &h0)) / (2.0 * eps);
            assert!((fd - d_a[j]).abs() < 1e-6, "d_a[{j}]: {fd} vs {}", d_a[j]);

            let mut hp = h0.clone();
            hp[j] += eps;
            let mut hm = h0.clone();
            hm[j] -= eps;
            let fd = (loss(&a, &u, &hp) - loss(&a, &u, &hm)) / (2.0 * eps);
            assert!((fd - d_h0[j]).abs() < 1e-6, "d_h0[{j}]");
        }
        for i in 0..t_len * w {
            let mut up = u.clone();
            up[i] += eps;
            let mut um = u.clone();
            um[i] -= eps;
            let fd = (loss(&a, &up, &h0) - loss(&a, &um, &h0)) / (2.0 * eps);
            assert!((fd - d_u[i]).abs() < 1e-6, "d_u[{i}]");
        }
    }

    #[test]
    fn layer_norm_rows_is_standardized() {
        let x = randu(RngKey::new(5), 0, 12, -3.0, 3.0);
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let y = layer_norm_rows(&x, &gamma, &beta, 3, 1e-6);
        for r in 0..3 {
            let row = &y[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
