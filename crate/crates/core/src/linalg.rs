//! Dense row-major kernels over `f64` slices.
//!
//! Shapes are passed explicitly; a matrix with `r` rows and `c` columns is a
//! slice of length `r * c`.

/// `out = a · b` where `a` is `m×k` and `b` is `k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `m×k` and `b` is `m×n`; `out` is `k×n`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `m×n` and `b` is `k×n`; `out` is `m×k`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out[j] += Σ_i rows[i][j]` for a `m×n` matrix.
pub fn column_sums_acc(rows: &[f64], n: usize, out: &mut [f64]) {
    for row in rows.chunks_exact(n) {
        axpy(1.0, row, out);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Scales `v` to unit L2 norm in place and returns the original norm.
/// The zero vector is left untouched.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Backward of `y = x / ‖x‖` given the normalized output `y` and `‖x‖`:
/// `dx = (dy − y (y·dy)) / ‖x‖`, accumulated into `dx`.
pub fn normalize_backward(y: &[f64], input_norm: f64, dy: &[f64], dx: &mut [f64]) {
    if input_norm == 0.0 {
        return;
    }
    let proj = dot(y, dy);
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += (g - yv * proj) / input_norm;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        let mut at_b = [0.0; 9];
        // aᵀ (3x2) · a (2x3)
        matmul_at_b_acc(&a, &a, 2, 3, 3, &mut at_b);
        assert_eq!(at_b, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        let mut a_bt = [0.0; 4];
        matmul_a_bt_acc(&a, &a, 2, 3, 2, &mut a_bt);
        assert_eq!(a_bt, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 0.7];
        let dy = [0.5, 0.1, -0.4];
        let f = |x: &[f64]| {
            let mut y = x.to_vec();
            normalize(&mut y);
            dot(&y, &dy)
        };
        let mut y = x.to_vec();
        let n = normalize(&mut y);
        let mut dx = [0.0; 3];
        normalize_backward(&y, n, &dy, &mut dx);
        for i in 0..3 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [1000.0, 999.0, -5.0];
        softmax(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[0] > v[1] && v[1] > v[2]);
    }
}
