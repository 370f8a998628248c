//! Small dense row-major helpers for the `d x d` and `d x m` blocks that
//! appear in the coefficient maps.

/// `out = A v` for row-major `A` of shape `rows x cols`.
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

/// `out += A v`.
pub fn mat_vec_add(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    }
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when a pivot falls below `1e-14` relative to the
/// largest entry.
pub fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[p * n + col].abs().total_cmp(&m[q * n + col].abs()))
            .unwrap();
        if m[pivot * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                m.swap(pivot * n + c, col * n + c);
                inv.swap(pivot * n + c, col * n + c);
            }
        }
        let p = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[r * n + c] -= f * m[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Some(inv)
}

/// `σ^T (σ σ^T)^{-1}` for row-major `σ` of shape `d x m`, as an `m x d`
/// matrix.
pub fn sigma_star_a_inv(sigma: &[f64], d: usize, m: usize) -> Option<Vec<f64>> {
    let mut a = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            a[r * d + c] = (0..m).map(|k| sigma[r * m + k] * sigma[c * m + k]).sum();
        }
    }
    let a_inv = invert(&a, d)?;
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        for c in 0..d {
            out[r * d + c] = (0..d).map(|k| sigma[k * m + r] * a_inv[k * d + c]).sum();
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_two_by_two() {
        let a = [4.0, 7.0, 2.0, 6.0];
        let inv = invert(&a, 2).unwrap();
        let expect = [0.6, -0.7, -0.2, 0.4];
        for (x, y) in inv.iter().zip(expect) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn right_inverse_of_wide_sigma() {
        // d = 1, m = 2: σ = [3, 4], σσ^T = 25, σ^T/25.
        let s = sigma_star_a_inv(&[3.0, 4.0], 1, 2).unwrap();
        assert!((s[0] - 0.12).abs() < 1e-15 && (s[1] - 0.16).abs() < 1e-15);
    }
}
