//! Dense kernels shared by the autodiff graph and the plain numeric paths.

use crate::error::{Error, Result};

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. `ta`/`tb` select the transposed storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the buffers whose lengths were checked above.
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

pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(false, false, m, n, k, a, b, 0.0, &mut c);
    c
}

pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn norm_1(n: usize, a: &[f64]) -> f64 {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Gauss-Jordan inverse with partial pivoting. `None` when a pivot vanishes.
fn gauss_jordan(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .expect("non-empty pivot range");
        let pv = m[pivot * n + col];
        if pv == 0.0 || !pv.is_finite() {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let scale = 1.0 / pv;
        for j in 0..n {
            m[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    inv.iter().all(|x| x.is_finite()).then_some(inv)
}

/// Ridge added to the diagonal when a Gram matrix is ill-conditioned.
pub const INVERSE_RIDGE: f64 = 1e-8;
/// 1-norm condition estimate above which the ridge is applied.
pub const INVERSE_MAX_CONDITION: f64 = 1e10;

/// Inverse of a square matrix. When the 1-norm condition number exceeds
/// [`INVERSE_MAX_CONDITION`] (or elimination breaks down) the inverse of
/// `a + INVERSE_RIDGE · I` is returned instead; the flag reports whether that happened.
pub fn inverse_regularized(n: usize, a: &[f64]) -> Result<(Vec<f64>, bool)> {
    if a.len() != n * n {
        return Err(Error::Shape(format!("inverse of a non-square {n}x? buffer")));
    }
    if let Some(inv) = gauss_jordan(n, a) {
        let cond = norm_1(n, a) * norm_1(n, &inv);
        if cond.is_finite() && cond <= INVERSE_MAX_CONDITION {
            return Ok((inv, false));
        }
    }
    let mut ridged = a.to_vec();
    for i in 0..n {
        ridged[i * n + i] += INVERSE_RIDGE;
    }
    gauss_jordan(n, &ridged)
        .map(|inv| (inv, true))
        .ok_or_else(|| Error::Singular(format!("{n}x{n} matrix is singular even after ridge")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let c = matmul(2, 3, 2, &a, &b);
        assert_eq!(c, vec![1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        let at = transpose(2, 3, &a);
        let bt = transpose(3, 2, &b);
        let mut c2 = vec![0.0; 4];
        gemm(true, true, 2, 2, 3, &at, &bt, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn inverse_of_well_conditioned_matrix() {
        let a = [4.0, 1.0, 2.0, 3.0];
        let (inv, ridged) = inverse_regularized(2, &a).unwrap();
        assert!(!ridged);
        let eye = matmul(2, 2, 2, &a, &inv);
        for (i, v) in eye.iter().enumerate() {
            let want = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_gets_ridge() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let (inv, ridged) = inverse_regularized(2, &a).unwrap();
        assert!(ridged);
        assert!(inv.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_matrix_inverse_is_ridge_scaled_identity() {
        let (inv, ridged) = inverse_regularized(2, &[0.0; 4]).unwrap();
        assert!(ridged);
        assert!((inv[0] - 1e8).abs() < 1e-3);
    }
}
