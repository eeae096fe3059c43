//! Bracketed root finding and a small dense determinant.

/// Bisection for a sign change of `f` on `[lo, hi]`. Returns `None` if the
/// endpoints do not bracket a root.
pub fn bisect<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> Option<f64> {
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_hi == 0.0 {
        return Some(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return None;
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= tol || mid == lo || mid == hi {
            return Some(mid);
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Some(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Safeguarded Newton iteration for an increasing function with known
/// derivative, falling back to bisection whenever a Newton step leaves the
/// bracket.
pub fn newton_bisect<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    let (f_lo, _) = f(lo);
    let (f_hi, _) = f(hi);
    if f_lo > 0.0 || f_hi < 0.0 {
        return None;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..max_iter {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Some(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= tol * x.abs().max(1.0) || hi - lo <= tol {
            return Some(next);
        }
        x = next;
    }
    Some(x)
}

/// Determinant by Gaussian elimination with partial pivoting; `m` is row-major
/// `n × n`.
pub fn determinant(mut m: Vec<f64>, n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))
            .expect("non-empty");
        if m[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for row in col + 1..n {
            let factor = m[row * n + col] / p;
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_sqrt2() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14, 200).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn bisect_rejects_missing_bracket() {
        assert!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-10, 100).is_none());
    }

    #[test]
    fn newton_inverts_log() {
        let r = newton_bisect(|x| (x.ln() - 0.3, 1.0 / x), 0.5, 4.0, 1e-15, 100).unwrap();
        assert!((r - 0.3f64.exp()).abs() < 1e-13);
    }

    #[test]
    fn determinant_of_known_matrix() {
        let m = vec![2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0];
        assert!((determinant(m, 3) - 18.0).abs() < 1e-12);
        assert_eq!(determinant(vec![1.0, 2.0, 2.0, 4.0], 2), 0.0);
    }
}
