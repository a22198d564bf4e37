//! Symmetric eigenvalue solver: Householder tridiagonalization followed by
//! implicit QL iteration with Wilkinson-style shifts.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAX_QL_ITERS: usize = 200;

/// Eigenvalues of a symmetric matrix, sorted non-increasing.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = a.dims2();
    if n != c {
        return Err(Error::shape(format!("eigenvalues of a {n}x{c} matrix")));
    }
    if !a.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mut m = a.data().to_vec();
    let (mut diag, mut off) = tridiagonalize(&mut m, n);
    tql(&mut diag, &mut off)?;
    diag.sort_by(|x, y| y.total_cmp(x));
    Ok(diag)
}

/// Reduces the row-major `n×n` symmetric matrix in place. Returns the diagonal
/// and the sub-diagonal (`off[i]` couples `i` and `i + 1`; last entry 0).
fn tridiagonalize(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut off = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for k in 0..n.saturating_sub(2) {
        let lo = k + 1;
        let norm = (lo..n).map(|i| a[i * n + k] * a[i * n + k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            off[k] = 0.0;
            continue;
        }
        let x0 = a[lo * n + k];
        let alpha = if x0 > 0.0 { -norm } else { norm };
        for i in lo..n {
            v[i] = a[i * n + k];
        }
        v[lo] -= alpha;
        let vnorm = (lo..n).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            off[k] = x0;
            continue;
        }
        for i in lo..n {
            v[i] /= vnorm;
        }

        // p = A_sub v, q = p − (vᵀp) v, A_sub −= 2 (v qᵀ + q vᵀ)
        for i in lo..n {
            let row = &a[i * n..(i + 1) * n];
            p[i] = (lo..n).map(|j| row[j] * v[j]).sum();
        }
        let kappa: f64 = (lo..n).map(|i| v[i] * p[i]).sum();
        for i in lo..n {
            p[i] -= kappa * v[i];
        }
        for i in lo..n {
            let (vi, qi) = (v[i], p[i]);
            let row = &mut a[i * n..(i + 1) * n];
            for j in lo..n {
                row[j] -= 2.0 * (vi * p[j] + qi * v[j]);
            }
        }
        off[k] = alpha;
        for i in lo..n {
            a[i * n + k] = 0.0;
            a[k * n + i] = 0.0;
        }
    }
    if n >= 2 {
        off[n - 2] = a[(n - 1) * n + (n - 2)];
    }
    let diag = (0..n).map(|i| a[i * n + i]).collect();
    (diag, off)
}

fn tql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for l in 0..n {
        let mut iters = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iters += 1;
            if iters > MAX_QL_ITERS {
                return Err(Error::InvalidArgument(
                    "eigenvalue iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        assert_eq!(symmetric_eigenvalues(&a).unwrap(), vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn two_by_two() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&a).unwrap();
        assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_by_one_and_non_square() {
        assert_eq!(symmetric_eigenvalues(&Tensor::row_vector(vec![4.0])).unwrap(), vec![4.0]);
        assert!(symmetric_eigenvalues(&Tensor::zeros(&[2, 3])).is_err());
    }
}
