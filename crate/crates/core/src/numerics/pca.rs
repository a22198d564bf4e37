use serde::{Deserialize, Serialize};

use super::linalg::symmetric_eigenvalues;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Sample-covariance spectrum of a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSpectrum {
    /// Non-increasing, non-negative; one per feature dimension.
    pub eigenvalues: Vec<f64>,
    /// `eigenvalue / total_variance`, or all zeros when the total is zero.
    pub explained_ratio: Vec<f64>,
    pub total_variance: f64,
}

/// Which symmetric matrix the spectrum is read from. Both carry the same
/// non-zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaRoute {
    /// `d×d` covariance `XᵀX / (n−1)`.
    Covariance,
    /// `n×n` Gram matrix `XXᵀ / (n−1)`.
    Gram,
    /// Whichever of the two is smaller.
    Auto,
}

pub fn pca(features: &Tensor) -> Result<PcaSpectrum> {
    pca_with_route(features, PcaRoute::Auto)
}

pub fn pca_with_route(features: &Tensor, route: PcaRoute) -> Result<PcaSpectrum> {
    let (n, d) = features.dims2();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if !features.is_finite() {
        return Err(Error::NonFiniteInput);
    }

    let centered = center_columns(features);
    let denom = (n - 1) as f64;
    let total_variance = centered.data().iter().map(|x| x * x).sum::<f64>() / denom;

    let use_gram = match route {
        PcaRoute::Covariance => false,
        PcaRoute::Gram => true,
        PcaRoute::Auto => n < d,
    };
    let scatter = if use_gram { gram(&centered) } else { covariance(&centered) };
    let mut eigenvalues: Vec<f64> = symmetric_eigenvalues(&scatter)?
        .into_iter()
        .map(|l| (l / denom).max(0.0))
        .collect();
    eigenvalues.resize(d, 0.0);

    let explained_ratio = if total_variance > 0.0 {
        eigenvalues.iter().map(|l| l / total_variance).collect()
    } else {
        vec![0.0; d]
    };
    Ok(PcaSpectrum {
        eigenvalues,
        explained_ratio,
        total_variance,
    })
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.clone().reshape(vec![n, d]).unwrap();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Unnormalized `XᵀX`, accumulated over rows (upper triangle, mirrored).
fn covariance(x: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let mut c = vec![0.0; d * d];
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let ci = &mut c[i * d..(i + 1) * d];
            for j in i..d {
                ci[j] += xi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            c[i * d + j] = c[j * d + i];
        }
    }
    Tensor::matrix(d, d, c).unwrap()
}

/// Unnormalized `XXᵀ`.
fn gram(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, g).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_have_zero_spectrum() {
        let x = Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        let s = pca(&x).unwrap();
        assert!(s.eigenvalues.iter().all(|&l| l == 0.0));
        assert!(s.explained_ratio.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn needs_two_samples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca(&x), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn two_points_on_a_line() {
        // rows (0,0) and (2,0): sample variance along x is 2.
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let s = pca_with_route(&x, PcaRoute::Covariance).unwrap();
        assert_eq!(s.eigenvalues, vec![2.0, 0.0]);
        assert_eq!(s.explained_ratio, vec![1.0, 0.0]);
    }
}
