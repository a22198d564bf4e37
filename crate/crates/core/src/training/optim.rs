use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self::new(tensors.into_iter().map(Tensor::numel))
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape(format!("parameter {i}: {} values, {} gradients", p.numel(), g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::GradientExplosion(format!("parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Global-norm clipping in place. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(x: f64) -> Tensor {
        Tensor::vector(vec![x])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut s = AdamState::for_tensors([&p]);
        adam_step(&mut [&mut p], &[vec![0.0]], &mut s, 0.001).unwrap();
        assert_eq!(p.data(), &[0.7]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_steps_move_by_lr() {
        let mut p = scalar(0.0);
        let mut s = AdamState::for_tensors([&p]);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut s, 0.001).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut s, 0.001).unwrap();
        assert!((p.data()[0] + 0.002).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_is_an_explosion() {
        let mut p = scalar(0.0);
        let mut s = AdamState::for_tensors([&p]);
        let r = adam_step(&mut [&mut p], &[vec![f64::NAN]], &mut s, 0.001);
        assert!(matches!(r, Err(Error::GradientExplosion(_))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1, -0.2]];
        clip_gradients(&mut small, 5.0).unwrap();
        assert_eq!(small, vec![vec![0.1, -0.2]]);
        assert!(clip_gradients(&mut small, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipping_preserves_direction(g in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
            prop_assume!(g.iter().any(|x| x.abs() > 1e-3));
            let mut c = vec![g.clone()];
            clip_gradients(&mut c, max).unwrap();
            let dot: f64 = g.iter().zip(&c[0]).map(|(a, b)| a * b).sum();
            let na = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = c[0].iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
            prop_assert!(nb <= max.max(na) * (1.0 + 1e-12));
        }
    }
}
