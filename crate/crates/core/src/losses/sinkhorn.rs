//! Entropic optimal transport between uniformly weighted point clouds, solved
//! with log-domain Sinkhorn iterations, and the debiased Sinkhorn divergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::log_sum_exp;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization is `blur²`.
    pub blur: f64,
    pub max_iters: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            blur: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn epsilon(&self) -> f64 {
        self.blur * self.blur
    }

    fn validate(&self) -> Result<()> {
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur must be positive, got {}", self.blur)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Converged (or last) iterate of one entropic transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// Dual objective `⟨a, f⟩ + ⟨b, g⟩`.
    pub value: f64,
    /// Row-major `n×m` plan; also `∂value/∂cost`.
    pub plan: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 row-marginal violation after each iteration.
    pub violations: Vec<f64>,
}

/// Entropic OT with uniform marginals over an `n×m` cost matrix.
pub fn entropic_transport(cost: &[f64], n: usize, m: usize, cfg: &SinkhornConfig) -> Result<TransportSolution> {
    cfg.validate()?;
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::shape(format!("cost has {} entries for {n}x{m}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let eps = cfg.epsilon();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let mut violations = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        for i in 0..n {
            for j in 0..m {
                buf[j] = log_b + (g[j] - cost[i * m + j]) / eps;
            }
            f[i] = -eps * log_sum_exp(&buf[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = log_a + (f[i] - cost[i * m + j]) / eps;
            }
            g[j] = -eps * log_sum_exp(&buf[..n]);
        }
        // Columns are exact after the g-update; rows carry the residual.
        let a = 1.0 / n as f64;
        let violation: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| (log_a + log_b + (f[i] + g[j] - cost[i * m + j]) / eps).exp())
                    .sum();
                (row - a).abs()
            })
            .sum();
        violations.push(violation);
        if violation < cfg.tol {
            converged = true;
            break;
        }
    }

    let plan = (0..n * m)
        .map(|k| (log_a + log_b + (f[k / m] + g[k % m] - cost[k]) / eps).exp())
        .collect();
    let value = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    Ok(TransportSolution {
        value,
        plan,
        iterations: violations.len(),
        converged,
        violations,
    })
}

fn squared_distances(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            out.push(x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    out
}

/// Orders two clouds so that `OT(x, y)` and `OT(y, x)` run the same
/// iteration and agree bitwise even before convergence.
fn canonical_first(x: &Tensor, y: &Tensor) -> bool {
    let key = |t: &Tensor| (t.rows(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    key(x) <= key(y)
}

fn transport(x: &Tensor, y: &Tensor, cfg: &SinkhornConfig) -> Result<TransportSolution> {
    if canonical_first(x, y) {
        entropic_transport(&squared_distances(x, y), x.rows(), y.rows(), cfg)
    } else {
        let mut sol = entropic_transport(&squared_distances(y, x), y.rows(), x.rows(), cfg)?;
        let (n, m) = (x.rows(), y.rows());
        let mut plan = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = sol.plan[j * n + i];
            }
        }
        sol.plan = plan;
        Ok(sol)
    }
}

/// Debiased divergence value plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornDivergence {
    pub value: f64,
    /// True when all three transport problems met the tolerance.
    pub converged: bool,
    pub cross: TransportSolution,
    pub self_x: TransportSolution,
    pub self_y: TransportSolution,
}

/// `S_ε(α, β) = OT_ε(α, β) − ½ OT_ε(α, α) − ½ OT_ε(β, β)` with squared
/// Euclidean cost and uniform weights over the rows of `x` and `y`.
pub fn sinkhorn_divergence(x: &Tensor, y: &Tensor, cfg: &SinkhornConfig) -> Result<SinkhornDivergence> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!(
            "point dimensions differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let cross = transport(x, y, cfg)?;
    let self_x = transport(x, x, cfg)?;
    let self_y = transport(y, y, cfg)?;
    let value = cross.value - 0.5 * self_x.value - 0.5 * self_y.value;
    Ok(SinkhornDivergence {
        value,
        converged: cross.converged && self_x.converged && self_y.converged,
        cross,
        self_x,
        self_y,
    })
}

/// Differentiable divergence between two rows-as-points embeddings on `g`.
/// Gradients reach `x` and `y` through the cost matrices, with the transport
/// plans as cost derivatives.
pub fn sinkhorn_divergence_var(
    g: &mut Graph,
    x: Var,
    y: Var,
    cfg: &SinkhornConfig,
) -> Result<(Var, SinkhornDivergence)> {
    let div = sinkhorn_divergence(g.value(x), g.value(y), cfg)?;
    let c_xy = g.sq_dist(x, y);
    let c_xx = g.sq_dist(x, x);
    let c_yy = g.sq_dist(y, y);
    let ot_xy = g.envelope(c_xy, div.cross.value, div.cross.plan.clone());
    let ot_xx = g.envelope(c_xx, div.self_x.value, div.self_x.plan.clone());
    let ot_yy = g.envelope(c_yy, div.self_y.value, div.self_y.plan.clone());
    let half_xx = g.scale(ot_xx, 0.5);
    let half_yy = g.scale(ot_yy, 0.5);
    let partial = g.sub(ot_xy, half_xx);
    let out = g.sub(partial, half_yy);
    Ok((out, div))
}
