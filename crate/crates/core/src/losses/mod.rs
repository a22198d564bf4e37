//! Training objectives: teacher-forced cross-entropy, the Sinkhorn sequence
//! loss over decoder embeddings, the visual-semantic cosine term and their
//! weighted combination.

pub mod sinkhorn;

use serde::{Deserialize, Serialize};

pub use sinkhorn::{
    entropic_transport, sinkhorn_divergence, sinkhorn_divergence_var, SinkhornConfig, SinkhornDivergence,
    TransportSolution,
};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Per-term losses and their combination
/// `total = (1 − γ)·l_mle + γ·(l_ot_tgt + l_cos_visual)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mle: f64,
    pub l_ot_tgt: f64,
    pub l_cos_visual: f64,
    pub total: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

pub fn combined_loss(l_mle: f64, l_ot_tgt: f64, l_cos_visual: f64, gamma_loss: f64) -> Result<LossBreakdown> {
    check_gamma(gamma_loss)?;
    Ok(LossBreakdown {
        l_mle,
        l_ot_tgt,
        l_cos_visual,
        total: (1.0 - gamma_loss) * l_mle + gamma_loss * (l_ot_tgt + l_cos_visual),
    })
}

pub fn combined_loss_var(g: &mut Graph, l_mle: Var, l_ot: Var, l_cos: Var, gamma_loss: f64) -> Result<Var> {
    check_gamma(gamma_loss)?;
    let reg = g.add(l_ot, l_cos);
    let reg = g.scale(reg, gamma_loss);
    let mle = g.scale(l_mle, 1.0 - gamma_loss);
    Ok(g.add(mle, reg))
}

fn masked_targets(targets: &[usize]) -> Vec<Option<usize>> {
    targets.iter().map(|&t| (t != PAD).then_some(t)).collect()
}

/// Summed token NLL over non-PAD positions and the number of such positions.
pub fn nll_sum_var(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<(Var, usize)> {
    let (rows, vocab) = g.dims(logits);
    if rows != targets.len() {
        return Err(Error::shape(format!("{rows} logit rows for {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::InvalidTokenId(bad));
    }
    let masked = masked_targets(targets);
    let count = masked.iter().flatten().count();
    Ok((g.cross_entropy(logits, &masked), count))
}

/// Mean `−log softmax(logits)[target]` over non-PAD positions.
pub fn mle_loss_var(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (sum, count) = nll_sum_var(g, logits, targets)?;
    if count == 0 {
        return Err(Error::AllPadding);
    }
    Ok(g.scale(sum, 1.0 / count as f64))
}

pub fn mle_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let out = mle_loss_var(&mut g, l, targets)?;
    Ok(g.scalar(out))
}

/// Expected embedding under the predicted distribution:
/// `softmax(logits) · table`.
pub fn predicted_embeddings_var(g: &mut Graph, logits: Var, table: Var) -> Result<Var> {
    let (_, v) = g.dims(logits);
    let (tv, _) = g.dims(table);
    if v != tv {
        return Err(Error::shape(format!("{v} logits per row for a {tv}-row embedding table")));
    }
    let p = g.softmax_rows(logits);
    Ok(g.matmul(p, table))
}

pub fn predicted_embeddings(logits: &Tensor, table: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let t = g.leaf(table.clone());
    let out = predicted_embeddings_var(&mut g, l, t)?;
    Ok(g.value(out).clone())
}

/// Cosine distance `1 − a·b / (‖a‖‖b‖)` between two equal-length rows.
pub fn cosine_distance_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.dims(a) != g.dims(b) {
        return Err(Error::shape(format!("cosine of {:?} and {:?}", g.dims(a), g.dims(b))));
    }
    let zero = |t: &Tensor| t.data().iter().all(|&x| x == 0.0);
    if zero(g.value(a)) || zero(g.value(b)) {
        return Err(Error::DegenerateEmbedding);
    }
    let dot = g.dot(a, b);
    let aa = g.dot(a, a);
    let bb = g.dot(b, b);
    let norms = g.mul(aa, bb);
    let inv = g.powf(norms, -0.5);
    let cos = g.mul(dot, inv);
    let neg = g.scale(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Cosine distance between a visual encoding and a sentence embedding.
pub fn vs_cosine_loss(visual: &[f64], sentence: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::row_vector(visual.to_vec()));
    let b = g.leaf(Tensor::row_vector(sentence.to_vec()));
    let out = cosine_distance_var(&mut g, a, b)?;
    Ok(g.scalar(out))
}

/// Which sentence embeddings the visual cosine term is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineTargets {
    /// Mean of the distances to the reference and the predicted embeddings.
    #[default]
    Both,
    Reference,
    Predicted,
}
