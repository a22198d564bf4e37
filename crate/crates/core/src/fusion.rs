//! Visual context in the translation pipeline.
//!
//! A pre-extracted feature vector is projected by `ReLU(BN(W x + b))` into the
//! word-embedding space. That encoding can then be
//! - concatenated to the decoder input at every step (decoder fusion),
//! - used as a second attention query over the source states, interpolated
//!   with the text query (multimodal attention),
//! - compared to mean sentence embeddings in the loss (VS regularizer).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CosineTargets;
use crate::numerics::{Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    None,
    DecoderFusion,
    MultimodalAttention,
    VsRegularizer,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(FusionMode::None),
            "decoder_fusion" => Ok(FusionMode::DecoderFusion),
            "multimodal_attention" => Ok(FusionMode::MultimodalAttention),
            "vs_regularizer" => Ok(FusionMode::VsRegularizer),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Additional modes, honoured only with `allow_combined`.
    pub extra_modes: Vec<FusionMode>,
    pub allow_combined: bool,
    /// Weight of the visual attention distribution.
    pub gamma_attention: f64,
    /// Weight of the regularizer terms in the training objective.
    pub gamma_loss: f64,
    pub cosine_targets: CosineTargets,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            extra_modes: Vec::new(),
            allow_combined: false,
            gamma_attention: 0.1,
            gamma_loss: 0.1,
            cosine_targets: CosineTargets::Both,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(mode: FusionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for gamma in [self.gamma_attention, self.gamma_loss] {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::InvalidGamma(gamma));
            }
        }
        if !self.extra_modes.is_empty() && !self.allow_combined {
            return Err(Error::InvalidArgument(
                "combining fusion modes requires allow_combined".into(),
            ));
        }
        Ok(())
    }

    fn has(&self, mode: FusionMode) -> bool {
        self.mode == mode || (self.allow_combined && self.extra_modes.contains(&mode))
    }

    pub fn decoder_fusion(&self) -> bool {
        self.has(FusionMode::DecoderFusion)
    }

    pub fn multimodal_attention(&self) -> bool {
        self.has(FusionMode::MultimodalAttention)
    }

    pub fn vs_regularizer(&self) -> bool {
        self.has(FusionMode::VsRegularizer)
    }

    /// Whether the model owns a visual encoder and needs features in training.
    pub fn uses_visual(&self) -> bool {
        self.decoder_fusion() || self.multimodal_attention() || self.vs_regularizer()
    }

    /// Whether decoding itself reads the visual encoding.
    pub fn visual_at_inference(&self) -> bool {
        self.decoder_fusion() || self.multimodal_attention()
    }
}

/// `Linear → BatchNorm → ReLU` projection of raw visual features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderParams {
    /// `feature_dim × embedding_size`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl VisualEncoderParams {
    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStatistics) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VisualEncoderVars {
    pub weight: Var,
    pub bias: Var,
    pub bn_scale: Var,
    pub bn_shift: Var,
}

/// Per-coordinate batch statistics of the pre-normalization activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStatistics {
    pub mean: Vec<f64>,
    /// Divisor `B`, as used for normalization.
    pub batch_var: Vec<f64>,
    /// Divisor `B − 1`, as folded into the running estimate.
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormMode {
    /// Normalize with batch statistics (differentiated through).
    Train,
    /// Normalize with the running estimates.
    Eval,
    /// Normalize with fixed statistics, treated as constants.
    Frozen(BatchStatistics),
}

/// Encodes a `B × feature_dim` batch. In [`NormMode::Train`] also returns the
/// batch statistics for [`VisualEncoderParams::update_running`].
pub fn visual_encode_var(
    g: &mut Graph,
    vars: &VisualEncoderVars,
    params: &VisualEncoderParams,
    features: Var,
    mode: NormMode,
) -> Result<(Var, Option<BatchStatistics>)> {
    let (batch, dim) = g.dims(features);
    if dim != params.feature_dim() {
        return Err(Error::shape(format!(
            "visual feature has {dim} dims, encoder expects {}",
            params.feature_dim()
        )));
    }
    if !g.value(features).is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let pre = g.linear(features, vars.weight, Some(vars.bias));

    let (normalized, stats) = match mode {
        NormMode::Train => {
            if batch < 2 {
                return Err(Error::InvalidArgument(
                    "batch normalization in training needs at least 2 examples".into(),
                ));
            }
            let mean = g.mean_rows(pre);
            let neg_mean = g.scale(mean, -1.0);
            let centered = g.add_row(pre, neg_mean);
            let sq = g.mul(centered, centered);
            let var = g.mean_rows(sq);
            let shifted = g.add_scalar(var, BN_EPS);
            let inv_std = g.powf(shifted, -0.5);
            let stats = BatchStatistics {
                mean: g.value(mean).data().to_vec(),
                batch_var: g.value(var).data().to_vec(),
                unbiased_var: g
                    .value(var)
                    .data()
                    .iter()
                    .map(|v| v * batch as f64 / (batch - 1) as f64)
                    .collect(),
            };
            (g.mul_row(centered, inv_std), Some(stats))
        }
        NormMode::Eval => (fixed_norm(g, pre, &params.running_mean, &params.running_var), None),
        NormMode::Frozen(stats) => (fixed_norm(g, pre, &stats.mean, &stats.batch_var), None),
    };
    let scaled = g.mul_row(normalized, vars.bn_scale);
    let shifted = g.add_row(scaled, vars.bn_shift);
    Ok((g.relu(shifted), stats))
}

fn fixed_norm(g: &mut Graph, pre: Var, mean: &[f64], var: &[f64]) -> Var {
    let neg_mean = g.leaf(Tensor::row_vector(mean.iter().map(|m| -m).collect()));
    let inv_std = g.leaf(Tensor::row_vector(var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()));
    let centered = g.add_row(pre, neg_mean);
    g.mul_row(centered, inv_std)
}

fn register(g: &mut Graph, params: &VisualEncoderParams) -> VisualEncoderVars {
    VisualEncoderVars {
        weight: g.leaf(params.weight.clone()),
        bias: g.leaf(params.bias.clone()),
        bn_scale: g.leaf(params.bn_scale.clone()),
        bn_shift: g.leaf(params.bn_shift.clone()),
    }
}

/// Encodes a batch of features; in training mode the running statistics are
/// updated.
pub fn visual_encode_batch(features: &Tensor, params: &mut VisualEncoderParams, train: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = register(&mut g, params);
    let x = g.leaf(features.clone());
    let mode = if train { NormMode::Train } else { NormMode::Eval };
    let (out, stats) = visual_encode_var(&mut g, &vars, params, x, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    Ok(g.value(out).clone())
}

/// Inference-time encoding of a single feature vector.
pub fn visual_encode(feature: &[f64], params: &VisualEncoderParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = register(&mut g, params);
    let x = g.leaf(Tensor::row_vector(feature.to_vec()));
    let (out, _) = visual_encode_var(&mut g, &vars, params, x, NormMode::Eval)?;
    Ok(g.value(out).data().to_vec())
}

/// Decoder input under step-wise fusion: `[word_embedding ; visual]`.
pub fn stepwise_fusion_input(word_embedding: &[f64], visual: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(word_embedding.len() + visual.len());
    out.extend_from_slice(word_embedding);
    out.extend_from_slice(visual);
    out
}

/// `softmax_s(queryᵀ W states_s)`: `query (1×q)`, `weight (q×k)`,
/// `states_t (k×S)` holds the source states as columns.
pub fn bilinear_attention_var(g: &mut Graph, query: Var, weight: Var, states_t: Var) -> Var {
    let projected = g.matmul(query, weight);
    let scores = g.matmul(projected, states_t);
    g.softmax_rows(scores)
}

fn check_attention_shapes(query: &[f64], weight: &Tensor, states: &Tensor) -> Result<()> {
    let (q, k) = weight.dims2();
    if query.len() != q || states.cols() != k {
        return Err(Error::shape(format!(
            "query {} / weight {q}x{k} / states {}x{}",
            query.len(),
            states.rows(),
            states.cols()
        )));
    }
    Ok(())
}

/// Bilinear attention distribution of `query` over the rows of `states`.
pub fn bilinear_attention(query: &[f64], weight: &Tensor, states: &Tensor) -> Result<Vec<f64>> {
    check_attention_shapes(query, weight, states)?;
    let mut g = Graph::new();
    let q = g.leaf(Tensor::row_vector(query.to_vec()));
    let w = g.leaf(weight.clone());
    let s = g.leaf(states.transpose());
    let a = bilinear_attention_var(&mut g, q, w, s);
    Ok(g.value(a).data().to_vec())
}

/// Visual attention `a_tv(s) = softmax_s(vᵀ W_v h̄_s)`.
pub fn visual_attention_weights(visual: &[f64], w_v: &Tensor, source_states: &Tensor) -> Result<Vec<f64>> {
    bilinear_attention(visual, w_v, source_states)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// `(1 − γ)·text + γ·visual`.
pub fn modulate_attention_var(g: &mut Graph, text: Var, visual: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let a = g.scale(text, 1.0 - gamma);
    let b = g.scale(visual, gamma);
    Ok(g.add(a, b))
}

pub fn modulate_attention(text: &[f64], visual: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if text.len() != visual.len() {
        return Err(Error::shape(format!("{} vs {} source positions", text.len(), visual.len())));
    }
    let mut g = Graph::new();
    let t = g.leaf(Tensor::row_vector(text.to_vec()));
    let v = g.leaf(Tensor::row_vector(visual.to_vec()));
    let out = modulate_attention_var(&mut g, t, v, gamma)?;
    Ok(g.value(out).data().to_vec())
}

/// Mean of the rows of `embeddings` whose `keep` flag is set.
pub fn sentence_embedding_var(g: &mut Graph, embeddings: Var, keep: &[bool]) -> Result<Var> {
    if keep.len() != g.dims(embeddings).0 {
        return Err(Error::shape("mask length differs from embedding rows"));
    }
    let rows: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::EmptySentence);
    }
    let picked = g.gather(embeddings, &rows);
    Ok(g.mean_rows(picked))
}

/// Mean of the word embeddings at non-PAD positions.
pub fn sentence_embedding(embeddings: &Tensor, ids: &[usize]) -> Result<Vec<f64>> {
    let keep: Vec<bool> = ids.iter().map(|&id| id != crate::corpus::PAD).collect();
    let mut g = Graph::new();
    let e = g.leaf(embeddings.clone());
    let out = sentence_embedding_var(&mut g, e, &keep)?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use proptest::prelude::*;

    fn encoder(feature_dim: usize, out: usize) -> VisualEncoderParams {
        VisualEncoderParams {
            weight: Tensor::zeros(&[feature_dim, out]),
            bias: Tensor::zeros(&[1, out]),
            bn_scale: Tensor::filled(&[1, out], 1.0),
            bn_shift: Tensor::zeros(&[1, out]),
            running_mean: vec![0.0; out],
            running_var: vec![1.0; out],
        }
    }

    #[test]
    fn eval_mode_with_zero_weight_clamps_bias() {
        let mut p = encoder(5, 3);
        p.bias = Tensor::row_vector(vec![-1.0, 2.0, 0.5]);
        let v = visual_encode(&[0.3, -7.0, 1.0, 2.0, 9.0], &p).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert_eq!(v, vec![0.0, 2.0 * s, 0.5 * s]);
        assert!((v[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut p = encoder(1, 1);
        p.weight = Tensor::row_vector(vec![1.0]);
        p.bn_shift = Tensor::row_vector(vec![5.0]);
        let x = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let out = visual_encode_batch(&x, &mut p, true).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-3);
        assert!((out.data()[1] - 6.0).abs() < 1e-3);
        // unbiased variance of {-1, 1} is 2
        assert!((p.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert_eq!(p.running_mean[0], 0.0);
    }

    #[test]
    fn train_mode_needs_two_examples() {
        let mut p = encoder(2, 2);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(visual_encode_batch(&x, &mut p, true).is_err());
        assert!(visual_encode_batch(&x, &mut p, false).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = encoder(4, 2);
        assert!(visual_encode(&[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn fusion_input_concatenates() {
        let v = stepwise_fusion_input(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        assert_eq!(v.len(), 6);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn visual_attention_examples() {
        let states = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = visual_attention_weights(&[1.0, 0.0], &eye, &states).unwrap();
        assert!((a[0] - 0.8808).abs() < 1e-4 && (a[1] - 0.1192).abs() < 1e-4);

        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(visual_attention_weights(&[1.0, 3.0], &zero, &states).unwrap(), vec![0.5, 0.5]);
        let one = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        assert_eq!(visual_attention_weights(&[1.0, 3.0], &eye, &one).unwrap(), vec![1.0]);
        assert!(visual_attention_weights(&[1.0], &eye, &one).is_err());
    }

    #[test]
    fn modulation_examples() {
        let th = [0.2, 0.3, 0.5];
        let tv = [1.0, 0.0, 0.0];
        assert_eq!(modulate_attention(&th, &tv, 0.0).unwrap(), th.to_vec());
        assert_eq!(modulate_attention(&th, &tv, 1.0).unwrap(), tv.to_vec());
        let a = modulate_attention(&[0.5, 0.5], &[1.0, 0.0], 0.1).unwrap();
        assert!((a[0] - 0.55).abs() < 1e-15 && (a[1] - 0.45).abs() < 1e-15);
        assert!(matches!(modulate_attention(&th, &tv, -0.1), Err(Error::InvalidGamma(_))));
        assert!(matches!(modulate_attention(&th, &tv, 1.1), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn sentence_embedding_examples() {
        let e = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(sentence_embedding(&e, &[5, 6]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(sentence_embedding(&e, &[5, PAD]).unwrap(), vec![1.0, 1.0]);
        let sym = Tensor::from_rows(&[vec![1.5, -2.0], vec![-1.5, 2.0]]).unwrap();
        assert_eq!(sentence_embedding(&sym, &[4, 4]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(sentence_embedding(&e, &[PAD, PAD]), Err(Error::EmptySentence)));
    }

    #[test]
    fn combined_modes_need_flag() {
        let mut cfg = FusionConfig::with_mode(FusionMode::DecoderFusion);
        cfg.extra_modes.push(FusionMode::VsRegularizer);
        assert!(cfg.validate().is_err());
        cfg.allow_combined = true;
        cfg.validate().unwrap();
        assert!(cfg.decoder_fusion() && cfg.vs_regularizer() && !cfg.multimodal_attention());
        assert!(!FusionConfig::default().uses_visual());
    }

    proptest! {
        #[test]
        fn visual_encoding_is_non_negative(x in prop::collection::vec(-10.0f64..10.0, 3),
                                           w in prop::collection::vec(-1.0f64..1.0, 6)) {
            let mut p = encoder(3, 2);
            p.weight = Tensor::matrix(3, 2, w).unwrap();
            p.running_mean = vec![0.3, -0.2];
            let v = visual_encode(&x, &p).unwrap();
            prop_assert!(v.iter().all(|&e| e >= 0.0));
        }

        #[test]
        fn modulation_stays_on_simplex(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12),
                                       gamma in 0.0f64..=1.0) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let th = norm(raw.iter().map(|p| p.0 + 1e-3).collect());
            let tv = norm(raw.iter().map(|p| p.1 + 1e-3).collect());
            let a = modulate_attention(&th, &tv, gamma).unwrap();
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
