//! Attentional encoder-decoder: bidirectional LSTM encoder, input-feeding LSTM
//! decoder with Luong general attention, and greedy/beam decoding.

pub mod decode;
pub mod network;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{beam_search, greedy_decode, translate, AttentionRecord, DecodeOptions, Translation};
pub use network::{
    decode_step, encode, luong_attention_weights, DecoderState, EncoderOutput, ParamVars, StepAttention,
};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, VisualEncoderParams};
use crate::numerics::Tensor;

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    /// Raw visual feature dimension; required when the fusion config uses
    /// visual context.
    pub feature_dim: Option<usize>,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn new(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            src_vocab_size,
            tgt_vocab_size,
            embedding_size: 300,
            hidden_size: 512,
            feature_dim: None,
            fusion: FusionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 || self.embedding_size == 0 || self.hidden_size == 0 {
            return Err(Error::InvalidArgument("model sizes must be positive".into()));
        }
        self.fusion.validate()?;
        if self.fusion.uses_visual() && !matches!(self.feature_dim, Some(d) if d > 0) {
            return Err(Error::InvalidArgument(
                "fusion mode needs visual features but feature_dim is unset".into(),
            ));
        }
        Ok(())
    }

    fn decoder_input_size(&self) -> usize {
        let visual = if self.fusion.decoder_fusion() { self.embedding_size } else { 0 };
        self.embedding_size + visual + self.hidden_size
    }
}

/// Weights of one LSTM layer, gates laid out `[i | f | g | o]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `input × 4H`.
    pub w_ih: Tensor,
    /// `H × 4H`.
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[input, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub src_embedding: Tensor,
    pub tgt_embedding: Tensor,
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    /// `2H × H` maps from the final encoder states to the decoder's initial
    /// hidden and cell states.
    pub bridge_h_w: Tensor,
    pub bridge_h_b: Tensor,
    pub bridge_c_w: Tensor,
    pub bridge_c_b: Tensor,
    pub decoder: LstmParams,
    /// Luong general score matrix `W_a`, `H × 2H`.
    pub attn_w: Tensor,
    /// `3H × H`, applied to `[context ; h_t]`.
    pub combine_w: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub visual: Option<VisualEncoderParams>,
    /// Visual score matrix `W_v`, `E × 2H`.
    pub visual_attn_w: Option<Tensor>,
}

impl ModelParams {
    /// All trainable weights set to zero; batch-norm scale 1.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, h) = (cfg.embedding_size, cfg.hidden_size);
        let visual = match (cfg.fusion.uses_visual(), cfg.feature_dim) {
            (true, Some(f)) => Some(VisualEncoderParams {
                weight: Tensor::zeros(&[f, e]),
                bias: Tensor::zeros(&[1, e]),
                bn_scale: Tensor::filled(&[1, e], 1.0),
                bn_shift: Tensor::zeros(&[1, e]),
                running_mean: vec![0.0; e],
                running_var: vec![1.0; e],
            }),
            _ => None,
        };
        Ok(Self {
            src_embedding: Tensor::zeros(&[cfg.src_vocab_size, e]),
            tgt_embedding: Tensor::zeros(&[cfg.tgt_vocab_size, e]),
            enc_fwd: LstmParams::zeros(e, h),
            enc_bwd: LstmParams::zeros(e, h),
            bridge_h_w: Tensor::zeros(&[2 * h, h]),
            bridge_h_b: Tensor::zeros(&[1, h]),
            bridge_c_w: Tensor::zeros(&[2 * h, h]),
            bridge_c_b: Tensor::zeros(&[1, h]),
            decoder: LstmParams::zeros(cfg.decoder_input_size(), h),
            attn_w: Tensor::zeros(&[h, 2 * h]),
            combine_w: Tensor::zeros(&[3 * h, h]),
            out_w: Tensor::zeros(&[h, cfg.tgt_vocab_size]),
            out_b: Tensor::zeros(&[1, cfg.tgt_vocab_size]),
            visual_attn_w: cfg.fusion.multimodal_attention().then(|| Tensor::zeros(&[e, 2 * h])),
            visual,
        })
    }

    /// Uniform `±0.08` initialization with forget-gate biases at 1. Text
    /// weights are drawn before visual ones, so models that differ only in
    /// fusion mode share their text weights under one seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.trainable_mut() {
            if name.starts_with("visual.bn_") {
                continue;
            }
            for x in t.data_mut() {
                *x = rng.random_range(-INIT_RANGE..INIT_RANGE);
            }
        }
        for lstm in [&mut params.enc_fwd, &mut params.enc_bwd, &mut params.decoder] {
            let h = lstm.hidden_size();
            lstm.bias.data_mut()[h..2 * h].fill(FORGET_BIAS);
        }
        Ok(params)
    }

    /// Trainable tensors in a fixed order shared with [`ParamVars`].
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = vec![
            ("src_embedding", &self.src_embedding),
            ("tgt_embedding", &self.tgt_embedding),
            ("enc_fwd.w_ih", &self.enc_fwd.w_ih),
            ("enc_fwd.w_hh", &self.enc_fwd.w_hh),
            ("enc_fwd.bias", &self.enc_fwd.bias),
            ("enc_bwd.w_ih", &self.enc_bwd.w_ih),
            ("enc_bwd.w_hh", &self.enc_bwd.w_hh),
            ("enc_bwd.bias", &self.enc_bwd.bias),
            ("bridge_h_w", &self.bridge_h_w),
            ("bridge_h_b", &self.bridge_h_b),
            ("bridge_c_w", &self.bridge_c_w),
            ("bridge_c_b", &self.bridge_c_b),
            ("decoder.w_ih", &self.decoder.w_ih),
            ("decoder.w_hh", &self.decoder.w_hh),
            ("decoder.bias", &self.decoder.bias),
            ("attn_w", &self.attn_w),
            ("combine_w", &self.combine_w),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ];
        if let Some(v) = &self.visual {
            out.push(("visual.weight", &v.weight));
            out.push(("visual.bias", &v.bias));
            out.push(("visual.bn_scale", &v.bn_scale));
            out.push(("visual.bn_shift", &v.bn_shift));
        }
        if let Some(w) = &self.visual_attn_w {
            out.push(("visual_attn_w", w));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![
            ("src_embedding", &mut self.src_embedding),
            ("tgt_embedding", &mut self.tgt_embedding),
            ("enc_fwd.w_ih", &mut self.enc_fwd.w_ih),
            ("enc_fwd.w_hh", &mut self.enc_fwd.w_hh),
            ("enc_fwd.bias", &mut self.enc_fwd.bias),
            ("enc_bwd.w_ih", &mut self.enc_bwd.w_ih),
            ("enc_bwd.w_hh", &mut self.enc_bwd.w_hh),
            ("enc_bwd.bias", &mut self.enc_bwd.bias),
            ("bridge_h_w", &mut self.bridge_h_w),
            ("bridge_h_b", &mut self.bridge_h_b),
            ("bridge_c_w", &mut self.bridge_c_w),
            ("bridge_c_b", &mut self.bridge_c_b),
            ("decoder.w_ih", &mut self.decoder.w_ih),
            ("decoder.w_hh", &mut self.decoder.w_hh),
            ("decoder.bias", &mut self.decoder.bias),
            ("attn_w", &mut self.attn_w),
            ("combine_w", &mut self.combine_w),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ];
        if let Some(v) = &mut self.visual {
            out.push(("visual.weight", &mut v.weight));
            out.push(("visual.bias", &mut v.bias));
            out.push(("visual.bn_scale", &mut v.bn_scale));
            out.push(("visual.bn_shift", &mut v.bn_shift));
        }
        if let Some(w) = &mut self.visual_attn_w {
            out.push(("visual_attn_w", w));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, t)| t.is_finite())
            && self
                .visual
                .as_ref()
                .is_none_or(|v| v.running_mean.iter().chain(&v.running_var).all(|x| x.is_finite()))
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Whether translation requires a feature vector per sentence.
    pub fn needs_features(&self) -> bool {
        self.config.fusion.visual_at_inference()
    }
}

/// Self-contained model file: vocabularies, configuration, weights and the
/// run configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub model: Model,
    #[serde(default)]
    pub decode: DecodeOptions,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        ckpt.model.config.validate()?;
        Ok(ckpt)
    }
}

/// GNMT length penalty `((5 + length) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> Result<f64> {
    if length == 0 || !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "length penalty needs length >= 1 and alpha >= 0, got {length} and {alpha}"
        )));
    }
    Ok(((5.0 + length as f64) / 6.0).powf(alpha))
}
