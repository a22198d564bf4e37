use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmt_core::fusion::{FusionConfig, FusionMode};
use mmt_core::losses::{CosineTargets, SinkhornConfig};
use mmt_core::seq2seq::DecodeOptions;
use mmt_core::training::{DecayTrigger, TrainConfig};

use crate::CliError;

/// Training run description. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub src_train: PathBuf,
    pub tgt_train: PathBuf,
    pub feats_train: Option<PathBuf>,
    pub src_dev: Option<PathBuf>,
    pub tgt_dev: Option<PathBuf>,
    pub feats_dev: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,

    pub fusion_mode: FusionMode,
    pub extra_fusion_modes: Vec<FusionMode>,
    pub allow_combined: bool,
    pub gamma_attention: f64,
    pub gamma_loss: f64,
    pub cosine_targets: CosineTargets,

    pub lr: f64,
    pub lr_decay: f64,
    pub decay_trigger: DecayTrigger,
    pub decay_patience: usize,
    pub early_stop_patience: Option<usize>,
    pub target_mle: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,

    pub beam_size: usize,
    pub alpha_length: f64,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub min_freq: usize,

    pub ot_blur: f64,
    pub ot_max_iters: usize,
    pub ot_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let fusion = FusionConfig::default();
        let decode = DecodeOptions::default();
        Self {
            src_train: PathBuf::new(),
            tgt_train: PathBuf::new(),
            feats_train: None,
            src_dev: None,
            tgt_dev: None,
            feats_dev: None,
            checkpoint: PathBuf::from("model.json"),
            metrics_log: PathBuf::from("metrics.jsonl"),
            fusion_mode: fusion.mode,
            extra_fusion_modes: fusion.extra_modes,
            allow_combined: fusion.allow_combined,
            gamma_attention: fusion.gamma_attention,
            gamma_loss: fusion.gamma_loss,
            cosine_targets: fusion.cosine_targets,
            lr: train.lr,
            lr_decay: train.lr_decay,
            decay_trigger: train.decay_trigger,
            decay_patience: train.decay_patience,
            early_stop_patience: train.early_stop_patience,
            target_mle: train.target_mle,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            seed: train.seed,
            grad_clip: train.grad_clip,
            beam_size: decode.beam_size,
            alpha_length: decode.alpha,
            embedding_size: 300,
            hidden_size: 512,
            min_freq: 1,
            ot_blur: train.sinkhorn.blur,
            ot_max_iters: train.sinkhorn.max_iters,
            ot_tol: train.sinkhorn.tol,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.src_train, &mut self.tgt_train, &mut self.checkpoint, &mut self.metrics_log] {
            join(p);
        }
        for p in [&mut self.feats_train, &mut self.src_dev, &mut self.tgt_dev, &mut self.feats_dev]
            .into_iter()
            .flatten()
        {
            join(p);
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion_mode,
            extra_modes: self.extra_fusion_modes.clone(),
            allow_combined: self.allow_combined,
            gamma_attention: self.gamma_attention,
            gamma_loss: self.gamma_loss,
            cosine_targets: self.cosine_targets,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_trigger: self.decay_trigger,
            decay_patience: self.decay_patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            grad_clip: self.grad_clip,
            sinkhorn: SinkhornConfig {
                blur: self.ot_blur,
                max_iters: self.ot_max_iters,
                tol: self.ot_tol,
            },
            early_stop_patience: self.early_stop_patience,
            target_mle: self.target_mle,
        }
    }

    pub fn decode(&self) -> DecodeOptions {
        DecodeOptions {
            beam_size: self.beam_size,
            max_len: None,
            alpha: self.alpha_length,
        }
    }

    /// Checks everything that does not need the data files.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: mmt_core::Error| CliError::usage(e.to_string());
        if self.src_train.as_os_str().is_empty() || self.tgt_train.as_os_str().is_empty() {
            return Err(CliError::usage("config must name src_train and tgt_train"));
        }
        if self.src_dev.is_some() != self.tgt_dev.is_some() {
            return Err(CliError::usage("src_dev and tgt_dev must be given together"));
        }
        if self.embedding_size == 0 || self.hidden_size == 0 || self.beam_size == 0 || self.min_freq == 0 {
            return Err(CliError::usage(
                "embedding_size, hidden_size, beam_size and min_freq must be positive",
            ));
        }
        if !(self.alpha_length >= 0.0) {
            return Err(CliError::usage("alpha_length must be non-negative"));
        }
        if !(self.ot_blur > 0.0) || self.ot_max_iters == 0 {
            return Err(CliError::usage("ot_blur and ot_max_iters must be positive"));
        }
        self.fusion().validate().map_err(usage)?;
        self.train().validate().map_err(usage)
    }
}
