//! Mini-batch Adam training with learning-rate decay, best-dev checkpoint
//! selection and a JSON-lines metrics log.

pub mod objective;
pub mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use objective::{batch_loss_var, corpus_loss, Accumulator, BatchLoss};
pub use optim::{adam_step, clip_gradients, AdamState};

use crate::corpus::{Example, ParallelCorpus};
use crate::error::{Error, Result};
use crate::fusion::NormMode;
use crate::losses::SinkhornConfig;
use crate::numerics::{gradient_check_many, GradCheckReport, Graph, Tensor};
use crate::seq2seq::{Model, ParamVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayTrigger {
    /// Decay after every epoch whose dev loss does not improve on the best.
    #[default]
    Plateau,
    EveryEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_trigger: DecayTrigger,
    /// Non-improving epochs in a row that trigger one plateau decay.
    pub decay_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub sinkhorn: SinkhornConfig,
    /// Stop after this many epochs without dev improvement.
    pub early_stop_patience: Option<usize>,
    /// Stop once the epoch's training `l_mle` falls below this.
    pub target_mle: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_decay: 0.5,
            decay_trigger: DecayTrigger::Plateau,
            decay_patience: 1,
            batch_size: 32,
            max_epochs: 30,
            seed: 1,
            grad_clip: 5.0,
            sinkhorn: SinkhornConfig::default(),
            early_stop_patience: Some(10),
            target_mle: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.decay_patience == 0 {
            return bad("batch_size, max_epochs and decay_patience must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_mle: f64,
    pub l_ot_tgt: f64,
    pub l_cos_visual: f64,
    pub total: f64,
    pub dev_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

/// Learning rate and plateau bookkeeping across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    best: f64,
    stale: usize,
    decay: f64,
    trigger: DecayTrigger,
    patience: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            best: f64::INFINITY,
            stale: 0,
            decay: cfg.lr_decay,
            trigger: cfg.decay_trigger,
            patience: cfg.decay_patience,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Epochs since the dev loss last improved.
    pub fn stale(&self) -> usize {
        self.stale
    }

    /// Records one epoch's dev loss and decays the rate when due. Returns
    /// whether the loss improved on the best so far.
    pub fn observe(&mut self, dev_loss: f64) -> bool {
        let improved = dev_loss < self.best;
        if improved {
            self.best = dev_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let decay = match self.trigger {
            DecayTrigger::EveryEpoch => true,
            DecayTrigger::Plateau => self.stale > 0 && self.stale % self.patience == 0,
        };
        if decay {
            self.lr *= self.decay;
        }
        improved
    }
}

/// Splits a permutation into batches. Batch normalization in training mode
/// needs two examples, so a trailing singleton joins the previous batch.
fn batches(order: &[usize], size: usize, min: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().unwrap().len();
        let start = order.len() - tail - out.pop().unwrap().len();
        out.push(&order[start..]);
    }
    out
}

fn check_corpus(model: &Model, corpus: &ParallelCorpus, what: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if model.config.fusion.uses_visual() && corpus.feature_dim() != model.config.feature_dim {
        return Err(Error::Misaligned(format!(
            "{what} features have dimension {:?}, model expects {:?}",
            corpus.feature_dim(),
            model.config.feature_dim
        )));
    }
    Ok(())
}

/// Trains `model` in place and leaves it at the best-dev parameters. Without
/// a dev corpus the training corpus (in evaluation mode) is used for model
/// selection. Each epoch's metrics are written to `log` as one JSON object
/// per line.
pub fn train(
    model: &mut Model,
    train_corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    check_corpus(model, train_corpus, "training")?;
    let dev = dev.unwrap_or(train_corpus);
    check_corpus(model, dev, "dev")?;
    let visual = model.params.visual.is_some();
    if visual && (cfg.batch_size < 2 || train_corpus.len() < 2) {
        return Err(Error::InvalidArgument(
            "training with a visual encoder needs batches of at least 2 examples".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_tensors(model.params.trainable().into_iter().map(|(_, t)| t));
    let mut schedule = LrSchedule::new(cfg);
    let mut best = (f64::INFINITY, 0, model.params.clone());
    let mut epochs = Vec::new();
    let examples: &[Example] = train_corpus.examples();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        let mut unconverged = 0;
        for (b, batch) in batches(&order, cfg.batch_size, if visual { 2 } else { 1 }).into_iter().enumerate() {
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let pv = ParamVars::register(&mut g, &model.params);
            let loss = batch_loss_var(&mut g, &pv, model, &refs, NormMode::Train, &cfg.sinkhorn)?;
            if !loss.breakdown.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {b}: loss {}",
                    loss.breakdown.total
                )));
            }
            let grads = g.backward(loss.total);
            let mut flat: Vec<Vec<f64>> = pv
                .all()
                .iter()
                .map(|&v| grads.get_or_zeros(v, g.value(v).numel()))
                .collect();
            clip_gradients(&mut flat, cfg.grad_clip)?;
            let mut params: Vec<_> = model.params.trainable_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &flat, &mut adam, schedule.lr())?;
            if let (Some(stats), Some(vp)) = (&loss.norm_stats, model.params.visual.as_mut()) {
                vp.update_running(stats);
            }
            if !model.params.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch} batch {b}: non-finite parameters")));
            }
            acc.add(&loss, refs.len());
            unconverged += loss.unconverged;
        }
        if unconverged > 0 {
            log::debug!("epoch {epoch}: {unconverged} Sinkhorn solves hit the iteration cap");
        }
        let train_loss = acc.finish(model)?;
        let dev_loss = corpus_loss(model, dev.examples(), cfg.batch_size, &cfg.sinkhorn)?.total;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: dev loss {dev_loss}")));
        }
        let metrics = EpochMetrics {
            epoch,
            l_mle: train_loss.l_mle,
            l_ot_tgt: train_loss.l_ot_tgt,
            l_cos_visual: train_loss.l_cos_visual,
            total: train_loss.total,
            dev_loss,
            lr: schedule.lr(),
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&metrics)?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        log::info!(
            "epoch {epoch}: mle {:.5} total {:.5} dev {:.5} lr {}",
            metrics.l_mle,
            metrics.total,
            dev_loss,
            metrics.lr
        );
        epochs.push(metrics);

        if schedule.observe(dev_loss) {
            best = (dev_loss, epoch, model.params.clone());
        }
        if cfg.early_stop_patience.is_some_and(|p| schedule.stale() >= p) {
            break;
        }
        if cfg.target_mle.is_some_and(|t| metrics.l_mle < t) {
            break;
        }
    }
    let (best_dev_loss, best_epoch, params) = best;
    model.params = params;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_dev_loss,
    })
}

/// Finite-difference check of the full batch objective with respect to every
/// trainable tensor of `model`. In [`NormMode::Train`] the batch statistics
/// of the unperturbed model are frozen for the check; otherwise a bias ahead
/// of batch normalization has an identically zero gradient that the check
/// can only see as rounding noise.
pub fn objective_gradient_check(
    model: &Model,
    examples: &[&Example],
    mode: NormMode,
    sinkhorn: &SinkhornConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let mode = match mode {
        NormMode::Train => {
            let mut g = Graph::new();
            let pv = ParamVars::register(&mut g, &model.params);
            match batch_loss_var(&mut g, &pv, model, examples, NormMode::Train, sinkhorn)?.norm_stats {
                Some(stats) => NormMode::Frozen(stats),
                None => NormMode::Train,
            }
        }
        other => other,
    };
    let tensors: Vec<Tensor> = model.params.trainable().into_iter().map(|(_, t)| t.clone()).collect();
    gradient_check_many(
        |g, vars| {
            let pv = ParamVars::from_vars(&model.params, vars.to_vec());
            Ok(batch_loss_var(g, &pv, model, examples, mode.clone(), sinkhorn)?.total)
        },
        &tensors,
        eps,
    )
}
