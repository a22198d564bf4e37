//! The training objective of one batch, built on a graph.

use crate::corpus::{Example, PAD};
use crate::error::{Error, Result};
use crate::fusion::{sentence_embedding_var, visual_encode_var, BatchStatistics, NormMode};
use crate::losses::{
    combined_loss_var, cosine_distance_var, nll_sum_var, predicted_embeddings_var, sinkhorn_divergence_var,
    CosineTargets, LossBreakdown, SinkhornConfig,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::seq2seq::network::{encode_var, teacher_forced_var, visual_context_var, ParamVars};
use crate::seq2seq::Model;

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Non-PAD target tokens, the denominator of `l_mle`.
    pub tokens: usize,
    /// Examples whose Sinkhorn solves stopped at the iteration cap.
    pub unconverged: usize,
    /// Batch-norm statistics, present in training mode.
    pub norm_stats: Option<BatchStatistics>,
}

fn sum(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let mut it = terms.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| g.add(acc, t)))
}

/// Mean token cross-entropy over the batch and, under the VS regularizer,
/// per-example means of the OT and cosine terms.
pub fn batch_loss_var(
    g: &mut Graph,
    pv: &ParamVars,
    model: &Model,
    examples: &[&Example],
    mode: NormMode,
    sinkhorn: &SinkhornConfig,
) -> Result<BatchLoss> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = &model.config;
    let fusion = &cfg.fusion;

    let (encodings, norm_stats) = match (&model.params.visual, pv.visual) {
        (Some(vp), Some(vv)) => {
            let mut rows = Vec::with_capacity(examples.len());
            for (i, ex) in examples.iter().enumerate() {
                let v = ex
                    .visual
                    .as_ref()
                    .ok_or_else(|| Error::Misaligned(format!("example {i} has no visual features")))?;
                rows.push(v.clone());
            }
            let x = g.leaf(Tensor::from_rows(&rows)?);
            let (v, stats) = visual_encode_var(g, &vv, vp, x, mode)?;
            let per: Vec<Var> = (0..examples.len()).map(|b| g.row(v, b)).collect();
            (Some(per), stats)
        }
        _ => (None, None),
    };

    let mut nll_terms = Vec::with_capacity(examples.len());
    let mut ot_terms = Vec::new();
    let mut cos_terms = Vec::new();
    let mut tokens = 0;
    let mut unconverged = 0;
    for (b, ex) in examples.iter().enumerate() {
        let enc = encode_var(g, pv, &ex.src)?;
        let visual = encodings.as_ref().map(|e| visual_context_var(g, pv, &enc, e[b]));
        let (logits, _) = teacher_forced_var(g, pv, cfg, &enc, visual.as_ref(), &ex.tgt)?;
        let (nll, count) = nll_sum_var(g, logits, &ex.tgt)?;
        nll_terms.push(nll);
        tokens += count;

        if fusion.vs_regularizer() {
            let keep: Vec<usize> = ex.tgt.iter().copied().filter(|&t| t != PAD).collect();
            let tgt_emb = g.gather(pv.tgt_embedding, &keep);
            let rows: Vec<usize> = ex.tgt.iter().enumerate().filter(|(_, &t)| t != PAD).map(|(i, _)| i).collect();
            let kept_logits = g.gather(logits, &rows);
            let pred_emb = predicted_embeddings_var(g, kept_logits, pv.tgt_embedding)?;
            let (ot, div) = sinkhorn_divergence_var(g, pred_emb, tgt_emb, sinkhorn)?;
            if !div.converged {
                unconverged += 1;
            }
            ot_terms.push(ot);

            let v = visual.expect("vs regularizer owns a visual encoder").encoding;
            let all = vec![true; keep.len()];
            let mut dists = Vec::with_capacity(2);
            let targets = fusion.cosine_targets;
            if matches!(targets, CosineTargets::Both | CosineTargets::Reference) {
                let e = sentence_embedding_var(g, tgt_emb, &all)?;
                dists.push(cosine_distance_var(g, v, e));
            }
            if matches!(targets, CosineTargets::Both | CosineTargets::Predicted) {
                let e = sentence_embedding_var(g, pred_emb, &all)?;
                dists.push(cosine_distance_var(g, v, e));
            }
            let mut ok = Vec::with_capacity(2);
            for d in dists {
                match d {
                    Ok(d) => ok.push(d),
                    Err(Error::DegenerateEmbedding) => {
                        log::warn!("skipping cosine term of a zero visual or sentence embedding");
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(s) = sum(g, &ok) {
                let n = if targets == CosineTargets::Both { 2.0 } else { 1.0 };
                cos_terms.push(g.scale(s, 1.0 / n));
            }
        }
    }
    if tokens == 0 {
        return Err(Error::AllPadding);
    }
    let nll = sum(g, &nll_terms).expect("non-empty batch");
    let l_mle = g.scale(nll, 1.0 / tokens as f64);
    let n = examples.len() as f64;

    let (total, l_ot, l_cos) = if fusion.vs_regularizer() {
        let ot = match sum(g, &ot_terms) {
            Some(s) => g.scale(s, 1.0 / n),
            None => g.leaf(Tensor::zeros(&[1, 1])),
        };
        let cos = match sum(g, &cos_terms) {
            Some(s) => g.scale(s, 1.0 / n),
            None => g.leaf(Tensor::zeros(&[1, 1])),
        };
        let total = combined_loss_var(g, l_mle, ot, cos, fusion.gamma_loss)?;
        (total, g.scalar(ot), g.scalar(cos))
    } else {
        (l_mle, 0.0, 0.0)
    };
    Ok(BatchLoss {
        total,
        breakdown: LossBreakdown {
            l_mle: g.scalar(l_mle),
            l_ot_tgt: l_ot,
            l_cos_visual: l_cos,
            total: g.scalar(total),
        },
        tokens,
        unconverged,
        norm_stats,
    })
}

/// Loss of `model` on `examples` in evaluation mode, evaluated in chunks of
/// `chunk` examples. Token-weighted `l_mle`, example-weighted regularizers.
pub fn corpus_loss(model: &Model, examples: &[Example], chunk: usize, sinkhorn: &SinkhornConfig) -> Result<LossBreakdown> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let mut acc = Accumulator::default();
    for batch in refs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &model.params);
        let loss = batch_loss_var(&mut g, &pv, model, batch, NormMode::Eval, sinkhorn)?;
        acc.add(&loss, batch.len());
    }
    acc.finish(model)
}

/// Running sums for epoch-level loss reporting.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    nll: f64,
    tokens: usize,
    ot: f64,
    cos: f64,
    examples: usize,
}

impl Accumulator {
    pub fn add(&mut self, loss: &BatchLoss, examples: usize) {
        self.nll += loss.breakdown.l_mle * loss.tokens as f64;
        self.tokens += loss.tokens;
        self.ot += loss.breakdown.l_ot_tgt * examples as f64;
        self.cos += loss.breakdown.l_cos_visual * examples as f64;
        self.examples += examples;
    }

    pub fn finish(&self, model: &Model) -> Result<LossBreakdown> {
        if self.tokens == 0 {
            return Err(Error::AllPadding);
        }
        let l_mle = self.nll / self.tokens as f64;
        let fusion = &model.config.fusion;
        if fusion.vs_regularizer() {
            let n = self.examples as f64;
            crate::losses::combined_loss(l_mle, self.ot / n, self.cos / n, fusion.gamma_loss)
        } else {
            Ok(LossBreakdown {
                l_mle,
                l_ot_tgt: 0.0,
                l_cos_visual: 0.0,
                total: l_mle,
            })
        }
    }
}
