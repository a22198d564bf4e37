//! Greedy and beam-search translation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::fusion::{visual_encode_var, NormMode};
use crate::numerics::graph::log_sum_exp;
use crate::numerics::{Graph, Tensor};

use super::network::{
    decode_step_var, encode_var, initial_state_var, visual_context_var, EncodedVars, ParamVars, StateVars,
    StepAttention, VisualVars,
};
use super::{length_penalty, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam_size: usize,
    /// Defaults to `2 × source length + 10`.
    pub max_len: Option<usize>,
    pub alpha: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: None,
            alpha: 0.6,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Self::default()
        }
    }
}

/// Attention distributions of every emitted step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub text: Vec<Vec<f64>>,
    pub visual: Option<Vec<Vec<f64>>>,
    pub combined: Vec<Vec<f64>>,
}

impl AttentionRecord {
    fn from_steps(steps: &[StepAttention]) -> Self {
        let visual = steps
            .iter()
            .map(|s| s.visual.clone())
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty());
        Self {
            text: steps.iter().map(|s| s.text.clone()).collect(),
            visual,
            combined: steps.iter().map(|s| s.combined.clone()).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.combined.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Emitted ids, ending in EOS unless `max_len` was reached.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / length_penalty(len(ids), alpha)`.
    pub score: f64,
    pub attention: AttentionRecord,
}

struct Session<'m> {
    model: &'m Model,
    graph: Graph,
    params: ParamVars,
    encoded: EncodedVars,
    visual: Option<VisualVars>,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, src: &[usize], visual: Option<&[f64]>) -> Result<Self> {
        if model.needs_features() && visual.is_none() {
            return Err(Error::InvalidArgument("model needs visual features".into()));
        }
        let mut graph = Graph::new();
        let params = ParamVars::register(&mut graph, &model.params);
        let encoded = encode_var(&mut graph, &params, src)?;
        let visual = match (visual, &model.params.visual, params.visual) {
            (Some(feat), Some(vp), Some(vv)) if model.needs_features() => {
                let x = graph.leaf(Tensor::row_vector(feat.to_vec()));
                let (v, _) = visual_encode_var(&mut graph, &vv, vp, x, NormMode::Eval)?;
                Some(visual_context_var(&mut graph, &params, &encoded, v))
            }
            _ => None,
        };
        Ok(Self {
            model,
            graph,
            params,
            encoded,
            visual,
        })
    }

    fn initial(&mut self) -> StateVars {
        initial_state_var(&mut self.graph, &self.encoded)
    }

    fn step(&mut self, prev: usize, state: &StateVars) -> Result<(Vec<f64>, StateVars, StepAttention)> {
        let out = decode_step_var(
            &mut self.graph,
            &self.params,
            &self.model.config,
            &self.encoded,
            self.visual.as_ref(),
            prev,
            state,
        )?;
        let logits = self.graph.value(out.logits).data();
        let lse = log_sum_exp(logits);
        let log_probs = logits.iter().map(|l| l - lse).collect();
        Ok((log_probs, out.state, StepAttention::read(&self.graph, &out)))
    }
}

fn max_len(opts: &DecodeOptions, src_len: usize) -> Result<usize> {
    let len = opts.max_len.unwrap_or(2 * src_len + 10);
    if len < 1 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(len)
}

fn finish(ids: Vec<usize>, log_prob: f64, steps: &[StepAttention], alpha: f64) -> Result<Translation> {
    let score = log_prob / length_penalty(ids.len(), alpha)?;
    Ok(Translation {
        ids,
        log_prob,
        score,
        attention: AttentionRecord::from_steps(steps),
    })
}

/// Arg-max decoding from BOS until EOS or `max_len` tokens.
pub fn greedy_decode(model: &Model, src: &[usize], visual: Option<&[f64]>, opts: &DecodeOptions) -> Result<Translation> {
    let limit = max_len(opts, src.len())?;
    let mut session = Session::new(model, src, visual)?;
    let mut state = session.initial();
    let (mut ids, mut steps, mut log_prob) = (Vec::new(), Vec::new(), 0.0);
    let mut prev = BOS;
    while ids.len() < limit {
        let (lp, next, attn) = session.step(prev, &state)?;
        let best = argmax(&lp);
        log_prob += lp[best];
        ids.push(best);
        steps.push(attn);
        state = next;
        prev = best;
        if best == EOS {
            break;
        }
    }
    finish(ids, log_prob, &steps, opts.alpha)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
    state: StateVars,
    steps: Vec<StepAttention>,
}

/// Beam search ranking finished hypotheses by length-normalized log
/// probability. With `beam_size == 1` this coincides with greedy decoding.
pub fn beam_search(model: &Model, src: &[usize], visual: Option<&[f64]>, opts: &DecodeOptions) -> Result<Translation> {
    if opts.beam_size == 0 {
        return Err(Error::InvalidArgument("beam_size must be at least 1".into()));
    }
    let limit = max_len(opts, src.len())?;
    let width = opts.beam_size;
    let mut session = Session::new(model, src, visual)?;
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        state: session.initial(),
        steps: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..limit {
        let mut candidates = Vec::new();
        let mut expanded = Vec::with_capacity(alive.len());
        for (h, hyp) in alive.iter().enumerate() {
            let prev = hyp.ids.last().copied().unwrap_or(BOS);
            let (lp, state, attn) = session.step(prev, &hyp.state)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                candidates.push((hyp.log_prob + lp[tok], h, tok));
            }
            expanded.push((state, attn));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next = Vec::with_capacity(width);
        for &(log_prob, h, tok) in candidates.iter().take(width) {
            let parent = &alive[h];
            let mut ids = parent.ids.clone();
            ids.push(tok);
            let mut steps = parent.steps.clone();
            steps.push(expanded[h].1.clone());
            let hyp = Hypothesis {
                ids,
                log_prob,
                state: expanded[h].0,
                steps,
            };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if finished.len() >= width || alive.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        finished = alive;
    }

    let mut best: Option<Translation> = None;
    for hyp in finished {
        let t = finish(hyp.ids, hyp.log_prob, &hyp.steps, opts.alpha)?;
        if best.as_ref().is_none_or(|b| t.score > b.score) {
            best = Some(t);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Translates one source sentence (ids ending in EOS).
pub fn translate(model: &Model, src: &[usize], visual: Option<&[f64]>, opts: &DecodeOptions) -> Result<Translation> {
    beam_search(model, src, visual, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionConfig, FusionMode};
    use crate::seq2seq::ModelConfig;

    fn model(mode: FusionMode, seed: u64) -> Model {
        let cfg = ModelConfig {
            src_vocab_size: 9,
            tgt_vocab_size: 8,
            embedding_size: 4,
            hidden_size: 3,
            feature_dim: Some(5),
            fusion: FusionConfig::with_mode(mode),
        };
        let mut m = Model::new(cfg, seed).unwrap();
        for x in m.params.out_w.data_mut() {
            *x *= 20.0;
        }
        m
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..6 {
            let m = model(FusionMode::None, seed);
            let src = [4, 7, 5, EOS];
            let g = greedy_decode(&m, &src, None, &DecodeOptions::greedy()).unwrap();
            let b = beam_search(&m, &src, None, &DecodeOptions::greedy()).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn beam_score_not_worse_than_greedy() {
        for seed in 0..6 {
            let m = model(FusionMode::None, seed);
            let src = [4, 6, EOS];
            let opts = DecodeOptions { beam_size: 4, ..DecodeOptions::default() };
            let g = greedy_decode(&m, &src, None, &opts).unwrap();
            let b = translate(&m, &src, None, &opts).unwrap();
            if g.ids.last() == Some(&EOS) {
                assert!(b.score >= g.score - 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_on_simplex() {
        let m = model(FusionMode::MultimodalAttention, 3);
        let t = translate(&m, &[4, 5, 6, EOS], Some(&[0.5, -1.0, 2.0, 0.0, 1.0]), &DecodeOptions::default()).unwrap();
        assert_eq!(t.attention.steps(), t.ids.len());
        let visual = t.attention.visual.as_ref().unwrap();
        for rows in [&t.attention.text, visual, &t.attention.combined] {
            for row in rows {
                assert_eq!(row.len(), 4);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn visual_models_require_features() {
        let m = model(FusionMode::DecoderFusion, 0);
        assert!(translate(&m, &[4, EOS], None, &DecodeOptions::default()).is_err());
        let m = model(FusionMode::VsRegularizer, 0);
        assert!(translate(&m, &[4, EOS], None, &DecodeOptions::default()).is_ok());
    }

    #[test]
    fn max_len_is_respected() {
        let m = model(FusionMode::None, 1);
        let opts = DecodeOptions { max_len: Some(2), ..DecodeOptions::default() };
        assert!(translate(&m, &[4, EOS], None, &opts).unwrap().ids.len() <= 2);
        let opts = DecodeOptions { max_len: Some(0), ..DecodeOptions::default() };
        assert!(translate(&m, &[4, EOS], None, &opts).is_err());
    }
}
