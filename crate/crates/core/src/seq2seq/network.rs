//! The model as operations on a [`Graph`]: used both for training (with
//! gradients) and for step-by-step inference.

use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::fusion::{bilinear_attention, bilinear_attention_var, modulate_attention_var, VisualEncoderVars};
use crate::numerics::{Graph, Tensor, Var};

use super::{Model, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Graph handles for every trainable tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub src_embedding: Var,
    pub tgt_embedding: Var,
    pub enc_fwd: LstmVars,
    pub enc_bwd: LstmVars,
    pub bridge_h_w: Var,
    pub bridge_h_b: Var,
    pub bridge_c_w: Var,
    pub bridge_c_b: Var,
    pub decoder: LstmVars,
    pub attn_w: Var,
    pub combine_w: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub visual: Option<VisualEncoderVars>,
    pub visual_attn_w: Option<Var>,
    all: Vec<Var>,
}

impl ParamVars {
    /// Adds one leaf per trainable tensor, in [`ModelParams::trainable`] order.
    pub fn register(g: &mut Graph, params: &ModelParams) -> Self {
        let all: Vec<Var> = params.trainable().into_iter().map(|(_, t)| g.leaf(t.clone())).collect();
        Self::from_vars(params, all)
    }

    /// Wraps existing handles, one per trainable tensor of `params` in
    /// [`ModelParams::trainable`] order.
    pub fn from_vars(params: &ModelParams, all: Vec<Var>) -> Self {
        assert_eq!(all.len(), params.trainable().len(), "one handle per trainable tensor");
        let lstm = |k: usize| LstmVars {
            w_ih: all[k],
            w_hh: all[k + 1],
            bias: all[k + 2],
        };
        let mut next = 19;
        let visual = params.visual.as_ref().map(|_| {
            next += 4;
            VisualEncoderVars {
                weight: all[next - 4],
                bias: all[next - 3],
                bn_scale: all[next - 2],
                bn_shift: all[next - 1],
            }
        });
        let visual_attn_w = params.visual_attn_w.as_ref().map(|_| all[next]);
        Self {
            src_embedding: all[0],
            tgt_embedding: all[1],
            enc_fwd: lstm(2),
            enc_bwd: lstm(5),
            bridge_h_w: all[8],
            bridge_h_b: all[9],
            bridge_c_w: all[10],
            bridge_c_b: all[11],
            decoder: lstm(12),
            attn_w: all[15],
            combine_w: all[16],
            out_w: all[17],
            out_b: all[18],
            visual,
            visual_attn_w,
            all,
        }
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// One LSTM step. `x_proj` is the already projected input `x W_ih`.
fn lstm_step(g: &mut Graph, p: &LstmVars, x_proj: Var, h: Var, c: Var) -> (Var, Var) {
    let hidden = g.dims(h).1;
    let rec = g.matmul(h, p.w_hh);
    let pre = g.add(x_proj, rec);
    let gates = g.add_row(pre, p.bias);
    let i = g.slice_cols(gates, 0, hidden);
    let i = g.sigmoid(i);
    let f = g.slice_cols(gates, hidden, hidden);
    let f = g.sigmoid(f);
    let cand = g.slice_cols(gates, 2 * hidden, hidden);
    let cand = g.tanh(cand);
    let o = g.slice_cols(gates, 3 * hidden, hidden);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_new = g.add(keep, write);
    let squashed = g.tanh(c_new);
    (g.mul(o, squashed), c_new)
}

pub fn lstm_cell(g: &mut Graph, p: &LstmVars, x: Var, h: Var, c: Var) -> (Var, Var) {
    let x_proj = g.matmul(x, p.w_ih);
    lstm_step(g, p, x_proj, h, c)
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// `S × 2H`, row `s` is `[forward_h(s) ; backward_h(s)]`.
    pub states: Var,
    pub states_t: Var,
    pub init_h: Var,
    pub init_c: Var,
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&bad) => Err(Error::InvalidTokenId(bad)),
        None => Ok(()),
    }
}

pub fn encode_var(g: &mut Graph, pv: &ParamVars, src: &[usize]) -> Result<EncodedVars> {
    if src.is_empty() {
        return Err(Error::EmptySource);
    }
    check_ids(src, g.dims(pv.src_embedding).0)?;
    let hidden = g.dims(pv.enc_fwd.w_hh).0;
    let len = src.len();
    let emb = g.gather(pv.src_embedding, src);

    let run = |g: &mut Graph, p: &LstmVars, order: &mut dyn Iterator<Item = usize>| {
        let proj = g.matmul(emb, p.w_ih);
        let mut h = g.leaf(Tensor::zeros(&[1, hidden]));
        let mut c = g.leaf(Tensor::zeros(&[1, hidden]));
        let mut hs = vec![h; len];
        for s in order {
            let x = g.row(proj, s);
            (h, c) = lstm_step(g, p, x, h, c);
            hs[s] = h;
        }
        (hs, c)
    };
    let (fwd, fwd_c) = run(g, &pv.enc_fwd, &mut (0..len));
    let (bwd, bwd_c) = run(g, &pv.enc_bwd, &mut (0..len).rev());

    let fwd_all = g.concat_rows(&fwd);
    let bwd_all = g.concat_rows(&bwd);
    let states = g.concat_cols(&[fwd_all, bwd_all]);
    let states_t = g.transpose(states);
    let final_h = g.concat_cols(&[fwd[len - 1], bwd[0]]);
    let final_c = g.concat_cols(&[fwd_c, bwd_c]);
    let init_h = g.linear(final_h, pv.bridge_h_w, Some(pv.bridge_h_b));
    let init_c = g.linear(final_c, pv.bridge_c_w, Some(pv.bridge_c_b));
    Ok(EncodedVars {
        states,
        states_t,
        init_h,
        init_c,
    })
}

/// Per-example visual context: the encoding and, under multimodal
/// attention, the step-invariant visual attention over source positions.
#[derive(Debug, Clone, Copy)]
pub struct VisualVars {
    pub encoding: Var,
    pub attention: Option<Var>,
}

pub fn visual_context_var(g: &mut Graph, pv: &ParamVars, enc: &EncodedVars, encoding: Var) -> VisualVars {
    let attention = pv
        .visual_attn_w
        .map(|w| bilinear_attention_var(g, encoding, w, enc.states_t));
    VisualVars { encoding, attention }
}

#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
    /// Previous attentional vector, fed to the next step's input.
    pub feed: Var,
}

pub fn initial_state_var(g: &mut Graph, enc: &EncodedVars) -> StateVars {
    let hidden = g.dims(enc.init_h).1;
    StateVars {
        h: enc.init_h,
        c: enc.init_c,
        feed: g.leaf(Tensor::zeros(&[1, hidden])),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub logits: Var,
    pub state: StateVars,
    pub text_attention: Var,
    pub visual_attention: Option<Var>,
    pub attention: Var,
}

pub fn decode_step_var(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    enc: &EncodedVars,
    visual: Option<&VisualVars>,
    prev_token: usize,
    state: &StateVars,
) -> Result<StepVars> {
    check_ids(&[prev_token], g.dims(pv.tgt_embedding).0)?;
    let fusion = &cfg.fusion;
    let visual = match (fusion.visual_at_inference(), visual) {
        (true, None) => return Err(Error::InvalidArgument("model needs visual features".into())),
        (_, v) => v,
    };
    let emb = g.gather(pv.tgt_embedding, &[prev_token]);
    let mut inputs = vec![emb];
    if fusion.decoder_fusion() {
        inputs.push(visual.expect("checked above").encoding);
    }
    inputs.push(state.feed);
    let x = g.concat_cols(&inputs);
    let (h, c) = lstm_cell(g, &pv.decoder, x, state.h, state.c);

    let text_attention = bilinear_attention_var(g, h, pv.attn_w, enc.states_t);
    let visual_attention = visual.and_then(|v| v.attention);
    let attention = match visual_attention {
        Some(a_tv) if fusion.multimodal_attention() => {
            modulate_attention_var(g, text_attention, a_tv, fusion.gamma_attention)?
        }
        _ => text_attention,
    };
    let context = g.matmul(attention, enc.states);
    let joined = g.concat_cols(&[context, h]);
    let mixed = g.matmul(joined, pv.combine_w);
    let feed = g.tanh(mixed);
    let logits = g.linear(feed, pv.out_w, Some(pv.out_b));
    Ok(StepVars {
        logits,
        state: StateVars { h, c, feed },
        text_attention,
        visual_attention,
        attention,
    })
}

/// Teacher-forced decoder pass over `tgt` (which ends in EOS). Returns the
/// `T × V` logits and each step's attention nodes.
pub fn teacher_forced_var(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    enc: &EncodedVars,
    visual: Option<&VisualVars>,
    tgt: &[usize],
) -> Result<(Var, Vec<StepVars>)> {
    if tgt.is_empty() {
        return Err(Error::EmptySentence);
    }
    let mut state = initial_state_var(g, enc);
    let mut prev = BOS;
    let mut steps = Vec::with_capacity(tgt.len());
    for &y in tgt {
        let step = decode_step_var(g, pv, cfg, enc, visual, prev, &state)?;
        state = step.state;
        prev = y;
        steps.push(step);
    }
    let rows: Vec<Var> = steps.iter().map(|s| s.logits).collect();
    Ok((g.concat_rows(&rows), steps))
}

/// Source annotations and the decoder's initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `S × 2H`.
    pub source_states: Tensor,
    pub final_state: (Vec<f64>, Vec<f64>),
}

impl EncoderOutput {
    pub fn initial_state(&self) -> DecoderState {
        let h = self.final_state.0.clone();
        DecoderState {
            feed: vec![0.0; h.len()],
            c: self.final_state.1.clone(),
            h,
        }
    }
}

pub fn encode(params: &ModelParams, src: &[usize]) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params);
    let enc = encode_var(&mut g, &pv, src)?;
    Ok(EncoderOutput {
        source_states: g.value(enc.states).clone(),
        final_state: (g.value(enc.init_h).data().to_vec(), g.value(enc.init_c).data().to_vec()),
    })
}

/// `softmax_s(h_tᵀ W_a h̄_s)`.
pub fn luong_attention_weights(h_t: &[f64], attn_w: &Tensor, source_states: &Tensor) -> Result<Vec<f64>> {
    bilinear_attention(h_t, attn_w, source_states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub feed: Vec<f64>,
}

/// Attention distributions of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub text: Vec<f64>,
    pub visual: Option<Vec<f64>>,
    pub combined: Vec<f64>,
}

impl StepAttention {
    pub(crate) fn read(g: &Graph, step: &StepVars) -> Self {
        Self {
            text: g.value(step.text_attention).data().to_vec(),
            visual: step.visual_attention.map(|v| g.value(v).data().to_vec()),
            combined: g.value(step.attention).data().to_vec(),
        }
    }
}

/// One decoder step outside any training graph. `visual` is the already
/// encoded visual vector.
pub fn decode_step(
    model: &Model,
    encoded: &EncoderOutput,
    visual: Option<&[f64]>,
    prev_token: usize,
    state: &DecoderState,
) -> Result<(Vec<f64>, DecoderState, StepAttention)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params);
    let states = g.leaf(encoded.source_states.clone());
    let states_t = g.transpose(states);
    let leaf = |g: &mut Graph, v: &[f64]| g.leaf(Tensor::row_vector(v.to_vec()));
    let enc = EncodedVars {
        states,
        states_t,
        init_h: leaf(&mut g, &encoded.final_state.0),
        init_c: leaf(&mut g, &encoded.final_state.1),
    };
    let vis = visual.map(|v| {
        let e = leaf(&mut g, v);
        visual_context_var(&mut g, &pv, &enc, e)
    });
    let st = StateVars {
        h: leaf(&mut g, &state.h),
        c: leaf(&mut g, &state.c),
        feed: leaf(&mut g, &state.feed),
    };
    let step = decode_step_var(&mut g, &pv, &model.config, &enc, vis.as_ref(), prev_token, &st)?;
    let read = |v: Var| g.value(v).data().to_vec();
    let next = DecoderState {
        h: read(step.state.h),
        c: read(step.state.c),
        feed: read(step.state.feed),
    };
    Ok((read(step.logits), next, StepAttention::read(&g, &step)))
}
