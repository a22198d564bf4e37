//! Scalar re-implementations and closed forms checked against the library.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmt_core::corpus::toy::spectral_features;
use mmt_core::corpus::BOS;
use mmt_core::diagnostics::{export_attention, pca_variance_report};
use mmt_core::fusion::{FusionConfig, FusionMode};
use mmt_core::losses::{sinkhorn_divergence, SinkhornConfig};
use mmt_core::numerics::{pca_with_route, Graph, PcaRoute, Tensor};
use mmt_core::seq2seq::network::{lstm_cell, LstmVars};
use mmt_core::seq2seq::{decode_step, encode, greedy_decode, DecodeOptions, Model, ModelConfig};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn one_dimensional_lstm_cell() {
    // Every gate pre-activation is 0.5: c = σ(.5)·tanh(.5), h = σ(.5)·tanh(c).
    let c_want = sigmoid(0.5) * 0.5f64.tanh();
    let h_want = sigmoid(0.5) * c_want.tanh();
    assert!((c_want - 0.28765).abs() < 1e-5);
    assert!((h_want - 0.17427).abs() < 1e-5);

    let mut g = Graph::new();
    let p = LstmVars {
        w_ih: g.leaf(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap()),
        w_hh: g.leaf(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap()),
        bias: g.leaf(Tensor::row_vector(vec![0.0; 4])),
    };
    let x = g.leaf(Tensor::row_vector(vec![1.0]));
    let h0 = g.leaf(Tensor::row_vector(vec![0.0]));
    let c0 = g.leaf(Tensor::row_vector(vec![0.0]));
    let (h, c) = lstm_cell(&mut g, &p, x, h0, c0);
    assert!((g.scalar(h) - h_want).abs() < 1e-15);
    assert!((g.scalar(c) - c_want).abs() < 1e-15);
}

// Plain-loop reference model.

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2();
    assert_eq!(x.len(), r);
    (0..c).map(|j| (0..r).map(|i| x[i] * w.get(i, j)).sum()).collect()
}

fn lstm(x: &[f64], h: &[f64], c: &[f64], w_ih: &Tensor, w_hh: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let a = vec_mat(x, w_ih);
    let r = vec_mat(h, w_hh);
    let z: Vec<f64> = (0..4 * n).map(|k| a[k] + r[k] + b.data()[k]).collect();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[n + k]);
        let g = z[2 * n + k].tanh();
        let o = sigmoid(z[3 * n + k]);
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

struct Reference {
    states: Vec<Vec<f64>>,
    h: Vec<f64>,
    c: Vec<f64>,
    feed: Vec<f64>,
}

fn reference_encode(m: &Model, src: &[usize]) -> Reference {
    let p = &m.params;
    let hid = m.config.hidden_size;
    let emb = |id: usize| p.src_embedding.row(id).to_vec();
    let s = src.len();
    let (mut fh, mut bh) = (vec![vec![0.0; hid]; s], vec![vec![0.0; hid]; s]);
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    for t in 0..s {
        (h, c) = lstm(&emb(src[t]), &h, &c, &p.enc_fwd.w_ih, &p.enc_fwd.w_hh, &p.enc_fwd.bias);
        fh[t] = h.clone();
    }
    let fwd_c = c;
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    for t in (0..s).rev() {
        (h, c) = lstm(&emb(src[t]), &h, &c, &p.enc_bwd.w_ih, &p.enc_bwd.w_hh, &p.enc_bwd.bias);
        bh[t] = h.clone();
    }
    let states: Vec<Vec<f64>> = (0..s).map(|t| [fh[t].clone(), bh[t].clone()].concat()).collect();
    let final_h = [fh[s - 1].clone(), bh[0].clone()].concat();
    let final_c = [fwd_c, c].concat();
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        vec_mat(x, w).iter().zip(b.data()).map(|(a, b)| a + b).collect()
    };
    Reference {
        states,
        h: affine(&final_h, &p.bridge_h_w, &p.bridge_h_b),
        c: affine(&final_c, &p.bridge_c_w, &p.bridge_c_b),
        feed: vec![0.0; hid],
    }
}

fn reference_step(m: &Model, r: &mut Reference, prev: usize) -> Vec<f64> {
    let p = &m.params;
    let x = [p.tgt_embedding.row(prev).to_vec(), r.feed.clone()].concat();
    let (h, c) = lstm(&x, &r.h, &r.c, &p.decoder.w_ih, &p.decoder.w_hh, &p.decoder.bias);
    let proj = vec_mat(&h, &p.attn_w);
    let scores: Vec<f64> = r
        .states
        .iter()
        .map(|st| st.iter().zip(&proj).map(|(a, b)| a * b).sum())
        .collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
    let attn: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
    let width = r.states[0].len();
    let context: Vec<f64> = (0..width)
        .map(|j| attn.iter().zip(&r.states).map(|(a, st)| a * st[j]).sum())
        .collect();
    let joined = [context, h.clone()].concat();
    let feed: Vec<f64> = vec_mat(&joined, &p.combine_w).iter().map(|v| v.tanh()).collect();
    let logits = vec_mat(&feed, &p.out_w).iter().zip(p.out_b.data()).map(|(a, b)| a + b).collect();
    r.h = h;
    r.c = c;
    r.feed = feed;
    logits
}

#[test]
fn decoder_steps_match_scalar_reference() {
    let cfg = ModelConfig {
        src_vocab_size: 6,
        tgt_vocab_size: 5,
        embedding_size: 3,
        hidden_size: 2,
        feature_dim: None,
        fusion: FusionConfig::default(),
    };
    let model = Model::new(cfg, 0).unwrap();
    let src = [4, 5, 4, 2];
    let tgt = [3, 4, 4, 2];

    let enc = encode(&model.params, &src).unwrap();
    let mut reference = reference_encode(&model, &src);
    for (s, row) in reference.states.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((enc.source_states.get(s, j) - v).abs() < 1e-12);
        }
    }
    let mut state = enc.initial_state();
    let mut prev = BOS;
    for &y in &tgt {
        let (logits, next, _) = decode_step(&model, &enc, None, prev, &state).unwrap();
        let want = reference_step(&model, &mut reference, prev);
        for (a, b) in logits.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{logits:?} vs {want:?}");
        }
        state = next;
        prev = y;
    }
}

#[test]
fn zero_gamma_attention_reproduces_text_model() {
    let base = ModelConfig {
        src_vocab_size: 8,
        tgt_vocab_size: 7,
        embedding_size: 4,
        hidden_size: 3,
        feature_dim: None,
        fusion: FusionConfig::default(),
    };
    let mut fusion = FusionConfig::with_mode(FusionMode::MultimodalAttention);
    fusion.gamma_attention = 0.0;
    let multi = ModelConfig {
        feature_dim: Some(5),
        fusion,
        ..base.clone()
    };
    let a = Model::new(base, 3).unwrap();
    let b = Model::new(multi, 3).unwrap();
    let v = [0.3, -1.0, 0.2, 0.9, 0.0];
    let src = [5, 6, 7, 2];
    let ga = greedy_decode(&a, &src, None, &DecodeOptions::greedy()).unwrap();
    let gb = greedy_decode(&b, &src, Some(&v), &DecodeOptions::greedy()).unwrap();
    assert_eq!(ga.ids, gb.ids);
    assert_eq!(ga.attention.combined, gb.attention.combined);
    assert_eq!(gb.attention.text, gb.attention.combined);
}

/// Cyclic Jacobi rotations; slow but independent of the library solver.
fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn sample_covariance(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = x.dims2();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| (0..n).map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect()
}

#[test]
fn pca_matches_jacobi_on_both_routes() {
    for (n, d, seed) in [(40, 6, 1), (7, 12, 2), (25, 25, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let want = jacobi_eigenvalues(&sample_covariance(&x));
        for route in [PcaRoute::Covariance, PcaRoute::Gram] {
            let got = pca_with_route(&x, route).unwrap();
            for (a, b) in got.eigenvalues.iter().zip(&want) {
                assert!((a - b.max(0.0)).abs() < 1e-8, "{route:?} {n}x{d}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn pca_sampling_oracles() {
    let x = spectral_features(&[9.0, 1.0], 10_000, 11).unwrap();
    let r = pca_variance_report(&x, 100).unwrap();
    assert!((r.explained[0] - 0.9).abs() < 0.02);

    let iso = spectral_features(&[1.0; 64], 20_000, 12).unwrap();
    let r = pca_variance_report(&iso, 100).unwrap();
    assert!((r.explained[0] - 1.0 / 64.0).abs() < 0.005);
    // Roughly linear growth of the cumulative share.
    assert!((r.cumulative_at(20).unwrap() - 20.0 / 64.0).abs() < 0.03);
}

#[test]
fn pca_is_rotation_invariant() {
    let x = spectral_features(&[5.0, 3.0, 2.0, 0.5], 200, 4).unwrap();
    let theta: f64 = 0.7;
    let (c, s) = (theta.cos(), theta.sin());
    let rows: Vec<Vec<f64>> = x
        .to_rows()
        .into_iter()
        .map(|r| vec![c * r[0] - s * r[2], r[1], s * r[0] + c * r[2], r[3]])
        .collect();
    let a = pca_with_route(&x, PcaRoute::Covariance).unwrap();
    let b = pca_with_route(&Tensor::from_rows(&rows).unwrap(), PcaRoute::Covariance).unwrap();
    for (p, q) in a.eigenvalues.iter().zip(&b.eigenvalues) {
        assert!((p - q).abs() < 1e-8);
    }
}

#[test]
fn zero_gamma_heatmaps_equal_text_attention() {
    let mut fusion = FusionConfig::with_mode(FusionMode::MultimodalAttention);
    fusion.gamma_attention = 0.0;
    let cfg = ModelConfig {
        feature_dim: Some(5),
        fusion,
        ..common::tiny_config(FusionMode::None)
    };
    let model = Model::new(cfg, 9).unwrap();
    let t = greedy_decode(&model, &[4, 5, 2], Some(&[1.0, 0.0, -1.0, 0.5, 0.2]), &DecodeOptions::greedy()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let src: Vec<String> = ["a", "b", "⟨eos⟩"].iter().map(|s| s.to_string()).collect();
    let tgt: Vec<String> = (0..t.ids.len()).map(|i| format!("y{i}")).collect();
    export_attention(&t.attention, &src, &tgt, dir.path(), "s").unwrap();
    let text = std::fs::read_to_string(dir.path().join("s_text.csv")).unwrap();
    let combined = std::fs::read_to_string(dir.path().join("s_combined.csv")).unwrap();
    assert_eq!(text, combined);
    for line in text.lines().skip(1) {
        let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    assert_eq!(text.lines().count(), t.ids.len() + 1);
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_divergence_properties(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, d in 1usize..4) {
        let cfg = SinkhornConfig { blur: 0.5, max_iters: 2000, tol: 1e-12 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cloud(&mut rng, n, d);
        let y = cloud(&mut rng, m, d);
        let xy = sinkhorn_divergence(&x, &y, &cfg).unwrap();
        let yx = sinkhorn_divergence(&y, &x, &cfg).unwrap();
        prop_assert!((xy.value - yx.value).abs() < 1e-9);
        prop_assert!(xy.value >= -1e-9);
        prop_assert!(sinkhorn_divergence(&x, &x, &cfg).unwrap().value.abs() < 1e-6);
    }
}
