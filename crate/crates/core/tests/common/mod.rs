#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmt_core::corpus::Example;
use mmt_core::fusion::{FusionConfig, FusionMode};
use mmt_core::seq2seq::{Model, ModelConfig};

pub const MODES: [FusionMode; 4] = [
    FusionMode::None,
    FusionMode::DecoderFusion,
    FusionMode::MultimodalAttention,
    FusionMode::VsRegularizer,
];

pub fn tiny_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        src_vocab_size: 8,
        tgt_vocab_size: 7,
        embedding_size: 4,
        hidden_size: 3,
        feature_dim: Some(5),
        fusion: FusionConfig::with_mode(mode),
    }
}

/// Model with weights drawn from `[-scale, scale]`, BN affine terms kept at
/// their initial values.
pub fn tiny_model(mode: FusionMode, seed: u64, scale: f64) -> Model {
    let mut model = Model::new(tiny_config(mode), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params.trainable_mut() {
        if name.starts_with("bn_") {
            continue;
        }
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    }
    model
}

/// Two short examples with ids valid for [`tiny_config`]; targets end in EOS.
pub fn tiny_examples(seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = |src_len: usize, tgt_len: usize| Example {
        src: (0..src_len).map(|_| rng.random_range(4..8)).chain([2]).collect(),
        tgt: (0..tgt_len).map(|_| rng.random_range(4..7)).chain([2]).collect(),
        visual: Some((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()),
    };
    vec![ex(3, 4), ex(2, 3)]
}
