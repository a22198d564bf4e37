//! Deterministic synthetic parallel corpora and feature matrices for offline
//! experiments.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::features::write_mmvf;
use super::{tokenize, RawParallel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SUBJECTS: &[(&str, &str)] = &[
    ("man", "homem"),
    ("woman", "mulher"),
    ("child", "criança"),
    ("chef", "cozinheiro"),
    ("teacher", "professor"),
    ("dog", "cão"),
    ("girl", "menina"),
    ("boy", "menino"),
];
const VERBS: &[(&str, &str)] = &[
    ("cuts", "corta"),
    ("washes", "lava"),
    ("paints", "pinta"),
    ("holds", "segura"),
    ("opens", "abre"),
    ("cooks", "cozinha"),
    ("shows", "mostra"),
    ("cleans", "limpa"),
];
const OBJECTS: &[(&str, &str)] = &[
    ("onion", "cebola"),
    ("door", "porta"),
    ("box", "caixa"),
    ("car", "carro"),
    ("fish", "peixe"),
    ("table", "mesa"),
    ("bowl", "tigela"),
    ("wall", "parede"),
];
const ADJECTIVES: &[(&str, &str)] = &[
    ("red", "vermelho"),
    ("small", "pequeno"),
    ("old", "velho"),
    ("new", "novo"),
    ("big", "grande"),
    ("white", "branco"),
];
const ADVERBS: &[(&str, &str)] = &[
    ("slowly", "devagar"),
    ("carefully", "cuidadosamente"),
    ("again", "novamente"),
    ("today", "hoje"),
];

/// How synthetic visual features are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureProfile {
    /// Sum of per-noun concept vectors plus small isotropic noise.
    Content { dim: usize },
    /// Zero-mean Gaussian whose covariance has the given eigenvalues in a
    /// random orthonormal basis.
    Spectrum(Vec<f64>),
}

impl FeatureProfile {
    /// One dominant direction with variance `dominant`, unit variance in the
    /// remaining `dim - 1` directions.
    pub fn common_direction(dim: usize, dominant: f64) -> Self {
        let mut ev = vec![1.0; dim];
        ev[0] = dominant;
        FeatureProfile::Spectrum(ev)
    }

    pub fn isotropic(dim: usize) -> Self {
        FeatureProfile::Spectrum(vec![1.0; dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub features: Tensor,
}

struct Sentence {
    src: String,
    tgt: String,
    nouns: [usize; 2],
}

fn sentence(rng: &mut ChaCha8Rng) -> Sentence {
    let s = rng.random_range(0..SUBJECTS.len());
    let (v_en, v_pt) = *VERBS.choose(rng).unwrap();
    let o = rng.random_range(0..OBJECTS.len());
    let definite = rng.random_bool(0.5);
    let adj = rng.random_bool(0.5).then(|| *ADJECTIVES.choose(rng).unwrap());
    let adv = rng.random_bool(0.4).then(|| *ADVERBS.choose(rng).unwrap());

    let (det_en, det_pt) = if definite { ("the", "o") } else { ("a", "um") };
    let mut en = vec!["The", SUBJECTS[s].0, v_en, det_en];
    let mut pt = vec!["O", SUBJECTS[s].1, v_pt, det_pt];
    if let Some((a_en, _)) = adj {
        en.push(a_en);
    }
    en.push(OBJECTS[o].0);
    pt.push(OBJECTS[o].1);
    if let Some((_, a_pt)) = adj {
        pt.push(a_pt);
    }
    if let Some((d_en, d_pt)) = adv {
        en.push(d_en);
        pt.push(d_pt);
    }
    Sentence {
        src: format!("{}.", en.join(" ")),
        tgt: format!("{}.", pt.join(" ")),
        nouns: [s, SUBJECTS.len() + o],
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random orthonormal basis (rows) via Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = gaussian_matrix(rng, 1, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// `n` samples whose population covariance has the given spectrum.
pub fn spectral_features(eigenvalues: &[f64], n: usize, seed: u64) -> Result<Tensor> {
    let dim = eigenvalues.len();
    if dim == 0 || n == 0 || eigenvalues.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::InvalidArgument("spectrum must be non-empty and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_rotation(&mut rng, dim);
    let scales: Vec<f64> = eigenvalues.iter().map(|l| l.sqrt()).collect();
    let mut data = vec![0.0; n * dim];
    for i in 0..n {
        let row = &mut data[i * dim..(i + 1) * dim];
        for (k, b) in basis.iter().enumerate() {
            let z: f64 = rng.sample::<f64, _>(StandardNormal) * scales[k];
            row.iter_mut().zip(b).for_each(|(x, y)| *x += z * y);
        }
    }
    Tensor::matrix(n, dim, data)
}

/// `n` distinct sentence pairs plus one feature row per pair.
pub fn toy_corpus(n: usize, profile: &FeatureProfile, seed: u64) -> Result<ToyCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(n);
    let mut attempts = 0;
    while sentences.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::InvalidArgument(format!("cannot draw {n} distinct toy sentences")));
        }
        let s = sentence(&mut rng);
        if seen.insert(s.src.clone()) {
            sentences.push(s);
        }
    }

    let features = match profile {
        FeatureProfile::Content { dim } => {
            let dim = *dim;
            let concepts = gaussian_matrix(&mut rng, SUBJECTS.len() + OBJECTS.len(), dim);
            let mut data = Vec::with_capacity(n * dim);
            for s in &sentences {
                for k in 0..dim {
                    let noise: f64 = rng.sample(StandardNormal);
                    let signal: f64 = s.nouns.iter().map(|&c| concepts[c * dim + k]).sum();
                    data.push(signal + 0.1 * noise);
                }
            }
            Tensor::matrix(n, dim, data)?
        }
        FeatureProfile::Spectrum(ev) => spectral_features(ev, n, rng.random())?,
    };

    Ok(ToyCorpus {
        src: sentences.iter().map(|s| s.src.clone()).collect(),
        tgt: sentences.iter().map(|s| s.tgt.clone()).collect(),
        features,
    })
}

impl ToyCorpus {
    /// Tokenized text with the features attached.
    pub fn to_raw(&self) -> Result<RawParallel> {
        let tok = |lines: &[String]| lines.iter().map(|l| tokenize(l)).collect();
        RawParallel::new(tok(&self.src), tok(&self.tgt), Some(self.features.clone()))
    }

    /// Writes `<stem>.en`, `<stem>.pt` and `<stem>.mmvf` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, lines) in [("en", &self.src), ("pt", &self.tgt)] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        write_mmvf(dir.join(format!("{stem}.mmvf")), &self.features)
    }
}
