//! Text preprocessing, vocabularies and aligned (source, target, feature)
//! corpora.

pub mod features;
pub mod text;
pub mod toy;

use std::fs;
use std::path::Path;

pub use features::{encode_mmvf, load_features, parse_csv_features, parse_mmvf, write_csv_features, write_mmvf};
pub use text::{tokenize, Vocab, BOS, EOS, PAD, UNK, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One aligned training or evaluation example. `src` and `tgt` end in EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub visual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    examples: Vec<Example>,
    feature_dim: Option<usize>,
}

impl ParallelCorpus {
    /// Either every example carries a feature vector of one common size, or
    /// none does.
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let feature_dim = examples.first().and_then(|e| e.visual.as_ref().map(Vec::len));
        for (i, ex) in examples.iter().enumerate() {
            if ex.visual.as_ref().map(Vec::len) != feature_dim {
                return Err(Error::Misaligned(format!(
                    "example {i} feature dimension differs from example 0"
                )));
            }
        }
        Ok(Self {
            examples,
            feature_dim,
        })
    }

    pub fn encode(raw: &RawParallel, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Self> {
        let examples = raw
            .src
            .iter()
            .zip(&raw.tgt)
            .enumerate()
            .map(|(i, (s, t))| Example {
                src: src_vocab.encode(s),
                tgt: tgt_vocab.encode(t),
                visual: raw.features.as_ref().map(|f| f.row(i).to_vec()),
            })
            .collect();
        Self::new(examples)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }
}

/// Tokenized parallel text with optional row-aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParallel {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub features: Option<Tensor>,
}

impl RawParallel {
    pub fn new(src: Vec<Vec<String>>, tgt: Vec<Vec<String>>, features: Option<Tensor>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Misaligned(format!(
                "{} source lines vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        if let Some(f) = &features {
            if f.rows() != src.len() {
                return Err(Error::Misaligned(format!(
                    "{} sentences vs {} feature rows",
                    src.len(),
                    f.rows()
                )));
            }
        }
        Ok(Self { src, tgt, features })
    }

    pub fn load(
        src: impl AsRef<Path>,
        tgt: impl AsRef<Path>,
        feats: Option<&Path>,
    ) -> Result<Self> {
        let features = feats.map(load_features).transpose()?;
        Self::new(read_tokenized(src)?, read_tokenized(tgt)?, features)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn read_tokenized(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn misaligned_counts_are_errors() {
        let f = Tensor::zeros(&[3, 2]);
        let r = RawParallel::new(vec![words("a"), words("b")], vec![words("x"), words("y")], Some(f));
        assert!(matches!(r, Err(Error::Misaligned(_))));
        let r = RawParallel::new(vec![words("a")], vec![], None);
        assert!(matches!(r, Err(Error::Misaligned(_))));
    }

    #[test]
    fn encode_aligns_features() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let raw = RawParallel::new(vec![words("a b"), words("b")], vec![words("x"), words("y y")], Some(f)).unwrap();
        let sv = Vocab::build(&raw.src, 1).unwrap();
        let tv = Vocab::build(&raw.tgt, 1).unwrap();
        let c = ParallelCorpus::encode(&raw, &sv, &tv).unwrap();
        assert_eq!(c.feature_dim(), Some(2));
        assert_eq!(c.examples()[1].visual.as_deref(), Some(&[3.0, 4.0][..]));
        assert_eq!(c.examples()[1].tgt, vec![tv.id("y"), tv.id("y"), EOS]);
    }

    #[test]
    fn mixed_feature_presence_rejected() {
        let ex = |v: Option<Vec<f64>>| Example { src: vec![EOS], tgt: vec![EOS], visual: v };
        assert!(ParallelCorpus::new(vec![ex(Some(vec![1.0])), ex(None)]).is_err());
        assert!(ParallelCorpus::new(vec![ex(Some(vec![1.0])), ex(Some(vec![1.0, 2.0]))]).is_err());
    }
}
