//! Variance-explained reports for feature matrices and attention heatmap
//! exports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics::{pca, Tensor};
use crate::seq2seq::AttentionRecord;

pub const DEFAULT_TOP_K: usize = 100;
pub const CUMULATIVE_AT: [usize; 4] = [10, 20, 50, 100];

/// Leading explained-variance ratios of a centered feature matrix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PcaReport {
    pub n_samples: usize,
    pub total_dim: usize,
    /// Non-increasing, `top_k` entries.
    pub explained: Vec<f64>,
    /// Sum of the first `k` ratios for each `k` in [`CUMULATIVE_AT`], with `k`
    /// clamped to the number of reported components.
    pub cumulative: [(usize, f64); 4],
}

impl PcaReport {
    pub fn cumulative_at(&self, k: usize) -> Option<f64> {
        self.cumulative.iter().find(|(key, _)| *key == k).map(|(_, v)| *v)
    }

    /// JSON with a fixed key order and 17 significant digits per float.
    pub fn to_json(&self) -> String {
        let num = |x: f64| format!("{x:.16e}");
        let explained: Vec<String> = self.explained.iter().map(|&x| num(x)).collect();
        let cumulative: Vec<String> = self
            .cumulative
            .iter()
            .map(|(k, v)| format!("\"{k}\": {}", num(*v)))
            .collect();
        format!(
            "{{\"n_samples\": {}, \"total_dim\": {}, \"explained\": [{}], \"cumulative\": {{{}}}}}\n",
            self.n_samples,
            self.total_dim,
            explained.join(", "),
            cumulative.join(", ")
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            n_samples: usize,
            total_dim: usize,
            explained: Vec<f64>,
            cumulative: std::collections::BTreeMap<String, f64>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        let mut cumulative = [(0, 0.0); 4];
        for (slot, k) in cumulative.iter_mut().zip(CUMULATIVE_AT) {
            let v = raw
                .cumulative
                .get(&k.to_string())
                .ok_or_else(|| Error::InvalidArgument(format!("report lacks cumulative[{k}]")))?;
            *slot = (k, *v);
        }
        Ok(Self {
            n_samples: raw.n_samples,
            total_dim: raw.total_dim,
            explained: raw.explained,
            cumulative,
        })
    }
}

/// PCA of `features` (rows are samples) truncated to `top_k` components.
/// `top_k` is clamped to `min(n − 1, d)`, the most a centered sample can
/// carry.
pub fn pca_variance_report(features: &Tensor, top_k: usize) -> Result<PcaReport> {
    let (n, d) = features.dims2();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be positive".into()));
    }
    let spectrum = pca(features)?;
    let k = top_k.min(n - 1).min(d);
    let explained = spectrum.explained_ratio[..k].to_vec();
    let mut cumulative = [(0, 0.0); 4];
    for (slot, at) in cumulative.iter_mut().zip(CUMULATIVE_AT) {
        *slot = (at, explained[..at.min(k)].iter().sum());
    }
    Ok(PcaReport {
        n_samples: n,
        total_dim: d,
        explained,
        cumulative,
    })
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|x| x.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<stem>_text.csv` and, when the record has visual attention,
/// `<stem>_visual.csv` and `<stem>_combined.csv` into `dir`, plus
/// `<stem>_target.txt` with one target token per step. Each CSV has the
/// source tokens as header and one row of weights per target step.
pub fn export_attention(
    record: &AttentionRecord,
    src_tokens: &[String],
    tgt_tokens: &[String],
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let steps = record.steps();
    if tgt_tokens.len() != steps || record.text.len() != steps {
        return Err(Error::shape(format!(
            "{} target tokens for {steps} attention steps",
            tgt_tokens.len()
        )));
    }
    let mut parts = vec![("text", &record.text)];
    if let Some(v) = &record.visual {
        parts.push(("visual", v));
        parts.push(("combined", &record.combined));
    }
    for (name, rows) in &parts {
        if let Some(bad) = rows.iter().find(|r| r.len() != src_tokens.len()) {
            return Err(Error::shape(format!(
                "{name} attention row has {} weights for {} source tokens",
                bad.len(),
                src_tokens.len()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(parts.len() + 1);
    for (name, rows) in parts {
        let path = dir.join(format!("{stem}_{name}.csv"));
        write_csv(&path, src_tokens, rows)?;
        written.push(path);
    }
    let path = dir.join(format!("{stem}_target.txt"));
    let mut text = tgt_tokens.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::spectral_features;

    #[test]
    fn rank_one_data() {
        let dir = [0.3, -0.5, 0.8, 0.1, 0.0];
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let s = ((i * 37 % 11) as f64) - 4.3;
                dir.iter().map(|d| s * d).collect()
            })
            .collect();
        let r = pca_variance_report(&Tensor::from_rows(&rows).unwrap(), 100).unwrap();
        assert_eq!(r.explained.len(), 5);
        assert!((r.explained[0] - 1.0).abs() < 1e-9);
        assert!(r.explained[1..].iter().all(|&x| x.abs() < 1e-9));
        assert!((r.cumulative_at(100).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn common_direction_cumulative() {
        let mut ev = vec![1.0; 64];
        ev[0] = 100.0;
        let x = spectral_features(&ev, 4000, 5).unwrap();
        let r = pca_variance_report(&x, 100).unwrap();
        assert!((r.cumulative_at(10).unwrap() - 109.0 / 163.0).abs() < 0.03);
        let iso = pca_variance_report(&spectral_features(&[1.0; 64], 4000, 5).unwrap(), 100).unwrap();
        assert!((iso.explained[0] - 1.0 / 64.0).abs() < 0.01);
    }

    #[test]
    fn cumulative_is_prefix_sum() {
        let x = spectral_features(&(1..=40).map(|i| i as f64).collect::<Vec<_>>(), 300, 2).unwrap();
        let r = pca_variance_report(&x, 30).unwrap();
        assert_eq!(r.explained.len(), 30);
        for (k, v) in r.cumulative {
            let want: f64 = r.explained[..k.min(30)].iter().sum();
            assert!((v - want).abs() < 1e-12);
        }
        assert!(r.explained.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn json_round_trip_keeps_order() {
        let x = spectral_features(&[4.0, 2.0, 1.0], 50, 9).unwrap();
        let r = pca_variance_report(&x, 100).unwrap();
        let json = r.to_json();
        assert!(json.starts_with("{\"n_samples\": 50, \"total_dim\": 3, \"explained\": ["));
        assert!(json.find("\"10\"").unwrap() < json.find("\"100\"").unwrap());
        assert_eq!(PcaReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn too_few_samples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca_variance_report(&x, 10), Err(Error::InsufficientSamples { .. })));
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn export_writes_one_csv_per_component() {
        let dir = tempfile::tempdir().unwrap();
        let rec = AttentionRecord {
            text: vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]],
            visual: Some(vec![vec![1.0, 0.0]; 3]),
            combined: vec![vec![0.28, 0.72], vec![0.64, 0.36], vec![0.55, 0.45]],
        };
        let files = export_attention(&rec, &toks("a b"), &toks("x y z"), dir.path(), "s0").unwrap();
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "csv").count(), 3);
        let text = fs::read_to_string(dir.path().join("s0_text.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["a,b", "0.2,0.8", "0.6,0.4", "0.5,0.5"]);

        let base = AttentionRecord { visual: None, ..rec.clone() };
        let files = export_attention(&base, &toks("a b"), &toks("x y z"), dir.path(), "s1").unwrap();
        assert_eq!(files.len(), 2);
        assert!(export_attention(&rec, &toks("a b c"), &toks("x y z"), dir.path(), "s2").is_err());
    }
}
