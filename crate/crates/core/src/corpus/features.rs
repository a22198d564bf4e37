//! Visual feature matrices on disk.
//!
//! MMVF layout (little-endian): `b"MMVF"`, `u32` rows, `u32` cols, then
//! `rows * cols` `f32` values in row-major order. Values widen to `f64` on
//! load. A CSV fallback holds one comma-separated row per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MMVF_MAGIC: &[u8; 4] = b"MMVF";
const HEADER_LEN: usize = 12;

pub fn parse_mmvf(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MMVF_MAGIC {
        return Err(Error::NotMmvf);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptFeatures("truncated header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = n
        .checked_mul(d)
        .and_then(|k| k.checked_mul(4))
        .ok_or_else(|| Error::CorruptFeatures("header overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::CorruptFeatures(format!(
            "header declares {n}x{d} ({expected} bytes), payload has {} bytes",
            payload.len()
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::CorruptFeatures(format!("empty matrix {n}x{d}")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(n, d, data)
}

/// Serializes as MMVF; values are narrowed to `f32`.
pub fn encode_mmvf(features: &Tensor) -> Vec<u8> {
    let (n, d) = features.dims2();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(MMVF_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn write_mmvf(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mmvf(features)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv_features(text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::CorruptFeatures(format!("line {}: {e}", lineno + 1)))?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::CorruptFeatures(format!(
                    "line {} has {} values, expected {first}",
                    lineno + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::CorruptFeatures("no rows".into()));
    }
    Tensor::from_rows(&rows)
}

pub fn write_csv_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for i in 0..features.rows() {
        let row: Vec<String> = features.row(i).iter().map(|x| format!("{x:?}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a feature matrix; files ending in `.csv` use the CSV reader, all
/// others must be MMVF.
pub fn load_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::CorruptFeatures("CSV is not valid UTF-8".into()))?;
        parse_csv_features(&text)
    } else {
        parse_mmvf(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mmvf(n: u32, d: u32, payload: &[f32]) -> Vec<u8> {
        let mut b = b"MMVF".to_vec();
        b.extend_from_slice(&n.to_le_bytes());
        b.extend_from_slice(&d.to_le_bytes());
        for x in payload {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_two_by_three() {
        let t = parse_mmvf(&mmvf(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert_eq!(t.to_rows(), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = mmvf(1, 1, &[1.0]);
        b[0] = b'X';
        assert!(matches!(parse_mmvf(&b), Err(Error::NotMmvf)));
        assert!(matches!(parse_mmvf(&mmvf(2, 3, &[1.0; 5])), Err(Error::CorruptFeatures(_))));
        assert!(matches!(parse_mmvf(&mmvf(1, 1, &[1.0, 2.0])), Err(Error::CorruptFeatures(_))));
        assert!(matches!(parse_mmvf(b"MMVF\x01"), Err(Error::CorruptFeatures(_))));
    }

    #[test]
    fn write_then_read_is_bit_exact() {
        let t = Tensor::from_rows(&[vec![0.1f32 as f64, -3.5], vec![1e-30f32 as f64, 7.25]]).unwrap();
        let back = parse_mmvf(&encode_mmvf(&t)).unwrap();
        assert_eq!(back.data(), t.data());
        assert_eq!(encode_mmvf(&back), encode_mmvf(&t));
    }

    #[test]
    fn csv_fallback() {
        let t = parse_csv_features("1,2,3\n4, 5 ,6\n").unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert!(parse_csv_features("1,2\n3\n").is_err());
        assert!(parse_csv_features("1,x\n").is_err());
    }
}
