//! Embedding file formats and the metric dump.
//!
//! CSV: one record per line, `label,v1,...,vd`, label `?` for unlabeled, no header.
//!
//! Binary (`TEAMEMB1`): 8-byte magic, u32 record count, u32 dimension, then per
//! record a u32 label (`0xFFFFFFFF` = unlabeled) followed by `d` f32 values.
//! All integers and floats little-endian.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::data::{Dataset, EmbeddingVector, MetricMatrix};
use crate::error::{Result, TeamError};

pub const BINARY_MAGIC: &[u8; 8] = b"TEAMEMB1";
const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Csv,
    Binary,
}

impl FromStr for EmbeddingFormat {
    type Err = TeamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EmbeddingFormat::Csv),
            "bin" | "binary" => Ok(EmbeddingFormat::Binary),
            other => Err(TeamError::Parameter(format!("unknown embedding format `{other}`"))),
        }
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| TeamError::io(path, e))?;
    let mut reader = BufReader::new(file);
    match format {
        EmbeddingFormat::Csv => read_csv(reader),
        EmbeddingFormat::Binary => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes).map_err(|e| TeamError::io(path, e))?;
            decode_binary(&bytes)
        }
    }
}

pub fn save_embeddings(dataset: &Dataset, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
    save_records(dataset.records(), path, format)
}

/// Writes raw records after checking they form a valid dataset. Nothing is
/// written when validation fails.
pub fn save_records(records: &[EmbeddingVector], path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
    let path = path.as_ref();
    validate_records(records)?;
    let bytes = match format {
        EmbeddingFormat::Csv => encode_csv(records).into_bytes(),
        EmbeddingFormat::Binary => encode_binary(records)?,
    };
    let file = fs::File::create(path).map_err(|e| TeamError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| TeamError::io(path, e))?;
    w.flush().map_err(|e| TeamError::io(path, e))
}

fn validate_records(records: &[EmbeddingVector]) -> Result<()> {
    Dataset::new(records.to_vec()).map(|_| ())
}

pub fn read_csv(reader: impl BufRead) -> Result<Dataset> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TeamError::Format(format!("line {}: {e}", lineno + 1)))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default().trim();
        let label = if label_field == "?" {
            None
        } else {
            Some(label_field.parse::<u32>().map_err(|_| {
                TeamError::Format(format!("row {}: invalid label `{label_field}`", records.len()))
            })?)
        };
        let values = fields
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>()
                    .map_err(|_| TeamError::Format(format!("row {}: invalid value `{f}`", records.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingVector::new(values, label));
    }
    Dataset::new(records)
}

pub fn encode_csv(records: &[EmbeddingVector]) -> String {
    let mut out = String::new();
    for rec in records {
        match rec.label {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push('?'),
        }
        for v in &rec.values {
            out.push(',');
            out.push_str(&format_sig9(*v));
        }
        out.push('\n');
    }
    out
}

/// Decimal rendering with at most 9 significant digits.
fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-6..15).contains(&magnitude) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn encode_binary(records: &[EmbeddingVector]) -> Result<Vec<u8>> {
    let n = u32::try_from(records.len()).map_err(|_| TeamError::Format("too many records".into()))?;
    let d = records.first().map(|r| r.dim()).unwrap_or(0);
    let d32 = u32::try_from(d).map_err(|_| TeamError::Format("dimension too large".into()))?;
    let mut out = Vec::with_capacity(16 + records.len() * (4 + 4 * d));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for rec in records {
        out.extend_from_slice(&rec.label.unwrap_or(UNLABELED).to_le_bytes());
        for &v in &rec.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(TeamError::Format("no records".into()));
    }
    if bytes.len() < 16 || &bytes[..8] != BINARY_MAGIC {
        return Err(TeamError::Format("unknown magic or version (expected TEAMEMB1)".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let record_len = 4 + 4 * d;
    let expected = 16 + n * record_len;
    if bytes.len() != expected {
        return Err(TeamError::Format(format!(
            "binary size {} does not match header ({n} records x {d} dims = {expected} bytes)",
            bytes.len()
        )));
    }
    let records = bytes[16..]
        .chunks_exact(record_len)
        .map(|chunk| {
            let label = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            let values = chunk[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            EmbeddingVector::new(values, (label != UNLABELED).then_some(label))
        })
        .collect();
    Dataset::new(records)
}

/// Metric dump: u32 dimension followed by d*d row-major f64, little-endian.
pub fn encode_metric(metric: &MetricMatrix) -> Vec<u8> {
    let m = metric.as_matrix();
    let d = m.nrows();
    let mut out = Vec::with_capacity(4 + 8 * d * d);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for i in 0..d {
        for j in 0..d {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_metric(bytes: &[u8]) -> Result<MetricMatrix> {
    if bytes.len() < 4 {
        return Err(TeamError::Format("metric block too short".into()));
    }
    let d = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + 8 * d * d {
        return Err(TeamError::Format(format!("metric block size mismatch for d = {d}")));
    }
    let vals: Vec<f64> = bytes[4..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    MetricMatrix::new(DMatrix::from_row_slice(d, d, &vals))
}

pub fn save_metric(metric: &MetricMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_metric(metric)).map_err(|e| TeamError::io(path, e))
}

pub fn load_metric(path: impl AsRef<Path>) -> Result<MetricMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TeamError::io(path, e))?;
    decode_metric(&bytes)
}

/// Reads a prior matrix given as whitespace/comma separated rows of text.
pub fn load_prior_text(path: impl AsRef<Path>) -> Result<MetricMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TeamError::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| TeamError::Format(format!("prior: bad value `{t}`"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(TeamError::Format("prior must be a non-empty square matrix".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    MetricMatrix::new(DMatrix::from_row_slice(d, d, &flat))
        .map_err(|e| TeamError::Parameter(format!("prior rejected: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simple_csv() {
        let ds = read_csv("0,1.0,2.0\n1,3.0,4.0".as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.records()[0].label, Some(0));
        assert_eq!(ds.records()[1].values, vec![3.0, 4.0]);
    }

    #[test]
    fn csv_unlabeled_marker() {
        let ds = read_csv("?,1.5\n2,0.25\n".as_bytes()).unwrap();
        assert_eq!(ds.records()[0].label, None);
        assert_eq!(encode_csv(ds.records()), "?,1.5\n2,0.25\n");
    }

    #[test]
    fn empty_csv_is_rejected() {
        let err = read_csv("".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn csv_dimension_mismatch_names_row() {
        let err = read_csv("0,1,2\n0,1,2\n1,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn csv_non_finite_rejected() {
        assert!(read_csv("0,inf,1\n".as_bytes()).is_err());
        assert!(read_csv("0,NaN,1\n".as_bytes()).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.125), "-0.125");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456.789012), "123456.789");
        let tiny = format_sig9(1.234e-9);
        assert!((tiny.parse::<f64>().unwrap() - 1.234e-9).abs() < 1e-18);
    }

    #[test]
    fn binary_bad_magic() {
        let mut bytes = encode_binary(&[EmbeddingVector::labeled(vec![1.0], 0)]).unwrap();
        bytes[7] = b'2';
        let err = decode_binary(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn binary_size_formula() {
        let recs: Vec<_> = (0..10).map(|i| EmbeddingVector::labeled(vec![0.5; 7], i)).collect();
        assert_eq!(encode_binary(&recs).unwrap().len(), 16 + 10 * (4 + 7 * 4));
    }

    #[test]
    fn binary_layout_is_little_endian() {
        let bytes = encode_binary(&[EmbeddingVector::new(vec![1.0, -2.0], None)]).unwrap();
        assert_eq!(&bytes[..8], b"TEAMEMB1");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[0xFF; 4]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn metric_block_round_trip() {
        let m = MetricMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let bytes = encode_metric(&m);
        assert_eq!(bytes.len(), 4 + 32);
        assert_eq!(decode_metric(&bytes).unwrap(), m);
    }
}
