// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats shared by the pipeline stages.
//!
//! Binary containers (all integers and floats little-endian, regardless of
//! host):
//!
//! ```text
//! offset  size  field
//!      0     4  magic: "ACTV" activations | "LBLV" labels | "LAYR" layer
//!      4     4  version: u32 = 1
//!      8     8  rows: u64
//!     16     8  cols: u64
//!     24     …  payload
//! ```
//!
//! - `ACTV`: `rows · cols` f64 values, row-major.
//! - `LBLV`: `rows · cols` bytes, each 0 or 1, row-major.
//! - `LAYR`: `rows = d_out`, `cols = d_in`; the `d_out · d_in` weight values
//!   row-major, followed by the `d_out` bias values.
//!
//! Text documents (transforms and moment estimates) are JSON objects whose
//! floating-point numbers are written with 17 significant digits, which is
//! enough for every finite `f64` to survive a write/read cycle bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::moments::{ConceptLabels, MomentEstimate};
use crate::transforms::{AffineTransform, LinearLayer, Mode};

pub const ACTIVATION_MAGIC: [u8; 4] = *b"ACTV";
pub const LABEL_MAGIC: [u8; 4] = *b"LBLV";
pub const LAYER_MAGIC: [u8; 4] = *b"LAYR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn encode_header(magic: [u8; 4], rows: usize, cols: usize, payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out
}

/// Validates the header and payload length, returning `(rows, cols, payload)`.
fn decode_container(bytes: &[u8], magic: [u8; 4], element_size: u64, extra_elements: impl Fn(u64, u64) -> Option<u64>) -> Result<(usize, usize, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let got = payload.len() as u64;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| extra_elements(rows, n))
        .and_then(|n| n.checked_mul(element_size));
    let Some(expected) = expected else {
        return Err(Error::TruncatedPayload {
            expected: u64::MAX,
            got,
        });
    };
    if got < expected {
        return Err(Error::TruncatedPayload { expected, got });
    }
    if got > expected {
        return Err(Error::TrailingData {
            extra: got - expected,
        });
    }
    let rows = usize::try_from(rows).map_err(|_| Error::TruncatedPayload { expected, got })?;
    let cols = usize::try_from(cols).map_err(|_| Error::TruncatedPayload { expected, got })?;
    Ok((rows, cols, payload))
}

fn decode_f64s(payload: &[u8], what: &str) -> Result<Vec<f64>> {
    payload
        .chunks_exact(8)
        .enumerate()
        .map(|(i, chunk)| {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteValue(format!("{what} element {i}")))
            }
        })
        .collect()
}

fn push_row_major(out: &mut Vec<u8>, m: &Matrix) {
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_activations(m: &Matrix) -> Result<Vec<u8>> {
    crate::linalg::ensure_finite(m, "activations")?;
    let (rows, cols) = m.shape();
    let mut out = encode_header(ACTIVATION_MAGIC, rows, cols, rows * cols * 8);
    push_row_major(&mut out, m);
    Ok(out)
}

pub fn decode_activations(bytes: &[u8]) -> Result<Matrix> {
    let (rows, cols, payload) = decode_container(bytes, ACTIVATION_MAGIC, 8, |_, n| Some(n))?;
    let values = decode_f64s(payload, "activation")?;
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn write_activations(m: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &encode_activations(m)?)
}

pub fn read_activations(path: &Path) -> Result<Matrix> {
    decode_activations(&read_file(path)?)
}

pub fn encode_labels(labels: &ConceptLabels) -> Vec<u8> {
    let bytes = labels.as_bytes();
    let mut out = encode_header(LABEL_MAGIC, labels.samples(), labels.label_dim(), bytes.len());
    out.extend_from_slice(bytes);
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<ConceptLabels> {
    let (rows, cols, payload) = decode_container(bytes, LABEL_MAGIC, 1, |_, n| Some(n))?;
    ConceptLabels::from_bytes(rows, cols, payload.to_vec())
}

pub fn write_labels(labels: &ConceptLabels, path: &Path) -> Result<()> {
    write_file(path, &encode_labels(labels))
}

pub fn read_labels(path: &Path) -> Result<ConceptLabels> {
    decode_labels(&read_file(path)?)
}

pub fn encode_layer(layer: &LinearLayer) -> Result<Vec<u8>> {
    crate::linalg::ensure_finite(&layer.weight, "weight")?;
    let (rows, cols) = layer.weight.shape();
    let mut out = encode_header(LAYER_MAGIC, rows, cols, (rows * cols + rows) * 8);
    push_row_major(&mut out, &layer.weight);
    for v in layer.bias.iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue("bias".into()));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_layer(bytes: &[u8]) -> Result<LinearLayer> {
    let (rows, cols, payload) =
        decode_container(bytes, LAYER_MAGIC, 8, |rows, n| n.checked_add(rows))?;
    let values = decode_f64s(payload, "layer")?;
    let (weight, bias) = values.split_at(rows * cols);
    LinearLayer::new(Matrix::from_row_slice(rows, cols, weight), Vector::from_row_slice(bias))
}

pub fn write_layer(layer: &LinearLayer, path: &Path) -> Result<()> {
    write_file(path, &encode_layer(layer)?)
}

pub fn read_layer(path: &Path) -> Result<LinearLayer> {
    decode_layer(&read_file(path)?)
}

/// Import activations from CSV with a header row `x0,x1,…,x{d−1}`.
pub fn read_activations_csv(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedDocument(format!("csv header: {e}")))?
        .clone();
    for (j, h) in headers.iter().enumerate() {
        if h.trim() != format!("x{j}") {
            return Err(Error::MalformedDocument(format!(
                "csv column {j} is named {h:?}, expected \"x{j}\""
            )));
        }
    }
    let d = headers.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedDocument(format!("csv row {i}: {e}")))?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::MalformedDocument(format!("csv row {i}, column {j}: {field:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!("csv row {i}, column {j}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(Matrix::from_row_slice(rows, d, &values))
}

// -- text documents ---------------------------------------------------------

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], expect_rows: usize, expect_cols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != expect_rows || rows.iter().any(|r| r.len() != expect_cols) {
        return Err(Error::MalformedDocument(format!(
            "{what} must be {expect_rows}x{expect_cols}"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("{what} element {i}")));
    }
    Ok(Matrix::from_row_slice(expect_rows, expect_cols, &flat))
}

fn to_vector(values: &[f64], expect: usize, what: &str) -> Result<Vector> {
    if values.len() != expect {
        return Err(Error::MalformedDocument(format!("{what} must have length {expect}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("{what}[{i}]")));
    }
    Ok(Vector::from_row_slice(values))
}

/// Render JSON with 17 significant digits for floats, one matrix row per line.
fn render(value: &Value) -> String {
    let mut out = String::new();
    render_into(value, 0, &mut out);
    out.push('\n');
    out
}

fn render_into(value: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => out.push_str(&format!("{f:.16e}")),
            _ => out.push_str(&n.to_string()),
        },
        Value::Array(items) if items.iter().any(Value::is_array) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                out.push_str(if i == 0 { "\n" } else { ",\n" });
                out.push_str(&pad(indent + 1));
                render_into(item, indent + 1, out);
            }
            if !items.is_empty() {
                out.push('\n');
                out.push_str(&pad(indent));
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_into(item, indent, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                out.push_str(if i == 0 { "\n" } else { ",\n" });
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                render_into(v, indent + 1, out);
            }
            if !map.is_empty() {
                out.push('\n');
                out.push_str(&pad(indent));
            }
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn render_doc<T: Serialize>(doc: &T) -> Result<String> {
    let value = serde_json::to_value(doc).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    Ok(render(&value))
}

const TRANSFORM_FORMAT: &str = "steerkit-transform";
const MOMENTS_FORMAT: &str = "steerkit-moments";

#[derive(Serialize, Deserialize)]
struct TransformDocument {
    format: String,
    version: u32,
    dim: usize,
    mode: Mode,
    beta: f64,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

pub fn transform_to_string(t: &AffineTransform) -> Result<String> {
    crate::linalg::ensure_finite(&t.matrix, "A")?;
    if t.offset.iter().any(|v| !v.is_finite()) || !t.beta.is_finite() {
        return Err(Error::NonFiniteValue("transform offset or beta".into()));
    }
    render_doc(&TransformDocument {
        format: TRANSFORM_FORMAT.into(),
        version: FORMAT_VERSION,
        dim: t.dim(),
        mode: t.mode,
        beta: t.beta,
        a: matrix_rows(&t.matrix),
        b: t.offset.iter().copied().collect(),
        provenance: t.provenance.clone(),
    })
}

pub fn transform_from_str(text: &str) -> Result<AffineTransform> {
    let doc: TransformDocument =
        serde_json::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    if doc.format != TRANSFORM_FORMAT {
        return Err(Error::MalformedDocument(format!("not a transform document: {:?}", doc.format)));
    }
    if doc.version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(doc.version));
    }
    let a = rows_to_matrix(&doc.a, doc.dim, doc.dim, "A")?;
    let b = to_vector(&doc.b, doc.dim, "b")?;
    let mut t = AffineTransform::new(a, b, doc.mode, doc.beta)?;
    t.provenance = doc.provenance;
    Ok(t)
}

pub fn write_transform(t: &AffineTransform, path: &Path) -> Result<()> {
    write_file(path, transform_to_string(t)?.as_bytes())
}

pub fn read_transform(path: &Path) -> Result<AffineTransform> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    transform_from_str(&text)
}

#[derive(Serialize, Deserialize)]
struct MomentDocument {
    format: String,
    version: u32,
    dim: usize,
    label_dim: usize,
    samples: usize,
    cross_samples: usize,
    mean: Vec<f64>,
    cov_xx: Vec<Vec<f64>>,
    cov_xz: Vec<Vec<f64>>,
}

pub fn moments_to_string(m: &MomentEstimate) -> Result<String> {
    render_doc(&MomentDocument {
        format: MOMENTS_FORMAT.into(),
        version: FORMAT_VERSION,
        dim: m.dim(),
        label_dim: m.label_dim(),
        samples: m.samples,
        cross_samples: m.cross_samples,
        mean: m.mean.iter().copied().collect(),
        cov_xx: matrix_rows(&m.cov_xx),
        cov_xz: matrix_rows(&m.cov_xz),
    })
}

pub fn moments_from_str(text: &str) -> Result<MomentEstimate> {
    let doc: MomentDocument =
        serde_json::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    if doc.format != MOMENTS_FORMAT {
        return Err(Error::MalformedDocument(format!("not a moments document: {:?}", doc.format)));
    }
    if doc.version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(doc.version));
    }
    Ok(MomentEstimate {
        mean: to_vector(&doc.mean, doc.dim, "mean")?,
        cov_xx: rows_to_matrix(&doc.cov_xx, doc.dim, doc.dim, "cov_xx")?,
        cov_xz: rows_to_matrix(&doc.cov_xz, doc.dim, doc.label_dim, "cov_xz")?,
        samples: doc.samples,
        cross_samples: doc.cross_samples,
    })
}

pub fn write_moments(m: &MomentEstimate, path: &Path) -> Result<()> {
    write_file(path, moments_to_string(m)?.as_bytes())
}

pub fn read_moments(path: &Path) -> Result<MomentEstimate> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    moments_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let m = Matrix::zeros(2, 3);
        assert_eq!(decode_activations(&encode_activations(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_row_slice(1, 2, &[1.5, -2.0]);
        let bytes = encode_activations(&m).unwrap();
        assert_eq!(&bytes[0..4], b"ACTV");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn truncation_and_trailing() {
        let bytes = encode_activations(&Matrix::zeros(2, 3)).unwrap();
        let err = decode_activations(&bytes[..bytes.len() - 8]).unwrap_err();
        assert_eq!(err.name(), "TruncatedPayload");
        let mut longer = bytes.clone();
        longer.push(0);
        assert_eq!(decode_activations(&longer).unwrap_err().name(), "TrailingData");
        assert_eq!(decode_activations(&bytes[..10]).unwrap_err().name(), "TruncatedHeader");
    }

    #[test]
    fn header_mutations_have_distinct_errors() {
        let bytes = encode_activations(&Matrix::zeros(1, 1)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_activations(&bad).unwrap_err().name(), "BadMagic");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(decode_activations(&bad).unwrap_err().name(), "VersionUnsupported");
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert_eq!(decode_activations(&bad).unwrap_err().name(), "TruncatedPayload");
        // labels read as activations
        let labels = encode_labels(&ConceptLabels::from_flags(&[true]));
        assert_eq!(decode_activations(&labels).unwrap_err().name(), "BadMagic");
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = encode_activations(&Matrix::zeros(1, 2)).unwrap();
        bytes[32..40].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode_activations(&bytes).unwrap_err().name(), "NonFiniteValue");
    }

    #[test]
    fn overflowing_dimensions() {
        let mut bytes = encode_activations(&Matrix::zeros(0, 0)).unwrap();
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(decode_activations(&bytes).unwrap_err().name(), "TruncatedPayload");
    }

    #[test]
    fn labels_round_trip_and_reject_bad_bytes() {
        let z = ConceptLabels::from_bytes(3, 2, vec![1, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(decode_labels(&encode_labels(&z)).unwrap(), z);

        let empty = ConceptLabels::from_bytes(0, 1, vec![]).unwrap();
        let parsed = decode_labels(&encode_labels(&empty)).unwrap();
        assert_eq!(parsed.samples(), 0);

        let mut bytes = encode_labels(&z);
        bytes[HEADER_LEN + 1] = 2;
        assert_eq!(decode_labels(&bytes).unwrap_err().name(), "InvalidLabel");
    }

    #[test]
    fn layer_round_trip() {
        let layer = LinearLayer::new(
            Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Vector::from_row_slice(&[-1.0, 0.5]),
        )
        .unwrap();
        let bytes = encode_layer(&layer).unwrap();
        assert_eq!(&bytes[0..4], b"LAYR");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 8);
        assert_eq!(decode_layer(&bytes).unwrap(), layer);
        assert_eq!(decode_layer(&bytes[..bytes.len() - 8]).unwrap_err().name(), "TruncatedPayload");
    }

    #[test]
    fn transform_document_is_bit_exact() {
        let a = Matrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0e10]);
        let b = Vector::from_row_slice(&[f64::MIN_POSITIVE, -0.0]);
        let t = AffineTransform::new(a, b, Mode::MidSteer, 1.5)
            .unwrap()
            .with_note("concept_rank", 1);
        let text = transform_to_string(&t).unwrap();
        assert!(text.contains("3.3333333333333331e-1"));
        let back = transform_from_str(&text).unwrap();
        assert_eq!(back, t);
        for (x, y) in back.matrix.iter().zip(t.matrix.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn transform_document_validation() {
        let t = AffineTransform::identity(2, Mode::LeaceErase);
        let text = transform_to_string(&t).unwrap().replace("\"dim\": 2", "\"dim\": 3");
        assert_eq!(transform_from_str(&text).unwrap_err().name(), "MalformedDocument");
        let text = transform_to_string(&t).unwrap().replace("leace-erase", "bogus");
        assert_eq!(transform_from_str(&text).unwrap_err().name(), "MalformedDocument");
    }

    #[test]
    fn moments_round_trip() {
        let m = MomentEstimate {
            mean: Vector::from_row_slice(&[0.1, 0.2]),
            cov_xx: Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0 / 3.0]),
            cov_xz: Matrix::from_row_slice(2, 2, &[0.1, -0.1, 0.0, 1e-17]),
            samples: 50_000,
            cross_samples: 1_000,
        };
        assert_eq!(moments_from_str(&moments_to_string(&m).unwrap()).unwrap(), m);
    }
}
