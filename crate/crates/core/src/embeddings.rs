//! Id-aligned feature matrices, the `EMB1` binary format, and exhaustive
//! nearest/farthest search.
//!
//! `EMB1` layout, all little-endian:
//!
//! ```text
//! offset 0   b"EMB1"
//! offset 4   u32 row count
//! offset 8   u32 dim
//! offset 12  u32 reserved, always 0
//! offset 16  count * dim f32 values, row-major
//! ```
//!
//! Row ids live next to the matrix in `<stem>.ids.json` as a JSON array of strings.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    encoder_tag: String,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
            && self.dim == other.dim
            && self.encoder_tag == other.encoder_tag
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::invalid(format!(
                "{} ids x dim {dim} needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            encoder_tag: encoder_tag.into(),
            index,
        })
    }

    pub fn from_rows(
        ids: Vec<String>,
        rows: Vec<Vec<f32>>,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        Self::new(ids, dim, rows.concat(), encoder_tag)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn with_encoder_tag(mut self, tag: impl Into<String>) -> Self {
        self.encoder_tag = tag.into();
        self
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.row_by_id(id)
            .ok_or_else(|| Error::MissingFeature(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Sub-matrix with the given ids, in the given order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            data.extend_from_slice(self.require(id.as_ref())?);
            out_ids.push(id.as_ref().to_string());
        }
        EmbeddingMatrix::new(out_ids, self.dim, data, self.encoder_tag.clone())
    }

    /// Stacks two matrices of equal dim.
    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let ids = self.ids.iter().chain(&other.ids).cloned().collect();
        let data = self.data.iter().chain(&other.data).copied().collect();
        EmbeddingMatrix::new(ids, self.dim, data, self.encoder_tag.clone())
    }
}

/// `<dir>/<stem>.ids.json` for an embedding file `<dir>/<stem>.<ext>`.
pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.ids.json"))
}

pub fn encode_emb1(count: usize, dim: usize, values: &[f32]) -> Result<Vec<u8>> {
    let count32 = u32::try_from(count).map_err(|_| Error::Header(format!("count {count} exceeds u32")))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::Header(format!("dim {dim} exceeds u32")))?;
    let n = count
        .checked_mul(dim)
        .filter(|&n| n == values.len())
        .ok_or_else(|| Error::Header(format!("{count} x {dim} does not match {} values", values.len())))?;
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / dim.max(1),
            col: pos % dim.max(1),
        });
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&count32.to_le_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses an `EMB1` buffer into `(count, dim, values)`.
pub fn decode_emb1(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Header(format!("{} bytes is shorter than header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Header(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, dim, reserved) = (word(4), word(8), word(12));
    if reserved != 0 {
        return Err(Error::Header(format!("reserved word is {reserved}, expected 0")));
    }
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Header(format!("{count} x {dim} overflows")))?;
    if bytes.len() - HEADER_LEN != payload {
        return Err(Error::Header(format!(
            "payload is {} bytes, header implies {payload}",
            bytes.len() - HEADER_LEN
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((count, dim, values))
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let bytes = encode_emb1(matrix.len(), matrix.dim(), matrix.as_slice())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = ids_sidecar_path(path);
    let ids = serde_json::to_vec(matrix.ids())?;
    fs::write(&sidecar, ids).map_err(|e| Error::io(&sidecar, e))
}

/// Reads an `EMB1` file and its ids sidecar. The encoder tag is not stored on
/// disk and comes back empty.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (count, dim, values) = decode_emb1(&bytes)?;
    let sidecar = ids_sidecar_path(path);
    let raw = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids: Vec<String> = serde_json::from_slice(&raw)?;
    if ids.len() != count {
        return Err(Error::Header(format!(
            "{} ids in sidecar, {count} rows in matrix",
            ids.len()
        )));
    }
    EmbeddingMatrix::new(ids, dim, values, "")
}

fn check_dims(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dims(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    Cosine,
}

impl Metric {
    /// Dissimilarity used for ranking: L2 distance, or `1 - cosine`.
    pub fn distance(self, a: &[f32], b: &[f32]) -> Result<f64> {
        match self {
            Metric::L2 => l2_distance(a, b),
            Metric::Cosine => cosine_similarity(a, b).map(|c| 1.0 - c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Nearest,
    Farthest,
}

/// Exhaustive search returning `(id, distance)` pairs, sorted by the requested
/// order with ties broken by ascending id.
pub fn knn_scored(
    query: &[f32],
    matrix: &EmbeddingMatrix,
    k: usize,
    order: Order,
    metric: Metric,
    exclude: &HashSet<&str>,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if query.len() != matrix.dim() {
        return Err(Error::DimMismatch {
            expected: matrix.dim(),
            actual: query.len(),
        });
    }
    let mut scored = Vec::with_capacity(matrix.len());
    for (id, row) in matrix.rows() {
        if exclude.contains(id) {
            continue;
        }
        scored.push((id, metric.distance(query, row)?));
    }
    if scored.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let cmp = |a: &(&str, f64), b: &(&str, f64)| -> Ordering {
        let by_dist = a.1.total_cmp(&b.1);
        let by_dist = match order {
            Order::Nearest => by_dist,
            Order::Farthest => by_dist.reverse(),
        };
        by_dist.then_with(|| a.0.cmp(b.0))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(id, d)| (id.to_string(), d))
        .collect())
}

/// Ids of the `min(k, available)` nearest or farthest rows to `query`.
pub fn knn(
    query: &[f32],
    matrix: &EmbeddingMatrix,
    k: usize,
    order: Order,
    metric: Metric,
    exclude: &HashSet<&str>,
) -> Result<Vec<String>> {
    Ok(knn_scored(query, matrix, k, order, metric, exclude)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}
