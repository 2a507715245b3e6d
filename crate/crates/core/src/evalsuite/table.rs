//! L2-normalized embedding tables and their on-disk form.
//!
//! Binary layout: `COPE`, u16 version, u16 flags, u32 dim, u64 count, then
//! `count * dim` little-endian `f32` values row by row. Row metadata lives in
//! a JSONL sidecar named after the table file with `.jsonl` appended.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Domain, Sample};
use crate::error::{CopeError, Result};
use crate::model::CopeModel;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"COPE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;
const EXPORT_CHUNK: usize = 32;
/// Rows read back from disk must have unit norm within this tolerance.
const NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub sample_id: String,
    pub product_id: String,
    pub domain: Domain,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarLine {
    row: usize,
    sample_id: String,
    product_id: String,
    domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<RowMeta>,
}

impl EmbeddingTable {
    /// Builds a table from raw rows, normalizing each to unit length.
    pub fn new(dim: usize, rows: &[Vec<f64>], meta: Vec<RowMeta>) -> Result<Self> {
        if dim == 0 {
            return Err(CopeError::Contract("embedding dimension must be positive".into()));
        }
        if rows.len() != meta.len() {
            return Err(CopeError::Contract(format!(
                "{} rows but {} metadata entries",
                rows.len(),
                meta.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (r, m) in rows.iter().zip(&meta) {
            if r.len() != dim {
                return Err(CopeError::Shape(format!("row {} has width {}, expected {dim}", m.sample_id, r.len())));
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(CopeError::Contract(format!("row {} cannot be normalized", m.sample_id)));
            }
            data.extend(r.iter().map(|x| (x / norm) as f32));
        }
        Ok(Self { dim, data, meta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> &RowMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[RowMeta] {
        &self.meta
    }

    /// Row indices of one domain, in table order.
    pub fn rows_of(&self, domain: Domain) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].domain == domain).collect()
    }

    /// Inner product of two rows in double precision. Rows are unit length,
    /// so this is their cosine similarity.
    pub fn dot(&self, a: usize, b: usize) -> f64 {
        dot(self.row(a), self.row(b))
    }

    /// A copy with `f` applied to every row's metadata.
    pub fn relabel(&self, f: impl Fn(&RowMeta) -> RowMeta) -> Self {
        Self {
            dim: self.dim,
            data: self.data.clone(),
            meta: self.meta.iter().map(f).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn sidecar_jsonl(&self) -> String {
        let mut out = String::new();
        for (row, m) in self.meta.iter().enumerate() {
            let line = SidecarLine {
                row,
                sample_id: m.sample_id.clone(),
                product_id: m.product_id.clone(),
                domain: m.domain,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_parts(bytes: &[u8], meta: Vec<RowMeta>) -> Result<Self> {
        let bad = |m: String| CopeError::Format(format!("embedding file: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(bad("missing COPE header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMBEDDING_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if dim == 0 || body.len() != count * dim * 4 {
            return Err(bad(format!("{} data bytes for {count} rows of width {dim}", body.len())));
        }
        if meta.len() != count {
            return Err(bad(format!("{count} rows but {} sidecar lines", meta.len())));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let table = Self { dim, data, meta };
        for i in 0..count {
            let n = table.dot(i, i).sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(bad(format!("row {i} has norm {n}")));
            }
        }
        Ok(table)
    }

    /// Writes the table and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        let mut side = BufWriter::new(fs::File::create(sidecar_path(path))?);
        side.write_all(self.sidecar_jsonl().as_bytes())?;
        side.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let side = BufReader::new(fs::File::open(sidecar_path(path))?);
        let mut meta = Vec::new();
        for (n, line) in side.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| CopeError::Parse {
                line: n + 1,
                reason: e.to_string(),
            })?;
            if rec.row != meta.len() {
                return Err(CopeError::Parse {
                    line: n + 1,
                    reason: format!("row {} out of order", rec.row),
                });
            }
            meta.push(RowMeta {
                sample_id: rec.sample_id,
                product_id: rec.product_id,
                domain: rec.domain,
            });
        }
        Self::from_parts(&bytes, meta)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// `emb.bin` keeps its metadata in `emb.bin.jsonl`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".jsonl");
    PathBuf::from(s)
}

/// Embeds every corpus sample in corpus order: fused page embeddings and
/// projected visual embeddings for videos and lives.
pub fn export_embeddings(model: &CopeModel, corpus: &Corpus) -> Result<EmbeddingTable> {
    model.config().check_corpus(corpus)?;
    let samples: Vec<&Sample> = corpus.samples().iter().collect();
    let rows = model.embed_samples(&samples, EXPORT_CHUNK)?;
    let meta = samples
        .iter()
        .map(|s| RowMeta {
            sample_id: s.sample_id.clone(),
            product_id: s.product_id.clone(),
            domain: s.domain,
        })
        .collect();
    EmbeddingTable::new(model.config().embed_dim(), &rows, meta)
}
