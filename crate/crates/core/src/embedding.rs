//! Sentence-embedding providers, PCA compression and the coverage coefficient.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::grammar::{object_from_word, Direction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}

/// Deterministic offline embedder with controlled geometry.
///
/// Channels: 0..48 hashed bag of non-numeric tokens, 48 the parsed distance
/// times 10, 49..55 direction one-hot, 55..63 object one-hot, 63 bias.
#[derive(Clone, Debug, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub const DIM: usize = 64;
    pub const HASH_CHANNELS: usize = 48;
    pub const NUMERIC: usize = 48;
    pub const DIRECTION: usize = 49;
    pub const OBJECT: usize = 55;
    pub const BIAS: usize = 63;
    pub const NUMERIC_SCALE: f64 = 10.0;

    pub fn embed_text(text: &str) -> Vec<f64> {
        let mut v = vec![0.0; Self::DIM];
        v[Self::BIAS] = 1.0;
        let mut have_number = false;
        let mut have_dir = false;
        let mut have_obj = false;
        for tok in text.split_whitespace() {
            let tok = tok.to_lowercase();
            if let Ok(x) = tok.parse::<f64>() {
                if x.is_finite() && !have_number {
                    v[Self::NUMERIC] = Self::NUMERIC_SCALE * x;
                    have_number = true;
                }
                continue;
            }
            v[(fnv1a(tok.as_bytes()) % Self::HASH_CHANNELS as u64) as usize] += 1.0;
            if !have_dir {
                if let Some(d) = Direction::from_word(&tok) {
                    v[Self::DIRECTION + d.index()] = 1.0;
                    have_dir = true;
                }
            }
            if !have_obj {
                if let Some(k) = object_from_word(&tok) {
                    v[Self::OBJECT + k] = 1.0;
                    have_obj = true;
                }
            }
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> &str {
        "mock-64"
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector {
                values: Self::embed_text(t),
                provider_id: self.id().to_string(),
            })
            .collect())
    }
}

/// Lookup table of precomputed vectors (JSONL `{"text", "embedding"}`).
#[derive(Clone, Debug)]
pub struct FixtureEmbedder {
    id: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct FixtureRecord {
    text: String,
    embedding: Vec<f64>,
}

impl FixtureEmbedder {
    pub fn from_records(id: &str, records: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = records.first().map(|r| r.1.len()).unwrap_or(0);
        let mut table = HashMap::new();
        for (t, e) in records {
            if e.len() != dim {
                return Err(Error::Embedding(format!(
                    "fixture vector for {t:?} has dimension {} (expected {dim})",
                    e.len()
                )));
            }
            table.insert(t, e);
        }
        Ok(Self {
            id: id.to_string(),
            dim,
            table,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push((r.text, r.embedding));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        Self::from_records(&format!("fixture:{stem}"), records)
    }

    pub fn texts(&self) -> Vec<String> {
        let mut v: Vec<String> = self.table.keys().cloned().collect();
        v.sort();
        v
    }
}

impl EmbeddingProvider for FixtureEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .map(|v| EmbeddingVector {
                        values: v.clone(),
                        provider_id: self.id.clone(),
                    })
                    .ok_or_else(|| Error::Embedding(format!("text {t:?} not in fixture")))
            })
            .collect()
    }
}

/// Client of an embedding service: `POST {endpoint}/embed` with `{"texts": [...]}`.
#[derive(Clone, Debug)]
pub struct HttpEmbedder {
    id: String,
    endpoint: String,
    dim: usize,
    timeout: Duration,
    retries: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(id: &str, endpoint: &str, dim: usize, timeout: Duration, retries: usize) -> Self {
        Self {
            id: id.to_string(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            dim,
            timeout,
            retries,
        }
    }

    fn call(&self, texts: &[String]) -> Result<EmbedResponse> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        let resp = client
            .post(format!("{}/embed", self.endpoint))
            .json(&serde_json::json!({ "texts": texts }))
            .send()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Embedding(format!("HTTP status {}", resp.status())));
        }
        resp.json().map_err(|e| Error::Embedding(e.to_string()))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.call(texts) {
                Ok(r) => {
                    if r.dim != self.dim || r.embeddings.iter().any(|e| e.len() != self.dim) {
                        return Err(Error::Embedding(format!(
                            "provider {} returned dimension {} (expected {})",
                            self.id, r.dim, self.dim
                        )));
                    }
                    if r.embeddings.len() != texts.len() {
                        return Err(Error::Embedding(format!(
                            "asked for {} embeddings, got {}",
                            texts.len(),
                            r.embeddings.len()
                        )));
                    }
                    return Ok(r
                        .embeddings
                        .into_iter()
                        .map(|values| EmbeddingVector {
                            values,
                            provider_id: self.id.clone(),
                        })
                        .collect());
                }
                Err(e) => {
                    log::warn!("embedding request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap())
    }
}

/// Stack row vectors into a `T × s` matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let t = rows.len();
    let s = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != s) {
        return Err(Error::InvalidArgument("embedding rows have unequal length".into()));
    }
    Ok(DMatrix::from_fn(t, s, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `s × z`, columns are the leading right singular vectors.
    pub components: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub z: usize,
}

/// Sorted thin SVD; each singular vector's largest-magnitude entry is made positive.
fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let s = svd.singular_values;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|a, b| s[*b].total_cmp(&s[*a]));
    let mut uu = DMatrix::zeros(u.nrows(), idx.len());
    let mut vv = DMatrix::zeros(vt.ncols(), idx.len());
    let mut ss = DVector::zeros(idx.len());
    for (c, &k) in idx.iter().enumerate() {
        let mut vcol = vt.row(k).transpose();
        let mut ucol = u.column(k).clone_owned();
        let (imax, _) = vcol
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if vcol[imax] < 0.0 {
            vcol = -vcol;
            ucol = -ucol;
        }
        vv.set_column(c, &vcol);
        uu.set_column(c, &ucol);
        ss[c] = s[k];
    }
    (uu, ss, vv)
}

/// PCA of the `T × s` embedding matrix, keeping `z` components.
pub fn fit_pca(embeddings: &DMatrix<f64>, z: usize) -> Result<PcaBasis> {
    let (t, s) = embeddings.shape();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {t}")));
    }
    if z == 0 || z > t.min(s) {
        return Err(Error::InvalidArgument(format!(
            "z = {z} must be in 1..={}",
            t.min(s)
        )));
    }
    let mean = embeddings.row_mean().transpose();
    let mut centered = embeddings.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let (_, sv, v) = sorted_svd(&centered);
    Ok(PcaBasis {
        mean,
        components: v.columns(0, z).clone_owned(),
        singular_values: sv.rows(0, z).clone_owned(),
        z,
    })
}

impl PcaBasis {
    pub fn s(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, e: &[f64]) -> Result<DVector<f64>> {
        if e.len() != self.s() {
            return Err(Error::Dimension {
                what: "embedding",
                expected: self.s(),
                got: e.len(),
            });
        }
        let c = DVector::from_column_slice(e) - &self.mean;
        Ok(self.components.tr_mul(&c))
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.components * z
    }
}

/// Pseudo-inverse machinery for the coverage coefficient of one example set.
#[derive(Clone, Debug)]
pub struct CoverageGate {
    /// Retained left singular vectors of `E` (`s × r`).
    u: DMatrix<f64>,
    /// Retained singular values.
    sigma: DVector<f64>,
    /// Retained right singular vectors (`T × r`).
    v: DMatrix<f64>,
}

/// Coverage coefficient and relative residual of one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub coverage: f64,
    pub residual: f64,
}

impl CoverageGate {
    pub const CUTOFF: f64 = 1e-10;

    /// `examples` holds one example embedding per row (`T × s`); internally the
    /// example matrix has them as columns.
    pub fn new(examples: &DMatrix<f64>) -> Result<Self> {
        if examples.nrows() == 0 {
            return Err(Error::InvalidArgument("coverage needs at least one example".into()));
        }
        let e = examples.transpose();
        let (u, s, v) = sorted_svd(&e);
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let r = s.iter().filter(|x| **x > Self::CUTOFF * smax && **x > 0.0).count();
        Ok(Self {
            u: u.columns(0, r).clone_owned(),
            sigma: s.rows(0, r).clone_owned(),
            v: v.columns(0, r).clone_owned(),
        })
    }

    pub fn s(&self) -> usize {
        self.u.nrows()
    }

    /// Least-squares coefficients `E† e`.
    pub fn coefficients(&self, e: &[f64]) -> Result<DVector<f64>> {
        if e.len() != self.s() {
            return Err(Error::Dimension {
                what: "embedding",
                expected: self.s(),
                got: e.len(),
            });
        }
        let ev = DVector::from_column_slice(e);
        let mut w = self.u.tr_mul(&ev);
        for i in 0..w.len() {
            w[i] /= self.sigma[i];
        }
        Ok(&self.v * w)
    }

    pub fn evaluate(&self, e: &[f64]) -> Result<Coverage> {
        let coverage = self.coefficients(e)?.norm();
        let ev = DVector::from_column_slice(e);
        let proj = &self.u * self.u.tr_mul(&ev);
        let n = ev.norm();
        let residual = if n > 0.0 { (&ev - proj).norm() / n } else { 0.0 };
        Ok(Coverage { coverage, residual })
    }
}

/// `‖E† e_sub‖₂` with `E` having the example embeddings as columns.
pub fn coverage_coefficient(e_sub: &[f64], examples: &DMatrix<f64>) -> Result<f64> {
    Ok(CoverageGate::new(examples)?.evaluate(e_sub)?.coverage)
}
