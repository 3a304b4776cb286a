//! Embeddings, an exact inner-product index, and MRR@k.
//!
//! Binary matrix format (shared by persisted indexes and imported
//! embeddings): `n: u64 LE`, `dim: u64 LE`, then `n * dim` little-endian
//! `f32` values in row-major order. Row ids live in a JSON manifest
//! `{"n", "dim", "doc_ids": [...]}`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{self, Corpus};
use crate::error::{Error, Result};
use crate::textmetrics::tokenize;

pub const DEFAULT_DIM: usize = 512;
const UNIT_TOL: f64 = 1e-6;

fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const SIGN_BASIS: u64 = 0x8422_2325_cbf2_9ce4;

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroContent);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Signed feature hashing of TF-IDF weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedTfidf {
    pub dim: usize,
    pub n_docs: usize,
    idf: HashMap<String, f64>,
}

impl HashedTfidf {
    /// Fits smoothed idf weights `ln((1 + n) / (1 + df)) + 1`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        for text in texts {
            n_docs += 1;
            let mut toks = tokenize(text).into_inner();
            toks.sort_unstable();
            toks.dedup();
            for t in toks {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let idf = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + n_docs as f64) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        Ok(Self { dim, n_docs, idf })
    }

    fn idf(&self, token: &str) -> f64 {
        self.idf
            .get(token)
            .copied()
            .unwrap_or_else(|| (1.0 + self.n_docs as f64).ln() + 1.0)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::ZeroContent);
        }
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in toks.tokens() {
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
        let mut v = vec![0.0; self.dim];
        let mut terms: Vec<_> = tf.into_iter().collect();
        terms.sort_unstable();
        for (t, c) in terms {
            let bucket = (fnv1a(t.as_bytes(), FNV_BASIS) % self.dim as u64) as usize;
            let sign = if fnv1a(t.as_bytes(), SIGN_BASIS) >> 63 == 0 {
                1.0
            } else {
                -1.0
            };
            v[bucket] += sign * c as f64 * self.idf(t);
        }
        normalize(&mut v)?;
        Ok(v)
    }
}

fn write_matrix(path: &Path, n: usize, dim: usize, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + data.len() * 4);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    datamodel::write_atomic(path, &bytes)
}

fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * dim * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, dim, data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    dim: usize,
    doc_ids: Vec<String>,
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Embeddings produced offline, looked up by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    data: Vec<f32>,
}

impl PrecomputedEmbeddings {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Dimension {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        let rows = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            dim,
            ids,
            rows,
            data,
        })
    }

    pub fn load(vectors: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        let (n, dim, data) = read_matrix(vectors.as_ref())?;
        let m = read_manifest(manifest.as_ref())?;
        if m.n != n || m.dim != dim || m.doc_ids.len() != n {
            return Err(Error::invalid(
                "embedding manifest disagrees with matrix header",
            ));
        }
        Self::new(m.doc_ids, dim, data)
    }

    pub fn save(&self, vectors: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
        write_matrix(vectors.as_ref(), self.ids.len(), self.dim, &self.data)?;
        let m = Manifest {
            n: self.ids.len(),
            dim: self.dim,
            doc_ids: self.ids.clone(),
        };
        datamodel::write_atomic(manifest, serde_json::to_string_pretty(&m)?.as_bytes())
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        let row = *self
            .rows
            .get(key)
            .ok_or_else(|| Error::invalid(format!("no precomputed embedding for `{key}`")))?;
        let mut v: Vec<f64> = self.data[row * self.dim..(row + 1) * self.dim]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        normalize(&mut v)?;
        Ok(v)
    }
}

/// Source of unit-norm text embeddings.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    HashedTfidf(HashedTfidf),
    /// Vectors keyed by doc id (documents) or record id (queries).
    Precomputed(PrecomputedEmbeddings),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ProviderFile {
    HashedTfidf(HashedTfidf),
    Precomputed { vectors: String, manifest: String },
}

impl EmbeddingProvider {
    pub fn fit_tfidf(corpus: &Corpus, dim: usize) -> Result<Self> {
        let texts: Vec<String> = corpus.documents().iter().map(|d| d.full_text()).collect();
        Ok(Self::HashedTfidf(HashedTfidf::fit(
            texts.iter().map(String::as_str),
            dim,
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::HashedTfidf(h) => h.dim,
            Self::Precomputed(p) => p.dim,
        }
    }

    /// Unit-norm embedding. `key` is only used by precomputed providers.
    pub fn embed(&self, key: &str, text: &str) -> Result<Vec<f64>> {
        match self {
            Self::HashedTfidf(h) => h.embed(text),
            Self::Precomputed(p) => p.lookup(key),
        }
    }

    /// Saves a provider description. Precomputed providers store the paths
    /// of their source files, which must already exist.
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        precomputed_paths: Option<(&str, &str)>,
    ) -> Result<()> {
        let file = match self {
            Self::HashedTfidf(h) => ProviderFile::HashedTfidf(h.clone()),
            Self::Precomputed(_) => {
                let (v, m) = precomputed_paths
                    .ok_or_else(|| Error::invalid("precomputed provider needs its source paths"))?;
                ProviderFile::Precomputed {
                    vectors: v.to_string(),
                    manifest: m.to_string(),
                }
            }
        };
        datamodel::write_atomic(path, serde_json::to_string(&file)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(match serde_json::from_str(&text)? {
            ProviderFile::HashedTfidf(h) => Self::HashedTfidf(h),
            ProviderFile::Precomputed { vectors, manifest } => {
                Self::Precomputed(PrecomputedEmbeddings::load(vectors, manifest)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Top-k hits for one query, best first; ties go to the smaller doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub k: usize,
    pub ranked: Vec<ScoredDoc>,
}

/// Exact inner-product index over unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    doc_ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl FlatIndex {
    /// Builds from rows that must already be unit-norm.
    pub fn from_rows(doc_ids: Vec<String>, dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if doc_ids.len() != rows.len() {
            return Err(Error::invalid("row count differs from doc id count"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in doc_ids.iter().zip(rows) {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(row.iter().map(|&x| x as f32));
            let norm = data[data.len() - dim..]
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!(
                    "row for `{id}` is not unit-norm ({norm})"
                )));
            }
        }
        Ok(Self { doc_ids, dim, data })
    }

    /// Embeds every document, preserving corpus order.
    pub fn build(corpus: &Corpus, provider: &EmbeddingProvider) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let rows: Vec<Vec<f64>> = corpus
            .documents()
            .par_iter()
            .map(|d| {
                provider.embed(&d.doc_id, &d.full_text()).map_err(|e| {
                    Error::invalid(format!("embedding failed for document `{}`: {e}", d.doc_id))
                })
            })
            .collect::<Result<_>>()?;
        let ids = corpus
            .documents()
            .iter()
            .map(|d| d.doc_id.clone())
            .collect();
        Self::from_rows(ids, provider.dim(), &rows)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-k by inner product; `k` larger than the index returns
    /// everything.
    pub fn search(&self, query_id: &str, query: &[f64], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (qnorm - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "query vector is not unit-norm ({qnorm})"
            )));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let s = self
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| f64::from(a) * b)
                    .sum::<f64>();
                (s, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.doc_ids[a.1].cmp(&self.doc_ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            k,
            ranked: scored
                .into_iter()
                .map(|(score, i)| ScoredDoc {
                    doc_id: self.doc_ids[i].clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Writes `vectors.bin` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(&dir.join("vectors.bin"), self.len(), self.dim, &self.data)?;
        let m = Manifest {
            n: self.len(),
            dim: self.dim,
            doc_ids: self.doc_ids.clone(),
        };
        datamodel::write_atomic(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&m)?.as_bytes(),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (n, dim, data) = read_matrix(&dir.join("vectors.bin"))?;
        let m = read_manifest(&dir.join("manifest.json"))?;
        if m.n != n || m.dim != dim || m.doc_ids.len() != n {
            return Err(Error::invalid(
                "index manifest disagrees with matrix header",
            ));
        }
        Ok(Self {
            doc_ids: m.doc_ids,
            dim,
            data,
        })
    }
}

/// `1 / rank` of `gold` within the first `k` hits, else 0.
pub fn reciprocal_rank(result: &RetrievalResult, gold: &str, k: usize) -> f64 {
    result
        .ranked
        .iter()
        .take(k)
        .position(|d| d.doc_id == gold)
        .map_or(0.0, |p| 1.0 / (p as f64 + 1.0))
}

/// Mean reciprocal rank with a top-k cutoff, as a percentage. Queries
/// without a gold entry are skipped.
pub fn mrr_at_k(results: &[RetrievalResult], gold: &HashMap<String, String>, k: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in results {
        match gold.get(&r.query_id) {
            Some(g) => {
                total += reciprocal_rank(r, g, k);
                n += 1;
            }
            None => warn!("no gold document for query `{}`, skipped", r.query_id),
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * total / n as f64
    }
}
