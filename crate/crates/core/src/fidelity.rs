//! How close pseudo-sentences stay to their origins.
//!
//! Sentences are embedded by a pluggable provider, compared pairwise by
//! cosine similarity and projected to 2D on the top two principal axes for
//! plotting. The projection is deterministic: eigenvectors come from the
//! symmetric covariance matrix and each is flipped so that its first
//! nonzero loading is positive.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Sample;
use crate::gateway::{Transport, TransportError};
use crate::postproc::PseudoSample;
use crate::Method;

pub const DEFAULT_PAIRS: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum FidelityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("length mismatch: {0} originals vs {1} pseudo-sentences")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 vectors to project, got {0}")]
    TooFewVectors(usize),
    #[error("empty embedding vector")]
    EmptyVector,
    #[error("no precomputed embedding for sentence {0:?}")]
    Missing(String),
    #[error("embedding transport: {0}")]
    Transport(#[from] TransportError),
    #[error("malformed embedding data: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>, FidelityError>;
}

#[derive(Serialize, Deserialize)]
struct PrecomputedLine {
    sentence: String,
    embedding: EmbeddingVector,
}

/// Vectors read from a JSONL file of `{"sentence": ..., "embedding": [...]}`.
pub struct PrecomputedProvider {
    vectors: HashMap<String, EmbeddingVector>,
}

impl PrecomputedProvider {
    pub fn new(pairs: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Self {
        PrecomputedProvider {
            vectors: pairs.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, FidelityError> {
        let io = |e| FidelityError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut vectors = HashMap::new();
        for (n, line) in BufReader::new(File::open(path).map_err(io)?)
            .lines()
            .enumerate()
        {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let l: PrecomputedLine = serde_json::from_str(&line)
                .map_err(|e| FidelityError::Malformed(format!("line {}: {e}", n + 1)))?;
            vectors.entry(l.sentence).or_insert(l.embedding);
        }
        Ok(PrecomputedProvider { vectors })
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn embed(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>, FidelityError> {
        sentences
            .iter()
            .map(|s| {
                self.vectors
                    .get(s)
                    .cloned()
                    .ok_or_else(|| FidelityError::Missing(s.clone()))
            })
            .collect()
    }
}

/// Remote embeddings endpoint: `{"model", "input": [...]}` in,
/// `{"data": [{"embedding": [...]}, ...]}` out.
pub struct HttpEmbeddingProvider {
    transport: Box<dyn Transport>,
    model: String,
    batch_size: usize,
}

impl HttpEmbeddingProvider {
    pub fn new(transport: Box<dyn Transport>, model: impl Into<String>) -> Self {
        HttpEmbeddingProvider {
            transport,
            model: model.into(),
            batch_size: 64,
        }
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct WireEmbeddings {
    data: Vec<WireEmbedding>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>, FidelityError> {
        let mut out = Vec::with_capacity(sentences.len());
        for batch in sentences.chunks(self.batch_size) {
            let body = serde_json::json!({ "model": self.model, "input": batch }).to_string();
            let resp: WireEmbeddings = serde_json::from_str(&self.transport.post(&body)?)
                .map_err(|e| FidelityError::Malformed(e.to_string()))?;
            if resp.data.len() != batch.len() {
                return Err(FidelityError::Malformed(format!(
                    "{} embeddings for {} inputs",
                    resp.data.len(),
                    batch.len()
                )));
            }
            out.extend(resp.data.into_iter().map(|d| EmbeddingVector(d.embedding)));
        }
        Ok(out)
    }
}

/// Offline bag-of-words embedding: each lowercased token is hashed to a
/// bucket and a sign.
pub struct HashedTokenProvider {
    pub dim: usize,
}

impl Default for HashedTokenProvider {
    fn default() -> Self {
        HashedTokenProvider { dim: 256 }
    }
}

impl EmbeddingProvider for HashedTokenProvider {
    fn embed(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>, FidelityError> {
        if self.dim == 0 {
            return Err(FidelityError::EmptyVector);
        }
        Ok(sentences
            .iter()
            .map(|s| {
                let mut v = vec![0.0; self.dim];
                for tok in s.split_whitespace() {
                    let h = Sha256::digest(tok.to_lowercase().as_bytes());
                    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
                    v[bucket] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                }
                EmbeddingVector(v)
            })
            .collect())
    }
}

/// Embeddings keyed by the SHA-256 of the sentence, optionally persisted as
/// JSONL.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    map: Mutex<HashMap<String, EmbeddingVector>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    digest: String,
    embedding: EmbeddingVector,
}

fn sentence_digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            path: None,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self, FidelityError> {
        let mut map = HashMap::new();
        if path.exists() {
            let io = |e| FidelityError::Io {
                path: path.display().to_string(),
                source: e,
            };
            for line in BufReader::new(File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: CacheLine = serde_json::from_str(&line)
                    .map_err(|e| FidelityError::Malformed(e.to_string()))?;
                map.entry(l.digest).or_insert(l.embedding);
            }
        }
        Ok(EmbeddingCache {
            path: Some(path.to_path_buf()),
            map: Mutex::new(map),
        })
    }

    pub fn get(&self, sentence: &str) -> Option<EmbeddingVector> {
        self.map
            .lock()
            .unwrap()
            .get(&sentence_digest(sentence))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert_all(&self, items: Vec<(&str, EmbeddingVector)>) -> Result<(), FidelityError> {
        let mut map = self.map.lock().unwrap();
        let mut lines = String::new();
        for (s, v) in items {
            let digest = sentence_digest(s);
            if map.contains_key(&digest) {
                continue;
            }
            if self.path.is_some() {
                lines.push_str(
                    &serde_json::to_string(&CacheLine {
                        digest: digest.clone(),
                        embedding: v.clone(),
                    })
                    .expect("cache line serializes"),
                );
                lines.push('\n');
            }
            map.insert(digest, v);
        }
        if let (Some(path), false) = (&self.path, lines.is_empty()) {
            let io = |e| FidelityError::Io {
                path: path.display().to_string(),
                source: e,
            };
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io)?;
            f.write_all(lines.as_bytes()).map_err(io)?;
        }
        Ok(())
    }
}

/// One vector per sentence, in order. Only sentences missing from the cache
/// reach the provider.
pub fn embed_sentences(
    sentences: &[String],
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
) -> Result<Vec<EmbeddingVector>, FidelityError> {
    let mut out: Vec<Option<EmbeddingVector>> = sentences.iter().map(|s| cache.get(s)).collect();
    let mut missing: Vec<String> = Vec::new();
    for (s, v) in sentences.iter().zip(&out) {
        if v.is_none() && !missing.contains(s) {
            missing.push(s.clone());
        }
    }
    if !missing.is_empty() {
        let fetched = provider.embed(&missing)?;
        if fetched.len() != missing.len() {
            return Err(FidelityError::Malformed(format!(
                "provider returned {} vectors for {} sentences",
                fetched.len(),
                missing.len()
            )));
        }
        let by_sentence: HashMap<&str, &EmbeddingVector> =
            missing.iter().map(String::as_str).zip(&fetched).collect();
        for (s, slot) in sentences.iter().zip(out.iter_mut()) {
            if slot.is_none() {
                *slot = Some(by_sentence[s.as_str()].clone());
            }
        }
        cache.insert_all(missing.iter().map(String::as_str).zip(fetched).collect())?;
    }
    let out: Vec<EmbeddingVector> = out.into_iter().map(|v| v.expect("filled above")).collect();
    if let Some(first) = out.first() {
        if first.dim() == 0 {
            return Err(FidelityError::EmptyVector);
        }
        if let Some(bad) = out.iter().find(|v| v.dim() != first.dim()) {
            return Err(FidelityError::DimMismatch(first.dim(), bad.dim()));
        }
    }
    Ok(out)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, FidelityError> {
    if a.dim() != b.dim() {
        return Err(FidelityError::DimMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarities {
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

pub fn cosine_pairs(
    origs: &[EmbeddingVector],
    pseudos: &[EmbeddingVector],
) -> Result<Similarities, FidelityError> {
    if origs.len() != pseudos.len() {
        return Err(FidelityError::LengthMismatch(origs.len(), pseudos.len()));
    }
    let values = origs
        .iter()
        .zip(pseudos)
        .map(|(a, b)| cosine(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Ok(Similarities {
            values,
            mean: 0.0,
            median: 0.0,
            min: 0.0,
        });
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(Similarities {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
        min: sorted[0],
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Original,
    Paraphrase,
    Generate,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Original => "original",
            Group::Paraphrase => "paraphrase",
            Group::Generate => "generate",
        }
    }
}

impl From<Method> for Group {
    fn from(m: Method) -> Self {
        match m {
            Method::Paraphrase => Group::Paraphrase,
            Method::Generate => Group::Generate,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub group: Group,
}

/// Centers the vectors and projects them on the two leading eigenvectors of
/// their covariance. Identical inputs all land on the origin.
pub fn project_2d(
    vectors: &[EmbeddingVector],
    tags: &[Group],
) -> Result<Vec<Point>, FidelityError> {
    if vectors.len() < 2 {
        return Err(FidelityError::TooFewVectors(vectors.len()));
    }
    if tags.len() != vectors.len() {
        return Err(FidelityError::LengthMismatch(vectors.len(), tags.len()));
    }
    let dim = vectors[0].dim();
    if dim == 0 {
        return Err(FidelityError::EmptyVector);
    }
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(FidelityError::DimMismatch(dim, bad.dim()));
    }
    let n = vectors.len();
    let mut x = DMatrix::from_fn(n, dim, |i, j| vectors[i].0[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let at_origin = || {
        tags.iter()
            .map(|&group| Point {
                x: 0.0,
                y: 0.0,
                group,
            })
            .collect()
    };
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale <= 1e-12 * (1.0 + mean.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
        return Ok(at_origin());
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else {
            return vec![0.0; dim];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        v
    };
    let (a1, a2) = (axis(0), axis(1));
    Ok(x.row_iter()
        .zip(tags)
        .map(|(row, &group)| Point {
            x: row.iter().zip(&a1).map(|(r, c)| r * c).sum(),
            y: row.iter().zip(&a2).map(|(r, c)| r * c).sum(),
            group,
        })
        .collect())
}

pub fn write_csv<W: Write>(points: &[Point], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,group")?;
    for p in points {
        writeln!(out, "{},{},{}", p.x, p.y, p.group)?;
    }
    Ok(())
}

/// An origin sentence and the pseudo-sentence derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub original: String,
    pub pseudo: String,
    pub group: Group,
}

/// Pairs each pseudo-sample with its origin. Takes the first `n` pairs in
/// pseudo-set order, or a seeded uniform draw of `n` when `seed` is given.
/// Pseudo-samples whose origin is not in `originals` are skipped.
pub fn select_pairs(
    originals: &[Sample],
    pseudo: &[PseudoSample],
    n: usize,
    seed: Option<u64>,
) -> Vec<SentencePair> {
    let by_id: HashMap<&str, &Sample> = originals.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut pairs: Vec<SentencePair> = pseudo
        .iter()
        .filter_map(|p| {
            by_id.get(p.origin_id.as_str()).map(|o| SentencePair {
                original: o.text(),
                pseudo: p.sample.text(),
                group: p.method.into(),
            })
        })
        .collect();
    match seed {
        None => pairs.truncate(n),
        Some(seed) => {
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            pairs = idx.into_iter().map(|i| pairs[i].clone()).collect();
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub pairs: usize,
    pub similarities: Similarities,
    pub projection: Vec<Point>,
}

impl fmt::Display for FidelityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs: {}", self.pairs)?;
        writeln!(f, "cosine mean: {:.4}", self.similarities.mean)?;
        writeln!(f, "cosine median: {:.4}", self.similarities.median)?;
        writeln!(f, "cosine min: {:.4}", self.similarities.min)
    }
}

/// Embeds both sides of every pair, scores them and projects all vectors
/// together: originals first, then pseudo-sentences.
pub fn analyze(
    pairs: &[SentencePair],
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
) -> Result<FidelityReport, FidelityError> {
    let origs: Vec<String> = pairs.iter().map(|p| p.original.clone()).collect();
    let pseudos: Vec<String> = pairs.iter().map(|p| p.pseudo.clone()).collect();
    let ov = embed_sentences(&origs, provider, cache)?;
    let pv = embed_sentences(&pseudos, provider, cache)?;
    let similarities = cosine_pairs(&ov, &pv)?;
    let mut all = ov;
    all.extend(pv);
    let tags: Vec<Group> = pairs
        .iter()
        .map(|_| Group::Original)
        .chain(pairs.iter().map(|p| p.group))
        .collect();
    let projection = if all.len() >= 2 {
        project_2d(&all, &tags)?
    } else {
        Vec::new()
    };
    Ok(FidelityReport {
        pairs: pairs.len(),
        similarities,
        projection,
    })
}
