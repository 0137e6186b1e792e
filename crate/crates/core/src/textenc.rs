//! Text embeddings, cosine similarity, k-means and diversity-preserving item
//! sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::Item;
use crate::util::{fnv1a, rng, tokenize};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("k-means needs 1 <= k <= points ({points}), got k = {k}")]
    InvalidK { k: usize, points: usize },
    #[error("max_iter must be >= 1")]
    InvalidMaxIter,
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v`; fails on the zero vector.
    pub fn from_vec(v: Vec<f32>) -> Result<Self, EncodeError> {
        let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EncodeError::EmptyText);
        }
        Ok(Self(v.into_iter().map(|x| (f64::from(x) / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Cosine of two unit vectors, clamped to [-1, 1].
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EncodeError> {
    if a.dim() != b.dim() {
        return Err(EncodeError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

/// Cosine of arbitrary (not necessarily normalized) vectors; 0 if either is zero.
pub fn cosine_raw(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Embedding, EncodeError>;
}

/// Seeded feature-hashing encoder: every lowercased alphanumeric token is
/// hashed to a coordinate with a ±1 sign, counts are summed and the result is
/// L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

impl HashingEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim, seed }
    }
}

impl Default for HashingEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 0)
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding, EncodeError> {
        let mut v = vec![0f32; self.dim];
        let mut unsigned = vec![0f32; self.dim];
        for tok in tokenize(text) {
            let h = fnv1a(self.seed, tok.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[idx] += sign;
            unsigned[idx] += 1.0;
        }
        // colliding tokens of opposite sign can cancel out completely
        if v.iter().all(|x| *x == 0.0) {
            v = unsigned;
        }
        Embedding::from_vec(v)
    }
}

/// Memoizing wrapper around another encoder; the memo can be persisted as an
/// embedding cache file keyed by text.
pub struct CachingEncoder<E> {
    inner: E,
    memo: Mutex<HashMap<String, Embedding>>,
}

impl<E: TextEncoder> CachingEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.memo.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> BTreeMap<String, Embedding> {
        self.memo.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn preload(&self, entries: BTreeMap<String, Embedding>) {
        self.memo.lock().unwrap().extend(entries);
    }
}

impl<E: TextEncoder> TextEncoder for CachingEncoder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, text: &str) -> Result<Embedding, EncodeError> {
        if let Some(e) = self.memo.lock().unwrap().get(text) {
            return Ok(e.clone());
        }
        let e = self.inner.encode(text)?;
        self.memo.lock().unwrap().insert(text.to_string(), e.clone());
        Ok(e)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"TENC";

/// Writes `TENC`, u32 dimension, then per record: u32 id length, id bytes,
/// `dim` little-endian f32.
pub fn save_embedding_cache(path: &Path, dim: usize, entries: &BTreeMap<String, Embedding>) -> Result<(), EncodeError> {
    let io = |e| EncodeError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for (id, e) in entries {
        if e.dim() != dim {
            return Err(EncodeError::DimensionMismatch(e.dim(), dim));
        }
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        for x in e.as_slice() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_embedding_cache(path: &Path) -> Result<(usize, BTreeMap<String, Embedding>), EncodeError> {
    let io = |e| EncodeError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut buf).map_err(io)?;
    if buf.len() < 8 || &buf[..4] != CACHE_MAGIC {
        return Err(EncodeError::Cache("bad magic".into()));
    }
    let dim = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8], EncodeError> {
        if pos + n > buf.len() {
            return Err(EncodeError::Cache("truncated record".into()));
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = BTreeMap::new();
    while let Ok(b) = take(4) {
        let len = u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|e| EncodeError::Cache(e.to_string()))?;
        let raw = take(4 * dim)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.insert(id, Embedding(v));
    }
    Ok((dim, out))
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    /// Number of clusters that ended empty and were dropped.
    pub dropped: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sq_dist(p: &[f32], c: &[f64]) -> f64 {
    p.iter().zip(c).map(|(x, y)| (f64::from(*x) - y).powi(2)).sum()
}

fn nearest(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iter` is hit. Clusters left empty are dropped and
/// counted in [`Clustering::dropped`].
pub fn kmeans<P: AsRef<[f32]>>(points: &[P], k: usize, seed: u64, max_iter: usize) -> Result<Clustering, EncodeError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(EncodeError::InvalidK { k, points: n });
    }
    if max_iter == 0 {
        return Err(EncodeError::InvalidMaxIter);
    }
    let dim = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(EncodeError::DimensionMismatch(p.as_ref().len(), dim));
    }
    let mut rng = rng(seed);
    let to_f64 = |p: &P| p.as_ref().iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();

    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![to_f64(&points[first])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !chosen[*i]).map(|(_, d)| d).sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if chosen[i] {
                    continue;
                }
                if r < *d {
                    pick = Some(i);
                    break;
                }
                r -= d;
            }
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i] && d2[i] > 0.0).unwrap())
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = to_f64(&points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p.as_ref(), &centroids);
            inertia += d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += f64::from(*x);
            }
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            if counts[j] > 0 {
                for (cv, s) in c.iter_mut().zip(&sums[j]) {
                    *cv = s / counts[j] as f64;
                }
            }
        }
    }
    // final inertia against the last centroids
    let inertia: f64 = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a])).sum();
    if history.last().is_none_or(|&h| inertia < h) {
        history.push(inertia);
    }

    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for j in 0..centroids.len() {
        if assignments.contains(&j) {
            remap[j] = kept.len();
            kept.push(centroids[j].clone());
        }
    }
    let dropped = centroids.len() - kept.len();
    Ok(Clustering {
        assignments: assignments.into_iter().map(|a| remap[a]).collect(),
        centroids: kept,
        inertia,
        inertia_history: history,
        dropped,
    })
}

/// Clusters items by text embedding and draws up to `per_cluster` items from
/// each cluster uniformly at random. Output is ordered by cluster, then by
/// draw order.
pub fn sample_diverse_items(
    items: &[Item],
    encoder: &dyn TextEncoder,
    k_clusters: usize,
    per_cluster: usize,
    seed: u64,
) -> Result<Vec<Item>, EncodeError> {
    assert!(per_cluster >= 1, "per_cluster must be >= 1");
    let embs = items
        .iter()
        .map(|i| encoder.encode(&i.text()).map(|e| e.0))
        .collect::<Result<Vec<_>, _>>()?;
    let clustering = kmeans(&embs, k_clusters, seed, 100)?;
    let mut rng = rng(seed ^ 0x5a5a_5a5a);
    let mut out = Vec::new();
    for c in 0..clustering.k() {
        let mut members = clustering.members(c);
        members.shuffle(&mut rng);
        out.extend(members.into_iter().take(per_cluster).map(|i| items[i].clone()));
    }
    Ok(out)
}
