//! Baseline diversifiers: MMR and DPP reranking of a candidate list, plus
//! uniform random augmentation.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::IndexedRandom;
use thiserror::Error;

use crate::corpus::{Dataset, Interaction};
use crate::textenc::cosine_raw;
use crate::util::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("asked for {k} items from {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("candidate list is empty")]
    Empty,
    #[error("{0} embeddings for {1} candidates")]
    DimensionMismatch(usize, usize),
    #[error("kernel is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("parameter out of range: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub item: String,
    pub rel: f64,
}

/// Pairwise cosine similarity of the candidates' embeddings.
pub fn similarity_matrix<E: AsRef<[f32]>>(emb: &[E]) -> Vec<Vec<f64>> {
    let n = emb.len();
    let mut s = vec![vec![0.0; n]; n];
    for a in 0..n {
        s[a][a] = cosine_raw(emb[a].as_ref(), emb[a].as_ref());
        for b in a + 1..n {
            let v = cosine_raw(emb[a].as_ref(), emb[b].as_ref());
            s[a][b] = v;
            s[b][a] = v;
        }
    }
    s
}

/// Greedy MMR over a precomputed similarity table. Returns candidate indices.
/// The first pick is the most relevant item; each later pick maximizes
/// `λ·rel - (1-λ)·max_sim_to_selected`, ties broken by relevance, then id.
pub fn mmr_select(cands: &[Candidate], sim: &[Vec<f64>], k: usize, lambda: f64) -> Result<Vec<usize>, RerankError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RerankError::InvalidParam(format!("lambda_mmr = {lambda}")));
    }
    if k > cands.len() {
        return Err(RerankError::KTooLarge { k, n: cands.len() });
    }
    if sim.len() != cands.len() {
        return Err(RerankError::DimensionMismatch(sim.len(), cands.len()));
    }
    let better = |a: (f64, usize), b: (f64, usize)| -> bool {
        // true if a beats b
        a.0 > b.0
            || (a.0 == b.0 && cands[a.1].rel > cands[b.1].rel)
            || (a.0 == b.0 && cands[a.1].rel == cands[b.1].rel && cands[a.1].item < cands[b.1].item)
    };
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut max_sim = vec![f64::NEG_INFINITY; cands.len()];
    let mut taken = vec![false; cands.len()];
    while selected.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..cands.len()).filter(|&i| !taken[i]) {
            let s = if selected.is_empty() {
                cands[i].rel
            } else {
                lambda * cands[i].rel - (1.0 - lambda) * max_sim[i]
            };
            if best.is_none_or(|b| better((s, i), b)) {
                best = Some((s, i));
            }
        }
        let (_, j) = best.expect("k <= n");
        taken[j] = true;
        selected.push(j);
        for i in 0..cands.len() {
            max_sim[i] = max_sim[i].max(sim[i][j]);
        }
    }
    Ok(selected)
}

/// MMR with cosine similarity of item embeddings; returns item ids.
pub fn mmr_rerank<E: AsRef<[f32]>>(cands: &[Candidate], emb: &[E], k: usize, lambda: f64) -> Result<Vec<String>, RerankError> {
    if emb.len() != cands.len() {
        return Err(RerankError::DimensionMismatch(emb.len(), cands.len()));
    }
    let sim = similarity_matrix(emb);
    Ok(mmr_select(cands, &sim, k, lambda)?
        .into_iter()
        .map(|i| cands[i].item.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    l: DMatrix<f64>,
}

impl DppKernel {
    /// Validates symmetry (1e-8) and eigenvalues (>= -1e-8).
    pub fn from_matrix(l: DMatrix<f64>) -> Result<Self, RerankError> {
        if !l.is_square() || l.nrows() == 0 {
            return Err(RerankError::NotPsd("kernel must be a non-empty square matrix".into()));
        }
        let asym = (&l - l.transpose()).abs().max();
        if asym > 1e-8 {
            return Err(RerankError::NotPsd(format!("asymmetry {asym:e}")));
        }
        let min = min_eigenvalue(&l);
        if min < -1e-8 {
            return Err(RerankError::NotPsd(format!("minimum eigenvalue {min:e}")));
        }
        Ok(Self { l })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.nrows() == 0
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub const DEFAULT_DPP_ALPHA: f64 = 3.0;

/// `L = Diag(q) S Diag(q)` with `q_i = exp(α·rel_i)` and
/// `S_ij = (1 + cos(e_i, e_j)) / 2`.
pub fn build_dpp_kernel<E: AsRef<[f32]>>(rel: &[f64], emb: &[E], alpha: f64) -> Result<DppKernel, RerankError> {
    if rel.is_empty() {
        return Err(RerankError::Empty);
    }
    if emb.len() != rel.len() {
        return Err(RerankError::DimensionMismatch(emb.len(), rel.len()));
    }
    let n = rel.len();
    let q: Vec<f64> = rel.iter().map(|r| (alpha * r).exp()).collect();
    let cos = similarity_matrix(emb);
    let mut l = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            l[(a, b)] = q[a] * q[b] * (1.0 + cos[a][b]) / 2.0;
        }
    }
    let l = (&l + l.transpose()) * 0.5;
    Ok(DppKernel { l })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppSelection {
    pub indices: Vec<usize>,
    /// Marginal gain `d_j²` of each pick, in pick order.
    pub gains: Vec<f64>,
}

pub const GAIN_FLOOR: f64 = 1e-12;

/// Fast greedy MAP with incremental Cholesky updates. Stops early once the
/// best marginal gain drops to `GAIN_FLOOR`. Ties go to the lower index.
pub fn dpp_greedy_map(kernel: &DppKernel, k: usize) -> Result<DppSelection, RerankError> {
    let l = &kernel.l;
    let n = l.nrows();
    if k > n {
        return Err(RerankError::KTooLarge { k, n });
    }
    let mut d2: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    let mut c: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
    let mut taken = vec![false; n];
    let mut out = DppSelection {
        indices: Vec::with_capacity(k),
        gains: Vec::with_capacity(k),
    };
    while out.indices.len() < k {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if d2[i] < -1e-8 {
                return Err(RerankError::NotPsd(format!("negative marginal gain {:e} at item {i}", d2[i])));
            }
            if best.is_none_or(|b| d2[i] > d2[b]) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        if d2[j] <= GAIN_FLOOR {
            break;
        }
        taken[j] = true;
        out.indices.push(j);
        out.gains.push(d2[j]);
        let dj = d2[j].sqrt();
        let cj = c[j].clone();
        for i in (0..n).filter(|&i| !taken[i]) {
            let e = (l[(j, i)] - cj.iter().zip(&c[i]).map(|(a, b)| a * b).sum::<f64>()) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
    }
    Ok(out)
}

/// Samples `per_user` items per user uniformly from those the user has not
/// interacted with in any split. Users with fewer free items get them all.
pub fn random_augment(dataset: &Dataset, per_user: usize, seed: u64) -> Vec<Interaction> {
    (0..dataset.users().len())
        .flat_map(|u| random_augment_user(dataset, u, per_user, seed))
        .collect()
}

/// [`random_augment`] for the user at index `user`.
pub fn random_augment_user(dataset: &Dataset, user: usize, per_user: usize, seed: u64) -> Vec<Interaction> {
    let Some(u) = dataset.users().get(user) else { return Vec::new() };
    if per_user == 0 {
        return Vec::new();
    }
    let mut seen: BTreeSet<String> = dataset.observed_items(&u.id);
    if let Some(s) = dataset.split(&u.id) {
        seen.extend(s.train.iter().cloned());
    }
    let free: Vec<&str> = dataset
        .items()
        .iter()
        .map(|i| i.id.as_str())
        .filter(|i| !seen.contains(*i))
        .collect();
    let mut r = rng(derive_seed(seed, user as u64));
    let mut picked: Vec<&str> = free.choose_multiple(&mut r, per_user.min(free.len())).copied().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| Interaction::synthetic(&u.id, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(rels: &[f64]) -> Vec<Candidate> {
        rels.iter()
            .enumerate()
            .map(|(i, &rel)| Candidate {
                item: format!("c{i}"),
                rel,
            })
            .collect()
    }

    #[test]
    fn mmr_degenerate_cases() {
        let c = cands(&[0.9, 0.5, 0.7, 0.1]);
        let emb: Vec<Vec<f32>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1], vec![0.5, 0.5]];
        assert_eq!(mmr_rerank(&c, &emb, 3, 1.0).unwrap(), vec!["c0", "c2", "c1"]);
        let flat = vec![vec![0.3; 4]; 4];
        assert_eq!(mmr_select(&c, &flat, 4, 0.0).unwrap(), vec![0, 2, 1, 3]);
        assert!(matches!(mmr_rerank(&c, &emb, 5, 0.5), Err(RerankError::KTooLarge { .. })));
    }

    #[test]
    fn dpp_diagonal_and_first_pick() {
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 3.0, 1.0, 2.0]));
        let k = DppKernel::from_matrix(l).unwrap();
        let s = dpp_greedy_map(&k, 3).unwrap();
        assert_eq!(s.indices, vec![1, 3, 2]);
        assert_eq!(s.gains, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn kernel_recipes() {
        let emb = vec![vec![1.0f32, 2.0]; 3];
        let k = build_dpp_kernel(&[0.1, 0.2, 0.3], &emb, 0.0).unwrap();
        assert!(k.matrix().iter().all(|v| (v - 1.0).abs() < 1e-6));
        // rank one: only one item can be picked
        assert_eq!(dpp_greedy_map(&k, 3).unwrap().indices.len(), 1);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(DppKernel::from_matrix(bad), Err(RerankError::NotPsd(_))));
    }
}
