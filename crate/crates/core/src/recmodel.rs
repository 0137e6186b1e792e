//! MF and LightGCN backbones trained with BPR loss, sampled negatives and
//! Adam, with early stopping on validation recall.
//!
//! Parameters are one flat `f64` vector: the user table followed by the item
//! table, both row-major with `dim` columns. LightGCN scores use
//! `F = mean(E, ÂE, …, Â^L E)` with the symmetric-normalized bipartite
//! adjacency `Â`; because `Â` is symmetric, the backward pass is the same
//! propagation applied to the score gradient.

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::influence::Projector;
use crate::util::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no train interactions")]
    EmptyData,
    #[error("{kind} index {idx} out of range")]
    OutOfRange { kind: &'static str, idx: usize },
    #[error("user {0} has no train positives")]
    NoPositives(String),
    #[error("user {0} interacted with every item; no negatives can be sampled")]
    NoNegatives(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint dimensions {found} do not match dataset {expected}")]
    DimensionMismatch { expected: String, found: String },
    #[error("trace holds {have} snapshots, {need} needed")]
    InsufficientTrace { have: usize, need: usize },
    #[error("projection: {0}")]
    Projection(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mf,
    Lightgcn,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(Backbone::Mf),
            "lightgcn" => Ok(Backbone::Lightgcn),
            other => Err(format!("unknown backbone {other:?} (expected mf or lightgcn)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Training data

/// Index-based view of a dataset's splits. User and item indices follow the
/// dataset's order.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted train item indices per user (synthetic interactions included).
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl TrainData {
    pub fn from_dataset(d: &Dataset) -> Result<Self, ModelError> {
        let user_ids: Vec<String> = d.users().iter().map(|u| u.id.clone()).collect();
        let item_ids: Vec<String> = d.items().iter().map(|i| i.id.clone()).collect();
        let idx = |set: &BTreeSet<String>| -> Vec<u32> {
            let mut v: Vec<u32> = set.iter().filter_map(|i| d.item_idx(i)).map(|i| i as u32).collect();
            v.sort_unstable();
            v
        };
        let mut train = Vec::with_capacity(user_ids.len());
        let mut val = Vec::with_capacity(user_ids.len());
        let mut test = Vec::with_capacity(user_ids.len());
        for u in &user_ids {
            let s = d.split(u).cloned().unwrap_or_default();
            train.push(idx(&s.train));
            val.push(idx(&s.val));
            test.push(idx(&s.test));
        }
        let data = Self {
            user_ids,
            item_ids,
            train,
            val,
            test,
        };
        if data.n_positives() == 0 {
            return Err(ModelError::EmptyData);
        }
        Ok(data)
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_positives(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Adds train pairs, ignoring ones already present.
    pub fn add_train(&mut self, pairs: &[(usize, usize)]) {
        for &(u, i) in pairs {
            let row = &mut self.train[u];
            if let Err(pos) = row.binary_search(&(i as u32)) {
                row.insert(pos, i as u32);
            }
        }
    }

    fn positives(&self) -> Vec<(u32, u32)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
            .collect()
    }

    /// Uniform negative for `u` outside its train positives.
    fn sample_negative(&self, u: usize, rng: &mut ChaCha8Rng) -> Result<u32, ModelError> {
        let pos = &self.train[u];
        if pos.len() >= self.n_items() {
            return Err(ModelError::NoNegatives(self.user_ids[u].clone()));
        }
        loop {
            let j = rng.random_range(0..self.n_items() as u32);
            if pos.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters and propagation

/// Symmetric-normalized user-item adjacency in CSR form over
/// `n_users + n_items` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl Graph {
    pub fn from_train(data: &TrainData) -> Self {
        let nu = data.n_users();
        let n = nu + data.n_items();
        let mut deg = vec![0usize; n];
        for (u, items) in data.train.iter().enumerate() {
            deg[u] += items.len();
            for &i in items {
                deg[nu + i as usize] += 1;
            }
        }
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (u, items) in data.train.iter().enumerate() {
            for &i in items {
                adj[u].push((nu + i as usize) as u32);
                adj[nu + i as usize].push(u as u32);
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for (a, row) in adj.iter_mut().enumerate() {
            row.sort_unstable();
            for &b in row.iter() {
                indices.push(b);
                weights.push(1.0 / ((deg[a] * deg[b as usize]) as f64).sqrt());
            }
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            weights,
        }
    }

    /// Dense copy, for tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (a, row) in m.iter_mut().enumerate() {
            for p in self.indptr[a]..self.indptr[a + 1] {
                row[self.indices[p] as usize] = self.weights[p];
            }
        }
        m
    }

    fn apply(&self, x: &[f64], dim: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..self.n {
            let dst = &mut out[a * dim..(a + 1) * dim];
            for p in self.indptr[a]..self.indptr[a + 1] {
                let w = self.weights[p];
                let b = self.indices[p] as usize;
                for (d, s) in dst.iter_mut().zip(&x[b * dim..(b + 1) * dim]) {
                    *d += w * s;
                }
            }
        }
    }

    /// `mean(x, Âx, …, Â^L x)`.
    fn smooth(&self, x: &[f64], dim: usize, layers: usize) -> Vec<f64> {
        let mut acc = x.to_vec();
        let mut cur = x.to_vec();
        let mut next = vec![0.0; x.len()];
        for _ in 0..layers {
            self.apply(&cur, dim, &mut next);
            for (a, v) in acc.iter_mut().zip(&next) {
                *a += v;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let s = 1.0 / (layers + 1) as f64;
        acc.iter_mut().for_each(|v| *v *= s);
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Backbone,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub layers: usize,
    /// User rows then item rows.
    pub theta: Vec<f64>,
    graph: Option<Arc<Graph>>,
}

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_LAYERS: usize = 2;
pub const INIT_STD: f64 = 0.1;

impl ModelParams {
    /// Draws every entry from N(0, 0.1²). LightGCN also builds `Â` from the
    /// train interactions.
    pub fn init(data: &TrainData, backbone: Backbone, dim: usize, layers: usize, seed: u64) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidConfig("embedding dimension must be positive".into()));
        }
        if data.n_positives() == 0 {
            return Err(ModelError::EmptyData);
        }
        let mut r = rng(derive_seed(seed, 0x1417));
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let n = (data.n_users() + data.n_items()) * dim;
        let theta = (0..n).map(|_| normal.sample(&mut r)).collect();
        let mut p = Self {
            backbone,
            n_users: data.n_users(),
            n_items: data.n_items(),
            dim,
            layers,
            theta,
            graph: None,
        };
        p.attach(data)?;
        Ok(p)
    }

    /// Rebuilds the propagation graph from `data` (after the train set changed
    /// or after loading a checkpoint).
    pub fn attach(&mut self, data: &TrainData) -> Result<(), ModelError> {
        if data.n_users() != self.n_users || data.n_items() != self.n_items {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{} users x {} items", data.n_users(), data.n_items()),
                found: format!("{} users x {} items", self.n_users, self.n_items),
            });
        }
        self.graph = match self.backbone {
            Backbone::Lightgcn if self.layers > 0 => Some(Arc::new(Graph::from_train(data))),
            _ => None,
        };
        Ok(())
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_deref()
    }

    /// Same model with different raw parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.theta.len());
        Self {
            theta,
            ..self.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn propagated(&self, x: &[f64]) -> Vec<f64> {
        match (&self.graph, self.backbone) {
            (Some(g), Backbone::Lightgcn) => g.smooth(x, self.dim, self.layers),
            _ => x.to_vec(),
        }
    }

    /// Final scoring embeddings.
    pub fn embeddings(&self) -> Embeddings {
        Embeddings {
            n_users: self.n_users,
            n_items: self.n_items,
            dim: self.dim,
            data: self.propagated(&self.theta),
        }
    }

    /// Gradient of the raw parameters given the gradient of the final
    /// embeddings.
    fn backprop(&self, grad_final: Vec<f64>) -> Vec<f64> {
        match (&self.graph, self.backbone) {
            (Some(g), Backbone::Lightgcn) => g.smooth(&grad_final, self.dim, self.layers),
            _ => grad_final,
        }
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64, ModelError> {
        if user >= self.n_users {
            return Err(ModelError::OutOfRange { kind: "user", idx: user });
        }
        if item >= self.n_items {
            return Err(ModelError::OutOfRange { kind: "item", idx: item });
        }
        Ok(self.embeddings().score(user, item))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn user(&self, u: usize) -> &[f64] {
        &self.data[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let o = (self.n_users + i) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i))
    }

    pub fn scores(&self, u: usize) -> Vec<f64> {
        let eu = self.user(u);
        (0..self.n_items).map(|i| dot(eu, self.item(i))).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// `-ln σ(x)` without overflow.
pub fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub type Triple = (usize, usize, usize);

/// Sum of `-ln σ(ŷ_ui - ŷ_uj)` over triples, and optionally its gradient
/// with respect to the raw parameters scaled by `scale`.
fn loss_and_grad(params: &ModelParams, triples: &[Triple], scale: f64, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let emb = params.embeddings();
    let d = params.dim;
    let nu = params.n_users;
    let mut loss = 0.0;
    let mut g = want_grad.then(|| vec![0.0; params.theta.len()]);
    for &(u, i, j) in triples {
        let (eu, ei, ej) = (emb.user(u), emb.item(i), emb.item(j));
        let x: f64 = eu.iter().zip(ei.iter().zip(ej)).map(|(a, (b, c))| a * (b - c)).sum();
        loss += softplus_neg(x);
        if let Some(g) = g.as_mut() {
            let c = -sigmoid(-x) * scale;
            for k in 0..d {
                g[u * d + k] += c * (ei[k] - ej[k]);
                g[(nu + i) * d + k] += c * eu[k];
                g[(nu + j) * d + k] -= c * eu[k];
            }
        }
    }
    (loss, g.map(|g| params.backprop(g)))
}

/// Mean BPR loss over `triples`.
pub fn bpr_loss(params: &ModelParams, triples: &[Triple]) -> f64 {
    assert!(!triples.is_empty(), "bpr_loss needs at least one triple");
    loss_and_grad(params, triples, 1.0, false).0 / triples.len() as f64
}

/// Gradient of [`bpr_loss`] with respect to `params.theta`.
pub fn bpr_grad(params: &ModelParams, triples: &[Triple]) -> Vec<f64> {
    assert!(!triples.is_empty(), "bpr_grad needs at least one triple");
    loss_and_grad(params, triples, 1.0 / triples.len() as f64, true).1.unwrap()
}

/// Each train positive of `user` paired with `neg_ratio` negatives drawn from
/// a stream seeded by `(user, neg_seed)`.
pub fn user_triples(data: &TrainData, user: usize, neg_ratio: usize, neg_seed: u64) -> Result<Vec<Triple>, ModelError> {
    if user >= data.n_users() {
        return Err(ModelError::OutOfRange { kind: "user", idx: user });
    }
    if data.train[user].is_empty() {
        return Err(ModelError::NoPositives(data.user_ids[user].clone()));
    }
    let mut r = rng(derive_seed(neg_seed, user as u64));
    let mut out = Vec::with_capacity(data.train[user].len() * neg_ratio);
    for &i in &data.train[user] {
        for _ in 0..neg_ratio {
            out.push((user, i as usize, data.sample_negative(user, &mut r)? as usize));
        }
    }
    Ok(out)
}

/// Summed (not averaged) BPR loss of one user.
pub fn user_local_loss(params: &ModelParams, data: &TrainData, user: usize, neg_ratio: usize, neg_seed: u64) -> Result<f64, ModelError> {
    let t = user_triples(data, user, neg_ratio, neg_seed)?;
    Ok(loss_and_grad(params, &t, 1.0, false).0)
}

/// Gradient of the summed local loss of `users`. Users without positives
/// contribute nothing.
pub fn local_grad(params: &ModelParams, data: &TrainData, users: &[usize], neg_ratio: usize, neg_seed: u64) -> Result<Vec<f64>, ModelError> {
    let mut triples = Vec::new();
    for &u in users {
        match user_triples(data, u, neg_ratio, neg_seed) {
            Ok(t) => triples.extend(t),
            Err(ModelError::NoPositives(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if triples.is_empty() {
        return Ok(vec![0.0; params.theta.len()]);
    }
    Ok(loss_and_grad(params, &triples, 1.0, true).1.unwrap())
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub neg_ratio: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub val_k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            neg_ratio: 50,
            epochs_max: 200,
            patience: 10,
            batch_size: 1024,
            seed: 0,
            eval_every: 1,
            val_k: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.neg_ratio == 0 {
            return bad("neg_ratio must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.val_k == 0 {
            return bad("batch_size, eval_every and val_k must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            theta[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Trace

/// Trailing parameter snapshots (one per epoch boundary, epoch 0 = initial
/// parameters) and the projected update of each epoch.
/// One step of a trace window: previous and current parameters, the
/// projected delta and the epoch.
pub type WindowStep<'a> = (&'a [f64], &'a [f64], &'a [f64], usize);

#[derive(Debug, Clone)]
pub struct TrainTrace {
    capacity: usize,
    snapshots: VecDeque<(usize, Vec<f64>)>,
    deltas: VecDeque<(usize, Vec<f64>)>,
    projector: Option<Projector>,
}

impl TrainTrace {
    /// `capacity` is the number of snapshots kept (influence window + 1).
    pub fn new(capacity: usize, projector: Option<Projector>) -> Self {
        Self {
            capacity: capacity.max(1),
            snapshots: VecDeque::new(),
            deltas: VecDeque::new(),
            projector,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    pub fn record(&mut self, epoch: usize, theta: &[f64]) -> Result<(), ModelError> {
        if let Some((_, prev)) = self.snapshots.back() {
            let delta: Vec<f64> = theta.iter().zip(prev).map(|(a, b)| a - b).collect();
            let d = match &self.projector {
                Some(p) => p.project(&delta).map_err(|e| ModelError::Projection(e.to_string()))?,
                None => delta,
            };
            self.deltas.push_back((epoch, d));
            if self.deltas.len() > self.capacity.saturating_sub(1).max(1) {
                self.deltas.pop_front();
            }
        }
        self.snapshots.push_back((epoch, theta.to_vec()));
        if self.snapshots.len() > self.capacity {
            self.snapshots.pop_front();
        }
        Ok(())
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.snapshots.iter().map(|(e, s)| (*e, s.as_slice()))
    }

    pub fn deltas(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.deltas.iter().map(|(e, s)| (*e, s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn latest_epoch(&self) -> Option<usize> {
        self.snapshots.back().map(|(e, _)| *e)
    }

    /// The last `k` steps as `(θ^{i-1}, θ^i, projected delta)` tuples, oldest
    /// first.
    pub fn window(&self, k: usize) -> Result<Vec<WindowStep<'_>>, ModelError> {
        if k == 0 || self.snapshots.len() < k + 1 || self.deltas.len() < k {
            return Err(ModelError::InsufficientTrace {
                have: self.snapshots.len(),
                need: k + 1,
            });
        }
        let s0 = self.snapshots.len() - k - 1;
        let d0 = self.deltas.len() - k;
        Ok((0..k)
            .map(|t| {
                let prev = &self.snapshots[s0 + t].1;
                let (epoch, cur) = &self.snapshots[s0 + t + 1];
                let delta = &self.deltas[d0 + t].1;
                (prev.as_slice(), cur.as_slice(), delta.as_slice(), *epoch)
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub evals: usize,
    pub stopped_early: bool,
}

pub trait EpochHook {
    fn after_epoch(&mut self, epoch: usize, params: &ModelParams, trace: &TrainTrace);
}

impl EpochHook for () {
    fn after_epoch(&mut self, _: usize, _: &ModelParams, _: &TrainTrace) {}
}

/// Stepwise trainer. [`train`] drives it to completion; the influence loop
/// drives it directly so it can grow the train set between epochs.
pub struct Trainer {
    params: ModelParams,
    data: TrainData,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    trace: TrainTrace,
    history: TrainHistory,
    best: Option<Vec<f64>>,
    evals_since_best: usize,
    done: bool,
}

impl Trainer {
    pub fn new(params: ModelParams, data: TrainData, cfg: TrainConfig, mut trace: TrainTrace) -> Result<Self, ModelError> {
        cfg.validate()?;
        if data.n_positives() == 0 {
            return Err(ModelError::EmptyData);
        }
        trace.record(0, &params.theta)?;
        Ok(Self {
            adam: Adam::new(params.theta.len()),
            rng: rng(derive_seed(cfg.seed, 0x7a1)),
            params,
            data,
            cfg,
            epoch: 0,
            trace,
            history: TrainHistory::default(),
            best: None,
            evals_since_best: 0,
            done: false,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Extends the train set; LightGCN's adjacency is rebuilt.
    pub fn add_train(&mut self, pairs: &[(usize, usize)]) -> Result<(), ModelError> {
        self.data.add_train(pairs);
        self.params.attach(&self.data)
    }

    fn run_epoch(&mut self) -> Result<f64, ModelError> {
        let mut pos = self.data.positives();
        pos.shuffle(&mut self.rng);
        let mut triples = Vec::with_capacity(pos.len() * self.cfg.neg_ratio);
        for &(u, i) in &pos {
            for _ in 0..self.cfg.neg_ratio {
                let j = self.data.sample_negative(u as usize, &mut self.rng)?;
                triples.push((u as usize, i as usize, j as usize));
            }
        }
        let mut total = 0.0;
        for batch in triples.chunks(self.cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let (loss, g) = loss_and_grad(&self.params, batch, scale, true);
            if !loss.is_finite() {
                return Err(ModelError::NonFinite {
                    epoch: self.epoch + 1,
                    detail: format!("batch loss {loss}"),
                });
            }
            total += loss;
            self.adam.step(&mut self.params.theta, &g.unwrap(), &self.cfg);
        }
        if self.params.theta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                epoch: self.epoch + 1,
                detail: "parameters diverged".into(),
            });
        }
        Ok(total / triples.len() as f64)
    }

    /// Runs one epoch, records the snapshot and, when due, evaluates and
    /// updates the early-stopping state. Returns `false` once training is over.
    pub fn step(&mut self) -> Result<bool, ModelError> {
        if self.done {
            return Ok(false);
        }
        let loss = self.run_epoch()?;
        self.epoch += 1;
        self.trace.record(self.epoch, &self.params.theta)?;
        let mut val = None;
        if self.epoch.is_multiple_of(self.cfg.eval_every) {
            let r = val_recall(&self.params, &self.data, self.cfg.val_k);
            val = Some(r);
            self.history.evals += 1;
            if self.best.is_none() || r > self.history.best_val_recall {
                self.history.best_val_recall = r;
                self.history.best_epoch = self.epoch;
                self.best = Some(self.params.theta.clone());
                self.evals_since_best = 0;
            } else {
                self.evals_since_best += 1;
                if self.evals_since_best >= self.cfg.patience {
                    self.history.stopped_early = true;
                    self.done = true;
                }
            }
        }
        log::debug!("epoch {} loss {loss:.5} val {:?}", self.epoch, val);
        self.history.epochs.push(EpochRecord {
            epoch: self.epoch,
            loss,
            val_recall: val,
        });
        if self.epoch >= self.cfg.epochs_max {
            self.done = true;
        }
        Ok(!self.done)
    }

    /// Best-validation parameters (current ones if no evaluation ran).
    pub fn finish(self) -> (ModelParams, TrainTrace, TrainHistory) {
        let mut params = self.params;
        if let Some(best) = self.best {
            params.theta = best;
        }
        (params, self.trace, self.history)
    }
}

/// Trains until early stopping or `epochs_max`, restoring the
/// best-validation parameters.
pub fn train(
    params: ModelParams,
    data: &TrainData,
    cfg: &TrainConfig,
    trace: TrainTrace,
    hook: &mut dyn EpochHook,
) -> Result<(ModelParams, TrainTrace, TrainHistory), ModelError> {
    let mut t = Trainer::new(params, data.clone(), *cfg, trace)?;
    while t.step()? {
        hook.after_epoch(t.epoch, &t.params, &t.trace);
    }
    hook.after_epoch(t.epoch, &t.params, &t.trace);
    Ok(t.finish())
}

/// Mean Recall@k over users with validation items, excluding train items.
pub fn val_recall(params: &ModelParams, data: &TrainData, k: usize) -> f64 {
    let emb = params.embeddings();
    let mut sum = 0.0;
    let mut n = 0usize;
    for u in 0..data.n_users() {
        if data.val[u].is_empty() {
            continue;
        }
        let exclude: BTreeSet<usize> = data.train[u].iter().map(|&i| i as usize).collect();
        let recs = recommend_topk(&emb, u, k, &exclude, &data.item_ids);
        let hits = recs.items.iter().filter(|(i, _)| data.val[u].binary_search(&(*i as u32)).is_ok()).count();
        sum += hits as f64 / data.val[u].len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    /// `(item index, score)`, best first.
    pub items: Vec<(usize, f64)>,
    /// Fewer than `k` items were available.
    pub short: bool,
}

/// Top-`k` items by score outside `exclude`; ties go to the smaller item id.
pub fn recommend_topk(emb: &Embeddings, user: usize, k: usize, exclude: &BTreeSet<usize>, item_ids: &[String]) -> Recommendation {
    let eu = emb.user(user);
    let mut scored: Vec<(usize, f64)> = (0..emb.n_items)
        .filter(|i| !exclude.contains(i))
        .map(|i| (i, dot(eu, emb.item(i))))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then_with(|| item_ids[a.0].cmp(&item_ids[b.0]));
    let short = scored.len() < k;
    if !short && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Recommendation { items: scored, short }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 4] = b"TREC";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the parameters as little-endian `f32`. Loading gives back the
/// parameters rounded to `f32`, and saving those again is byte-identical.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let io = |e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::with_capacity(32 + params.theta.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match params.backbone {
        Backbone::Mf => 0,
        Backbone::Lightgcn => 1,
    });
    for v in [params.n_users, params.n_items, params.dim, params.layers] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &params.theta {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads a checkpoint. The LightGCN graph is not stored; call
/// [`ModelParams::attach`] (or use [`load_checkpoint_for`]).
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let io = |e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 25 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let backbone = match bytes[8] {
        0 => Backbone::Mf,
        1 => Backbone::Lightgcn,
        t => return Err(bad(&format!("unknown backbone tag {t}"))),
    };
    let (nu, ni, dim, layers) = (u32_at(9) as usize, u32_at(13) as usize, u32_at(17) as usize, u32_at(21) as usize);
    let n = (nu + ni) * dim;
    let body = &bytes[25..];
    if body.len() != n * 4 {
        return Err(bad(&format!("expected {} parameter bytes, found {}", n * 4, body.len())));
    }
    let theta = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(ModelParams {
        backbone,
        n_users: nu,
        n_items: ni,
        dim,
        layers,
        theta,
        graph: None,
    })
}

/// [`load_checkpoint`] plus a dimension check against `data` and graph rebuild.
pub fn load_checkpoint_for(path: &Path, data: &TrainData) -> Result<ModelParams, ModelError> {
    let mut p = load_checkpoint(path)?;
    p.attach(data)?;
    Ok(p)
}

/// Human-readable export keyed by entity id.
pub fn export_json(params: &ModelParams, data: &TrainData) -> Value {
    let d = params.dim;
    let rows = |offset: usize, ids: &[String]| -> serde_json::Map<String, Value> {
        ids.iter()
            .enumerate()
            .map(|(k, id)| {
                let o = (offset + k) * d;
                (id.clone(), json!(params.theta[o..o + d]))
            })
            .collect()
    };
    json!({
        "backbone": params.backbone,
        "dim": d,
        "layers": params.layers,
        "users": rows(0, &data.user_ids),
        "items": rows(params.n_users, &data.item_ids),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// 5 users, 8 items, every user with 2-3 positives, splits filled.
    pub(crate) fn tiny() -> TrainData {
        let train: Vec<Vec<u32>> = vec![vec![0, 1, 2], vec![1, 3], vec![2, 4, 5], vec![5, 6], vec![0, 7]];
        TrainData {
            user_ids: (0..5).map(|u| format!("u{u}")).collect(),
            item_ids: (0..8).map(|i| format!("i{i}")).collect(),
            val: vec![vec![3], vec![0], vec![6], vec![7], vec![1]],
            test: vec![vec![]; 5],
            train,
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_neg(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_neg(1.0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(softplus_neg(1e4) >= 0.0 && softplus_neg(1e4) < 1e-300);
        assert!((softplus_neg(-1e4) - 1e4).abs() < 1e-9);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let data = tiny();
        let mut p = ModelParams::init(&data, Backbone::Mf, 4, 0, 1).unwrap();
        p.theta.iter_mut().for_each(|v| *v = 0.0);
        let l = user_local_loss(&p, &data, 1, 7, 3).unwrap();
        assert!((l - 2.0 * 7.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bpr_loss(&p, &[(0, 0, 3)]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lightgcn_without_layers_is_mf() {
        let data = tiny();
        let mf = ModelParams::init(&data, Backbone::Mf, 4, 0, 9).unwrap();
        let lg = ModelParams {
            backbone: Backbone::Lightgcn,
            ..mf.clone()
        };
        for u in 0..5 {
            for i in 0..8 {
                assert_eq!(mf.score(u, i).unwrap(), lg.score(u, i).unwrap());
            }
        }
    }

    #[test]
    fn isolated_item_has_empty_row() {
        let data = tiny();
        let mut d2 = data.clone();
        d2.train[3] = vec![5];
        d2.train[4] = vec![0]; // item 6 and 7 now isolated
        let g = Graph::from_train(&d2);
        let dense = g.to_dense();
        assert!(dense[5 + 6].iter().all(|v| *v == 0.0));
        for (a, row) in dense.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                assert_eq!(*v, dense[b][a]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let data = tiny();
        let p = ModelParams::init(&data, Backbone::Lightgcn, 4, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint_for(&path, &data).unwrap();
        for (a, b) in p.theta.iter().zip(&q.theta) {
            assert_eq!(*a as f32, *b as f32);
        }
        let path2 = dir.path().join("m2.bin");
        save_checkpoint(&q, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let mut other = data.clone();
        other.item_ids.push("extra".into());
        assert!(matches!(load_checkpoint_for(&path, &other), Err(ModelError::DimensionMismatch { .. })));
        std::fs::write(&path2, b"NOPE00000000000000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path2), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn topk_ties_and_exclusion() {
        let data = tiny();
        let mut p = ModelParams::init(&data, Backbone::Mf, 1, 0, 0).unwrap();
        p.theta.iter_mut().for_each(|v| *v = 1.0);
        let emb = p.embeddings();
        let r = recommend_topk(&emb, 0, 3, &BTreeSet::from([0]), &data.item_ids);
        assert_eq!(r.items.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        let all: BTreeSet<usize> = (0..8).collect();
        let r = recommend_topk(&emb, 0, 3, &all, &data.item_ids);
        assert!(r.items.is_empty() && r.short);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { neg_ratio: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
