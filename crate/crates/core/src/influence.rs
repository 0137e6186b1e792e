//! k-step user influence over the training trajectory, gradient sketching
//! and the influence-guided augmentation loop.
//!
//! The influence of a set of users over the last `k` epochs is
//! `Σ ⟨∇ℓ(users; θ^{i-1}), θ^i - θ^{i-1}⟩`, with the local loss gradient taken
//! at the stored snapshot `θ^{i-1}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recmodel::{local_grad, ModelError, ModelParams, TrainConfig, TrainData, TrainHistory, TrainTrace, Trainer};
use crate::util::{derive_seed, mix64, rng};

pub const DEFAULT_PROJECTION_DIM: usize = 512;
pub const MAX_WINDOW: usize = 8;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("vector has dimension {found}, projector expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid influence config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    Identity,
    Rademacher,
}

/// Seeded linear sketch `R^n -> R^m`. The Rademacher matrix has entries
/// `±1/√m` and is regenerated column by column on every call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projector {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub kind: ProjectionKind,
}

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            output_dim: dim,
            seed: 0,
            kind: ProjectionKind::Identity,
        }
    }

    /// A Rademacher sketch, or the identity when `output_dim >= input_dim`.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self, InfluenceError> {
        if output_dim == 0 || input_dim == 0 {
            return Err(InfluenceError::InvalidConfig("projection dimensions must be positive".into()));
        }
        if output_dim >= input_dim {
            return Ok(Self::identity(input_dim));
        }
        Ok(Self {
            input_dim,
            output_dim,
            seed,
            kind: ProjectionKind::Rademacher,
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, InfluenceError> {
        if x.len() != self.input_dim {
            return Err(InfluenceError::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if self.kind == ProjectionKind::Identity {
            return Ok(x.to_vec());
        }
        let m = self.output_dim;
        let mut out = vec![0.0; m];
        for (c, &v) in x.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let col = derive_seed(self.seed, c as u64);
            for (w, chunk) in out.chunks_mut(64).enumerate() {
                let bits = mix64(col ^ (w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for (b, o) in chunk.iter_mut().enumerate() {
                    if bits >> b & 1 == 1 {
                        *o += v;
                    } else {
                        *o -= v;
                    }
                }
            }
        }
        let s = 1.0 / (m as f64).sqrt();
        out.iter_mut().for_each(|o| *o *= s);
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Negative-sampling seed for the local loss at the step ending at `epoch`.
fn step_seed(neg_seed: u64, epoch: usize) -> u64 {
    derive_seed(neg_seed, epoch as u64)
}

/// Exact k-step influence of one user: full-dimensional updates, no sketch.
pub fn user_influence_exact(
    user: usize,
    params: &ModelParams,
    data: &TrainData,
    trace: &TrainTrace,
    k: usize,
    neg_ratio: usize,
    neg_seed: u64,
) -> Result<f64, InfluenceError> {
    check_window(k)?;
    let mut total = 0.0;
    for (prev, cur, _, epoch) in trace.window(k)? {
        let at = params.with_theta(prev.to_vec());
        let g = local_grad(&at, data, &[user], neg_ratio, step_seed(neg_seed, epoch))?;
        let delta: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
        total += dot(&g, &delta);
    }
    Ok(total)
}

fn check_window(k: usize) -> Result<(), InfluenceError> {
    if k == 0 || k > MAX_WINDOW {
        return Err(InfluenceError::InvalidConfig(format!("window k must lie in 1..={MAX_WINDOW}, got {k}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    /// Epochs `(t - k, t)` spanned by the window.
    pub window: (usize, usize),
    pub per_group: BTreeMap<usize, f64>,
    pub members: BTreeMap<usize, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<BTreeMap<usize, f64>>,
}

/// Sketched influence of every group: the group's summed local gradient is
/// projected with the trace's projector and paired with the projected deltas
/// recorded during training.
pub fn group_influence(
    groups: &BTreeMap<usize, Vec<usize>>,
    params: &ModelParams,
    data: &TrainData,
    trace: &TrainTrace,
    k: usize,
    neg_ratio: usize,
    neg_seed: u64,
) -> Result<InfluenceReport, InfluenceError> {
    check_window(k)?;
    let window = trace.window(k)?;
    let mut per_group: BTreeMap<usize, f64> = groups.keys().map(|g| (*g, 0.0)).collect();
    for (prev, _, delta, epoch) in &window {
        let at = params.with_theta(prev.to_vec());
        for (gid, members) in groups {
            let g = local_grad(&at, data, members, neg_ratio, step_seed(neg_seed, *epoch))?;
            let pg = match trace.projector() {
                Some(p) => p.project(&g)?,
                None => g,
            };
            if pg.len() != delta.len() {
                return Err(InfluenceError::DimensionMismatch {
                    expected: delta.len(),
                    found: pg.len(),
                });
            }
            *per_group.get_mut(gid).unwrap() += dot(&pg, delta);
        }
    }
    let to = window.last().map(|w| w.3).unwrap_or(0);
    Ok(InfluenceReport {
        window: (to - k, to),
        per_group,
        members: groups.clone(),
        per_user: None,
    })
}

/// Seeded random partition of `users` into at most `g` non-empty groups.
pub fn make_groups(users: &[usize], g: usize, seed: u64) -> BTreeMap<usize, Vec<usize>> {
    let mut shuffled = users.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut rng(derive_seed(seed, 0x6709)));
    let g = g.max(1).min(shuffled.len().max(1));
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, u) in shuffled.into_iter().enumerate() {
        out.entry(n % g).or_default().push(u);
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

/// Members of the most influential groups (descending; ties by group id),
/// skipping users already augmented, until `budget` users are chosen.
pub fn select_targets(report: &InfluenceReport, budget: usize, already: &BTreeSet<usize>) -> Vec<usize> {
    let mut order: Vec<(&usize, &f64)> = report.per_group.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let mut out = Vec::new();
    for (gid, _) in order {
        for &u in report.members.get(gid).map(Vec::as_slice).unwrap_or_default() {
            if out.len() >= budget {
                return out;
            }
            if !already.contains(&u) {
                out.push(u);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub k: usize,
    pub interval: usize,
    /// Fraction of all users that may be augmented over the whole run.
    pub budget_fraction: f64,
    /// Users per round; `None` means a third of the total budget.
    pub per_round: Option<usize>,
    pub groups: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            k: 3,
            interval: 1,
            budget_fraction: 0.3,
            per_round: None,
            groups: 20,
            projection_dim: DEFAULT_PROJECTION_DIM,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        check_window(self.k)?;
        if self.interval == 0 || self.groups == 0 || self.projection_dim == 0 {
            return Err(InfluenceError::InvalidConfig("interval, groups and projection_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(InfluenceError::InvalidConfig("budget_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn total_budget(&self, n_users: usize) -> usize {
        (self.budget_fraction * n_users as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn round_size(&self, n_users: usize) -> usize {
        let total = self.total_budget(n_users);
        self.per_round.unwrap_or(total.div_ceil(3)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRound {
    pub round: usize,
    pub epoch: usize,
    pub window: (usize, usize),
    pub group_influence: BTreeMap<usize, f64>,
    pub selected_users: Vec<String>,
    pub added_interactions: usize,
}

pub fn write_audit(w: &mut impl Write, rounds: &[AuditRound]) -> std::io::Result<()> {
    for r in rounds {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub struct LoopOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub audit: Vec<AuditRound>,
    /// Train data at the end of the run (original plus synthetic pairs).
    pub data: TrainData,
    pub augmented_users: BTreeSet<usize>,
}

/// Trains on `data`; every `interval` epochs once the trace holds a full
/// window, scores user groups by influence, asks `augment` for synthetic
/// `(user, item)` pairs for the selected users and adds them to the train
/// set. With a zero budget this is exactly plain training.
pub fn dynamic_loop<E>(
    params: ModelParams,
    data: TrainData,
    train_cfg: &TrainConfig,
    loop_cfg: &LoopConfig,
    mut augment: impl FnMut(&[usize]) -> Result<Vec<(usize, usize)>, E>,
) -> Result<LoopOutcome, E>
where
    E: From<InfluenceError>,
{
    loop_cfg.validate()?;
    let n_users = data.n_users();
    let budget = loop_cfg.total_budget(n_users);
    let projector = if budget > 0 {
        Some(Projector::new(params.n_params(), loop_cfg.projection_dim, derive_seed(loop_cfg.seed, 0x9e0))?)
    } else {
        None
    };
    let trace = TrainTrace::new(loop_cfg.k + 1, projector);
    let eligible: Vec<usize> = (0..n_users).filter(|&u| !data.train[u].is_empty()).collect();
    let groups = make_groups(&eligible, loop_cfg.groups, loop_cfg.seed);
    let neg_seed = derive_seed(loop_cfg.seed, 0x1f5);

    let mut trainer = Trainer::new(params, data, *train_cfg, trace).map_err(InfluenceError::from)?;
    let mut augmented = BTreeSet::new();
    let mut audit = Vec::new();
    while trainer.step().map_err(InfluenceError::from)? {
        let remaining = budget.saturating_sub(augmented.len());
        if remaining == 0 || trainer.epoch() % loop_cfg.interval != 0 || trainer.trace().len() < loop_cfg.k + 1 {
            continue;
        }
        let report = group_influence(
            &groups,
            trainer.params(),
            trainer.data(),
            trainer.trace(),
            loop_cfg.k,
            train_cfg.neg_ratio,
            neg_seed,
        )?;
        let selected = select_targets(&report, loop_cfg.round_size(n_users).min(remaining), &augmented);
        if selected.is_empty() {
            continue;
        }
        let pairs = augment(&selected)?;
        trainer.add_train(&pairs).map_err(InfluenceError::from)?;
        augmented.extend(selected.iter().copied());
        log::info!(
            "augmentation round {} at epoch {}: {} users, {} interactions",
            audit.len() + 1,
            trainer.epoch(),
            selected.len(),
            pairs.len()
        );
        audit.push(AuditRound {
            round: audit.len() + 1,
            epoch: trainer.epoch(),
            window: report.window,
            group_influence: report.per_group,
            selected_users: selected.iter().map(|&u| trainer.data().user_ids[u].clone()).collect(),
            added_interactions: pairs.len(),
        });
    }
    let data = trainer.data().clone();
    let (params, _, history) = trainer.finish();
    Ok(LoopOutcome {
        params,
        history,
        audit,
        data,
        augmented_users: augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_linear_and_seeded() {
        let p = Projector::new(300, 40, 7).unwrap();
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..300).map(|i| (i as f64 * 0.11).cos()).collect();
        let px = p.project(&x).unwrap();
        let py = p.project(&y).unwrap();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        for (a, (b, c)) in p.project(&sum).unwrap().iter().zip(px.iter().zip(&py)) {
            assert!((a - (2.0 * b - 3.0 * c)).abs() < 1e-9);
        }
        assert!(p.project(&vec![0.0; 300]).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(px, Projector::new(300, 40, 7).unwrap().project(&x).unwrap());
        assert!(matches!(p.project(&x[..10]), Err(InfluenceError::DimensionMismatch { .. })));
        assert_eq!(Projector::new(10, 10, 1).unwrap().kind, ProjectionKind::Identity);
    }

    #[test]
    fn target_selection_order() {
        let report = InfluenceReport {
            window: (0, 1),
            per_group: BTreeMap::from([(0, 1.0), (1, 3.0), (2, 3.0)]),
            members: BTreeMap::from([(0, vec![0, 1]), (1, vec![2, 3]), (2, vec![4])]),
            per_user: None,
        };
        assert!(select_targets(&report, 0, &BTreeSet::new()).is_empty());
        assert_eq!(select_targets(&report, 2, &BTreeSet::new()), vec![2, 3]);
        assert_eq!(select_targets(&report, 10, &BTreeSet::new()), vec![2, 3, 4, 0, 1]);
        assert_eq!(select_targets(&report, 2, &BTreeSet::from([2])), vec![3, 4]);
    }

    #[test]
    fn groups_partition_users() {
        let users: Vec<usize> = (0..53).collect();
        let g = make_groups(&users, 20, 3);
        assert_eq!(g.len(), 20);
        let mut all: Vec<usize> = g.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, users);
        assert_eq!(g, make_groups(&users, 20, 3));
        assert_eq!(make_groups(&users[..3], 20, 3).len(), 3);
    }

    #[test]
    fn budget_arithmetic() {
        let c = LoopConfig::default();
        assert_eq!(c.total_budget(200), 60);
        assert_eq!(c.round_size(200), 20);
        assert_eq!(LoopConfig { budget_fraction: 0.0, ..c }.total_budget(200), 0);
        assert_eq!(LoopConfig { budget_fraction: 0.3, ..c }.total_budget(7), 3);
    }
}
