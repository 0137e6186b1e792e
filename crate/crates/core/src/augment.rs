//! Synthetic interaction generation: each candidate item gets a relevance
//! score against the user's profile and a diversity score from how often the
//! user's history already hits the item's leaf.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Interaction};
use crate::reasoner::{candidate_items, LeafFrequency, LeafSelection};
use crate::textenc::{cosine, EncodeError, TextEncoder};
use crate::top::{PreferenceTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Weight of the diversity term.
    pub lambda: f64,
    pub per_user: usize,
    pub min_score: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            per_user: 5,
            min_score: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("augment.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !self.min_score.is_finite() {
            return Err("augment.min_score must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub item: String,
    pub s_rel: f64,
    pub s_div: f64,
    pub score: f64,
}

/// `1 / (1 + freq)` of the item's leaf.
pub fn diversity_score(item: &str, freq: &LeafFrequency, tree: &PreferenceTree) -> Result<f64, TreeError> {
    let leaf = tree.assignment(item).ok_or_else(|| TreeError::Unassigned(item.to_string()))?;
    Ok(1.0 / (1.0 + freq.get(leaf) as f64))
}

/// Cosine of the two texts' embeddings mapped from [-1, 1] to [0, 1].
pub fn relevance_score(user_text: &str, item_text: &str, encoder: &dyn TextEncoder) -> Result<f64, EncodeError> {
    let u = encoder.encode(user_text)?;
    let i = encoder.encode(item_text)?;
    Ok(((1.0 + cosine(&u, &i)?) / 2.0).clamp(0.0, 1.0))
}

pub fn combine(lambda: f64, s_rel: f64, s_div: f64) -> f64 {
    (1.0 - lambda) * s_rel + lambda * s_div
}

pub fn score(
    user_text: &str,
    item: &crate::corpus::Item,
    cfg: &AugmentConfig,
    freq: &LeafFrequency,
    tree: &PreferenceTree,
    encoder: &dyn TextEncoder,
) -> Result<ScoredCandidate, TreeError> {
    let s_rel = relevance_score(user_text, &item.text(), encoder)?;
    let s_div = diversity_score(&item.id, freq, tree)?;
    Ok(ScoredCandidate {
        item: item.id.clone(),
        s_rel,
        s_div,
        score: combine(cfg.lambda, s_rel, s_div),
    })
}

/// Orders by score descending, then item id ascending.
pub fn rank(cands: &mut [ScoredCandidate]) {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item.cmp(&b.item)));
}

/// Scores every candidate of the selection (excluding anything the user
/// already interacted with in any split) and returns the best `per_user`
/// at or above `min_score`.
pub fn score_candidates(
    selection: &LeafSelection,
    cfg: &AugmentConfig,
    dataset: &Dataset,
    tree: &PreferenceTree,
    freq: &LeafFrequency,
    encoder: &dyn TextEncoder,
) -> Result<Vec<ScoredCandidate>, TreeError> {
    let user = dataset
        .user(&selection.user)
        .ok_or_else(|| TreeError::Invariant(format!("unknown user {}", selection.user)))?;
    let mut history = dataset.observed_items(&user.id);
    if let Some(s) = dataset.split(&user.id) {
        history.extend(s.train.iter().cloned());
    }
    let user_text = user.text();
    let mut out = Vec::new();
    for id in candidate_items(selection, tree, &history)? {
        let Some(item) = dataset.item(&id) else { continue };
        out.push(score(&user_text, item, cfg, freq, tree, encoder)?);
    }
    rank(&mut out);
    Ok(out)
}

pub fn generate(
    selection: &LeafSelection,
    cfg: &AugmentConfig,
    dataset: &Dataset,
    tree: &PreferenceTree,
    freq: &LeafFrequency,
    encoder: &dyn TextEncoder,
) -> Result<Vec<Interaction>, TreeError> {
    let ranked = score_candidates(selection, cfg, dataset, tree, freq, encoder)?;
    Ok(ranked
        .into_iter()
        .filter(|c| c.score >= cfg.min_score)
        .take(cfg.per_user)
        .map(|c| Interaction::synthetic(&selection.user, c.item))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textenc::HashingEncoder;
    use std::collections::BTreeMap;

    #[test]
    fn score_arithmetic() {
        assert!((combine(0.5, 0.8, 0.4) - 0.6).abs() < 1e-12);
        assert_eq!(combine(0.0, 0.3, 0.9), 0.3);
        assert_eq!(combine(1.0, 0.3, 0.9), 0.9);
    }

    #[test]
    fn relevance_bounds() {
        let enc = HashingEncoder::default();
        let same = relevance_score("alpine hiking trail", "alpine hiking trail", &enc).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        assert!(relevance_score("", "x", &enc).is_err());
    }

    #[test]
    fn diversity_from_frequency() {
        let enc = HashingEncoder::default();
        let spec = crate::top::tests::spec(&[("r", None), ("a", Some("r"))]);
        let (mut tree, ids) = PreferenceTree::from_spec(&spec, &enc).unwrap();
        tree.set_assignment("i", &ids["a"]).unwrap();
        let mut f = LeafFrequency {
            user: "u".into(),
            counts: BTreeMap::new(),
        };
        for (n, want) in [(0, 1.0), (1, 0.5), (9, 0.1)] {
            f.counts.insert(ids["a"].clone(), n);
            assert!((diversity_score("i", &f, &tree).unwrap() - want).abs() < 1e-12);
        }
        assert!(matches!(diversity_score("zz", &f, &tree), Err(TreeError::Unassigned(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    }
}
