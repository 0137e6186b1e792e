//! Per-user leaf selection over the preference tree, candidate retrieval and
//! per-leaf history counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Item, User};
use crate::llm::{accept_any, complete, render_pr_prompt, LlmBackend, Payload, RetryPolicy, TreeSketch};
use crate::top::{PreferenceTree, TreeError};

pub const DEFAULT_N_PATHS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafSelection {
    pub user: String,
    pub leaves: Vec<String>,
    #[serde(default)]
    pub reasons: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafFrequency {
    pub user: String,
    pub counts: BTreeMap<String, usize>,
}

impl LeafFrequency {
    pub fn get(&self, leaf: &str) -> usize {
        self.counts.get(leaf).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Counts the user's observed train items per leaf. Every leaf of the tree
/// appears in the map, with zero when the history never touches it.
pub fn leaf_frequencies(user: &str, dataset: &Dataset, tree: &PreferenceTree) -> Result<LeafFrequency, TreeError> {
    let mut counts: BTreeMap<String, usize> = tree.leaves().into_iter().map(|l| (l.to_string(), 0)).collect();
    for item in dataset.observed_train(user) {
        let leaf = tree.assignment(&item).ok_or_else(|| TreeError::Unassigned(item.clone()))?;
        *counts.entry(leaf.to_string()).or_default() += 1;
    }
    Ok(LeafFrequency {
        user: user.to_string(),
        counts,
    })
}

/// Asks the backend for the user's preference leaves. Unknown or duplicate ids
/// are dropped and the list is cut to `n_paths`; an empty result falls back to
/// the leaf with the most history.
pub fn select_leaves(
    user: &User,
    history: &[Item],
    tree: &PreferenceTree,
    sketch: &TreeSketch,
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
    n_paths: usize,
) -> Result<LeafSelection, TreeError> {
    let history_leaves: Vec<Option<String>> =
        history.iter().map(|i| tree.assignment(&i.id).map(str::to_string)).collect();
    let req = render_pr_prompt(user, history, &history_leaves, sketch, n_paths)?;
    let Payload::Leaves(choice) = complete(&req, backend, policy, &accept_any)?.parsed else {
        unreachable!()
    };

    let mut leaves = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dropped = Vec::new();
    for l in &choice.leaves {
        if !tree.is_leaf(l) || !seen.insert(l.clone()) {
            dropped.push(l.clone());
        } else if leaves.len() < n_paths {
            leaves.push(l.clone());
        } else {
            dropped.push(l.clone());
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "user {}: dropped {} leaf id(s) from the selection: {:?}",
            user.id,
            dropped.len(),
            dropped
        );
    }
    if leaves.is_empty() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in history_leaves.iter().flatten() {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        let fallback = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| l.to_string())
            .or_else(|| tree.leaves().first().map(|l| l.to_string()))
            .ok_or_else(|| TreeError::Invariant("tree has no leaves".into()))?;
        log::warn!("user {}: empty selection, falling back to leaf {fallback}", user.id);
        leaves.push(fallback);
    }
    let reasons = choice
        .reasons
        .into_iter()
        .filter(|(l, _)| leaves.contains(l))
        .collect();
    Ok(LeafSelection {
        user: user.id.clone(),
        leaves,
        reasons,
    })
}

/// Runs [`select_leaves`] for each user over the train history, using up to
/// `parallelism` threads. Output is in the order of `users`.
pub fn select_all(
    dataset: &Dataset,
    users: &[String],
    tree: &PreferenceTree,
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
    n_paths: usize,
    parallelism: usize,
) -> Result<Vec<LeafSelection>, TreeError> {
    let sketch = tree.sketch();
    let one = |uid: &String| -> Result<LeafSelection, TreeError> {
        let user = dataset
            .user(uid)
            .ok_or_else(|| TreeError::Invariant(format!("unknown user {uid}")))?;
        let history: Vec<Item> = dataset
            .observed_train(uid)
            .iter()
            .filter_map(|i| dataset.item(i).cloned())
            .collect();
        select_leaves(user, &history, tree, &sketch, backend, policy, n_paths)
    };
    let workers = parallelism.max(1).min(users.len().max(1));
    let chunk = users.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = users
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("reasoner thread panicked"))
            .collect()
    })
}

/// Items held by the selected leaves that are not in `history`.
pub fn candidate_items(
    selection: &LeafSelection,
    tree: &PreferenceTree,
    history: &BTreeSet<String>,
) -> Result<BTreeSet<String>, TreeError> {
    let mut out = BTreeSet::new();
    for leaf in &selection.leaves {
        out.extend(tree.leaf_items(leaf)?.into_iter().filter(|i| !history.contains(i)));
    }
    Ok(out)
}

pub fn write_selections(path: &Path, selections: &[LeafSelection]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in selections {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn load_selections(path: &Path) -> std::io::Result<Vec<LeafSelection>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Interaction, Split};
    use crate::llm::{LlmRequest, MockBackend, NodeSpec, TransportError, TreeSpec};
    use crate::textenc::HashingEncoder;

    fn item(id: &str) -> Item {
        Item {
            id: id.into(),
            category: "c".into(),
            attributes: BTreeMap::from([("title".into(), format!("thing {id}"))]),
            summary: None,
        }
    }

    /// Root with leaves A, B, C, D; items a1..a5 in A, b1..b3 in B, c1 in C,
    /// d1 in D.
    fn fixture() -> (Dataset, PreferenceTree, BTreeMap<String, String>) {
        let enc = HashingEncoder::default();
        let node = |id: &str, parent: Option<&str>, label: &str| NodeSpec {
            id: id.into(),
            label: label.into(),
            parent: parent.map(Into::into),
            centroid: None,
            items: vec![],
        };
        let spec = TreeSpec {
            nodes: vec![
                node("r", None, "all"),
                node("A", Some("r"), "alpine hiking"),
                node("B", Some("r"), "beach travel"),
                node("C", Some("r"), "city food"),
                node("D", Some("r"), "deep sea diving"),
            ],
        };
        let (mut tree, ids) = PreferenceTree::from_spec(&spec, &enc).unwrap();
        let mut items = Vec::new();
        let mut inter = Vec::new();
        let mut train = BTreeSet::new();
        for (leaf, n, prefix) in [("A", 5, "a"), ("B", 3, "b"), ("C", 1, "c"), ("D", 1, "d")] {
            for k in 1..=n {
                let id = format!("{prefix}{k}");
                items.push(item(&id));
                tree.set_assignment(&id, &ids[leaf]).unwrap();
                if prefix != "d" {
                    inter.push(Interaction::observed("u", &id));
                    train.insert(id);
                }
            }
        }
        let user = User {
            id: "u".into(),
            attributes: BTreeMap::from([("bio".into(), "loves deep sea diving".into())]),
            summary: None,
        };
        let d = Dataset::new(vec![user], items, inter)
            .unwrap()
            .with_splits(BTreeMap::from([("u".to_string(), Split { train, ..Default::default() })]));
        (d, tree, ids)
    }

    #[test]
    fn mock_selects_top_history_plus_latent() {
        let (d, tree, ids) = fixture();
        let sel = select_all(&d, &["u".into()], &tree, &MockBackend::default(), &RetryPolicy::no_backoff(), 3, 1)
            .unwrap()
            .remove(0);
        assert_eq!(sel.leaves[..2], [ids["A"].clone(), ids["B"].clone()]);
        assert_eq!(sel.leaves.len(), 3);
        // the only zero-history leaf is D
        assert_eq!(sel.leaves[2], ids["D"]);
    }

    #[test]
    fn frequencies_and_candidates() {
        let (d, tree, ids) = fixture();
        let f = leaf_frequencies("u", &d, &tree).unwrap();
        assert_eq!(f.get(&ids["A"]), 5);
        assert_eq!(f.get(&ids["D"]), 0);
        assert_eq!(f.total(), 9);
        let sel = LeafSelection {
            user: "u".into(),
            leaves: vec![ids["A"].clone(), ids["D"].clone()],
            reasons: BTreeMap::new(),
        };
        let hist = d.observed_items("u");
        let c = candidate_items(&sel, &tree, &hist).unwrap();
        assert_eq!(c, BTreeSet::from(["d1".to_string()]));
    }

    struct Fixed(String);
    impl LlmBackend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn call(&self, _: &LlmRequest) -> Result<String, TransportError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn invalid_and_excess_leaves_are_dropped() {
        let (d, tree, ids) = fixture();
        let mut many: Vec<String> = vec!["nope".into(), ids["C"].clone(), ids["C"].clone()];
        many.extend(["A", "B", "D"].iter().map(|k| ids[*k].clone()));
        let backend = Fixed(serde_json::json!({ "leaves": many }).to_string());
        let sel = select_all(&d, &["u".into()], &tree, &backend, &RetryPolicy::no_backoff(), 2, 1)
            .unwrap()
            .remove(0);
        assert_eq!(sel.leaves, vec![ids["C"].clone(), ids["A"].clone()]);

        let empty = Fixed(r#"{"leaves": ["ghost"]}"#.into());
        let sel = select_all(&d, &["u".into()], &tree, &empty, &RetryPolicy::no_backoff(), 2, 1)
            .unwrap()
            .remove(0);
        assert_eq!(sel.leaves, vec![ids["A"].clone()]);
    }

    #[test]
    fn selections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let s = vec![LeafSelection {
            user: "u".into(),
            leaves: vec!["x".into()],
            reasons: BTreeMap::from([("x".into(), "why".into())]),
        }];
        write_selections(&p, &s).unwrap();
        assert_eq!(load_selections(&p).unwrap(), s);
    }
}
