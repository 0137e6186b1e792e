//! Recall@k, Category-Entropy@k, per-user evaluation and trade-off reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{DataError, Dataset, SyntheticTruth};
use crate::recmodel::{recommend_topk, ModelParams};

pub use crate::util::spearman;

pub const DEFAULT_KS: [usize; 2] = [50, 100];

/// `|top-k ∩ test| / |test|`; 0 for an empty test set.
pub fn recall_at_k<S: AsRef<str>>(recs: &[S], test: &BTreeSet<String>, k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = recs.iter().take(k).filter(|r| test.contains(r.as_ref())).count();
    hits as f64 / test.len() as f64
}

/// Shannon entropy (natural log) of the category distribution in the first
/// `k` recommendations. Items without a category count as their own group.
pub fn category_entropy_at_k<S: AsRef<str>>(recs: &[S], categories: &HashMap<String, String>, k: usize) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in recs.iter().take(k) {
        let c = categories.get(r.as_ref()).map_or(r.as_ref(), String::as_str);
        *counts.entry(c).or_default() += 1;
    }
    entropy(counts.values().copied())
}

pub fn entropy(counts: impl IntoIterator<Item = usize>) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let m: usize = counts.iter().sum();
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / m;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user: String,
    pub recall: BTreeMap<usize, f64>,
    pub category_entropy: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub recall: BTreeMap<usize, f64>,
    pub category_entropy: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed_recall: Option<BTreeMap<usize, f64>>,
    pub n_users_evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<UserEval>>,
}

impl EvalResult {
    pub fn to_json(&self) -> Value {
        json!({
            "recall": self.recall,
            "category_entropy": self.category_entropy,
            "suppressed_recall": self.suppressed_recall,
            "n_users_evaluated": self.n_users_evaluated,
        })
    }
}

/// Scores precomputed ranked lists (e.g. reranker output). Users without
/// test items, or without a list, are skipped. Suppressed recall, when
/// `truth` is given, is recall over the test items in the user's suppressed
/// categories, averaged over users that have such items.
pub fn evaluate_lists(
    lists: &BTreeMap<String, Vec<String>>,
    dataset: &Dataset,
    ks: &[usize],
    truth: Option<&SyntheticTruth>,
    keep_per_user: bool,
) -> Result<EvalResult, DataError> {
    let cats = dataset.item_categories();
    let mut recall: BTreeMap<usize, f64> = ks.iter().map(|k| (*k, 0.0)).collect();
    let mut ce = recall.clone();
    let mut sup = recall.clone();
    let mut n_sup = 0usize;
    let mut n = 0usize;
    let mut per_user = Vec::new();
    for (user, split) in dataset.splits() {
        if split.test.is_empty() {
            continue;
        }
        let Some(recs) = lists.get(user) else { continue };
        n += 1;
        let mut ue = UserEval {
            user: user.clone(),
            recall: BTreeMap::new(),
            category_entropy: BTreeMap::new(),
        };
        for &k in ks {
            let r = recall_at_k(recs, &split.test, k);
            let e = category_entropy_at_k(recs, &cats, k);
            *recall.get_mut(&k).unwrap() += r;
            *ce.get_mut(&k).unwrap() += e;
            ue.recall.insert(k, r);
            ue.category_entropy.insert(k, e);
        }
        if let Some(t) = truth {
            let hidden: BTreeSet<&str> = t.suppressed.get(user).into_iter().flatten().map(String::as_str).collect();
            let target: BTreeSet<String> = split
                .test
                .iter()
                .filter(|i| cats.get(*i).is_some_and(|c| hidden.contains(c.as_str())))
                .cloned()
                .collect();
            if !target.is_empty() {
                n_sup += 1;
                for &k in ks {
                    *sup.get_mut(&k).unwrap() += recall_at_k(recs, &target, k);
                }
            }
        }
        if keep_per_user {
            per_user.push(ue);
        }
    }
    if n == 0 {
        return Err(DataError::NoEvaluableUsers);
    }
    let avg = |m: &mut BTreeMap<usize, f64>, d: usize| m.values_mut().for_each(|v| *v /= d.max(1) as f64);
    avg(&mut recall, n);
    avg(&mut ce, n);
    avg(&mut sup, n_sup);
    Ok(EvalResult {
        recall,
        category_entropy: ce,
        suppressed_recall: truth.map(|_| sup),
        n_users_evaluated: n,
        per_user: keep_per_user.then_some(per_user),
    })
}

/// Top-`k` lists for every user with test items, excluding the user's train
/// and validation items.
pub fn recommend_all(params: &ModelParams, dataset: &Dataset, k: usize) -> BTreeMap<String, Vec<String>> {
    let emb = params.embeddings();
    let ids: Vec<String> = dataset.items().iter().map(|i| i.id.clone()).collect();
    let mut out = BTreeMap::new();
    for (user, split) in dataset.splits() {
        if split.test.is_empty() {
            continue;
        }
        let Some(u) = dataset.user_idx(user) else { continue };
        let exclude: BTreeSet<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .filter_map(|i| dataset.item_idx(i))
            .collect();
        let recs = recommend_topk(&emb, u, k, &exclude, &ids);
        out.insert(user.clone(), recs.items.into_iter().map(|(i, _)| ids[i].clone()).collect());
    }
    out
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    ks: &[usize],
    truth: Option<&SyntheticTruth>,
) -> Result<EvalResult, DataError> {
    let kmax = ks.iter().copied().max().unwrap_or(1);
    evaluate_lists(&recommend_all(params, dataset, kmax), dataset, ks, truth, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub recall: f64,
    pub category_entropy: f64,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub k: usize,
    pub points: Vec<TradeoffPoint>,
}

/// `a` dominates `b`: no worse on both axes and better on one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Recall vs entropy at `k` for each labelled result, with Pareto flags.
pub fn tradeoff_report(results: &[(String, EvalResult)], k: usize) -> TradeoffReport {
    let xy: Vec<(f64, f64)> = results
        .iter()
        .map(|(_, r)| {
            (
                r.recall.get(&k).copied().unwrap_or(0.0),
                r.category_entropy.get(&k).copied().unwrap_or(0.0),
            )
        })
        .collect();
    let points = results
        .iter()
        .zip(&xy)
        .map(|((label, _), &p)| TradeoffPoint {
            label: label.clone(),
            recall: p.0,
            category_entropy: p.1,
            pareto: !xy.iter().any(|&q| dominates(q, p)),
        })
        .collect();
    TradeoffReport { k, points }
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("label,recall@{k},ce@{k},pareto\n", k = self.k);
        for p in &self.points {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", p.label, p.recall, p.category_entropy, p.pareto);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>10}  pareto\n", "config", format!("R@{}", self.k), format!("CE@{}", self.k));
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:<24} {:>10.4} {:>10.4}  {}",
                p.label,
                p.recall,
                p.category_entropy,
                if p.pareto { "*" } else { "" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_cases() {
        let recs = ["a", "x", "c", "y"];
        assert_eq!(recall_at_k(&recs, &set(&["a", "b", "c", "d"]), 4), 0.5);
        assert_eq!(recall_at_k(&recs, &set(&["a", "c"]), 4), 1.0);
        assert_eq!(recall_at_k(&recs, &set(&["q"]), 4), 0.0);
        assert_eq!(recall_at_k(&recs, &set(&["c"]), 2), 0.0);
    }

    #[test]
    fn entropy_cases() {
        let cats: HashMap<String, String> = [("a", "x"), ("b", "x"), ("c", "x"), ("d", "y")]
            .iter()
            .map(|(i, c)| (i.to_string(), c.to_string()))
            .collect();
        let e = category_entropy_at_k(&["a", "b", "c", "d"], &cats, 4);
        assert!((e - (0.75 * (4.0f64 / 3.0).ln() + 0.25 * 4.0f64.ln())).abs() < 1e-12);
        assert_eq!(category_entropy_at_k(&["a", "b", "c"], &cats, 3), 0.0);
    }

    #[test]
    fn pareto_flags() {
        let r = |rec: f64, ce: f64| EvalResult {
            recall: BTreeMap::from([(20, rec)]),
            category_entropy: BTreeMap::from([(20, ce)]),
            suppressed_recall: None,
            n_users_evaluated: 1,
            per_user: None,
        };
        let rep = tradeoff_report(&[("a".into(), r(0.2, 1.0)), ("b".into(), r(0.3, 1.2))], 20);
        assert_eq!(rep.points.iter().map(|p| p.pareto).collect::<Vec<_>>(), vec![false, true]);
        let rep = tradeoff_report(&[("solo".into(), r(0.1, 0.1))], 20);
        assert!(rep.points[0].pareto);
        assert!(rep.to_csv().starts_with("label,recall@20,ce@20,pareto\n"));
    }
}
