#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use toprec::corpus::Item;
use toprec::llm::{NodeSpec, TreeSpec};
use toprec::recmodel::TrainData;
use toprec::textenc::HashingEncoder;
use toprec::top::PreferenceTree;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Writes straight to the process stdout so the line survives test capture.
pub fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} {}: {name} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

/// Random train data: every user has between 2 and `max_per_user` train
/// items and one validation item; no test items.
pub fn toy_data(n_users: usize, n_items: usize, max_per_user: usize, seed: u64) -> TrainData {
    let mut r = rng(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for _ in 0..n_users {
        let mut all: Vec<u32> = (0..n_items as u32).collect();
        all.shuffle(&mut r);
        let n = r.random_range(2..=max_per_user.max(2));
        let mut t = all[..n].to_vec();
        t.sort_unstable();
        train.push(t);
        val.push(vec![all[n]]);
    }
    TrainData {
        user_ids: (0..n_users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
        train,
        val,
        test: vec![Vec::new(); n_users],
    }
}

/// log det of a symmetric positive definite matrix by Cholesky; `None` when
/// the matrix is not numerically positive definite.
pub fn logdet(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][i] = d.sqrt();
                acc += d.ln();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Some(acc)
}

/// Greedy MAP by brute force: each step adds the item that maximizes the log
/// determinant of the selected submatrix (ties to the lower index).
pub fn naive_dpp_greedy(l: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = l.len();
    let mut sel: Vec<usize> = Vec::new();
    while sel.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|j| !sel.contains(j)) {
            let idx: Vec<usize> = sel.iter().copied().chain([j]).collect();
            let sub: Vec<Vec<f64>> = idx.iter().map(|&a| idx.iter().map(|&b| l[a][b]).collect()).collect();
            if let Some(v) = logdet(&sub) {
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
        }
        match best {
            Some((_, j)) => sel.push(j),
            None => break,
        }
    }
    sel
}

/// Random symmetric positive definite matrix `B Bᵀ / n + 1e-3 I`.
pub fn random_spd(n: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v: f64 = (0..n).map(|t| b[i][t] * b[j][t]).sum::<f64>() / n as f64;
                    v + if i == j { 1e-3 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// Plain Spearman rank correlation with average ranks for ties.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for t in i..=j {
                r[idx[t]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn item(id: &str, category: &str, title: &str) -> Item {
    Item {
        id: id.into(),
        category: category.into(),
        attributes: BTreeMap::from([("title".into(), title.into())]),
        summary: None,
    }
}

const WORDS: [&str; 16] = [
    "alpine", "pasta", "guitar", "soccer", "chess", "denim", "quantum", "stocks", "noir", "poetry", "yoga", "tulip",
    "lens", "puppy", "senate", "castle",
];

/// A random tree (depth up to 3, fan-out 1..=4) with `n_items` items spread
/// over its leaves by a skewed random profile. Returns the tree and items.
pub fn random_loaded_tree(seed: u64, n_items: usize) -> (PreferenceTree, Vec<Item>) {
    let mut r = rng(seed);
    let mut nodes = vec![NodeSpec {
        id: "n0".into(),
        label: "root".into(),
        parent: None,
        centroid: None,
        items: vec![],
    }];
    let mut frontier = vec![("n0".to_string(), 0usize)];
    while let Some((id, depth)) = frontier.pop() {
        if depth >= 3 || (depth > 0 && r.random_bool(0.35)) {
            continue;
        }
        for _ in 0..r.random_range(1..=4) {
            let child = format!("n{}", nodes.len());
            nodes.push(NodeSpec {
                id: child.clone(),
                label: format!("pref {child} {}", WORDS[r.random_range(0..WORDS.len())]),
                parent: Some(id.clone()),
                centroid: None,
                items: vec![],
            });
            frontier.push((child, depth + 1));
        }
    }
    let enc = HashingEncoder::default();
    let (mut tree, _) = PreferenceTree::from_spec(&TreeSpec { nodes }, &enc).expect("valid random tree");
    let leaves: Vec<String> = tree.leaves().iter().map(|s| s.to_string()).collect();
    // heavy-tailed leaf weights, some leaves empty
    let weights: Vec<f64> = leaves
        .iter()
        .map(|_| if r.random_bool(0.25) { 0.0 } else { r.random_range(0.0f64..1.0).powi(4) + 1e-3 })
        .collect();
    let total: f64 = weights.iter().sum::<f64>().max(1e-9);
    let mut items = Vec::with_capacity(n_items);
    for n in 0..n_items {
        let mut x = r.random_range(0.0..total);
        let mut leaf = leaves.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                leaf = i;
                break;
            }
            x -= w;
        }
        let title = format!(
            "{} {} {}",
            WORDS[r.random_range(0..WORDS.len())],
            WORDS[r.random_range(0..WORDS.len())],
            WORDS[r.random_range(0..WORDS.len())]
        );
        let it = item(&format!("it{n:04}"), "c", &title);
        tree.set_assignment(&it.id, &leaves[leaf]).expect("leaf exists");
        items.push(it);
    }
    (tree, items)
}

pub fn leaf_set(tree: &PreferenceTree) -> BTreeSet<String> {
    tree.leaves().iter().map(|s| s.to_string()).collect()
}
