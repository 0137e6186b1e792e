//! Deterministic offline backend.
//!
//! - `TOP_CONSTRUCT`: root, one child per category of the sampled items, then
//!   recursive k-means (fixed branching) on item embeddings until a node holds
//!   at most `s_max` samples or reaches `d_max`. Samples are finally placed by
//!   centroid descent, the same rule `ITEM_MATCH` uses.
//! - `PREFERENCE_REASON`: the `n_paths - latent_leaves` leaves with the most
//!   history, plus the zero-history leaves closest to the user's profile text.
//! - `ITEM_MATCH`: descend from the root, taking the child whose centroid has
//!   the highest cosine with the item embedding.
//! - `SUMMARIZE`: attribute values joined in field order, capped at 256 tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Deserialize;
use serde_json::json;

use super::{LlmBackend, LlmRequest, NodeSpec, PromptKind, TransportError, TreeSketch, TreeSpec};
use crate::textenc::{cosine_raw, kmeans, HashingEncoder, TextEncoder};
use crate::util::{derive_seed, fnv1a, tokenize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockConfig {
    pub encoder: HashingEncoder,
    pub seed: u64,
    /// Largest number of samples a leaf may hold before it is split.
    pub s_max: usize,
    /// Maximum depth of the generated tree (root = 0).
    pub d_max: usize,
    pub branching: usize,
    /// Profile-derived leaves added on top of history leaves.
    pub latent_leaves: usize,
    pub summary_max_tokens: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            encoder: HashingEncoder::default(),
            seed: 0,
            s_max: 8,
            d_max: 4,
            branching: 3,
            latent_leaves: 1,
            summary_max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }
}

#[derive(Deserialize)]
struct SampleCtx {
    id: String,
    category: String,
    text: String,
}

#[derive(Deserialize)]
struct TopCtx {
    items: Vec<SampleCtx>,
}

#[derive(Deserialize)]
struct UserCtx {
    text: String,
}

#[derive(Deserialize)]
struct PrCtx {
    user: UserCtx,
    history_leaves: Vec<Option<String>>,
    tree: TreeSketch,
    n_paths: usize,
}

#[derive(Deserialize)]
struct ImCtx {
    item: SampleCtx,
    tree: TreeSketch,
}

#[derive(Deserialize)]
struct SumCtx {
    attributes: BTreeMap<String, String>,
}

fn bad_context(e: serde_json::Error) -> TransportError {
    TransportError::fatal(format!("mock backend: malformed request context: {e}"))
}

impl LlmBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn call(&self, req: &LlmRequest) -> Result<String, TransportError> {
        let ctx = req.context.clone();
        let out = match req.kind {
            PromptKind::TopConstruct => {
                let c: TopCtx = serde_json::from_value(ctx).map_err(bad_context)?;
                let samples: Vec<(String, String, String)> =
                    c.items.into_iter().map(|s| (s.id, s.category, s.text)).collect();
                serde_json::to_string(&build_mock_tree(&samples, &self.config)).unwrap()
            }
            PromptKind::PreferenceReason => {
                let c: PrCtx = serde_json::from_value(ctx).map_err(bad_context)?;
                let (leaves, reasons) = self.reason(&c);
                json!({"leaves": leaves, "reasons": reasons}).to_string()
            }
            PromptKind::ItemMatch => {
                let c: ImCtx = serde_json::from_value(ctx).map_err(bad_context)?;
                let leaf = match self.config.encoder.encode(&c.item.text) {
                    Ok(e) => descend(e.as_slice(), &c.tree),
                    Err(_) => descend(&[], &c.tree),
                };
                json!({ "leaf": leaf }).to_string()
            }
            PromptKind::Summarize => {
                let c: SumCtx = serde_json::from_value(ctx).map_err(bad_context)?;
                let joined = c
                    .attributes
                    .values()
                    .map(|v| v.trim())
                    .filter(|v| !v.is_empty())
                    .collect::<Vec<_>>()
                    .join("; ");
                let summary = joined
                    .split_whitespace()
                    .take(self.config.summary_max_tokens)
                    .collect::<Vec<_>>()
                    .join(" ");
                json!({ "summary": summary }).to_string()
            }
        };
        Ok(out)
    }
}

impl MockBackend {
    fn reason(&self, c: &PrCtx) -> (Vec<String>, BTreeMap<String, String>) {
        let leaves = c.tree.leaf_ids();
        let mut counts: BTreeMap<&str, usize> = leaves.iter().map(|l| (l.as_str(), 0)).collect();
        for l in c.history_leaves.iter().flatten() {
            if let Some(n) = counts.get_mut(l.as_str()) {
                *n += 1;
            }
        }
        let latent_n = self.config.latent_leaves.min(c.n_paths);
        let mut observed: Vec<(&str, usize)> = counts.iter().filter(|(_, &n)| n > 0).map(|(l, &n)| (*l, n)).collect();
        observed.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        observed.truncate(c.n_paths - latent_n);

        let mut out = Vec::new();
        let mut reasons = BTreeMap::new();
        for (l, n) in &observed {
            out.push(l.to_string());
            reasons.insert(l.to_string(), format!("explains {n} of the user's past interactions"));
        }
        if latent_n > 0 {
            if let Ok(profile) = self.config.encoder.encode(&c.user.text) {
                let mut latent: Vec<(f64, &str)> = counts
                    .iter()
                    .filter(|(_, &n)| n == 0)
                    .filter_map(|(l, _)| {
                        let node = c.tree.node(l)?;
                        let cen = node.centroid.as_ref()?;
                        Some((cosine_raw(profile.as_slice(), cen), *l))
                    })
                    .collect();
                latent.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                for (sim, l) in latent.into_iter().take(latent_n) {
                    out.push(l.to_string());
                    reasons.insert(
                        l.to_string(),
                        format!("unobserved preference suggested by the profile (similarity {sim:.3})"),
                    );
                }
            }
        }
        (out, reasons)
    }
}

/// Greedy centroid descent from the root. Children without a centroid score 0;
/// ties go to the lexicographically smallest id.
pub(crate) fn descend(emb: &[f32], tree: &TreeSketch) -> String {
    let by_id: HashMap<&str, &super::SketchNode> = tree.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut cur = tree.root.as_str();
    loop {
        let node = by_id[cur];
        if node.children.is_empty() {
            return cur.to_string();
        }
        let mut best: Option<(f64, &str)> = None;
        for c in &node.children {
            let score = by_id
                .get(c.as_str())
                .and_then(|n| n.centroid.as_ref())
                .map(|cen| if emb.is_empty() { 0.0 } else { cosine_raw(emb, cen) })
                .unwrap_or(0.0);
            let better = match best {
                None => true,
                Some((s, id)) => score > s || (score == s && c.as_str() < id),
            };
            if better {
                best = Some((score, c.as_str()));
            }
        }
        cur = best.unwrap().1;
    }
}

fn mean(vectors: &[&[f32]]) -> Vec<f32> {
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut m = vec![0f64; dim];
    for v in vectors {
        for (a, x) in m.iter_mut().zip(v.iter()) {
            *a += f64::from(*x);
        }
    }
    m.into_iter().map(|a| (a / vectors.len() as f64) as f32).collect()
}

struct Builder<'a> {
    cfg: &'a MockConfig,
    texts: Vec<&'a str>,
    embs: Vec<Option<Vec<f32>>>,
    nodes: Vec<NodeSpec>,
    children: Vec<Vec<usize>>,
}

impl Builder<'_> {
    fn add(&mut self, label: String, parent: Option<usize>, members: &[usize]) -> usize {
        let id = self.nodes.len();
        let vecs: Vec<&[f32]> = members.iter().filter_map(|&m| self.embs[m].as_deref()).collect();
        let centroid = (!vecs.is_empty()).then(|| mean(&vecs));
        self.nodes.push(NodeSpec {
            id: format!("n{id}"),
            label,
            parent: parent.map(|p| format!("n{p}")),
            centroid,
            items: Vec::new(),
        });
        self.children.push(Vec::new());
        if let Some(p) = parent {
            self.children[p].push(id);
        }
        id
    }

    fn grow(&mut self, node: usize, members: &[usize], depth: usize) {
        if members.len() <= self.cfg.s_max || depth >= self.cfg.d_max {
            return;
        }
        let usable: Vec<usize> = members.iter().copied().filter(|&m| self.embs[m].is_some()).collect();
        let k = self.cfg.branching.min(usable.len());
        if k < 2 {
            return;
        }
        let points: Vec<&[f32]> = usable.iter().map(|&m| self.embs[m].as_deref().unwrap()).collect();
        let seed = derive_seed(self.cfg.seed, fnv1a(0, self.nodes[node].label.as_bytes()));
        let Ok(clustering) = kmeans(&points, k, seed, 100) else { return };
        if clustering.k() < 2 {
            return;
        }
        let parent_label = self.nodes[node].label.clone();
        let groups: Vec<Vec<usize>> = (0..clustering.k())
            .map(|c| clustering.members(c).into_iter().map(|i| usable[i]).collect())
            .collect();
        let mut used = BTreeSet::new();
        for (i, g) in groups.iter().enumerate() {
            let mut label = format!("{parent_label} / {}", self.keywords(g, members));
            if !used.insert(label.clone()) {
                label = format!("{label} #{}", i + 1);
                used.insert(label.clone());
            }
            let child = self.add(label, Some(node), g);
            self.grow(child, g, depth + 1);
        }
    }

    /// Two tokens most over-represented in `group` relative to `parent`.
    fn keywords(&self, group: &[usize], parent: &[usize]) -> String {
        let df = |set: &[usize]| {
            let mut m: BTreeMap<String, usize> = BTreeMap::new();
            for &i in set {
                let toks: BTreeSet<String> = tokenize(self.texts[i]).collect();
                for t in toks {
                    *m.entry(t).or_default() += 1;
                }
            }
            m
        };
        let g = df(group);
        let p = df(parent);
        let mut scored: Vec<(f64, String)> = g
            .into_iter()
            .map(|(t, n)| {
                let lift = n as f64 / group.len() as f64 - p[&t] as f64 / parent.len() as f64;
                (lift, t)
            })
            .filter(|(lift, _)| *lift > 0.0)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let words: Vec<String> = scored.into_iter().take(2).map(|(_, t)| t).collect();
        if words.is_empty() {
            "general".to_string()
        } else {
            words.join(" ")
        }
    }
}

/// The mock tree builder, exposed so tests can use it as an oracle.
/// `samples` are `(id, category, text)` triples.
pub fn build_mock_tree(samples: &[(String, String, String)], cfg: &MockConfig) -> TreeSpec {
    let mut b = Builder {
        cfg,
        texts: samples.iter().map(|s| s.2.as_str()).collect(),
        embs: samples.iter().map(|s| cfg.encoder.encode(&s.2).ok().map(|e| e.as_slice().to_vec())).collect(),
        nodes: Vec::new(),
        children: Vec::new(),
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    let root = b.add("all preferences".to_string(), None, &all);
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_cat.entry(s.1.as_str()).or_default().push(i);
    }
    for (cat, members) in &by_cat {
        let child = b.add(cat.to_string(), Some(root), members);
        b.grow(child, members, 1);
    }

    let sketch = TreeSketch {
        root: b.nodes[root].id.clone(),
        nodes: b
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| super::SketchNode {
                id: n.id.clone(),
                label: n.label.clone(),
                parent: n.parent.clone(),
                children: b.children[i].iter().map(|&c| b.nodes[c].id.clone()).collect(),
                centroid: n.centroid.clone(),
            })
            .collect(),
    };
    let index: HashMap<String, usize> = b.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    for (i, s) in samples.iter().enumerate() {
        let leaf = match &b.embs[i] {
            Some(e) => descend(e, &sketch),
            None => descend(&[], &sketch),
        };
        b.nodes[index[&leaf]].items.push(s.0.clone());
    }
    TreeSpec { nodes: b.nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{complete, summarize_attributes, Payload, RetryPolicy};

    fn samples() -> Vec<(String, String, String)> {
        let mut v = Vec::new();
        for (c, words) in [("travel", ["alpine", "beach", "city"]), ("cooking", ["pasta", "curry", "bread"])] {
            for i in 0..12 {
                let w = words[i % 3];
                v.push((format!("{c}{i}"), c.to_string(), format!("{c} {w} {w}{i} {w} guide")));
            }
        }
        v
    }

    #[test]
    fn mock_tree_has_category_children_and_is_valid() {
        let t = build_mock_tree(&samples(), &MockConfig::default());
        crate::llm::check_tree_spec(&t).unwrap();
        let root = t.nodes.iter().find(|n| n.parent.is_none()).unwrap();
        let cats: BTreeSet<&str> = t
            .nodes
            .iter()
            .filter(|n| n.parent.as_deref() == Some(root.id.as_str()))
            .map(|n| n.label.as_str())
            .collect();
        assert_eq!(cats, BTreeSet::from(["cooking", "travel"]));
        let placed: usize = t.nodes.iter().map(|n| n.items.len()).sum();
        assert_eq!(placed, 24);
        // 12 samples per category > s_max = 8, so each category is split
        assert!(t.nodes.len() > 3);
    }

    #[test]
    fn mock_is_byte_identical_across_calls() {
        let mock = MockBackend::default();
        let items: Vec<crate::corpus::Item> = samples()
            .into_iter()
            .map(|(id, category, text)| crate::corpus::Item {
                id,
                category,
                attributes: BTreeMap::from([("title".into(), text)]),
                summary: None,
            })
            .collect();
        let req = crate::llm::render_top_prompt(&items, &Default::default()).unwrap();
        assert_eq!(mock.call(&req).unwrap(), mock.call(&req).unwrap());
        let r = complete(&req, &mock, &RetryPolicy::no_backoff(), &crate::llm::accept_any).unwrap();
        assert!(matches!(r.parsed, Payload::Tree(_)));
    }

    #[test]
    fn mock_summary_joins_and_truncates() {
        let mock = MockBackend::default();
        let attrs = BTreeMap::from([
            ("title".to_string(), "Alpine lakes".to_string()),
            ("description".to_string(), "word ".repeat(300)),
        ]);
        let s = summarize_attributes(&attrs, &mock, &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(s.split_whitespace().count(), 256);
        assert!(s.starts_with("word word"));
        let short = BTreeMap::from([
            ("title".to_string(), "Alpine lakes".to_string()),
            ("description".to_string(), "Hiking loop".to_string()),
        ]);
        let s1 = summarize_attributes(&short, &mock, &RetryPolicy::no_backoff()).unwrap();
        assert_eq!(s1, "Hiking loop; Alpine lakes");
        assert_eq!(s1, summarize_attributes(&short, &mock, &RetryPolicy::no_backoff()).unwrap());
    }
}
