//! The tree of preferences: construction, item-to-leaf assignment, load
//! refinement and persistence.
//!
//! Node ids are content-addressed from the labels on the root path, so a tree
//! rebuilt from identical labels serializes identically.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Item;
use crate::llm::{
    complete, render_im_prompt, render_summarize_prompt, render_top_prompt, LlmBackend, LlmError, Payload,
    RetryPolicy, SketchNode, TreeConstraints, TreeSketch, TreeSpec,
};
use crate::textenc::{kmeans, EncodeError, TextEncoder};
use crate::util::{derive_seed, fnv1a, sha256_hex};

pub const TREE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("tree invariant violated: {0}")]
    Invariant(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(String),
    #[error("item {0} is not assigned to a leaf")]
    Unassigned(String),
    #[error("item matching failed for {} item(s): {}", .0.len(), summarize_failures(.0))]
    ItemFailures(Vec<(String, String)>),
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error("unsupported tree file version: {0}")]
    Version(String),
    #[error("tree file schema error: {0}")]
    Schema(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn summarize_failures(f: &[(String, String)]) -> String {
    f.iter()
        .take(5)
        .map(|(i, e)| format!("{i}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefNode {
    pub id: String,
    pub label: String,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub depth: usize,
}

impl PrefNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One refinement operation, as recorded in the ops log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RefineOp {
    /// Sibling leaves replaced by one leaf holding the union of their items.
    Merge { merged: Vec<String>, into: String, load: usize },
    /// Leaf turned into a parent of finer leaves.
    Split { leaf: String, children: Vec<String>, loads: Vec<usize> },
    /// Only-child leaf folded into its parent, which becomes a leaf.
    Collapse { leaf: String, into: String, load: usize },
    /// Underloaded leaf without sibling leaves handed to the lightest leaf of a
    /// sibling subtree.
    Absorb { leaf: String, into: String, load: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTree {
    root: String,
    nodes: BTreeMap<String, PrefNode>,
    assignments: BTreeMap<String, String>,
    centroids: BTreeMap<String, Vec<f32>>,
    ops_log: Vec<RefineOp>,
}

fn content_id(path_labels: &[&str]) -> String {
    let joined = path_labels.join("\u{1f}");
    format!("v{}", &sha256_hex(joined.as_bytes())[..16])
}

fn mean_of(vectors: &[&[f32]]) -> Option<Vec<f32>> {
    let first = vectors.first()?;
    let mut m = vec![0f64; first.len()];
    for v in vectors {
        for (a, x) in m.iter_mut().zip(v.iter()) {
            *a += f64::from(*x);
        }
    }
    Some(m.into_iter().map(|a| (a / vectors.len() as f64) as f32).collect())
}

impl PreferenceTree {
    /// Builds a tree from a parsed spec, re-keying nodes by content. Returns
    /// the tree and the spec-id to tree-id mapping. Node centroids come from
    /// the spec when given, else from the label embedding.
    pub fn from_spec(spec: &TreeSpec, encoder: &dyn TextEncoder) -> Result<(Self, BTreeMap<String, String>), TreeError> {
        crate::llm::check_tree_spec(spec).map_err(TreeError::Invariant)?;
        let root_spec = spec.nodes.iter().find(|n| n.parent.is_none()).unwrap();
        let mut kids: HashMap<&str, Vec<&crate::llm::NodeSpec>> = HashMap::new();
        for n in &spec.nodes {
            if let Some(p) = &n.parent {
                kids.entry(p.as_str()).or_default().push(n);
            }
        }
        let mut tree = PreferenceTree {
            root: String::new(),
            nodes: BTreeMap::new(),
            assignments: BTreeMap::new(),
            centroids: BTreeMap::new(),
            ops_log: Vec::new(),
        };
        let mut mapping = BTreeMap::new();
        // (spec node, parent tree id, label path)
        let mut queue = std::collections::VecDeque::new();
        queue.push_back((root_spec, None::<String>, Vec::<String>::new()));
        while let Some((n, parent, mut path)) = queue.pop_front() {
            let mut label = n.label.trim().to_string();
            // sibling labels must differ for ids to be unique
            let mut id;
            let mut bump = 1;
            loop {
                path.push(label.clone());
                id = content_id(&path.iter().map(String::as_str).collect::<Vec<_>>());
                if !tree.nodes.contains_key(&id) {
                    break;
                }
                path.pop();
                bump += 1;
                label = format!("{} ({bump})", n.label.trim());
            }
            let depth = path.len() - 1;
            if let Some(p) = &parent {
                tree.nodes.get_mut(p).unwrap().children.push(id.clone());
            } else {
                tree.root = id.clone();
            }
            let centroid = match &n.centroid {
                Some(c) if c.len() == encoder.dim() => c.clone(),
                _ => encoder.encode(&label).map(|e| e.as_slice().to_vec())?,
            };
            tree.centroids.insert(id.clone(), centroid);
            tree.nodes.insert(
                id.clone(),
                PrefNode {
                    id: id.clone(),
                    label,
                    parent: parent.clone(),
                    children: Vec::new(),
                    depth,
                },
            );
            mapping.insert(n.id.clone(), id.clone());
            for c in kids.get(n.id.as_str()).into_iter().flatten() {
                queue.push_back((c, Some(id.clone()), path.clone()));
            }
        }
        Ok((tree, mapping))
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn node(&self, id: &str) -> Option<&PrefNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PrefNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> Vec<&str> {
        self.nodes.values().filter(|n| n.is_leaf()).map(|n| n.id.as_str()).collect()
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.nodes.get(id).is_some_and(PrefNode::is_leaf)
    }

    pub fn depth(&self) -> usize {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn assignments(&self) -> &BTreeMap<String, String> {
        &self.assignments
    }

    pub fn assignment(&self, item: &str) -> Option<&str> {
        self.assignments.get(item).map(String::as_str)
    }

    pub fn centroid(&self, node: &str) -> Option<&[f32]> {
        self.centroids.get(node).map(Vec::as_slice)
    }

    pub fn ops_log(&self) -> &[RefineOp] {
        &self.ops_log
    }

    /// Ids of the nodes on the path root → `node`, inclusive.
    pub fn path(&self, node: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(node);
        while let Some(n) = cur {
            out.push(n.id.as_str());
            cur = n.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        out.reverse();
        out
    }

    /// Whether `node` lies in the subtree rooted at `ancestor`.
    pub fn is_under(&self, node: &str, ancestor: &str) -> bool {
        self.path(node).contains(&ancestor)
    }

    /// Items per leaf (leaves without items included with load 0).
    pub fn leaf_loads(&self) -> BTreeMap<String, usize> {
        let mut loads: BTreeMap<String, usize> = self.leaves().into_iter().map(|l| (l.to_string(), 0)).collect();
        for leaf in self.assignments.values() {
            *loads.entry(leaf.clone()).or_default() += 1;
        }
        loads
    }

    pub fn leaf_items(&self, leaf: &str) -> Result<BTreeSet<String>, TreeError> {
        match self.nodes.get(leaf) {
            None => Err(TreeError::UnknownNode(leaf.to_string())),
            Some(n) if !n.is_leaf() => Err(TreeError::NotALeaf(leaf.to_string())),
            Some(_) => Ok(self
                .assignments
                .iter()
                .filter(|(_, l)| l.as_str() == leaf)
                .map(|(i, _)| i.clone())
                .collect()),
        }
    }

    /// Prompt-facing view. Children keep insertion order.
    pub fn sketch(&self) -> TreeSketch {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        let mut queue = std::collections::VecDeque::from([self.root.clone()]);
        while let Some(id) = queue.pop_front() {
            let n = &self.nodes[&id];
            nodes.push(SketchNode {
                id: n.id.clone(),
                label: n.label.clone(),
                parent: n.parent.clone(),
                children: n.children.clone(),
                centroid: self.centroids.get(&id).cloned(),
            });
            queue.extend(n.children.iter().cloned());
        }
        TreeSketch {
            root: self.root.clone(),
            nodes,
        }
    }

    /// Checks single root, parent/child consistency, depths and acyclicity.
    pub fn check_shape(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Invariant(m));
        let Some(root) = self.nodes.get(&self.root) else {
            return bad(format!("root {} missing", self.root));
        };
        if root.parent.is_some() || root.depth != 0 {
            return bad("root must have no parent and depth 0".into());
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root.as_str()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                return bad(format!("node {id} reached twice"));
            }
            let n = &self.nodes[id];
            if n.label.trim().is_empty() {
                return bad(format!("node {id} has an empty label"));
            }
            for c in &n.children {
                let Some(child) = self.nodes.get(c) else {
                    return bad(format!("node {id} lists unknown child {c}"));
                };
                if child.parent.as_deref() != Some(id) {
                    return bad(format!("child {c} does not point back to {id}"));
                }
                if child.depth != n.depth + 1 {
                    return bad(format!("child {c} has inconsistent depth"));
                }
                stack.push(c);
            }
        }
        if seen.len() != self.nodes.len() {
            return bad("tree has unreachable nodes".into());
        }
        for (item, leaf) in &self.assignments {
            if !self.is_leaf(leaf) {
                return bad(format!("item {item} assigned to non-leaf {leaf}"));
            }
        }
        Ok(())
    }

    /// Every item of `items` is assigned to exactly one leaf, and nothing else is.
    pub fn check_partition<'a>(&self, items: impl IntoIterator<Item = &'a str>) -> Result<(), TreeError> {
        let want: BTreeSet<&str> = items.into_iter().collect();
        for i in &want {
            match self.assignments.get(*i) {
                None => return Err(TreeError::Unassigned(i.to_string())),
                Some(l) if !self.is_leaf(l) => {
                    return Err(TreeError::Invariant(format!("item {i} assigned to non-leaf {l}")))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.assignments.keys().find(|k| !want.contains(k.as_str())) {
            return Err(TreeError::Invariant(format!("unexpected assignment for item {extra}")));
        }
        Ok(())
    }

    /// Records `item` under `leaf` directly, bypassing the matcher.
    pub fn set_assignment(&mut self, item: &str, leaf: &str) -> Result<(), TreeError> {
        match self.nodes.get(leaf) {
            None => Err(TreeError::UnknownNode(leaf.to_string())),
            Some(n) if !n.is_leaf() => Err(TreeError::NotALeaf(leaf.to_string())),
            Some(_) => {
                self.assignments.insert(item.to_string(), leaf.to_string());
                Ok(())
            }
        }
    }

    /// Asks the backend for the leaf that best matches `item` without
    /// recording it.
    pub fn match_item(&self, item: &Item, sketch: &TreeSketch, backend: &dyn LlmBackend, policy: &RetryPolicy) -> Result<String, TreeError> {
        let req = render_im_prompt(item, sketch)?;
        let leaves = sketch.leaf_ids();
        let validate = |p: &Payload| match p {
            Payload::Leaf(m) if leaves.contains(&m.leaf) => Ok(()),
            Payload::Leaf(m) if sketch.node(&m.leaf).is_some() => Err(format!("{} is not a leaf", m.leaf)),
            Payload::Leaf(m) => Err(format!("unknown node {}", m.leaf)),
            _ => Err("unexpected payload".into()),
        };
        match complete(&req, backend, policy, &validate)?.parsed {
            Payload::Leaf(m) => Ok(m.leaf),
            _ => unreachable!(),
        }
    }

    fn insert_child(&mut self, parent: &str, label: &str) -> String {
        let parent_path: Vec<String> = self.path(parent).iter().map(|id| self.nodes[*id].label.clone()).collect();
        let mut label = label.trim().to_string();
        if label.is_empty() {
            label = "preference".to_string();
        }
        let base = label.clone();
        let mut bump = 1;
        let id = loop {
            let mut path: Vec<&str> = parent_path.iter().map(String::as_str).collect();
            path.push(&label);
            let id = content_id(&path);
            if !self.nodes.contains_key(&id) {
                break id;
            }
            bump += 1;
            label = format!("{base} ({bump})");
        };
        let depth = self.nodes[parent].depth + 1;
        self.nodes.get_mut(parent).unwrap().children.push(id.clone());
        self.nodes.insert(
            id.clone(),
            PrefNode {
                id: id.clone(),
                label,
                parent: Some(parent.to_string()),
                children: Vec::new(),
                depth,
            },
        );
        id
    }

    fn remove_leaf(&mut self, id: &str) {
        let n = self.nodes.remove(id).expect("leaf exists");
        self.centroids.remove(id);
        if let Some(p) = n.parent {
            self.nodes.get_mut(&p).unwrap().children.retain(|c| c != id);
        }
    }

    fn reassign(&mut self, from: &str, to: &str) {
        for leaf in self.assignments.values_mut() {
            if leaf == from {
                *leaf = to.to_string();
            }
        }
    }

    fn recompute_centroid(&mut self, leaf: &str, embeddings: &HashMap<String, Vec<f32>>) {
        let vecs: Vec<&[f32]> = self
            .assignments
            .iter()
            .filter(|(_, l)| l.as_str() == leaf)
            .filter_map(|(i, _)| embeddings.get(i).map(Vec::as_slice))
            .collect();
        if let Some(c) = mean_of(&vecs) {
            self.centroids.insert(leaf.to_string(), c);
        }
    }
}

/// Renders the construction prompt, completes it and builds a validated tree
/// with no assignments.
pub fn construct(
    samples: &[Item],
    backend: &dyn LlmBackend,
    constraints: &TreeConstraints,
    encoder: &dyn TextEncoder,
    policy: &RetryPolicy,
) -> Result<PreferenceTree, TreeError> {
    let req = render_top_prompt(samples, constraints)?;
    let resp = complete(&req, backend, policy, &crate::llm::accept_any)?;
    let Payload::Tree(spec) = resp.parsed else { unreachable!() };
    let (tree, _) = PreferenceTree::from_spec(&spec, encoder)?;
    tree.check_shape()?;
    Ok(tree)
}

/// Matches one item and records the assignment.
pub fn assign_item(item: &Item, tree: &mut PreferenceTree, backend: &dyn LlmBackend, policy: &RetryPolicy) -> Result<String, TreeError> {
    let sketch = tree.sketch();
    let leaf = tree.match_item(item, &sketch, backend, policy)?;
    tree.assignments.insert(item.id.clone(), leaf.clone());
    Ok(leaf)
}

/// Matches every item, fanning requests out over `parallelism` threads, and
/// commits assignments in item-id order. Leaf centroids become the mean
/// embedding of their assigned items.
pub fn assign_all(
    items: &[Item],
    tree: &PreferenceTree,
    backend: &dyn LlmBackend,
    encoder: &dyn TextEncoder,
    policy: &RetryPolicy,
    parallelism: usize,
) -> Result<PreferenceTree, TreeError> {
    let sketch = tree.sketch();
    let workers = parallelism.max(1).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let results: Vec<(String, Result<String, TreeError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let sketch = &sketch;
                s.spawn(move || {
                    part.iter()
                        .map(|it| (it.id.clone(), tree.match_item(it, sketch, backend, policy)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("matcher thread panicked")).collect()
    });
    let mut failures = Vec::new();
    let mut out = tree.clone();
    let mut sorted: Vec<_> = results.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, r) in sorted {
        match r {
            Ok(leaf) => {
                out.assignments.insert(id, leaf);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(TreeError::ItemFailures(failures));
    }
    let embeddings = embed_items(items, encoder)?;
    for leaf in out.leaves().into_iter().map(str::to_string).collect::<Vec<_>>() {
        out.recompute_centroid(&leaf, &embeddings);
    }
    Ok(out)
}

fn embed_items(items: &[Item], encoder: &dyn TextEncoder) -> Result<HashMap<String, Vec<f32>>, TreeError> {
    items
        .iter()
        .map(|it| Ok((it.id.clone(), encoder.encode(&it.text())?.as_slice().to_vec())))
        .collect()
}

// ---------------------------------------------------------------------------
// Refinement

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub load_min: usize,
    pub load_max: usize,
    pub max_ops: usize,
}

impl RefineConfig {
    pub const DEFAULT_MAX_OPS: usize = 10;

    /// `load_min = max(2, ceil(0.2 mu))`, `load_max = ceil(5 mu)` with
    /// `mu = items / leaves`.
    pub fn from_mean_load(items: usize, leaves: usize) -> Self {
        let mu = items as f64 / leaves.max(1) as f64;
        let load_min = ((0.2 * mu).ceil() as usize).max(2);
        let load_max = ((5.0 * mu).ceil() as usize).max(load_min + 1);
        Self {
            load_min,
            load_max,
            max_ops: Self::DEFAULT_MAX_OPS,
        }
    }

    pub fn for_tree(tree: &PreferenceTree) -> Self {
        Self::from_mean_load(tree.assignments.len(), tree.leaves().len())
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if self.load_min == 0 || self.load_min >= self.load_max {
            return Err(TreeError::InvalidConfig(format!(
                "need 0 < load_min < load_max, got {} / {}",
                self.load_min, self.load_max
            )));
        }
        Ok(())
    }
}

const MAX_SPLIT_FANOUT: usize = 5;

fn summarize_label(parts: BTreeMap<String, String>, backend: &dyn LlmBackend, policy: &RetryPolicy) -> Result<String, TreeError> {
    let req = render_summarize_prompt(&parts);
    match complete(&req, backend, policy, &crate::llm::accept_any)?.parsed {
        Payload::Summary(s) => Ok(s),
        _ => unreachable!(),
    }
}

/// Token keywords that best characterize `group` within the leaf's items.
fn group_keywords(group: &[&Item], all: &[&Item]) -> String {
    let df = |set: &[&Item]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for it in set {
            let toks: BTreeSet<String> = crate::util::tokenize(&it.text()).collect();
            for t in toks {
                *m.entry(t).or_default() += 1;
            }
        }
        m
    };
    let g = df(group);
    let a = df(all);
    let mut scored: Vec<(f64, String)> = g
        .into_iter()
        .map(|(t, n)| (n as f64 / group.len() as f64 - a[&t] as f64 / all.len() as f64, t))
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    scored.into_iter().take(2).map(|(_, t)| t).collect::<Vec<_>>().join(" ")
}

enum Step {
    Merge(String, String),
    Split(String),
    Collapse(String),
    Absorb(String, String),
}

fn next_step(tree: &PreferenceTree, cfg: &RefineConfig) -> Option<Step> {
    let loads = tree.leaf_loads();
    let under = |l: &str| loads[l] < cfg.load_min;
    let by_load = |a: &&str, b: &&str| loads[*a].cmp(&loads[*b]).then(a.cmp(b));

    // sibling leaf groups
    let mut best_pair: Option<(usize, String, String)> = None;
    let mut best_single: Option<(usize, String, String)> = None;
    for parent in tree.nodes.values().filter(|n| !n.is_leaf()) {
        let mut leaves: Vec<&str> = parent.children.iter().map(String::as_str).filter(|c| tree.is_leaf(c)).collect();
        leaves.sort_by(by_load);
        let underloaded: Vec<&str> = leaves.iter().copied().filter(|l| under(l)).collect();
        if underloaded.len() >= 2 {
            let (a, b) = (underloaded[0], underloaded[1]);
            let key = (loads[a] + loads[b], a.to_string(), b.to_string());
            if best_pair.as_ref().is_none_or(|p| key < *p) {
                best_pair = Some(key);
            }
        } else if let (Some(&u), true) = (underloaded.first(), leaves.len() >= 2) {
            let partner = leaves.iter().copied().find(|l| *l != u).unwrap();
            let key = (loads[u], u.to_string(), partner.to_string());
            if best_single.as_ref().is_none_or(|p| key < *p) {
                best_single = Some(key);
            }
        }
    }
    if let Some((_, a, b)) = best_pair.or(best_single) {
        return Some(Step::Merge(a, b));
    }

    let mut over: Vec<&str> = loads.keys().map(String::as_str).filter(|l| loads[*l] > cfg.load_max).collect();
    over.sort_by(|a, b| loads[*b].cmp(&loads[*a]).then(a.cmp(b)));
    if let Some(l) = over.first() {
        return Some(Step::Split(l.to_string()));
    }

    let mut stranded: Vec<&str> = loads.keys().map(String::as_str).filter(|l| under(l) && *l != tree.root).collect();
    stranded.sort_by(by_load);
    for l in stranded {
        let parent = tree.nodes[l].parent.as_ref().unwrap();
        let siblings = &tree.nodes[parent].children;
        if siblings.len() == 1 {
            return Some(Step::Collapse(l.to_string()));
        }
        // all siblings are internal: hand the items to the lightest leaf below them
        let target = loads
            .keys()
            .map(String::as_str)
            .filter(|c| *c != l && siblings.iter().any(|s| s != l && tree.is_under(c, s)))
            .min_by(by_load);
        if let Some(t) = target {
            return Some(Step::Absorb(l.to_string(), t.to_string()));
        }
    }
    None
}

/// Merges underloaded sibling leaves and splits overloaded ones until every
/// leaf load lies in `[load_min, load_max]` or `max_ops` operations ran.
pub fn refine(
    tree: &PreferenceTree,
    items: &[Item],
    cfg: &RefineConfig,
    backend: &dyn LlmBackend,
    encoder: &dyn TextEncoder,
    policy: &RetryPolicy,
) -> Result<(PreferenceTree, Vec<RefineOp>), TreeError> {
    refine_observed(tree, items, cfg, backend, encoder, policy, |_| {})
}

/// [`refine`] with a callback invoked on the tree after every operation.
pub fn refine_observed(
    tree: &PreferenceTree,
    items: &[Item],
    cfg: &RefineConfig,
    backend: &dyn LlmBackend,
    encoder: &dyn TextEncoder,
    policy: &RetryPolicy,
    mut after_op: impl FnMut(&PreferenceTree),
) -> Result<(PreferenceTree, Vec<RefineOp>), TreeError> {
    cfg.validate()?;
    tree.check_partition(items.iter().map(|i| i.id.as_str()))?;
    let by_id: HashMap<&str, &Item> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let embeddings = embed_items(items, encoder)?;
    let mut t = tree.clone();
    let mut ops = Vec::new();
    while ops.len() < cfg.max_ops {
        let Some(step) = next_step(&t, cfg) else { break };
        let op = match step {
            Step::Merge(a, b) => {
                let parent = t.nodes[&a].parent.clone().expect("merged leaves have a parent");
                let parts = BTreeMap::from([
                    ("a".to_string(), t.nodes[&a].label.clone()),
                    ("b".to_string(), t.nodes[&b].label.clone()),
                ]);
                let label = summarize_label(parts, backend, policy)?;
                let pos = t.nodes[&parent].children.iter().position(|c| *c == a).unwrap();
                let (ca, cb) = (t.centroids.get(&a).cloned(), t.centroids.get(&b).cloned());
                t.remove_leaf(&a);
                t.remove_leaf(&b);
                let new = t.insert_child(&parent, &label);
                // keep the merged leaf where the first one was
                let kids = &mut t.nodes.get_mut(&parent).unwrap().children;
                let last = kids.pop().unwrap();
                kids.insert(pos.min(kids.len()), last);
                t.reassign(&a, &new);
                t.reassign(&b, &new);
                t.recompute_centroid(&new, &embeddings);
                if !t.centroids.contains_key(&new) {
                    let vs: Vec<&[f32]> = [ca.as_deref(), cb.as_deref()].into_iter().flatten().collect();
                    if let Some(c) = mean_of(&vs) {
                        t.centroids.insert(new.clone(), c);
                    }
                }
                let load = t.leaf_loads()[&new];
                RefineOp::Merge {
                    merged: vec![a, b],
                    into: new,
                    load,
                }
            }
            Step::Split(leaf) => {
                let members: Vec<String> = t.leaf_items(&leaf)?.into_iter().collect();
                let load = members.len();
                let k = load.div_ceil(cfg.load_max).clamp(2, MAX_SPLIT_FANOUT);
                let points: Vec<&[f32]> = members.iter().map(|m| embeddings[m].as_slice()).collect();
                let seed = derive_seed(fnv1a(0, leaf.as_bytes()), ops.len() as u64);
                let clustering = kmeans(&points, k, seed, 100)?;
                let groups: Vec<Vec<usize>> = if clustering.k() >= 2 {
                    (0..clustering.k()).map(|c| clustering.members(c)).collect()
                } else {
                    // identical embeddings: fall back to contiguous chunks in id order
                    let size = load.div_ceil(k);
                    (0..load).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
                };
                let all: Vec<&Item> = members.iter().filter_map(|m| by_id.get(m.as_str()).copied()).collect();
                let parent_label = t.nodes[&leaf].label.clone();
                let mut children = Vec::new();
                let mut loads = Vec::new();
                for (gi, g) in groups.iter().enumerate() {
                    let group: Vec<&Item> = g.iter().filter_map(|&i| by_id.get(members[i].as_str()).copied()).collect();
                    let mut kw = group_keywords(&group, &all);
                    if kw.is_empty() {
                        kw = format!("part {}", gi + 1);
                    }
                    let parts = BTreeMap::from([
                        ("a".to_string(), parent_label.clone()),
                        ("b".to_string(), kw),
                    ]);
                    let label = summarize_label(parts, backend, policy)?;
                    let child = t.insert_child(&leaf, &label);
                    for &i in g {
                        t.assignments.insert(members[i].clone(), child.clone());
                    }
                    t.recompute_centroid(&child, &embeddings);
                    loads.push(g.len());
                    children.push(child);
                }
                RefineOp::Split { leaf, children, loads }
            }
            Step::Collapse(leaf) => {
                let parent = t.nodes[&leaf].parent.clone().unwrap();
                t.remove_leaf(&leaf);
                t.reassign(&leaf, &parent);
                t.recompute_centroid(&parent, &embeddings);
                let load = t.leaf_loads()[&parent];
                RefineOp::Collapse {
                    leaf,
                    into: parent,
                    load,
                }
            }
            Step::Absorb(leaf, target) => {
                t.remove_leaf(&leaf);
                t.reassign(&leaf, &target);
                t.recompute_centroid(&target, &embeddings);
                let load = t.leaf_loads()[&target];
                RefineOp::Absorb {
                    leaf,
                    into: target,
                    load,
                }
            }
        };
        log::debug!("refine op {}: {:?}", ops.len() + 1, op);
        t.ops_log.push(op.clone());
        ops.push(op);
        after_op(&t);
    }
    t.check_shape()?;
    Ok((t, ops))
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: u32,
    root: String,
    nodes: Vec<PrefNode>,
    assignments: BTreeMap<String, String>,
    ops_log: Vec<RefineOp>,
    #[serde(default)]
    centroids: BTreeMap<String, Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lineage: Option<Value>,
}

impl PreferenceTree {
    pub fn to_json(&self, lineage: Option<Value>) -> Value {
        let file = TreeFile {
            version: TREE_FILE_VERSION,
            root: self.root.clone(),
            nodes: self.nodes.values().cloned().collect(),
            assignments: self.assignments.clone(),
            ops_log: self.ops_log.clone(),
            centroids: self.centroids.clone(),
            lineage,
        };
        serde_json::to_value(file).expect("tree serializes")
    }

    pub fn from_json(v: Value) -> Result<(Self, Option<Value>), TreeError> {
        match v.get("version").and_then(Value::as_u64) {
            Some(n) if n == u64::from(TREE_FILE_VERSION) => {}
            Some(n) => return Err(TreeError::Version(n.to_string())),
            None => return Err(TreeError::Version("missing".into())),
        }
        let f: TreeFile = serde_json::from_value(v).map_err(|e| TreeError::Schema(e.to_string()))?;
        let tree = PreferenceTree {
            root: f.root,
            nodes: f.nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            assignments: f.assignments,
            centroids: f.centroids,
            ops_log: f.ops_log,
        };
        tree.check_shape()?;
        Ok((tree, f.lineage))
    }

    pub fn save(&self, path: &Path, lineage: Option<Value>) -> Result<(), TreeError> {
        let io = |e| TreeError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer_pretty(&mut w, &self.to_json(lineage)).expect("tree serializes");
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Value>), TreeError> {
        let io = |e| TreeError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let v: Value = serde_json::from_reader(BufReader::new(File::open(path).map_err(io)?))
            .map_err(|e| TreeError::Version(format!("unreadable tree file: {e}")))?;
        Self::from_json(v)
    }
}
