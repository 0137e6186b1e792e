//! Dataset model, ingestion, validation, per-user splitting and the synthetic
//! exposure-biased dataset generator.
//!
//! A [`Dataset`] is immutable once built; stages that extend it (splitting,
//! augmentation) return a new value.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("dangling reference: interaction names unknown {kind} \"{id}\"")]
    Dangling { kind: &'static str, id: String },
    #[error("duplicate {kind} id \"{id}\"")]
    DuplicateId { kind: &'static str, id: String },
    #[error("duplicate interaction ({user}, {item})")]
    DuplicateInteraction { user: String, item: String },
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios((f64, f64, f64)),
    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),
    #[error("no user has held-out test items to evaluate")]
    NoEvaluableUsers,
    #[error("synthetic interaction ({user}, {item}) collides with an observed interaction")]
    SyntheticCollision { user: String, item: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub category: String,
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

/// Attribute values in lexicographic field order, space-joined.
pub fn attribute_text(attributes: &BTreeMap<String, String>) -> String {
    attributes
        .values()
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Item {
    /// Text used for encoding: the summary when present, else the attributes.
    pub fn text(&self) -> String {
        match &self.summary {
            Some(s) if !s.trim().is_empty() => s.clone(),
            _ => attribute_text(&self.attributes),
        }
    }
}

impl User {
    pub fn text(&self) -> String {
        match &self.summary {
            Some(s) if !s.trim().is_empty() => s.clone(),
            _ => attribute_text(&self.attributes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub synthetic: bool,
}

impl Interaction {
    pub fn observed(user: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            synthetic: false,
        }
    }

    pub fn synthetic(user: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            synthetic: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    users: Vec<User>,
    items: Vec<Item>,
    interactions: Vec<Interaction>,
    splits: BTreeMap<String, Split>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, enforcing unique ids, referential integrity and
    /// unique (user, item) pairs. Splits start empty.
    pub fn new(
        users: Vec<User>,
        items: Vec<Item>,
        interactions: Vec<Interaction>,
    ) -> Result<Self, DataError> {
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if user_index.insert(u.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId {
                    kind: "user",
                    id: u.id.clone(),
                });
            }
        }
        let mut item_index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if item_index.insert(it.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId {
                    kind: "item",
                    id: it.id.clone(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for r in &interactions {
            if !user_index.contains_key(&r.user) {
                return Err(DataError::Dangling {
                    kind: "user",
                    id: r.user.clone(),
                });
            }
            if !item_index.contains_key(&r.item) {
                return Err(DataError::Dangling {
                    kind: "item",
                    id: r.item.clone(),
                });
            }
            if !seen.insert((r.user.as_str(), r.item.as_str())) {
                return Err(DataError::DuplicateInteraction {
                    user: r.user.clone(),
                    item: r.item.clone(),
                });
            }
        }
        Ok(Self {
            users,
            items,
            interactions,
            splits: BTreeMap::new(),
            user_index,
            item_index,
        })
    }

    /// Replaces the split map without checking it; see [`validate`].
    pub fn with_splits(mut self, splits: BTreeMap<String, Split>) -> Self {
        self.splits = splits;
        self
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn splits(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    pub fn split(&self, user: &str) -> Option<&Split> {
        self.splits.get(user)
    }

    pub fn user_idx(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_idx(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user(&self, id: &str) -> Option<&User> {
        self.user_idx(id).map(|i| &self.users[i])
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.item_idx(id).map(|i| &self.items[i])
    }

    /// Distinct categories, sorted.
    pub fn categories(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.category.clone()).collect()
    }

    pub fn item_categories(&self) -> HashMap<String, String> {
        self.items
            .iter()
            .map(|i| (i.id.clone(), i.category.clone()))
            .collect()
    }

    /// Non-synthetic interactions grouped per user, items sorted.
    pub fn observed_by_user(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in self.interactions.iter().filter(|r| !r.synthetic) {
            out.entry(r.user.clone()).or_default().insert(r.item.clone());
        }
        out
    }

    /// All of the user's observed items (any split).
    pub fn observed_items(&self, user: &str) -> BTreeSet<String> {
        self.interactions
            .iter()
            .filter(|r| !r.synthetic && r.user == user)
            .map(|r| r.item.clone())
            .collect()
    }

    /// Observed (non-synthetic) train items of a user.
    pub fn observed_train(&self, user: &str) -> BTreeSet<String> {
        let synthetic: BTreeSet<&str> = self
            .interactions
            .iter()
            .filter(|r| r.synthetic && r.user == user)
            .map(|r| r.item.as_str())
            .collect();
        self.splits
            .get(user)
            .map(|s| {
                s.train
                    .iter()
                    .filter(|i| !synthetic.contains(i.as_str()))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn synthetic_count(&self) -> usize {
        self.interactions.iter().filter(|r| r.synthetic).count()
    }

    /// Adds synthetic interactions to the interaction list and to the
    /// owning users' train splits.
    pub fn with_synthetic(&self, extra: &[Interaction]) -> Result<Self, DataError> {
        let mut interactions = self.interactions.clone();
        interactions.extend(extra.iter().map(|r| Interaction::synthetic(&r.user, &r.item)));
        let mut out = Dataset::new(self.users.clone(), self.items.clone(), interactions)
            .map_err(|e| match e {
                DataError::DuplicateInteraction { user, item } => {
                    DataError::SyntheticCollision { user, item }
                }
                other => other,
            })?;
        out.splits = self.splits.clone();
        for r in extra {
            out.splits
                .entry(r.user.clone())
                .or_default()
                .train
                .insert(r.item.clone());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Deserialize)]
struct UserRecord {
    id: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    #[serde(default)]
    summary: Option<String>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DataError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((n + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_items(path: &Path) -> Result<Vec<Item>, DataError> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str::<Item>(&line).map_err(|e| parse_err(path, n, e.to_string())))
        .collect()
}

pub fn load_users(path: &Path) -> Result<Vec<User>, DataError> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            serde_json::from_str::<UserRecord>(&line)
                .map(|r| User {
                    id: r.id,
                    attributes: r.attributes,
                    summary: r.summary,
                })
                .map_err(|e| parse_err(path, n, e.to_string()))
        })
        .collect()
}

/// Reads `user<TAB>item[<TAB>synthetic]` rows.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>, DataError> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        let cols: Vec<&str> = line.split('\t').collect();
        let synthetic = match cols.as_slice() {
            [_, _] => false,
            [_, _, "0"] => false,
            [_, _, "1"] => true,
            [_, _, flag] => {
                return Err(parse_err(path, n, format!("synthetic flag must be 0 or 1, got {flag:?}")))
            }
            _ => {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
                ))
            }
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(parse_err(path, n, "empty id"));
        }
        out.push(Interaction {
            user: cols[0].to_string(),
            item: cols[1].to_string(),
            synthetic,
        });
    }
    Ok(out)
}

pub fn load_dataset(
    items_path: &Path,
    users_path: &Path,
    interactions_path: &Path,
) -> Result<Dataset, DataError> {
    let items = load_items(items_path)?;
    let users = load_users(users_path)?;
    let interactions = load_interactions(interactions_path)?;
    Dataset::new(users, items, interactions)
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn write_items(path: &Path, items: &[Item]) -> Result<(), DataError> {
    let mut w = create(path)?;
    for it in items {
        let line = serde_json::to_string(it).expect("item serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_users(path: &Path, users: &[User]) -> Result<(), DataError> {
    let mut w = create(path)?;
    for u in users {
        let line = serde_json::to_string(u).expect("user serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<(), DataError> {
    let mut w = create(path)?;
    for r in rows {
        let res = if r.synthetic {
            writeln!(w, "{}\t{}\t1", r.user, r.item)
        } else {
            writeln!(w, "{}\t{}", r.user, r.item)
        };
        res.map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_splits(path: &Path, splits: &BTreeMap<String, Split>) -> Result<(), DataError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, splits).expect("splits serialize");
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_splits(path: &Path) -> Result<BTreeMap<String, Split>, DataError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Writes the three record files into `dir` (`items.jsonl`, `users.jsonl`,
/// `interactions.tsv`) plus `splits.json` when splits are present.
pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<(), DataError> {
    write_items(&dir.join("items.jsonl"), &d.items)?;
    write_users(&dir.join("users.jsonl"), &d.users)?;
    write_interactions(&dir.join("interactions.tsv"), &d.interactions)?;
    if !d.splits.is_empty() {
        write_splits(&dir.join("splits.json"), &d.splits)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting

fn check_ratios(r: (f64, f64, f64)) -> Result<(), DataError> {
    let ok = r.0 > 0.0 && r.1 > 0.0 && r.2 > 0.0 && ((r.0 + r.1 + r.2) - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DataError::InvalidRatios(r))
    }
}

/// Per-user counts `(train, val, test)` for `n` interactions. Val and test get
/// `round(n * r)`, train gets the remainder and never drops below one.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    if n == 0 {
        return (0, 0, 0);
    }
    let mut val = (n as f64 * ratios.1).round() as usize;
    let mut test = (n as f64 * ratios.2).round() as usize;
    while val + test >= n {
        if test >= val && test > 0 {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    (n - val - test, val, test)
}

/// Uniform random per-user split of observed interactions. Synthetic
/// interactions, if any, are placed in train.
pub fn split_per_user(d: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset, DataError> {
    check_ratios(ratios)?;
    let mut rng = rng(seed);
    let observed = d.observed_by_user();
    let mut splits = BTreeMap::new();
    for u in d.users.iter().map(|u| &u.id).collect::<BTreeSet<_>>() {
        let mut items: Vec<String> = observed.get(u).map(|s| s.iter().cloned().collect()).unwrap_or_default();
        items.shuffle(&mut rng);
        let (ntr, nva, _) = split_counts(items.len(), ratios);
        let split = Split {
            train: items[..ntr].iter().cloned().collect(),
            val: items[ntr..ntr + nva].iter().cloned().collect(),
            test: items[ntr + nva..].iter().cloned().collect(),
        };
        splits.insert(u.clone(), split);
    }
    for r in d.interactions.iter().filter(|r| r.synthetic) {
        splits.entry(r.user.clone()).or_default().train.insert(r.item.clone());
    }
    Ok(d.clone().with_splits(splits))
}

/// Iteratively drops users and items with fewer than `k` observed
/// interactions. Splits are cleared.
pub fn core_filter(d: &Dataset, k: usize) -> Result<Dataset, DataError> {
    let mut rows: Vec<Interaction> = d.interactions.iter().filter(|r| !r.synthetic).cloned().collect();
    loop {
        let mut ucount: HashMap<&str, usize> = HashMap::new();
        let mut icount: HashMap<&str, usize> = HashMap::new();
        for r in &rows {
            *ucount.entry(&r.user).or_default() += 1;
            *icount.entry(&r.item).or_default() += 1;
        }
        let before = rows.len();
        let keep: Vec<Interaction> = rows
            .iter()
            .filter(|r| ucount[r.user.as_str()] >= k && icount[r.item.as_str()] >= k)
            .cloned()
            .collect();
        let done = keep.len() == before;
        rows = keep;
        if done {
            break;
        }
    }
    let users: BTreeSet<&str> = rows.iter().map(|r| r.user.as_str()).collect();
    let items: BTreeSet<&str> = rows.iter().map(|r| r.item.as_str()).collect();
    Dataset::new(
        d.users.iter().filter(|u| users.contains(u.id.as_str())).cloned().collect(),
        d.items.iter().filter(|i| items.contains(i.id.as_str())).cloned().collect(),
        rows,
    )
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant violation of `d`.
pub fn validate(d: &Dataset) -> ValidationReport {
    let mut v = Vec::new();
    let mut ids = BTreeSet::new();
    for u in &d.users {
        if !ids.insert(u.id.as_str()) {
            v.push(format!("duplicate user id {}", u.id));
        }
    }
    let mut ids = BTreeSet::new();
    for it in &d.items {
        if !ids.insert(it.id.as_str()) {
            v.push(format!("duplicate item id {}", it.id));
        }
        if it.category.trim().is_empty() {
            v.push(format!("item {} has an empty category", it.id));
        }
        if it.attributes.values().all(|a| a.trim().is_empty()) {
            v.push(format!("item {} has no non-empty attribute", it.id));
        }
    }
    let mut pairs = BTreeSet::new();
    for r in &d.interactions {
        if !d.user_index.contains_key(&r.user) {
            v.push(format!("interaction references unknown user {}", r.user));
        }
        if !d.item_index.contains_key(&r.item) {
            v.push(format!("interaction references unknown item {}", r.item));
        }
        if !pairs.insert((r.user.as_str(), r.item.as_str())) {
            v.push(format!("duplicate interaction ({}, {})", r.user, r.item));
        }
    }
    if !d.splits.is_empty() {
        let observed = d.observed_by_user();
        let mut synthetic: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in d.interactions.iter().filter(|r| r.synthetic) {
            synthetic.entry(&r.user).or_default().insert(&r.item);
        }
        let empty = BTreeSet::new();
        for (user, s) in &d.splits {
            if !d.user_index.contains_key(user) {
                v.push(format!("split for unknown user {user}"));
            }
            for (a, b, name) in [(&s.train, &s.val, "train/val"), (&s.train, &s.test, "train/test"), (&s.val, &s.test, "val/test")] {
                if let Some(x) = a.intersection(b).next() {
                    v.push(format!("user {user}: item {x} in both {name}"));
                }
            }
            let syn = synthetic.get(user.as_str()).cloned().unwrap_or_default();
            for x in s.val.iter().chain(&s.test) {
                if syn.contains(x.as_str()) {
                    v.push(format!("user {user}: synthetic interaction {x} outside train"));
                }
            }
            let obs = observed.get(user).unwrap_or(&empty);
            let union: BTreeSet<&String> = s
                .train
                .iter()
                .filter(|x| !syn.contains(x.as_str()))
                .chain(&s.val)
                .chain(&s.test)
                .filter(|x| !syn.contains(x.as_str()))
                .collect();
            let obs_ref: BTreeSet<&String> = obs.iter().collect();
            if union != obs_ref {
                v.push(format!("user {user}: splits do not partition observed interactions"));
            }
        }
        for user in observed.keys() {
            if !d.splits.contains_key(user) {
                v.push(format!("user {user} has interactions but no split"));
            }
        }
    }
    ValidationReport { violations: v }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Configuration of the exposure-biased generator.
///
/// Every user holds `prefs_per_user` true categories, of which
/// `suppressed_per_user` never appear in observed train/val interactions.
/// Held-out test interactions are drawn from all true categories. Each
/// category is divided into `subtopics_per_category` sub-topics with their own
/// vocabulary; a user favours one sub-topic per true category with
/// probability `subtopic_focus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub prefs_per_user: usize,
    pub suppressed_per_user: usize,
    pub interactions_per_user: usize,
    pub subtopics_per_category: usize,
    pub vocab_per_subtopic: usize,
    /// Focus-subtopic words per preferred category in the user bio.
    pub bio_words_per_category: usize,
    pub subtopic_focus: f64,
    pub ratios: (f64, f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 500,
            num_categories: 12,
            prefs_per_user: 3,
            suppressed_per_user: 1,
            interactions_per_user: 30,
            subtopics_per_category: 3,
            vocab_per_subtopic: 8,
            bio_words_per_category: 8,
            subtopic_focus: 0.8,
            ratios: (0.6, 0.2, 0.2),
        }
    }
}

/// Side metadata of a generated dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub true_categories: BTreeMap<String, Vec<String>>,
    pub suppressed: BTreeMap<String, Vec<String>>,
}

impl SyntheticTruth {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self).expect("truth serializes");
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| parse_err(path, e.line(), e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: SyntheticTruth,
}

const CATEGORY_NAMES: [&str; 24] = [
    "travel", "cooking", "music", "sports", "gaming", "fashion", "science", "finance", "movies",
    "books", "fitness", "gardening", "photography", "pets", "politics", "history", "art",
    "technology", "comedy", "education", "automotive", "parenting", "health", "architecture",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "sa", "to", "vu", "ze", "bar", "dil", "fen", "gor", "hu", "ja", "pel", "quo",
];

pub fn category_name(c: usize) -> String {
    match CATEGORY_NAMES.get(c) {
        Some(n) => n.to_string(),
        None => format!("topic{c}"),
    }
}

/// Deterministic pseudo-word for (category, sub-topic, word index).
fn vocab_word(cat: &str, sub: usize, w: usize) -> String {
    let a = SYLLABLES[(sub * 5 + w) % SYLLABLES.len()];
    let b = SYLLABLES[(w * 3 + sub + 7) % SYLLABLES.len()];
    format!("{cat}{a}{b}{sub}{w}")
}

fn shared_word(cat: &str, w: usize) -> String {
    format!("{cat}{}", SYLLABLES[w % SYLLABLES.len()])
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData, DataError> {
    let c = cfg.num_categories;
    if c == 0 || cfg.prefs_per_user == 0 {
        return Err(DataError::Infeasible("need at least one category and one preference".into()));
    }
    if cfg.prefs_per_user > c {
        return Err(DataError::Infeasible(format!(
            "preferences per user ({}) exceed categories ({c})",
            cfg.prefs_per_user
        )));
    }
    if cfg.suppressed_per_user >= cfg.prefs_per_user {
        return Err(DataError::Infeasible(format!(
            "suppressed ({}) must be < preferences per user ({})",
            cfg.suppressed_per_user, cfg.prefs_per_user
        )));
    }
    if cfg.num_items < c || cfg.subtopics_per_category == 0 || cfg.vocab_per_subtopic == 0 {
        return Err(DataError::Infeasible("need at least one item, sub-topic and word per category".into()));
    }
    check_ratios(cfg.ratios)?;
    let visible = cfg.prefs_per_user - cfg.suppressed_per_user;
    let (ntr, nva, _) = split_counts(cfg.interactions_per_user, cfg.ratios);
    let per_cat = cfg.num_items / c;
    if ntr + nva > visible * per_cat || cfg.interactions_per_user > cfg.prefs_per_user * per_cat {
        return Err(DataError::Infeasible("too few items per category for the requested interactions".into()));
    }

    let mut rng = rng(seed);
    let cats: Vec<String> = (0..c).map(category_name).collect();
    let subs = cfg.subtopics_per_category;

    // items: category round-robin, sub-topic round-robin within category
    let mut items = Vec::with_capacity(cfg.num_items);
    let mut by_sub: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); subs]; c];
    let width = cfg.num_items.to_string().len().max(4);
    for i in 0..cfg.num_items {
        let cat = i % c;
        let sub = (i / c) % subs;
        let name = &cats[cat];
        let words: Vec<String> = (0..cfg.vocab_per_subtopic).map(|w| vocab_word(name, sub, w)).collect();
        let title: Vec<String> = words.choose_multiple(&mut rng, 2.min(words.len())).cloned().collect();
        let mut desc: Vec<String> = (0..5).map(|_| words.choose(&mut rng).unwrap().clone()).collect();
        desc.push(shared_word(name, rng.random_range(0..4)));
        desc.push(format!("common{}", rng.random_range(0..20)));
        let mut attributes = BTreeMap::new();
        attributes.insert("title".to_string(), format!("{name} {}", title.join(" ")));
        attributes.insert("description".to_string(), desc.join(" "));
        by_sub[cat][sub].push(i);
        items.push(Item {
            id: format!("i{i:0width$}"),
            category: name.clone(),
            attributes,
            summary: None,
        });
    }

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut interactions = Vec::new();
    let mut splits = BTreeMap::new();
    let mut truth = SyntheticTruth::default();
    let uwidth = cfg.num_users.to_string().len().max(4);
    let all_cats: Vec<usize> = (0..c).collect();
    for u in 0..cfg.num_users {
        let uid = format!("u{u:0uwidth$}");
        let prefs: Vec<usize> = all_cats.choose_multiple(&mut rng, cfg.prefs_per_user).copied().collect();
        let suppressed: Vec<usize> = prefs[..cfg.suppressed_per_user].to_vec();
        let shown: Vec<usize> = prefs[cfg.suppressed_per_user..].to_vec();
        let focus: Vec<usize> = prefs.iter().map(|_| rng.random_range(0..subs)).collect();
        let focus_of = |cat: usize| focus[prefs.iter().position(|&p| p == cat).unwrap()];

        let mut bio = Vec::new();
        let mut ordered = prefs.clone();
        ordered.sort_unstable();
        for &cat in &ordered {
            let name = &cats[cat];
            bio.push(name.clone());
            for _ in 0..cfg.bio_words_per_category {
                bio.push(vocab_word(name, focus_of(cat), rng.random_range(0..cfg.vocab_per_subtopic)));
            }
        }
        let mut attributes = BTreeMap::new();
        attributes.insert("bio".to_string(), bio.join(" "));
        attributes.insert("name".to_string(), format!("user {u}"));
        users.push(User {
            id: uid.clone(),
            attributes,
            summary: None,
        });

        let mut taken: BTreeSet<usize> = BTreeSet::new();
        let draw = |pool: &[usize], rng: &mut rand_chacha::ChaCha8Rng, taken: &mut BTreeSet<usize>| -> usize {
            loop {
                let cat = *pool.choose(rng).unwrap();
                let sub = if rng.random_bool(cfg.subtopic_focus) {
                    focus_of(cat)
                } else {
                    rng.random_range(0..subs)
                };
                let cands: Vec<usize> = by_sub[cat][sub].iter().copied().filter(|i| !taken.contains(i)).collect();
                let fallback: Vec<usize>;
                let cands = if cands.is_empty() {
                    fallback = by_sub[cat].iter().flatten().copied().filter(|i| !taken.contains(i)).collect();
                    &fallback
                } else {
                    &cands
                };
                if let Some(&i) = cands.choose(rng) {
                    taken.insert(i);
                    return i;
                }
            }
        };
        let (_, _, nte) = split_counts(cfg.interactions_per_user, cfg.ratios);
        let train: Vec<usize> = (0..ntr).map(|_| draw(&shown, &mut rng, &mut taken)).collect();
        let val: Vec<usize> = (0..nva).map(|_| draw(&shown, &mut rng, &mut taken)).collect();
        let test: Vec<usize> = (0..nte).map(|_| draw(&prefs, &mut rng, &mut taken)).collect();
        let ids = |v: &[usize]| v.iter().map(|&i| items[i].id.clone()).collect::<BTreeSet<_>>();
        let split = Split {
            train: ids(&train),
            val: ids(&val),
            test: ids(&test),
        };
        let mut all: Vec<usize> = taken.into_iter().collect();
        all.sort_unstable();
        for i in all {
            interactions.push(Interaction::observed(uid.clone(), items[i].id.clone()));
        }
        splits.insert(uid.clone(), split);
        truth
            .true_categories
            .insert(uid.clone(), ordered.iter().map(|&c| cats[c].clone()).collect());
        let mut sup: Vec<String> = suppressed.iter().map(|&c| cats[c].clone()).collect();
        sup.sort();
        truth.suppressed.insert(uid, sup);
    }

    let dataset = Dataset::new(users, items, interactions)?.with_splits(splits);
    Ok(SyntheticData { dataset, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let items = (1..=3)
            .map(|i| Item {
                id: format!("i{i}"),
                category: "c".into(),
                attributes: BTreeMap::from([("title".to_string(), format!("item {i}"))]),
                summary: None,
            })
            .collect();
        let users = (1..=2)
            .map(|u| User {
                id: format!("u{u}"),
                attributes: BTreeMap::new(),
                summary: None,
            })
            .collect();
        let rows = vec![
            Interaction::observed("u1", "i1"),
            Interaction::observed("u1", "i2"),
            Interaction::observed("u2", "i2"),
            Interaction::observed("u2", "i3"),
        ];
        Dataset::new(users, items, rows).unwrap()
    }

    #[test]
    fn split_counts_match_ratio_rule() {
        assert_eq!(split_counts(10, (0.6, 0.2, 0.2)), (6, 2, 2));
        assert_eq!(split_counts(1, (0.6, 0.2, 0.2)), (1, 0, 0));
        assert_eq!(split_counts(2, (0.6, 0.2, 0.2)), (2, 0, 0));
        assert_eq!(split_counts(3, (0.6, 0.2, 0.2)), (1, 1, 1));
        assert_eq!(split_counts(3, (0.2, 0.4, 0.4)), (1, 1, 1));
        assert_eq!(split_counts(0, (0.6, 0.2, 0.2)), (0, 0, 0));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let d = tiny();
        assert!(matches!(split_per_user(&d, (0.5, 0.2, 0.2), 1), Err(DataError::InvalidRatios(_))));
        assert!(matches!(split_per_user(&d, (1.0, 0.0, 0.0), 1), Err(DataError::InvalidRatios(_))));
    }

    #[test]
    fn split_is_seed_deterministic_and_valid() {
        let d = tiny();
        let a = split_per_user(&d, (0.6, 0.2, 0.2), 3).unwrap();
        let b = split_per_user(&d, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(a.splits(), b.splits());
        assert!(validate(&a).is_valid(), "{:?}", validate(&a));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let d = tiny();
        let mut items = d.items().to_vec();
        items.push(items[0].clone());
        let err = Dataset::new(d.users().to_vec(), items, vec![]).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { kind: "item", .. }));
    }

    #[test]
    fn validate_flags_empty_attributes_and_synthetic_test() {
        let d = tiny();
        assert!(validate(&d).is_valid());

        let mut items = d.items().to_vec();
        items[0].attributes.insert("title".into(), "  ".into());
        let bad = Dataset::new(d.users().to_vec(), items, d.interactions().to_vec()).unwrap();
        let rep = validate(&bad);
        assert_eq!(rep.violations.len(), 1);
        assert!(rep.violations[0].contains("no non-empty attribute"));

        let d = split_per_user(&d, (0.6, 0.2, 0.2), 0).unwrap();
        let mut rows = d.interactions().to_vec();
        rows.push(Interaction::synthetic("u1", "i3"));
        let mut splits = d.splits().clone();
        splits.get_mut("u1").unwrap().test.insert("i3".into());
        let bad = Dataset::new(d.users().to_vec(), d.items().to_vec(), rows).unwrap().with_splits(splits);
        let rep = validate(&bad);
        assert!(rep.violations.iter().any(|v| v.contains("synthetic interaction i3 outside train")), "{rep:?}");
    }

    #[test]
    fn with_synthetic_rejects_observed_pairs() {
        let d = split_per_user(&tiny(), (0.6, 0.2, 0.2), 0).unwrap();
        let err = d.with_synthetic(&[Interaction::synthetic("u1", "i1")]).unwrap_err();
        assert!(matches!(err, DataError::SyntheticCollision { .. }));
        let ok = d.with_synthetic(&[Interaction::synthetic("u1", "i3")]).unwrap();
        assert!(ok.split("u1").unwrap().train.contains("i3"));
        assert!(validate(&ok).is_valid(), "{:?}", validate(&ok));
        assert_eq!(ok.observed_train("u1"), d.observed_train("u1"));
    }

    #[test]
    fn core_filter_drops_sparse_entities() {
        let d = tiny();
        let f = core_filter(&d, 2).unwrap();
        // i2 has 2 interactions, users have 2 each, but i1/i3 have 1: removing them
        // leaves each user with one interaction, which then cascades to nothing.
        assert_eq!(f.interactions().len(), 0);
        let f1 = core_filter(&d, 1).unwrap();
        assert_eq!(f1.interactions().len(), 4);
    }

    #[test]
    fn generator_rejects_infeasible_configs() {
        let cfg = SynthConfig {
            prefs_per_user: 13,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_dataset(&cfg, 0), Err(DataError::Infeasible(_))));
        let cfg = SynthConfig {
            suppressed_per_user: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_dataset(&cfg, 0), Err(DataError::Infeasible(_))));
    }
}
