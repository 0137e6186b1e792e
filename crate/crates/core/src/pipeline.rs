//! Run configuration, artifact lineage and the stage functions behind the
//! `toprec` binary.
//!
//! Configuration is a flat JSON object of dotted keys (`"train.lr": 0.005`).
//! Command-line overrides use the same keys. Every artifact records the seed
//! and a hash of the configuration keys that can influence it; loading an
//! artifact whose hash no longer matches the current configuration is an
//! error unless `force` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::augment::{self, AugmentConfig};
use crate::corpus::{self, Dataset, Interaction, SynthConfig, SyntheticTruth};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalResult};
use crate::influence::{self, AuditRound, LoopConfig};
use crate::llm::{CachedBackend, LlmBackend, MockBackend, MockConfig, RemoteBackend, RemoteConfig, RetryPolicy, TreeConstraints};
use crate::reasoner::{self, LeafFrequency, LeafSelection};
use crate::recmodel::{self, Backbone, ModelParams, TrainConfig, TrainData, TrainHistory};
use crate::rerank::{self, Candidate};
use crate::textenc::{sample_diverse_items, CachingEncoder, HashingEncoder, TextEncoder};
use crate::top::{self, PreferenceTree, RefineConfig};
use crate::util::{derive_seed, sha256_hex};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with items.jsonl, users.jsonl, interactions.tsv and
    /// optionally splits.json. Without it a synthetic dataset is generated.
    pub dir: Option<PathBuf>,
    pub core_k: usize,
    pub ratios: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            core_k: 0,
            ratios: (0.6, 0.2, 0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            dim: HashingEncoder::DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    /// `auto` (remote when LLM_ENDPOINT is set, else mock), `mock` or `remote`.
    pub backend: String,
    /// Response cache; defaults to `<out_dir>/llm_cache.jsonl`.
    pub cache: Option<PathBuf>,
    pub parallelism: usize,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            backend: "auto".into(),
            cache: None,
            parallelism: 4,
            max_retries: 3,
            backoff_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub s_max: usize,
    pub d_max: usize,
    pub branching: usize,
    pub latent_leaves: usize,
}

impl Default for MockSection {
    fn default() -> Self {
        let m = MockConfig::default();
        Self {
            s_max: m.s_max,
            d_max: m.d_max,
            branching: m.branching,
            latent_leaves: m.latent_leaves,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopSection {
    pub sample_clusters: usize,
    pub per_cluster: usize,
    pub min_branch: usize,
    pub max_branch: usize,
}

impl Default for TopSection {
    fn default() -> Self {
        Self {
            sample_clusters: 24,
            per_cluster: 10,
            min_branch: 3,
            max_branch: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub load_min: Option<usize>,
    pub load_max: Option<usize>,
    pub max_ops: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            load_min: None,
            load_max: None,
            max_ops: RefineConfig::DEFAULT_MAX_OPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonSection {
    pub n_paths: usize,
}

impl Default for ReasonSection {
    fn default() -> Self {
        Self {
            n_paths: reasoner::DEFAULT_N_PATHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub dim: usize,
    pub layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: Backbone::Lightgcn,
            dim: recmodel::DEFAULT_DIM,
            layers: recmodel::DEFAULT_LAYERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub neg_ratio: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub val_k: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            neg_ratio: t.neg_ratio,
            epochs_max: t.epochs_max,
            patience: t.patience,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            val_k: t.val_k,
        }
    }
}

/// What is added to the train set during the influence loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Tree-guided synthetic interactions.
    Toprec,
    /// Uniformly random items, `augment.per_user` for every user, added
    /// before training; the influence loop is disabled.
    Random,
    /// Plain backbone training.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceSection {
    pub mode: AugmentMode,
    pub k: usize,
    pub interval: usize,
    pub budget: f64,
    pub per_round: Option<usize>,
    pub groups: usize,
    pub projection_dim: usize,
}

impl Default for InfluenceSection {
    fn default() -> Self {
        let l = LoopConfig::default();
        Self {
            mode: AugmentMode::Toprec,
            k: l.k,
            interval: l.interval,
            budget: l.budget_fraction,
            per_round: l.per_round,
            groups: l.groups,
            projection_dim: l.projection_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: evalkit::DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    /// `mmr` or `dpp`.
    pub method: String,
    pub k: usize,
    pub lambda_mmr: f64,
    pub alpha: f64,
    pub pool_factor: usize,
}

impl Default for RerankSection {
    fn default() -> Self {
        Self {
            method: "mmr".into(),
            k: 50,
            lambda_mmr: 0.5,
            alpha: rerank::DEFAULT_DPP_ALPHA,
            pool_factor: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub force: bool,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub encoder: EncoderSection,
    pub llm: LlmSection,
    pub mock: MockSection,
    pub top: TopSection,
    pub refine: RefineSection,
    pub reason: ReasonSection,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub influence: InfluenceSection,
    pub eval: EvalSection,
    pub rerank: RerankSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            force: false,
            data: DataSection::default(),
            synth: SynthConfig::default(),
            encoder: EncoderSection::default(),
            llm: LlmSection::default(),
            mock: MockSection::default(),
            top: TopSection::default(),
            refine: RefineSection::default(),
            reason: ReasonSection::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            influence: InfluenceSection::default(),
            eval: EvalSection::default(),
            rerank: RerankSection::default(),
        }
    }
}

/// Flattens nested objects into dotted keys. Arrays stay values.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn nest(flat: &BTreeMap<String, Value>) -> std::result::Result<Value, String> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            cur = slot
                .as_object_mut()
                .ok_or_else(|| format!("key {key} conflicts with a scalar at {p}"))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

/// Parses a command-line value: JSON when it parses, otherwise a string.
pub fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Builds a config from the defaults, an optional file and overrides,
    /// in that order of increasing precedence.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("config serializes"));
        let known: BTreeSet<String> = flat.keys().cloned().collect();
        let mut apply = |k: &str, v: Value| -> Result<()> {
            // optional keys (null by default) are still known
            if !known.contains(k) && !known.iter().any(|q| k.starts_with(&format!("{q}."))) {
                return Err(Error::Config(format!("unknown config key {k}")));
            }
            flat.insert(k.to_string(), v);
            Ok(())
        };
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!("{} must hold a JSON object", p.display())));
            }
            for (k, x) in flatten(&v) {
                apply(&k, x)?;
            }
        }
        for (k, v) in overrides {
            apply(k, v.clone())?;
        }
        let nested = nest(&flat).map_err(Error::Config)?;
        let cfg: RunConfig = serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.llm.backend.as_str(), "auto" | "mock" | "remote") {
            return bad(format!("llm.backend must be auto, mock or remote, got {:?}", self.llm.backend));
        }
        if !matches!(self.rerank.method.as_str(), "mmr" | "dpp") {
            return bad(format!("rerank.method must be mmr or dpp, got {:?}", self.rerank.method));
        }
        if self.reason.n_paths == 0 {
            return bad("reason.n_paths must be >= 1".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be a non-empty list of positive integers".into());
        }
        if self.top.sample_clusters == 0 || self.top.per_cluster == 0 {
            return bad("top.sample_clusters and top.per_cluster must be >= 1".into());
        }
        self.augment.validate().map_err(Error::Config)?;
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loop_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            neg_ratio: t.neg_ratio,
            epochs_max: t.epochs_max,
            patience: t.patience,
            batch_size: t.batch_size,
            seed: derive_seed(self.seed, streams::TRAIN),
            eval_every: t.eval_every,
            val_k: t.val_k,
            ..TrainConfig::default()
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        let i = &self.influence;
        LoopConfig {
            k: i.k,
            interval: i.interval,
            budget_fraction: if i.mode == AugmentMode::Toprec { i.budget } else { 0.0 },
            per_round: i.per_round,
            groups: i.groups,
            projection_dim: i.projection_dim,
            seed: derive_seed(self.seed, streams::INFLUENCE),
        }
    }

    pub fn encoder(&self) -> HashingEncoder {
        HashingEncoder::new(self.encoder.dim, self.encoder.seed)
    }

    pub fn mock_config(&self) -> MockConfig {
        MockConfig {
            encoder: self.encoder(),
            seed: derive_seed(self.seed, streams::MOCK),
            s_max: self.mock.s_max,
            d_max: self.mock.d_max,
            branching: self.mock.branching,
            latent_leaves: self.mock.latent_leaves,
            ..MockConfig::default()
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.llm.max_retries,
            backoff: std::time::Duration::from_millis(self.llm.backoff_ms),
        }
    }

    fn cache_path(&self) -> PathBuf {
        self.llm.cache.clone().unwrap_or_else(|| self.out_dir.join("llm_cache.jsonl"))
    }
}

mod streams {
    pub const SPLIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const MOCK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const INFLUENCE: u64 = 6;
    pub const RANDOM: u64 = 7;
    pub const SYNTH: u64 = 8;
}

// ---------------------------------------------------------------------------
// Lineage

/// Stage names in pipeline order, with the config prefixes each adds.
const STAGE_KEYS: [(&str, &[&str]); 7] = [
    ("data", &["seed", "data.", "synth."]),
    ("tree", &["encoder.", "llm.backend", "mock.", "top."]),
    ("assigned", &[]),
    ("refined", &["refine."]),
    ("selections", &["reason."]),
    ("model", &["augment.", "model.", "train.", "influence."]),
    ("report", &["eval.", "rerank."]),
];

/// Hash of every config key that can affect the artifact of `stage`.
pub fn stage_hash(cfg: &RunConfig, stage: &str) -> String {
    let pos = STAGE_KEYS
        .iter()
        .position(|(s, _)| *s == stage)
        .unwrap_or_else(|| panic!("unknown stage {stage}"));
    let prefixes: Vec<&str> = STAGE_KEYS[..=pos].iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let relevant: BTreeMap<String, Value> = cfg
        .flat()
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k == p || (p.ends_with('.') && k.starts_with(p))))
        .collect();
    sha256_hex(serde_json::to_string(&relevant).unwrap().as_bytes())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Lineage {
    pub fn of(cfg: &RunConfig, stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash: stage_hash(cfg, stage),
            seed: cfg.seed,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).unwrap()
    }

    /// Errors unless `found` was produced under the current config.
    pub fn check(cfg: &RunConfig, stage: &str, found: Option<&Value>, artifact: &Path) -> Result<()> {
        let want = Self::of(cfg, stage);
        let got: Option<Lineage> = found.and_then(|v| serde_json::from_value(v.clone()).ok());
        match got {
            Some(g) if g == want => Ok(()),
            _ if cfg.force => {
                log::warn!("{}: lineage mismatch ignored (force)", artifact.display());
                Ok(())
            }
            Some(g) => Err(Error::Config(format!(
                "{} was produced by a different configuration (stage {}, hash {}, seed {}; current hash {}, seed {}); rerun the stage or set force",
                artifact.display(),
                g.stage,
                g.config_hash,
                g.seed,
                want.config_hash,
                want.seed
            ))),
            None => Err(Error::Config(format!(
                "{} carries no lineage record; rerun the stage or set force",
                artifact.display()
            ))),
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".lineage.json");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, lineage: &Lineage) -> Result<()> {
    let p = sidecar(path);
    fs::write(&p, serde_json::to_string_pretty(lineage).unwrap() + "\n").map_err(|e| Error::io(&p, e))
}

fn read_sidecar(path: &Path) -> Option<Value> {
    fs::read_to_string(sidecar(path)).ok().and_then(|s| serde_json::from_str(&s).ok())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Error::Invariant(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Data(corpus::DataError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    })
}

/// Artifact locations under `out_dir`.
pub struct Paths {
    pub data: PathBuf,
    pub tree_raw: PathBuf,
    pub tree_assigned: PathBuf,
    pub tree: PathBuf,
    pub selections: PathBuf,
    pub augmented: PathBuf,
    pub model: PathBuf,
    pub audit: PathBuf,
    pub report: PathBuf,
    pub tradeoff: PathBuf,
    pub rerank_report: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Self {
            data: out.join("data"),
            tree_raw: out.join("tree_raw.json"),
            tree_assigned: out.join("tree_assigned.json"),
            tree: out.join("tree.json"),
            selections: out.join("selections.jsonl"),
            augmented: out.join("augmented.tsv"),
            model: out.join("model.bin"),
            audit: out.join("audit.jsonl"),
            report: out.join("report.json"),
            tradeoff: out.join("tradeoff.csv"),
            rerank_report: out.join("rerank_report.json"),
        }
    }
}

/// Advisory lock on the output directory, removed on drop.
pub struct OutDirLock(PathBuf);

impl OutDirLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join(".lock");
        if p.exists() {
            log::warn!("{} exists; another run may be using this directory", p.display());
        }
        fs::write(&p, std::process::id().to_string()).map_err(|e| Error::io(&p, e))?;
        Ok(Self(p))
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

// ---------------------------------------------------------------------------
// Backends

pub fn make_backend(cfg: &RunConfig, cached: bool) -> Result<Box<dyn LlmBackend>> {
    let remote = RemoteConfig::from_env();
    let inner: Box<dyn LlmBackend> = match (cfg.llm.backend.as_str(), remote) {
        ("mock", _) | ("auto", None) => Box::new(MockBackend::new(cfg.mock_config())),
        (_, Some(rc)) => Box::new(RemoteBackend::new(rc)),
        (_, None) => return Err(Error::Config("llm.backend is remote but LLM_ENDPOINT is not set".into())),
    };
    if !cached {
        return Ok(inner);
    }
    let path = cfg.cache_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let c = CachedBackend::open(inner, &path).map_err(|e| Error::io(&path, e))?;
    Ok(Box::new(c))
}

// ---------------------------------------------------------------------------
// Stages (in memory)

/// Loads `data.dir` or generates the synthetic dataset, then core-filters and
/// splits when the data has no splits yet.
pub fn ingest(cfg: &RunConfig) -> Result<(Dataset, Option<SyntheticTruth>)> {
    let (mut d, truth) = match &cfg.data.dir {
        Some(dir) => {
            let d = corpus::load_dataset(
                &dir.join("items.jsonl"),
                &dir.join("users.jsonl"),
                &dir.join("interactions.tsv"),
            )?;
            let splits = dir.join("splits.json");
            let d = if splits.exists() {
                d.with_splits(corpus::load_splits(&splits)?)
            } else {
                d
            };
            let truth_path = dir.join("truth.json");
            let truth = truth_path.exists().then(|| SyntheticTruth::load(&truth_path)).transpose()?;
            (d, truth)
        }
        None => {
            let s = corpus::generate_synthetic_dataset(&cfg.synth, derive_seed(cfg.seed, streams::SYNTH))?;
            (s.dataset, Some(s.truth))
        }
    };
    if cfg.data.core_k > 0 {
        d = corpus::core_filter(&d, cfg.data.core_k)?;
    }
    if d.splits().is_empty() {
        d = corpus::split_per_user(&d, cfg.data.ratios, derive_seed(cfg.seed, streams::SPLIT))?;
    }
    let report = corpus::validate(&d);
    if !report.is_valid() {
        return Err(Error::Invariant(format!("dataset failed validation: {:?}", report.violations)));
    }
    Ok((d, truth))
}

pub fn build_tree(cfg: &RunConfig, d: &Dataset, backend: &dyn LlmBackend, enc: &dyn TextEncoder) -> Result<PreferenceTree> {
    let samples = sample_diverse_items(
        d.items(),
        enc,
        cfg.top.sample_clusters,
        cfg.top.per_cluster,
        derive_seed(cfg.seed, streams::SAMPLE),
    )?;
    let constraints = TreeConstraints {
        min_branch: cfg.top.min_branch,
        max_branch: cfg.top.max_branch,
        ..TreeConstraints::default()
    };
    Ok(top::construct(&samples, backend, &constraints, enc, &cfg.retry_policy())?)
}

pub fn assign_items(
    cfg: &RunConfig,
    d: &Dataset,
    tree: &PreferenceTree,
    backend: &dyn LlmBackend,
    enc: &dyn TextEncoder,
) -> Result<PreferenceTree> {
    Ok(top::assign_all(d.items(), tree, backend, enc, &cfg.retry_policy(), cfg.llm.parallelism)?)
}

pub fn refine_config(cfg: &RunConfig, tree: &PreferenceTree) -> RefineConfig {
    let base = RefineConfig::for_tree(tree);
    RefineConfig {
        load_min: cfg.refine.load_min.unwrap_or(base.load_min),
        load_max: cfg.refine.load_max.unwrap_or(base.load_max),
        max_ops: cfg.refine.max_ops,
    }
}

pub fn refine_tree(
    cfg: &RunConfig,
    d: &Dataset,
    tree: &PreferenceTree,
    backend: &dyn LlmBackend,
    enc: &dyn TextEncoder,
) -> Result<PreferenceTree> {
    let rc = refine_config(cfg, tree);
    let (t, ops) = top::refine(tree, d.items(), &rc, backend, enc, &cfg.retry_policy())?;
    log::info!(
        "refined tree with {} operation(s); {} leaves, load bounds [{}, {}]",
        ops.len(),
        t.leaves().len(),
        rc.load_min,
        rc.load_max
    );
    Ok(t)
}

pub fn reason(cfg: &RunConfig, d: &Dataset, tree: &PreferenceTree, backend: &dyn LlmBackend) -> Result<Vec<LeafSelection>> {
    let users: Vec<String> = d.users().iter().map(|u| u.id.clone()).collect();
    Ok(reasoner::select_all(
        d,
        &users,
        tree,
        backend,
        &cfg.retry_policy(),
        cfg.reason.n_paths,
        cfg.llm.parallelism,
    )?)
}

/// Tree-guided augmentation for one user.
fn toprec_for_user(
    cfg: &RunConfig,
    d: &Dataset,
    tree: &PreferenceTree,
    sel: &LeafSelection,
    freq: &LeafFrequency,
    enc: &dyn TextEncoder,
) -> Result<Vec<Interaction>> {
    Ok(augment::generate(sel, &cfg.augment, d, tree, freq, enc)?)
}

/// Static augmentation of every user that has a selection.
pub fn augment_all(
    cfg: &RunConfig,
    d: &Dataset,
    tree: &PreferenceTree,
    selections: &[LeafSelection],
    enc: &dyn TextEncoder,
) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for sel in selections {
        let freq = reasoner::leaf_frequencies(&sel.user, d, tree)?;
        out.extend(toprec_for_user(cfg, d, tree, sel, &freq, enc)?);
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub audit: Vec<AuditRound>,
    pub synthetic: Vec<Interaction>,
    /// Input dataset plus the synthetic interactions.
    pub dataset: Dataset,
}

/// Trains the backbone with the influence-guided augmentation loop.
/// `tree` and `selections` are only needed in `toprec` mode.
pub fn train(
    cfg: &RunConfig,
    d: &Dataset,
    tree: Option<&PreferenceTree>,
    selections: &[LeafSelection],
    enc: &dyn TextEncoder,
) -> Result<TrainOutcome> {
    let mode = cfg.influence.mode;
    let mut synthetic: Vec<Interaction> = if mode == AugmentMode::Random {
        rerank::random_augment(d, cfg.augment.per_user, derive_seed(cfg.seed, streams::RANDOM))
    } else {
        Vec::new()
    };
    let base = d.with_synthetic(&synthetic)?;
    let upfront = synthetic.len();
    let d = &base;
    let data = TrainData::from_dataset(d)?;
    let params = ModelParams::init(
        &data,
        cfg.model.backbone,
        cfg.model.dim,
        cfg.model.layers,
        derive_seed(cfg.seed, streams::INIT),
    )?;
    let by_user: BTreeMap<&str, &LeafSelection> = selections.iter().map(|s| (s.user.as_str(), s)).collect();
    if mode == AugmentMode::Toprec && cfg.loop_config().total_budget(d.users().len()) > 0 && tree.is_none() {
        return Err(Error::Config("toprec augmentation needs a refined tree".into()));
    }
    let provider = |users: &[usize]| -> Result<Vec<(usize, usize)>> {
        let mut pairs = Vec::new();
        for &u in users {
            let uid = &d.users()[u].id;
            let rows = match mode {
                AugmentMode::None | AugmentMode::Random => Vec::new(),
                AugmentMode::Toprec => {
                    let tree = tree.expect("checked above");
                    let Some(sel) = by_user.get(uid.as_str()) else {
                        log::warn!("no leaf selection for user {uid}; skipping");
                        continue;
                    };
                    let freq = reasoner::leaf_frequencies(uid, d, tree)?;
                    toprec_for_user(cfg, d, tree, sel, &freq, enc)?
                }
            };
            for r in rows {
                let i = d
                    .item_idx(&r.item)
                    .ok_or_else(|| Error::Invariant(format!("augmentation produced unknown item {}", r.item)))?;
                pairs.push((u, i));
                synthetic.push(r);
            }
        }
        Ok(pairs)
    };
    let outcome = influence::dynamic_loop(params, data, &cfg.train_config(), &cfg.loop_config(), provider)?;
    let dataset = base.with_synthetic(&synthetic[upfront..])?;
    Ok(TrainOutcome {
        params: outcome.params,
        history: outcome.history,
        audit: outcome.audit,
        synthetic,
        dataset,
    })
}

pub fn evaluate(cfg: &RunConfig, params: &ModelParams, d: &Dataset, truth: Option<&SyntheticTruth>) -> Result<EvalResult> {
    Ok(evalkit::evaluate(params, d, &cfg.eval.ks, truth)?)
}

/// Reranks each user's top `pool_factor·k` list with MMR or DPP and
/// evaluates the reranked lists at `rerank.k` (plus any smaller eval ks).
pub fn rerank_eval(
    cfg: &RunConfig,
    params: &ModelParams,
    d: &Dataset,
    truth: Option<&SyntheticTruth>,
    enc: &dyn TextEncoder,
) -> Result<EvalResult> {
    let k = cfg.rerank.k;
    let pools = evalkit::recommend_all(params, d, k * cfg.rerank.pool_factor);
    let emb = params.embeddings();
    let mut item_emb: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for it in d.items() {
        item_emb.insert(it.id.as_str(), enc.encode(&it.text())?.as_slice().to_vec());
    }
    let mut lists = BTreeMap::new();
    for (user, pool) in pools {
        let u = d.user_idx(&user).expect("user exists");
        let cands: Vec<Candidate> = pool
            .iter()
            .map(|i| Candidate {
                item: i.clone(),
                rel: emb.score(u, d.item_idx(i).expect("item exists")),
            })
            .collect();
        let embs: Vec<&[f32]> = cands.iter().map(|c| item_emb[c.item.as_str()].as_slice()).collect();
        let kk = k.min(cands.len());
        let picked: Vec<String> = match cfg.rerank.method.as_str() {
            "mmr" => rerank::mmr_rerank(&cands, &embs, kk, cfg.rerank.lambda_mmr)?,
            _ => {
                let rel: Vec<f64> = cands.iter().map(|c| c.rel).collect();
                let kernel = rerank::build_dpp_kernel(&rel, &embs, cfg.rerank.alpha)?;
                let sel = rerank::dpp_greedy_map(&kernel, kk)?;
                let mut out: Vec<String> = sel.indices.iter().map(|&i| cands[i].item.clone()).collect();
                // fill up from the relevance order if the greedy stopped early
                for c in &cands {
                    if out.len() >= kk {
                        break;
                    }
                    if !out.contains(&c.item) {
                        out.push(c.item.clone());
                    }
                }
                out
            }
        };
        lists.insert(user, picked);
    }
    let ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&x| x <= k).chain([k]).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(evalkit::evaluate_lists(&lists, d, &ks, truth, false)?)
}

/// Everything the training stage needs, built in memory.
pub struct Prepared {
    pub dataset: Dataset,
    pub truth: Option<SyntheticTruth>,
    pub tree: PreferenceTree,
    pub selections: Vec<LeafSelection>,
}

/// Runs ingest through reasoning without touching the filesystem.
pub fn prepare(cfg: &RunConfig, dataset: Dataset, truth: Option<SyntheticTruth>, backend: &dyn LlmBackend) -> Result<Prepared> {
    let enc = CachingEncoder::new(cfg.encoder());
    let raw = build_tree(cfg, &dataset, backend, &enc).map_err(|e| e.in_stage("build-top"))?;
    let assigned = assign_items(cfg, &dataset, &raw, backend, &enc).map_err(|e| e.in_stage("assign-items"))?;
    let tree = refine_tree(cfg, &dataset, &assigned, backend, &enc).map_err(|e| e.in_stage("refine-top"))?;
    let selections = reason(cfg, &dataset, &tree, backend).map_err(|e| e.in_stage("reason"))?;
    Ok(Prepared {
        dataset,
        truth,
        tree,
        selections,
    })
}

/// Trains in the configured mode on a prepared run and evaluates.
pub fn train_and_evaluate(cfg: &RunConfig, p: &Prepared) -> Result<(TrainOutcome, EvalResult)> {
    let enc = CachingEncoder::new(cfg.encoder());
    let out = train(cfg, &p.dataset, Some(&p.tree), &p.selections, &enc).map_err(|e| e.in_stage("train"))?;
    let eval = evaluate(cfg, &out.params, &out.dataset, p.truth.as_ref()).map_err(|e| e.in_stage("evaluate"))?;
    Ok((out, eval))
}

// ---------------------------------------------------------------------------
// Stages (with artifacts)

fn load_data_artifact(cfg: &RunConfig, paths: &Paths) -> Result<(Dataset, Option<SyntheticTruth>)> {
    let dir = &paths.data;
    // a missing artifact is a data error, checked before lineage
    let d = corpus::load_dataset(&dir.join("items.jsonl"), &dir.join("users.jsonl"), &dir.join("interactions.tsv"))?
        .with_splits(corpus::load_splits(&dir.join("splits.json"))?);
    let lineage = read_json(&dir.join("lineage.json")).ok();
    Lineage::check(cfg, "data", lineage.as_ref(), dir)?;
    let truth_path = dir.join("truth.json");
    let truth = truth_path.exists().then(|| SyntheticTruth::load(&truth_path)).transpose()?;
    Ok((d, truth))
}

fn load_tree_artifact(cfg: &RunConfig, path: &Path, stage: &str) -> Result<PreferenceTree> {
    let (tree, lineage) = PreferenceTree::load(path)?;
    Lineage::check(cfg, stage, lineage.as_ref(), path)?;
    Ok(tree)
}

fn load_selections_artifact(cfg: &RunConfig, paths: &Paths) -> Result<Vec<LeafSelection>> {
    let sel = reasoner::load_selections(&paths.selections).map_err(|e| Error::io(&paths.selections, e))?;
    Lineage::check(cfg, "selections", read_sidecar(&paths.selections).as_ref(), &paths.selections)?;
    Ok(sel)
}

fn load_model_artifact(cfg: &RunConfig, paths: &Paths) -> Result<(ModelParams, Dataset, Option<SyntheticTruth>)> {
    let (d, truth) = load_data_artifact(cfg, paths)?;
    if !paths.model.exists() {
        return Err(Error::io(&paths.model, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Lineage::check(cfg, "model", read_sidecar(&paths.model).as_ref(), &paths.model)?;
    let synthetic = if paths.augmented.exists() {
        corpus::load_interactions(&paths.augmented)?
    } else {
        Vec::new()
    };
    let d = d.with_synthetic(&synthetic)?;
    let data = TrainData::from_dataset(&d)?;
    let params = recmodel::load_checkpoint_for(&paths.model, &data)?;
    Ok((params, d, truth))
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Dataset> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, truth) = ingest(cfg)?;
    fs::create_dir_all(&paths.data).map_err(|e| Error::io(&paths.data, e))?;
    corpus::write_dataset(&paths.data, &d)?;
    if let Some(t) = &truth {
        t.save(&paths.data.join("truth.json"))?;
    }
    write_json(&paths.data.join("lineage.json"), &Lineage::of(cfg, "data").to_value())?;
    log::info!(
        "ingested {} users, {} items, {} interactions into {}",
        d.users().len(),
        d.items().len(),
        d.interactions().len(),
        paths.data.display()
    );
    Ok(d)
}

pub fn cmd_build_top(cfg: &RunConfig, backend: &dyn LlmBackend) -> Result<PreferenceTree> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let enc = CachingEncoder::new(cfg.encoder());
    let tree = build_tree(cfg, &d, backend, &enc)?;
    tree.save(&paths.tree_raw, Some(Lineage::of(cfg, "tree").to_value()))?;
    log::info!("built tree with {} nodes, {} leaves", tree.len(), tree.leaves().len());
    Ok(tree)
}

pub fn cmd_assign_items(cfg: &RunConfig, backend: &dyn LlmBackend) -> Result<PreferenceTree> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let raw = load_tree_artifact(cfg, &paths.tree_raw, "tree")?;
    let enc = CachingEncoder::new(cfg.encoder());
    let tree = assign_items(cfg, &d, &raw, backend, &enc)?;
    tree.save(&paths.tree_assigned, Some(Lineage::of(cfg, "assigned").to_value()))?;
    Ok(tree)
}

pub fn cmd_refine_top(cfg: &RunConfig, backend: &dyn LlmBackend) -> Result<PreferenceTree> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let assigned = load_tree_artifact(cfg, &paths.tree_assigned, "assigned")?;
    let enc = CachingEncoder::new(cfg.encoder());
    let tree = refine_tree(cfg, &d, &assigned, backend, &enc)?;
    tree.save(&paths.tree, Some(Lineage::of(cfg, "refined").to_value()))?;
    Ok(tree)
}

pub fn cmd_reason(cfg: &RunConfig, backend: &dyn LlmBackend) -> Result<Vec<LeafSelection>> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let tree = load_tree_artifact(cfg, &paths.tree, "refined")?;
    let sel = reason(cfg, &d, &tree, backend)?;
    reasoner::write_selections(&paths.selections, &sel).map_err(|e| Error::io(&paths.selections, e))?;
    write_sidecar(&paths.selections, &Lineage::of(cfg, "selections"))?;
    Ok(sel)
}

/// Static augmentation of every user; written next to the run as
/// `augmented_static.tsv`.
pub fn cmd_augment(cfg: &RunConfig) -> Result<Vec<Interaction>> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let tree = load_tree_artifact(cfg, &paths.tree, "refined")?;
    let sel = load_selections_artifact(cfg, &paths)?;
    let enc = CachingEncoder::new(cfg.encoder());
    let rows = augment_all(cfg, &d, &tree, &sel, &enc)?;
    let out = cfg.out_dir.join("augmented_static.tsv");
    corpus::write_interactions(&out, &rows)?;
    write_sidecar(&out, &Lineage::of(cfg, "model"))?;
    log::info!("generated {} synthetic interactions for {} users", rows.len(), sel.len());
    Ok(rows)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let paths = Paths::new(&cfg.out_dir);
    let (d, _) = load_data_artifact(cfg, &paths)?;
    let needs_tree = cfg.influence.mode == AugmentMode::Toprec && cfg.loop_config().total_budget(d.users().len()) > 0;
    let (tree, sel) = if needs_tree {
        (
            Some(load_tree_artifact(cfg, &paths.tree, "refined")?),
            load_selections_artifact(cfg, &paths)?,
        )
    } else {
        (None, Vec::new())
    };
    let enc = CachingEncoder::new(cfg.encoder());
    let out = train(cfg, &d, tree.as_ref(), &sel, &enc)?;
    let lineage = Lineage::of(cfg, "model");
    recmodel::save_checkpoint(&out.params, &paths.model)?;
    write_sidecar(&paths.model, &lineage)?;
    corpus::write_interactions(&paths.augmented, &out.synthetic)?;
    write_sidecar(&paths.augmented, &lineage)?;
    let mut w = BufWriter::new(fs::File::create(&paths.audit).map_err(|e| Error::io(&paths.audit, e))?);
    influence::write_audit(&mut w, &out.audit).map_err(|e| Error::io(&paths.audit, e))?;
    w.flush().map_err(|e| Error::io(&paths.audit, e))?;
    write_sidecar(&paths.audit, &lineage)?;
    let hist = paths.model.with_extension("history.json");
    write_json(&hist, &json!({ "lineage": lineage.to_value(), "history": out.history }))?;
    Ok(out)
}

pub fn report_value(cfg: &RunConfig, eval: &EvalResult, extra: Value) -> Value {
    json!({
        "lineage": Lineage::of(cfg, "report").to_value(),
        "recall": eval.recall,
        "category_entropy": eval.category_entropy,
        "suppressed_recall": eval.suppressed_recall,
        "n_users_evaluated": eval.n_users_evaluated,
        "run": extra,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalResult> {
    let paths = Paths::new(&cfg.out_dir);
    let (params, d, truth) = load_model_artifact(cfg, &paths)?;
    let eval = evaluate(cfg, &params, &d, truth.as_ref())?;
    let history: Value = read_json(&paths.model.with_extension("history.json"))
        .ok()
        .and_then(|v| v.get("history").cloned())
        .unwrap_or(Value::Null);
    let extra = json!({
        "mode": cfg.influence.mode,
        "backbone": cfg.model.backbone,
        "synthetic_interactions": d.synthetic_count(),
        "best_epoch": history.get("best_epoch"),
        "epochs": history.get("epochs").and_then(Value::as_array).map(Vec::len),
    });
    write_json(&paths.report, &report_value(cfg, &eval, extra))?;
    let label = format!("{:?}", cfg.influence.mode).to_lowercase();
    let k = cfg.eval.ks[0];
    let t = evalkit::tradeoff_report(&[(label, eval.clone())], k);
    fs::write(&paths.tradeoff, t.to_csv()).map_err(|e| Error::io(&paths.tradeoff, e))?;
    write_sidecar(&paths.tradeoff, &Lineage::of(cfg, "report"))?;
    Ok(eval)
}

pub fn cmd_rerank(cfg: &RunConfig) -> Result<EvalResult> {
    let paths = Paths::new(&cfg.out_dir);
    let (params, d, truth) = load_model_artifact(cfg, &paths)?;
    let enc = CachingEncoder::new(cfg.encoder());
    let eval = rerank_eval(cfg, &params, &d, truth.as_ref(), &enc)?;
    let extra = json!({
        "method": cfg.rerank.method,
        "k": cfg.rerank.k,
        "lambda_mmr": cfg.rerank.lambda_mmr,
        "alpha": cfg.rerank.alpha,
    });
    write_json(&paths.rerank_report, &report_value(cfg, &eval, extra))?;
    Ok(eval)
}

/// Every stage in order, persisting each artifact. Re-runs reuse the LLM
/// response cache.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<EvalResult> {
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let backend = make_backend(cfg, true)?;
    cmd_ingest(cfg).map_err(|e| e.in_stage("ingest"))?;
    cmd_build_top(cfg, backend.as_ref()).map_err(|e| e.in_stage("build-top"))?;
    cmd_assign_items(cfg, backend.as_ref()).map_err(|e| e.in_stage("assign-items"))?;
    cmd_refine_top(cfg, backend.as_ref()).map_err(|e| e.in_stage("refine-top"))?;
    cmd_reason(cfg, backend.as_ref()).map_err(|e| e.in_stage("reason"))?;
    cmd_train(cfg).map_err(|e| e.in_stage("train"))?;
    cmd_evaluate(cfg).map_err(|e| e.in_stage("evaluate"))
}
