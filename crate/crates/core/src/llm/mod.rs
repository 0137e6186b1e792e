//! LLM backend abstraction.
//!
//! Every request carries a rendered prompt for real models and a structured
//! `context` payload holding the same inputs in machine form. Remote backends
//! only look at the rendered text; the [`MockBackend`] only looks at the
//! context, which keeps it a pure function of the request.

mod cache;
mod mock;
mod prompts;
mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{request_hash, CachedBackend};
pub use mock::{build_mock_tree, MockBackend, MockConfig};
pub use prompts::{
    render_im_prompt, render_pr_prompt, render_summarize_prompt, render_top_prompt, SketchNode, TreeConstraints,
    TreeSketch,
};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("could not parse {kind:?} response after {attempts} attempts: {message}")]
    Parse {
        kind: PromptKind,
        attempts: usize,
        message: String,
        raw: String,
    },
    #[error("{kind:?} response violates schema: {message}")]
    Schema {
        kind: PromptKind,
        message: String,
        raw: String,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptKind {
    TopConstruct,
    PreferenceReason,
    ItemMatch,
    Summarize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub kind: PromptKind,
    pub rendered: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Structured copy of the template inputs.
    pub context: serde_json::Value,
}

impl LlmRequest {
    pub(crate) fn new(kind: PromptKind, rendered: String, context: serde_json::Value) -> Self {
        debug_assert!(!rendered.is_empty());
        Self {
            kind,
            rendered,
            max_tokens: 4096,
            temperature: 0.0,
            context,
        }
    }

    fn with_repair(&self, problem: &str) -> Self {
        let mut r = self.clone();
        r.rendered.push_str(&format!(
            "\n\nYour previous answer could not be used ({problem}). \
             Reply again with ONLY a JSON object that follows the required format exactly."
        ));
        r
    }
}

/// Tree response: `{"nodes": [{"id", "label", "parent"}]}`. `centroid` and
/// `items` are optional extensions (the mock fills them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub label: String,
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeafChoice {
    pub leaves: Vec<String>,
    #[serde(default)]
    pub reasons: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMatch {
    pub leaf: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryPayload {
    summary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tree(TreeSpec),
    Leaves(LeafChoice),
    Leaf(ItemMatch),
    Summary(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub raw: String,
    pub parsed: Payload,
    pub attempts: usize,
}

/// Transport-level failure reported by a backend.
#[derive(Debug, Clone, Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Sends one request and returns the raw completion text.
    fn call(&self, req: &LlmRequest) -> Result<String, TransportError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn call(&self, req: &LlmRequest) -> Result<String, TransportError> {
        (**self).call(req)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn call(&self, req: &LlmRequest) -> Result<String, TransportError> {
        (**self).call(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first one, for both transport and parse failures.
    pub max_retries: usize,
    /// First transport backoff; doubles on every retry.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff() -> Self {
        Self {
            backoff: Duration::ZERO,
            ..Self::default()
        }
    }
}

/// Pulls the outermost JSON object out of a completion, tolerating code
/// fences and surrounding prose.
fn extract_json(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

pub fn parse_response(kind: PromptKind, raw: &str) -> Result<Payload, String> {
    let json = extract_json(raw).ok_or_else(|| "no JSON object found".to_string())?;
    match kind {
        PromptKind::TopConstruct => {
            let spec: TreeSpec = serde_json::from_str(json).map_err(|e| e.to_string())?;
            check_tree_spec(&spec)?;
            Ok(Payload::Tree(spec))
        }
        PromptKind::PreferenceReason => {
            let c: LeafChoice = serde_json::from_str(json).map_err(|e| e.to_string())?;
            Ok(Payload::Leaves(c))
        }
        PromptKind::ItemMatch => {
            let m: ItemMatch = serde_json::from_str(json).map_err(|e| e.to_string())?;
            if m.leaf.trim().is_empty() {
                return Err("empty leaf id".into());
            }
            Ok(Payload::Leaf(m))
        }
        PromptKind::Summarize => {
            let s: SummaryPayload = serde_json::from_str(json).map_err(|e| e.to_string())?;
            if s.summary.trim().is_empty() {
                return Err("empty summary".into());
            }
            Ok(Payload::Summary(s.summary))
        }
    }
}

/// Single root, unique ids, every parent known, no cycles, non-empty labels.
pub fn check_tree_spec(spec: &TreeSpec) -> Result<(), String> {
    if spec.nodes.is_empty() {
        return Err("tree has no nodes".into());
    }
    let mut ids = BTreeMap::new();
    for n in &spec.nodes {
        if n.label.trim().is_empty() {
            return Err(format!("node {} has an empty label", n.id));
        }
        if ids.insert(n.id.as_str(), n.parent.as_deref()).is_some() {
            return Err(format!("duplicate node id {}", n.id));
        }
    }
    let roots: Vec<&str> = spec.nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id.as_str()).collect();
    if roots.len() != 1 {
        return Err(format!("expected exactly one root, found {}", roots.len()));
    }
    for n in &spec.nodes {
        let mut seen = BTreeSet::new();
        let mut cur = n.id.as_str();
        while let Some(p) = ids[cur] {
            if !ids.contains_key(p) {
                return Err(format!("node {cur} names unknown parent {p}"));
            }
            if !seen.insert(cur) {
                return Err(format!("cycle through node {cur}"));
            }
            cur = p;
        }
    }
    Ok(())
}

/// Sends `req`, parses the answer for its kind and runs `validate` on the
/// payload. Transport failures are retried with exponential backoff; parse
/// or schema failures are retried with a repair instruction appended.
pub fn complete(
    req: &LlmRequest,
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
    validate: &dyn Fn(&Payload) -> Result<(), String>,
) -> Result<LlmResponse, LlmError> {
    if req.rendered.trim().is_empty() {
        return Err(LlmError::Precondition("empty prompt".into()));
    }
    if req.temperature < 0.0 {
        return Err(LlmError::Precondition("negative temperature".into()));
    }
    let mut current = req.clone();
    let mut transport_failures = 0usize;
    let mut content_failures = 0usize;
    loop {
        let attempts = transport_failures + content_failures + 1;
        let raw = match backend.call(&current) {
            Ok(raw) => raw,
            Err(e) => {
                if !e.retryable || transport_failures >= policy.max_retries {
                    return Err(LlmError::Transport {
                        attempts,
                        message: e.message,
                    });
                }
                let wait = policy.backoff * (1u32 << transport_failures.min(16));
                log::warn!("{} transport error ({}); retrying in {:?}", backend.name(), e.message, wait);
                thread::sleep(wait);
                transport_failures += 1;
                continue;
            }
        };
        let outcome = parse_response(req.kind, &raw).map_err(|m| (m, false)).and_then(|p| {
            validate(&p).map(|_| p).map_err(|m| (m, true))
        });
        match outcome {
            Ok(parsed) => {
                return Ok(LlmResponse {
                    raw,
                    parsed,
                    attempts,
                })
            }
            Err((message, schema)) => {
                if content_failures >= policy.max_retries {
                    return Err(if schema {
                        LlmError::Schema {
                            kind: req.kind,
                            message,
                            raw,
                        }
                    } else {
                        LlmError::Parse {
                            kind: req.kind,
                            attempts,
                            message,
                            raw,
                        }
                    });
                }
                log::warn!("{:?} response rejected ({message}); asking for a repair", req.kind);
                content_failures += 1;
                current = req.with_repair(&message);
            }
        }
    }
}

pub fn accept_any(_: &Payload) -> Result<(), String> {
    Ok(())
}

/// Summarizes an entity's attribute fields.
pub fn summarize_attributes(
    attributes: &BTreeMap<String, String>,
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
) -> Result<String, LlmError> {
    if attributes.values().all(|v| v.trim().is_empty()) {
        return Err(LlmError::Precondition("entity has no attributes to summarize".into()));
    }
    let req = render_summarize_prompt(attributes);
    match complete(&req, backend, policy, &accept_any)?.parsed {
        Payload::Summary(s) => Ok(s),
        other => unreachable!("summarize parsed as {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        replies: Vec<Result<String, TransportError>>,
        calls: AtomicUsize,
    }

    impl LlmBackend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn call(&self, _req: &LlmRequest) -> Result<String, TransportError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn req(kind: PromptKind) -> LlmRequest {
        LlmRequest::new(kind, "prompt".into(), serde_json::Value::Null)
    }

    #[test]
    fn invalid_json_exhausts_retries() {
        let b = Scripted {
            replies: vec![Ok("not json".into())],
            calls: AtomicUsize::new(0),
        };
        let err = complete(&req(PromptKind::ItemMatch), &b, &RetryPolicy::no_backoff(), &accept_any).unwrap_err();
        assert!(matches!(err, LlmError::Parse { attempts: 4, ref raw, .. } if raw == "not json"));
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn repair_then_success() {
        let b = Scripted {
            replies: vec![Ok("oops".into()), Ok("```json\n{\"leaf\": \"a\"}\n```".into())],
            calls: AtomicUsize::new(0),
        };
        let r = complete(&req(PromptKind::ItemMatch), &b, &RetryPolicy::no_backoff(), &accept_any).unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(r.parsed, Payload::Leaf(ItemMatch { leaf: "a".into() }));
    }

    #[test]
    fn transport_errors_are_bounded() {
        let b = Scripted {
            replies: vec![Err(TransportError::retryable("503"))],
            calls: AtomicUsize::new(0),
        };
        let err = complete(&req(PromptKind::Summarize), &b, &RetryPolicy::no_backoff(), &accept_any).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 4, .. }));
        let b = Scripted {
            replies: vec![Err(TransportError::fatal("401"))],
            calls: AtomicUsize::new(0),
        };
        let err = complete(&req(PromptKind::Summarize), &b, &RetryPolicy::no_backoff(), &accept_any).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 1, .. }));
    }

    #[test]
    fn schema_violation_is_reported() {
        let b = Scripted {
            replies: vec![Ok("{\"leaf\": \"nope\"}".into())],
            calls: AtomicUsize::new(0),
        };
        let only_a = |p: &Payload| match p {
            Payload::Leaf(m) if m.leaf == "a" => Ok(()),
            _ => Err("leaf not in tree".to_string()),
        };
        let err = complete(&req(PromptKind::ItemMatch), &b, &RetryPolicy::no_backoff(), &only_a).unwrap_err();
        assert!(matches!(err, LlmError::Schema { .. }));
    }

    #[test]
    fn tree_checks() {
        let node = |id: &str, parent: Option<&str>| NodeSpec {
            id: id.into(),
            label: id.into(),
            parent: parent.map(Into::into),
            centroid: None,
            items: vec![],
        };
        let ok = TreeSpec {
            nodes: vec![node("r", None), node("a", Some("r")), node("b", Some("a"))],
        };
        assert!(check_tree_spec(&ok).is_ok());
        let two_roots = TreeSpec {
            nodes: vec![node("r", None), node("s", None)],
        };
        assert!(check_tree_spec(&two_roots).unwrap_err().contains("exactly one root"));
        let cycle = TreeSpec {
            nodes: vec![node("r", None), node("a", Some("b")), node("b", Some("a"))],
        };
        assert!(check_tree_spec(&cycle).unwrap_err().contains("cycle"));
        let dangling = TreeSpec {
            nodes: vec![node("r", None), node("a", Some("zz"))],
        };
        assert!(check_tree_spec(&dangling).unwrap_err().contains("unknown parent"));
    }

    #[test]
    fn summarize_requires_attributes() {
        let mock = MockBackend::default();
        let err = summarize_attributes(&BTreeMap::new(), &mock, &RetryPolicy::no_backoff()).unwrap_err();
        assert!(matches!(err, LlmError::Precondition(_)));
    }
}
