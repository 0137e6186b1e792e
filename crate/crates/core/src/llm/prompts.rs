use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LlmError, LlmRequest, PromptKind};
use crate::corpus::{Item, User};

pub(crate) const TREE_FORMAT: &str = r#"{"nodes": [{"id": "<unique node id>", "label": "<preference description>", "parent": "<parent node id or null for the root>"}]}"#;
pub(crate) const LEAVES_FORMAT: &str = r#"{"leaves": ["<leaf node id>", ...], "reasons": {"<leaf node id>": "<one sentence explaining the selection>"}}"#;
pub(crate) const LEAF_FORMAT: &str = r#"{"leaf": "<leaf node id>"}"#;
pub(crate) const SUMMARY_FORMAT: &str = r#"{"summary": "<condensed description>"}"#;

/// Branching and reference constraints for tree construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConstraints {
    pub min_branch: usize,
    pub max_branch: usize,
    /// Predefined item categories, listed as a reference when non-empty.
    pub categories: Vec<String>,
}

impl Default for TreeConstraints {
    fn default() -> Self {
        Self {
            min_branch: 3,
            max_branch: 5,
            categories: Vec::new(),
        }
    }
}

/// Compact, serializable view of a preference tree handed to prompts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeSketch {
    pub root: String,
    pub nodes: Vec<SketchNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchNode {
    pub id: String,
    pub label: String,
    pub parent: Option<String>,
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<f32>>,
}

impl TreeSketch {
    pub fn node(&self, id: &str) -> Option<&SketchNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn leaf_ids(&self) -> BTreeSet<String> {
        self.nodes.iter().filter(|n| n.children.is_empty()).map(|n| n.id.clone()).collect()
    }

    /// Indented outline, one node per line, children in stored order.
    pub fn outline(&self) -> String {
        let by_id: BTreeMap<&str, &SketchNode> = self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        let mut out = String::new();
        let mut stack = vec![(self.root.as_str(), 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let Some(n) = by_id.get(id) else { continue };
            let tag = if n.children.is_empty() { " (leaf)" } else { "" };
            let _ = writeln!(out, "{}- [{}] {}{}", "  ".repeat(depth), n.id, n.label, tag);
            for c in n.children.iter().rev() {
                stack.push((c.as_str(), depth + 1));
            }
        }
        out
    }
}

fn item_line(item: &Item) -> String {
    format!("- [{}] ({}) {}", item.id, item.category, item.text())
}

pub fn render_top_prompt(samples: &[Item], constraints: &TreeConstraints) -> Result<LlmRequest, LlmError> {
    if samples.is_empty() {
        return Err(LlmError::Precondition("tree construction needs at least one sampled item".into()));
    }
    let mut p = String::new();
    p.push_str(
        "You organize user preferences for a recommender system. Using the example items below, \
         build a multi-level tree of preferences that goes from broad interests at the top to \
         specific, fine-grained interests at the leaves. Every node is one kind of user preference \
         and every edge narrows its parent into a finer preference.\n\nConstraints:\n",
    );
    let _ = writeln!(
        p,
        "- Each node should be divided into {}-{} finer preferences (branches), except for leaf nodes.",
        constraints.min_branch, constraints.max_branch
    );
    p.push_str("- Vary the dividing criterion from one level to the next.\n");
    p.push_str("- Every node must describe a clear, actionable preference.\n");
    p.push_str("- Node ids must be unique; the root has parent null.\n");
    if !constraints.categories.is_empty() {
        let _ = writeln!(
            p,
            "- The catalog already uses these categories; use them as a reference for the upper levels: {}.",
            constraints.categories.join(", ")
        );
    }
    p.push_str("\nItem samples:\n");
    for it in samples {
        p.push_str(&item_line(it));
        p.push('\n');
    }
    let _ = write!(p, "\nReturn the tree as JSON in exactly this format:\n{TREE_FORMAT}\n");
    let context = json!({
        "items": samples.iter().map(|i| json!({"id": i.id, "category": i.category, "text": i.text()})).collect::<Vec<_>>(),
        "constraints": constraints,
    });
    Ok(LlmRequest::new(PromptKind::TopConstruct, p, context))
}

/// Preference-reasoning prompt. `history_leaves[i]` is the leaf currently
/// holding `history[i]`, if any.
pub fn render_pr_prompt(
    user: &User,
    history: &[Item],
    history_leaves: &[Option<String>],
    tree: &TreeSketch,
    n_paths: usize,
) -> Result<LlmRequest, LlmError> {
    if n_paths == 0 {
        return Err(LlmError::Precondition("n_paths must be >= 1".into()));
    }
    if history.len() != history_leaves.len() {
        return Err(LlmError::Precondition("history and history_leaves differ in length".into()));
    }
    let mut p = String::new();
    p.push_str(
        "You infer the latent preferences of a user by reasoning over a tree of preferences. \
         You receive the user's profile, the items they interacted with, and the tree, which runs \
         from broad preferences at the root to specific ones at the leaves. Explore the tree from \
         the top, follow the paths that explain the user's behavior, and look for preferences the \
         history does not show yet.\n\nConstraints:\n",
    );
    p.push_str("- Perform a breadth-first search: at each level keep the nodes that best match the user, then only expand their children at the next level, down to the leaves.\n");
    p.push_str("- Reevaluate the exploration to identify any unobserved preferences, adding them if found, following the root-to-leaf path.\n");
    let _ = writeln!(
        p,
        "- Control the total number of selected paths as {n_paths}. Return the leaf nodes of all selected paths."
    );
    p.push_str("- Only return ids of leaf nodes that appear in the tree.\n");
    let _ = write!(p, "\nUser profile: {}\n", user.text());
    p.push_str("\nUser historical interactions:\n");
    if history.is_empty() {
        p.push_str("(none)\n");
    }
    for (it, leaf) in history.iter().zip(history_leaves) {
        p.push_str(&item_line(it));
        if let Some(l) = leaf {
            let _ = write!(p, " -> [{l}]");
        }
        p.push('\n');
    }
    p.push_str("\nTree of preferences:\n");
    p.push_str(&tree.outline());
    let _ = write!(
        p,
        "\nReturn the selected leaves with a short reason for each, as JSON in exactly this format:\n{LEAVES_FORMAT}\n"
    );
    let context = json!({
        "user": {"id": user.id, "text": user.text()},
        "history": history.iter().map(|i| i.id.clone()).collect::<Vec<_>>(),
        "history_leaves": history_leaves,
        "tree": tree,
        "n_paths": n_paths,
    });
    Ok(LlmRequest::new(PromptKind::PreferenceReason, p, context))
}

pub fn render_im_prompt(item: &Item, tree: &TreeSketch) -> Result<LlmRequest, LlmError> {
    if tree.nodes.is_empty() {
        return Err(LlmError::Precondition("item matching needs a non-empty tree".into()));
    }
    let mut p = String::new();
    p.push_str(
        "You match items to user preferences. Given an item and a tree of preferences that runs \
         from broad to specific, find the single preference that fits the item best by descending \
         the tree and return the leaf you end at.\n\nConstraints:\n",
    );
    p.push_str("- At each level pick only the most appropriate node among the options.\n");
    p.push_str("- At the next level choose only among the children of the node picked before.\n");
    p.push_str("\nTree of preferences:\n");
    p.push_str(&tree.outline());
    let _ = write!(p, "\nItem information:\n{}\n", item_line(item));
    let _ = write!(p, "\nReturn the selected leaf as JSON in exactly this format:\n{LEAF_FORMAT}\n");
    let context = json!({
        "item": {"id": item.id, "category": item.category, "text": item.text()},
        "tree": tree,
    });
    Ok(LlmRequest::new(PromptKind::ItemMatch, p, context))
}

pub fn render_summarize_prompt(attributes: &BTreeMap<String, String>) -> LlmRequest {
    let mut p = String::new();
    p.push_str(
        "Condense the following fields into a short, faithful description. Keep the key facts, \
         drop noise and repetition.\n\n",
    );
    for (k, v) in attributes {
        let _ = writeln!(p, "{k}: {v}");
    }
    let _ = write!(p, "\nReturn JSON in exactly this format:\n{SUMMARY_FORMAT}\n");
    LlmRequest::new(PromptKind::Summarize, p, json!({ "attributes": attributes }))
}
