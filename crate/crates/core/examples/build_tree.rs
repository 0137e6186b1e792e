//! Builds a preference tree with the mock backend: sample diverse items,
//! construct the hierarchy, route every item to a leaf, then rebalance the
//! leaf loads.

use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::pipeline::{self, RunConfig};
use toprec::textenc::CachingEncoder;
use toprec::top::PreferenceTree;

fn outline(tree: &PreferenceTree, node: &str, depth: usize) {
    let n = tree.node(node).expect("node exists");
    let load = tree.leaf_loads().get(node).map(|l| format!("  [{l} items]")).unwrap_or_default();
    println!("{}{}{load}", "  ".repeat(depth), n.label);
    for c in &n.children {
        outline(tree, c, depth + 1);
    }
}

fn main() -> toprec::Result<()> {
    let cfg = RunConfig::default();
    let s = generate_synthetic_dataset(&SynthConfig::default(), 1)?;
    let d = s.dataset;
    let backend = pipeline::make_backend(&cfg, false)?;
    let enc = CachingEncoder::new(cfg.encoder());

    let raw = pipeline::build_tree(&cfg, &d, backend.as_ref(), &enc)?;
    println!("constructed {} nodes, {} leaves, depth {}", raw.len(), raw.leaves().len(), raw.depth());
    let assigned = pipeline::assign_items(&cfg, &d, &raw, backend.as_ref(), &enc)?;
    let rc = pipeline::refine_config(&cfg, &assigned);
    let tree = pipeline::refine_tree(&cfg, &d, &assigned, backend.as_ref(), &enc)?;
    tree.check_partition(d.items().iter().map(|i| i.id.as_str()))?;

    let loads = tree.leaf_loads();
    let (lo, hi) = (loads.values().min().unwrap(), loads.values().max().unwrap());
    println!("load bounds [{}, {}], observed [{lo}, {hi}]", rc.load_min, rc.load_max);
    println!("refine operations: {}", tree.ops_log().len());
    for op in tree.ops_log() {
        println!("  {op:?}");
    }
    println!();
    outline(&tree, tree.root(), 0);
    Ok(())
}
