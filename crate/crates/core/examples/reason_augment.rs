//! Picks preference leaves for a few users and scores the candidate items
//! under them, showing how λ trades text relevance against unexplored leaves.

use toprec::augment::{score_candidates, AugmentConfig};
use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::pipeline::{self, RunConfig};
use toprec::reasoner::leaf_frequencies;
use toprec::textenc::CachingEncoder;

fn main() -> toprec::Result<()> {
    let cfg = RunConfig::default();
    let s = generate_synthetic_dataset(&SynthConfig::default(), 2)?;
    let backend = pipeline::make_backend(&cfg, false)?;
    let p = pipeline::prepare(&cfg, s.dataset, Some(s.truth), backend.as_ref())?;
    let enc = CachingEncoder::new(cfg.encoder());
    let d = &p.dataset;
    let truth = p.truth.as_ref().expect("synthetic truth");
    let cats = d.item_categories();

    for sel in p.selections.iter().take(3) {
        let freq = leaf_frequencies(&sel.user, d, &p.tree)?;
        println!("user {} (hidden {:?})", sel.user, truth.suppressed[&sel.user]);
        for leaf in &sel.leaves {
            let label = &p.tree.node(leaf).expect("leaf").label;
            println!("  leaf {label:<32} history {}", freq.get(leaf));
        }
        for lambda in [0.0, 0.5, 1.0] {
            let ac = AugmentConfig { lambda, ..cfg.augment };
            let top = score_candidates(sel, &ac, d, &p.tree, &freq, &enc)?;
            let picks: Vec<String> = top
                .iter()
                .take(ac.per_user)
                .map(|c| format!("{}({:.2})", cats[&c.item], c.score))
                .collect();
            println!("  λ={lambda:.1}: {}", picks.join(" "));
        }
        println!();
    }
    Ok(())
}
