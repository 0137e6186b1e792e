//! Compares plain training, random augmentation, tree-guided augmentation
//! and the two rerankers on recall vs category entropy.

use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::evalkit::tradeoff_report;
use toprec::pipeline::{self, AugmentMode, RunConfig};
use toprec::textenc::CachingEncoder;

fn main() -> toprec::Result<()> {
    let k = 20;
    let mut base = RunConfig::default();
    base.eval.ks = vec![k];
    let s = generate_synthetic_dataset(&SynthConfig::default(), 6)?;
    let backend = pipeline::make_backend(&base, false)?;
    let p = pipeline::prepare(&base, s.dataset, Some(s.truth), backend.as_ref())?;

    let mut results = Vec::new();
    let mut plain = None;
    for (label, mode) in [("plain", AugmentMode::None), ("random", AugmentMode::Random), ("tree", AugmentMode::Toprec)] {
        let mut cfg = base.clone();
        cfg.influence.mode = mode;
        let (out, eval) = pipeline::train_and_evaluate(&cfg, &p)?;
        println!("{label}: {} synthetic interactions", out.synthetic.len());
        if mode == AugmentMode::None {
            plain = Some(out);
        }
        results.push((label.to_string(), eval));
    }
    let plain = plain.expect("plain run");
    let enc = CachingEncoder::new(base.encoder());
    for method in ["mmr", "dpp"] {
        let mut cfg = base.clone();
        cfg.rerank.method = method.into();
        cfg.rerank.k = k;
        let eval = pipeline::rerank_eval(&cfg, &plain.params, &plain.dataset, p.truth.as_ref(), &enc)?;
        results.push((method.to_string(), eval));
    }
    println!("\n{}", tradeoff_report(&results, k).to_table());
    for (label, r) in &results {
        if let Some(sup) = &r.suppressed_recall {
            println!("{label:<8} suppressed-category recall@{k}: {:.4}", sup[&k]);
        }
    }
    Ok(())
}
