//! Runs the influence-guided augmentation loop and prints each round's
//! group influences and the users that received synthetic interactions.

use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::pipeline::{self, RunConfig};

fn main() -> toprec::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.influence.budget = 0.3;
    cfg.influence.per_round = Some(20);
    let s = generate_synthetic_dataset(&SynthConfig::default(), 4)?;
    let backend = pipeline::make_backend(&cfg, false)?;
    let p = pipeline::prepare(&cfg, s.dataset, Some(s.truth), backend.as_ref())?;
    let (out, eval) = pipeline::train_and_evaluate(&cfg, &p)?;

    for r in &out.audit {
        let mut groups: Vec<(usize, f64)> = r.group_influence.iter().map(|(g, v)| (*g, *v)).collect();
        groups.sort_by(|a, b| b.1.total_cmp(&a.1));
        let head: Vec<String> = groups.iter().take(4).map(|(g, v)| format!("g{g}:{v:+.3e}")).collect();
        println!(
            "round {} at epoch {} (window {:?}): {} users, {} interactions; top groups {}",
            r.round,
            r.epoch,
            r.window,
            r.selected_users.len(),
            r.added_interactions,
            head.join(" ")
        );
    }
    println!("\nsynthetic interactions: {}", out.synthetic.len());
    println!("best epoch {} of {}", out.history.best_epoch, out.history.epochs.len());
    println!("{}", serde_json::to_string_pretty(&eval.to_json()).expect("serializes"));
    Ok(())
}
