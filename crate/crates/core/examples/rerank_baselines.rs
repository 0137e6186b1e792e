//! MMR and DPP on a small hand-made candidate list, then the random
//! augmentation baseline on the synthetic corpus.

use toprec::corpus::{generate_synthetic_dataset, SynthConfig};
use toprec::rerank::{build_dpp_kernel, dpp_greedy_map, mmr_rerank, random_augment, Candidate};

fn main() -> toprec::Result<()> {
    // two near-duplicate clusters plus one outlier
    let items = [
        ("jazz-a", 0.95, [1.0, 0.0, 0.0]),
        ("jazz-b", 0.93, [0.98, 0.05, 0.0]),
        ("jazz-c", 0.90, [0.97, 0.0, 0.1]),
        ("hiking-a", 0.70, [0.0, 1.0, 0.0]),
        ("hiking-b", 0.68, [0.05, 0.99, 0.0]),
        ("pottery", 0.40, [0.0, 0.0, 1.0]),
    ];
    let cands: Vec<Candidate> = items.iter().map(|(id, rel, _)| Candidate { item: id.to_string(), rel: *rel }).collect();
    let emb: Vec<Vec<f32>> = items.iter().map(|(_, _, e)| e.to_vec()).collect();

    for lambda in [1.0, 0.7, 0.3] {
        println!("MMR λ={lambda:.1}: {:?}", mmr_rerank(&cands, &emb, 3, lambda)?);
    }
    let rel: Vec<f64> = cands.iter().map(|c| c.rel).collect();
    for alpha in [0.0, 3.0, 10.0] {
        let kernel = build_dpp_kernel(&rel, &emb, alpha)?;
        let sel = dpp_greedy_map(&kernel, 3)?;
        let names: Vec<&str> = sel.indices.iter().map(|&i| cands[i].item.as_str()).collect();
        println!("DPP α={alpha:>4.1}: {names:?} gains {:?}", sel.gains.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>());
    }

    let s = generate_synthetic_dataset(&SynthConfig::default(), 5)?;
    let rows = random_augment(&s.dataset, 3, 11);
    println!("\nrandom baseline: {} synthetic interactions, first {:?}", rows.len(), &rows[..3]);
    Ok(())
}
