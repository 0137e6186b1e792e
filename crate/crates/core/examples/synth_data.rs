//! Generates the exposure-biased synthetic corpus and shows how the bias
//! looks from the data: suppressed categories never reach the train split but
//! make up about a third of the test split.
//!
//! `cargo run --example synth_data -- [out_dir]` also writes the files.

use std::collections::{BTreeMap, BTreeSet};

use toprec::corpus::{self, generate_synthetic_dataset, SynthConfig};

fn main() -> toprec::Result<()> {
    let cfg = SynthConfig::default();
    let s = generate_synthetic_dataset(&cfg, 7)?;
    let d = &s.dataset;
    let cats = d.item_categories();

    let mut per_cat: BTreeMap<&str, usize> = BTreeMap::new();
    for it in d.items() {
        *per_cat.entry(it.category.as_str()).or_default() += 1;
    }
    println!("{} users, {} items, {} interactions", d.users().len(), d.items().len(), d.interactions().len());
    println!("items per category: {per_cat:?}");

    let (mut hidden_train, mut hidden_test, mut test) = (0, 0, 0);
    for (u, split) in d.splits() {
        let hidden: BTreeSet<&String> = s.truth.suppressed[u].iter().collect();
        hidden_train += split.train.iter().filter(|i| hidden.contains(&cats[*i])).count();
        hidden_test += split.test.iter().filter(|i| hidden.contains(&cats[*i])).count();
        test += split.test.len();
    }
    println!("suppressed items in train: {hidden_train}");
    println!("suppressed share of test: {:.3}", hidden_test as f64 / test as f64);

    let u = &d.users()[0];
    println!("\n{} prefers {:?}, hidden {:?}", u.id, s.truth.true_categories[&u.id], s.truth.suppressed[&u.id]);
    println!("bio: {}", u.attributes["bio"]);

    if let Some(out) = std::env::args().nth(1) {
        let out = std::path::PathBuf::from(out);
        std::fs::create_dir_all(&out).map_err(|e| toprec::Error::io(&out, e))?;
        corpus::write_dataset(&out, d)?;
        s.truth.save(&out.join("truth.json"))?;
        println!("\nwrote {}", out.display());
    }
    Ok(())
}
