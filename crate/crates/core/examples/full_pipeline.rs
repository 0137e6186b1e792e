//! Runs every stage with artifacts on disk, the same as `toprec pipeline`.
//! Set LLM_ENDPOINT (and LLM_MODEL, LLM_API_KEY) to use a remote model;
//! otherwise the mock backend answers.
//!
//! `cargo run --example full_pipeline -- [out_dir]`

use toprec::pipeline::{self, RunConfig};

fn main() -> toprec::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let cfg = RunConfig::load(None, &[("out_dir".into(), out.clone().into())])?;
    let eval = pipeline::cmd_pipeline(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&eval.to_json()).expect("serializes"));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .map_err(|e| toprec::Error::io(&out, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    println!("artifacts in {out}: {}", names.join(", "));
    Ok(())
}
