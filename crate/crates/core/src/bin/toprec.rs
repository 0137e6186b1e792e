//! Command-line entry point. Each subcommand wraps one stage of
//! `toprec::pipeline`; configuration keys can be overridden with
//! `--<dotted.key> <value>` anywhere on the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use toprec::corpus::{self, SynthConfig};
use toprec::pipeline::{self, parse_override, RunConfig};
use toprec::{Error, Result};

#[derive(Parser)]
#[command(name = "toprec", version, about = "Diversified recommendation through a tree of preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat dotted-key JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Accept artifacts produced under a different configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage end to end.
    Pipeline(Common),
    /// Generate the synthetic exposure-biased benchmark.
    SynthData {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 12)]
        categories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load, filter and split the dataset into `<out_dir>/data`.
    Ingest(Common),
    /// Build the preference tree from a diverse item sample.
    BuildTop(Common),
    /// Assign every item to a leaf.
    AssignItems(Common),
    /// Rebalance leaf loads.
    RefineTop(Common),
    /// Select preference leaves for every user.
    Reason(Common),
    /// Generate synthetic interactions for every user (static, no influence loop).
    Augment(Common),
    /// Train the backbone with the influence-guided augmentation loop.
    Train(Common),
    /// Evaluate the trained model and write the report.
    Evaluate(Common),
    /// Rerank the trained model's lists with MMR or DPP and evaluate.
    Rerank(Common),
}

type Overrides = Vec<(String, Value)>;

/// Splits `--a.b value` / `--a.b=value` pairs out of argv. Dotted flags are
/// config overrides; everything else goes to clap.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Overrides), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), parse_override(v))),
                None => {
                    let v = it.next().ok_or_else(|| format!("missing value for --{k}"))?;
                    overrides.push((k.to_string(), parse_override(&v)));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(c: &Common, mut overrides: Vec<(String, Value)>) -> Result<RunConfig> {
    if let Some(d) = &c.out_dir {
        overrides.push(("out_dir".into(), Value::String(d.display().to_string())));
    }
    if let Some(s) = c.seed {
        overrides.push(("seed".into(), s.into()));
    }
    if c.force {
        overrides.push(("force".into(), true.into()));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn synth_data(users: usize, items: usize, categories: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = SynthConfig {
        num_users: users,
        num_items: items,
        num_categories: categories,
        ..SynthConfig::default()
    };
    let s = corpus::generate_synthetic_dataset(&cfg, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    corpus::write_dataset(out, &s.dataset)?;
    s.truth.save(&out.join("truth.json"))?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        s.dataset.users().len(),
        s.dataset.items().len(),
        s.dataset.interactions().len(),
        out.display()
    );
    Ok(())
}

fn print_eval(e: &toprec::evalkit::EvalResult) {
    println!("{}", serde_json::to_string_pretty(&e.to_json()).expect("eval serializes"));
}

fn run(cmd: Command, overrides: Vec<(String, Value)>) -> Result<()> {
    let backend = |cfg: &RunConfig| pipeline::make_backend(cfg, true);
    match cmd {
        Command::SynthData {
            users,
            items,
            categories,
            seed,
            out,
        } => {
            if !overrides.is_empty() {
                return Err(Error::Config("synth-data takes no config overrides".into()));
            }
            synth_data(users, items, categories, seed, &out)
        }
        Command::Pipeline(c) => {
            let cfg = load_config(&c, overrides)?;
            print_eval(&pipeline::cmd_pipeline(&cfg)?);
            Ok(())
        }
        Command::Ingest(c) => pipeline::cmd_ingest(&load_config(&c, overrides)?).map(drop),
        Command::BuildTop(c) => {
            let cfg = load_config(&c, overrides)?;
            pipeline::cmd_build_top(&cfg, backend(&cfg)?.as_ref()).map(drop)
        }
        Command::AssignItems(c) => {
            let cfg = load_config(&c, overrides)?;
            pipeline::cmd_assign_items(&cfg, backend(&cfg)?.as_ref()).map(drop)
        }
        Command::RefineTop(c) => {
            let cfg = load_config(&c, overrides)?;
            pipeline::cmd_refine_top(&cfg, backend(&cfg)?.as_ref()).map(drop)
        }
        Command::Reason(c) => {
            let cfg = load_config(&c, overrides)?;
            pipeline::cmd_reason(&cfg, backend(&cfg)?.as_ref()).map(drop)
        }
        Command::Augment(c) => pipeline::cmd_augment(&load_config(&c, overrides)?).map(drop),
        Command::Train(c) => pipeline::cmd_train(&load_config(&c, overrides)?).map(drop),
        Command::Evaluate(c) => {
            print_eval(&pipeline::cmd_evaluate(&load_config(&c, overrides)?)?);
            Ok(())
        }
        Command::Rerank(c) => {
            print_eval(&pipeline::cmd_rerank(&load_config(&c, overrides)?)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(m) => {
            eprintln!("error: {m}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let t = s.to_string();
                if !msg.contains(&t) {
                    msg.push_str(": ");
                    msg.push_str(&t);
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
