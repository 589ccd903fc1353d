//! `goodlab` command-line runner.

mod generate;
mod report;
mod run;
mod theory;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use goodlab::config::KvConfig;

#[derive(Parser)]
#[command(name = "goodlab", version, about = "Node-level OOD laboratory: generate, train, verify, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(generate::GenerateArgs),
    /// Train one model and write records.jsonl, summary.json and checkpoint.json.
    Train(run::TrainArgs),
    /// Run the theory claims on a scenario file and print a JSON report.
    VerifyTheory(theory::VerifyArgs),
    /// Bound terms between training and test environments of a CSBM dataset.
    Bound(theory::BoundArgs),
    /// Train over a lambda × hops grid (seeds aggregated) and write sweep.tsv.
    Sweep(run::SweepArgs),
    /// Turn a run or sweep directory into a plotting TSV.
    Report(report::ReportArgs),
}

/// Training flags shared by `train` and `sweep`. Each one overrides the
/// same-named key of the run file.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    /// Run file with `key = value` lines (see README for the keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `default` or `toy`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_lr: Option<f64>,
    #[arg(long)]
    pub pair_budget: Option<usize>,
    #[arg(long)]
    pub subgraph: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub no_rdiff: bool,
    #[arg(long)]
    pub no_inv_rsame: bool,
    #[arg(long)]
    pub no_inv_d: bool,
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long)]
    pub rsame_numerator: bool,
}

impl RunFlags {
    /// Run file text, or empty without `--config`.
    pub fn file_text(&self) -> Result<String> {
        match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(String::new()),
        }
    }

    pub fn apply(&self, kv: &mut KvConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field { kv.set($key, v); })*
            };
        }
        set!(preset => "preset", model => "model", objective => "objective", lambda => "lambda", hops => "hops",
             epochs => "epochs", lr => "lr", mask_lr => "mask_lr", pair_budget => "pair_budget",
             subgraph => "subgraph", hidden => "hidden", layers => "layers", warmup => "warmup");
        for (on, key) in [
            (self.no_rdiff, "no_rdiff"),
            (self.no_inv_rsame, "no_inv_rsame"),
            (self.no_inv_d, "no_inv_d"),
            (self.no_mask, "no_mask"),
            (self.rsame_numerator, "rsame_numerator"),
        ] {
            if on {
                kv.set(key, true);
            }
        }
        if let Some(s) = seed_override(self.seed)? {
            kv.set("seed", s);
        }
        Ok(())
    }
}

/// `GOODLAB_SEED` when set, else the flag.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var("GOODLAB_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("GOODLAB_SEED={s:?} is not an integer"))?)),
        Err(_) => Ok(flag),
    }
}

/// Writes `text` to `out`, or to stdout without one.
pub fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => run::train_cmd(a),
        Command::VerifyTheory(a) => theory::verify(a),
        Command::Bound(a) => theory::bound(a),
        Command::Sweep(a) => run::sweep_cmd(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
