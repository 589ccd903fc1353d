use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use goodlab::config::KvConfig;
use goodlab::graph::{write_dataset, Dataset};
use goodlab::synth::{gen_csbm, gen_scm, gen_toy, CsbmConfig, ScmConfig, ToyConfig};
use serde_json::json;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Toy,
    Scm,
    Csbm,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    kind: Kind,
    /// Generator config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra config file merged after `--config`, e.g. CSBM `class_means`.
    #[arg(long)]
    means: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Causal depth of the SCM.
    #[arg(long)]
    k: Option<usize>,
    /// Number of environments (SCM, CSBM).
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn read(p: &PathBuf) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

pub fn run(a: GenerateArgs) -> Result<()> {
    let mut text = String::new();
    for p in [&a.config, &a.means].into_iter().flatten() {
        text.push_str(&read(p)?);
        text.push('\n');
    }
    let mut kv = KvConfig::parse(&text)?;
    for s in &a.sets {
        let Some((k, v)) = s.split_once('=') else { bail!("--set expects KEY=VALUE, got {s:?}") };
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = &a.shift {
        kv.set("shift", s);
    }
    if let Some(k) = a.k {
        kv.set("causal_depth", k);
    }
    if let Some(e) = a.envs {
        kv.set("num_envs", e);
    }
    if let Some(s) = crate::seed_override(a.seed)? {
        kv.set("seed", s);
    }

    let (dataset, config, extra): (Dataset, serde_json::Value, Option<serde_json::Value>) = match a.kind {
        Kind::Toy => {
            let c = ToyConfig::from_kv(&kv)?;
            kv.finish()?;
            (gen_toy(&c), serde_json::to_value(&c)?, None)
        }
        Kind::Scm => {
            let c = ScmConfig::from_kv(&kv)?;
            kv.finish()?;
            (gen_scm(&c)?, serde_json::to_value(&c)?, None)
        }
        Kind::Csbm => {
            let c = CsbmConfig::from_kv(&kv)?;
            kv.finish()?;
            let sample = gen_csbm(&c)?;
            let means = json!({
                "class_means": sample.class_means,
                "env_means": sample.env_means,
                "noise_variance": c.noise_variance,
            });
            (sample.dataset, serde_json::to_value(&c)?, Some(means))
        }
    };
    write_dataset(&a.out, &dataset)?;
    let kind = format!("{:?}", a.kind).to_lowercase();
    let resolved = json!({ "kind": kind, "config": config });
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    if let Some(m) = extra {
        fs::write(a.out.join("means.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    }
    log::info!("wrote {} nodes to {}", dataset.graph.num_nodes(), a.out.display());
    Ok(())
}
