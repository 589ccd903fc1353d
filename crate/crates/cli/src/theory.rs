use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use goodlab::config::KvConfig;
use goodlab::graph::{read_dataset, EnvId};
use goodlab::metrics::bound_terms;
use goodlab::synth::CsbmSample;
use goodlab::theory::{run_claims, OracleScenario};
use serde::Deserialize;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Scenario file; `shift`, `depth`, `k` and `s` are required in it.
    /// Without one the default scenario runs.
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let mut scenario = match &a.scenario {
        Some(p) => {
            let kv = KvConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            let s = OracleScenario::from_kv(&kv)?;
            kv.finish()?;
            s
        }
        None => OracleScenario::default(),
    };
    if let Some(s) = crate::seed_override(a.seed)? {
        scenario.seed = s;
    }
    let report = run_claims(&scenario)?;
    for c in &report.claims {
        log::info!("{}: {}", c.name, if c.pass { "pass" } else { "FAIL" });
    }
    crate::emit(a.out.as_ref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    /// Dataset written by `generate csbm` (needs its means.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated training environments; default all but the test one.
    #[arg(long, value_delimiter = ',')]
    train_envs: Vec<EnvId>,
    /// Default: the largest environment id.
    #[arg(long)]
    test_env: Option<EnvId>,
    /// Feature noise variance; default the generator's.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Means {
    class_means: Vec<Vec<f64>>,
    env_means: Vec<Vec<Vec<f64>>>,
    noise_variance: f64,
}

pub fn bound(a: BoundArgs) -> Result<()> {
    let dataset = read_dataset(&a.dataset).with_context(|| format!("reading dataset {}", a.dataset.display()))?;
    let path = a.dataset.join("means.json");
    let means: Means = serde_json::from_str(
        &fs::read_to_string(&path).with_context(|| format!("reading {} (generate csbm writes it)", path.display()))?,
    )?;
    let present: BTreeSet<EnvId> = dataset.graph.envs().iter().copied().filter(|&e| e >= 0).collect();
    let Some(&last) = present.iter().next_back() else { bail!("dataset has no environment ids") };
    let test_env = a.test_env.unwrap_or(last);
    let train_envs: Vec<EnvId> =
        if a.train_envs.is_empty() { present.iter().copied().filter(|&e| e != test_env).collect() } else { a.train_envs };
    if train_envs.contains(&test_env) {
        bail!("environment {test_env} is both a training and the test environment");
    }
    let sample = CsbmSample { dataset, class_means: means.class_means, env_means: means.env_means };
    let report = bound_terms(&sample, &train_envs, test_env, a.sigma2.unwrap_or(means.noise_variance))?;
    crate::emit(a.out.as_ref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}
