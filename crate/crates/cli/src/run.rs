use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use goodlab::config::KvConfig;
use goodlab::graph::{read_dataset, Dataset};
use goodlab::train::{train, RunConfig, RunSummary};
use rayon::prelude::*;

use crate::RunFlags;

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Grid file: list-valued `lambda`, `hops` and `seeds`, any other run
    /// keys as single values.
    grid: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: RunFlags,
}

/// Trains `cfg` into `dir`. Records are flushed line by line, so a
/// diverged run leaves every finite record on disk.
pub fn write_run(dir: &Path, dataset: &Dataset, cfg: &RunConfig) -> Result<RunSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("run_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let mut records = BufWriter::new(File::create(dir.join("records.jsonl"))?);
    let mut io_err = None;
    let outcome = train(dataset, cfg, |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).expect("record serializes");
            io_err = writeln!(records, "{line}").and_then(|_| records.flush()).err();
        }
    });
    if let Some(e) = io_err {
        return Err(e).context("writing records.jsonl");
    }
    let outcome = outcome?;
    fs::write(dir.join("summary.json"), outcome.summary.to_json())?;
    fs::write(dir.join("checkpoint.json"), outcome.checkpoint.to_json())?;
    Ok(outcome.summary)
}

fn load(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut kv = KvConfig::parse(&a.flags.file_text()?)?;
    a.flags.apply(&mut kv)?;
    let cfg = RunConfig::from_kv(&kv)?;
    cfg.validate()?;
    let dataset = load(&a.dataset)?;
    let summary = write_run(&a.out, &dataset, &cfg)?;
    log::info!("best epoch {:?}, test {:?}", summary.best_epoch, summary.test_at_best);
    Ok(())
}

/// Largest grid a sweep accepts.
pub const MAX_CELLS: usize = 100;

struct Job {
    lambda: f64,
    hops: usize,
    seed: u64,
    /// An invalid cell fails on its own, like a run that diverges.
    cfg: Result<RunConfig, String>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), |v| v.to_string())
}

pub fn sweep_cmd(a: SweepArgs) -> Result<()> {
    if a.flags.config.is_some() {
        bail!("sweep takes its base run keys from the grid file; --config is not used");
    }
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid = KvConfig::parse(&text)?;
    let lambdas: Option<Vec<f64>> = grid.get_list("lambda")?;
    let hops: Option<Vec<usize>> = grid.get_list("hops")?;
    let seeds: Option<Vec<u64>> = grid.get_list("seeds")?;

    // Base file: the grid minus its list keys.
    let base: String = text
        .lines()
        .filter(|l| {
            let key = l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
            !matches!(key, "lambda" | "hops" | "seeds")
        })
        .map(|l| format!("{l}\n"))
        .collect();
    let resolve = |lambda: Option<f64>, t: Option<usize>, seed: Option<u64>| -> Result<RunConfig> {
        let mut kv = KvConfig::parse(&base)?;
        a.flags.apply(&mut kv)?;
        if let Some(l) = lambda {
            kv.set("lambda", l);
        }
        if let Some(t) = t {
            kv.set("hops", t);
        }
        if let Some(s) = seed {
            kv.set("seed", s);
        }
        let cfg = RunConfig::from_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    };

    let lambda_axis: Vec<Option<f64>> = lambdas.map_or(vec![None], |v| v.into_iter().map(Some).collect());
    let hop_axis: Vec<Option<usize>> = hops.map_or(vec![None], |v| v.into_iter().map(Some).collect());
    let seed_axis: Vec<Option<u64>> = seeds.map_or(vec![None], |v| v.into_iter().map(Some).collect());
    let cells = lambda_axis.len() * hop_axis.len();
    if cells == 0 || seed_axis.is_empty() {
        bail!("empty grid");
    }
    if cells > MAX_CELLS {
        bail!("grid has {cells} cells, the limit is {MAX_CELLS}");
    }
    let base_cfg = resolve(None, None, None)?;
    let mut jobs = Vec::new();
    for &l in &lambda_axis {
        for &t in &hop_axis {
            for &s in &seed_axis {
                jobs.push(Job {
                    lambda: l.unwrap_or(base_cfg.objective.lambda),
                    hops: t.unwrap_or(base_cfg.objective.hops),
                    seed: s.unwrap_or(base_cfg.seed),
                    cfg: resolve(l, t, s).map_err(|e| format!("{e:#}")),
                });
            }
        }
    }

    let dataset = load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build()?;
    let results: Vec<Result<RunSummary, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                let dir = a.out.join("runs").join(format!("lambda={:?}_hops={}_seed={}", j.lambda, j.hops, j.seed));
                let cfg = j.cfg.as_ref().map_err(Clone::clone)?;
                write_run(&dir, &dataset, cfg).map_err(|e| format!("{e:#}"))
            })
            .collect()
    });

    let mut summaries = String::new();
    let mut failures = String::from("lambda\thops\tseed\terror\n");
    let mut tsv = String::from("lambda\thops\truns\tfailed\ttest_mean\ttest_std\tfinal_mean\tfinal_std\n");
    let per_cell = seed_axis.len();
    for (c, chunk) in jobs.chunks(per_cell).zip(results.chunks(per_cell)) {
        let (mut best, mut last, mut failed) = (Vec::new(), Vec::new(), 0);
        for (j, r) in c.iter().zip(chunk) {
            match r {
                Ok(s) => {
                    summaries.push_str(&serde_json::to_string(s)?);
                    summaries.push('\n');
                    if let Some(v) = s.test_at_best.or(s.final_test) {
                        best.push(v);
                    }
                    if let Some(v) = s.final_test {
                        last.push(v);
                    }
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("run lambda={:?} hops={} seed={} failed: {e}", j.lambda, j.hops, j.seed);
                    failures.push_str(&format!("{:?}\t{}\t{}\t{}\n", j.lambda, j.hops, j.seed, e.replace(['\t', '\n'], " ")));
                }
            }
        }
        let stat = |xs: &[f64]| if xs.is_empty() { (None, None) } else { let (m, s) = mean_std(xs); (Some(m), Some(s)) };
        let ((bm, bs), (lm, ls)) = (stat(&best), stat(&last));
        tsv.push_str(&format!(
            "{:?}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c[0].lambda,
            c[0].hops,
            c.len() - failed,
            failed,
            fmt_opt(bm),
            fmt_opt(bs),
            fmt_opt(lm),
            fmt_opt(ls)
        ));
    }
    fs::write(a.out.join("sweep.tsv"), tsv)?;
    fs::write(a.out.join("summaries.jsonl"), summaries)?;
    fs::write(a.out.join("failures.tsv"), failures)?;
    Ok(())
}
