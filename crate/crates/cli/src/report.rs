//! Plot data. A run directory gives per-epoch curves; a sweep directory
//! gives a hops × lambda table of mean test accuracy.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use goodlab::train::TrainingRecord;

#[derive(Args, Debug)]
pub struct ReportArgs {
    dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Columns: epoch, erm_loss, penalty, total_loss, train_acc, val_acc,
/// test_acc, invariant_variance, spurious_norm. Missing values are empty.
pub fn curves(jsonl: &str) -> Result<String> {
    let mut out = String::from(
        "epoch\term_loss\tpenalty\ttotal_loss\ttrain_acc\tval_acc\ttest_acc\tinvariant_variance\tspurious_norm\n",
    );
    for (n, line) in jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: TrainingRecord = serde_json::from_str(line).with_context(|| format!("records.jsonl line {}", n + 1))?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epoch,
            r.erm_loss,
            r.penalty,
            r.total_loss,
            cell(r.train_acc.or(r.train_mse)),
            cell(r.val_acc.or(r.val_mse)),
            cell(r.test_acc.or(r.test_mse)),
            cell(r.invariant_variance),
            cell(r.spurious_norm)
        ));
    }
    Ok(out)
}

/// First row `hops` then the lambdas; one row per hop count.
pub fn heatmap(sweep_tsv: &str) -> Result<String> {
    let mut lines = sweep_tsv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("sweep.tsv lacks {name}"));
    let (li, hi, ti) = (col("lambda")?, col("hops")?, col("test_mean")?);
    let mut lambdas: Vec<String> = Vec::new();
    let mut table: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            bail!("malformed sweep.tsv row {line:?}");
        }
        if !lambdas.iter().any(|l| l == f[li]) {
            lambdas.push(f[li].to_string());
        }
        table.entry(f[hi].parse()?).or_default().insert(f[li].to_string(), f[ti].to_string());
    }
    let mut out = format!("hops\t{}\n", lambdas.join("\t"));
    for (h, row) in table {
        let vals: Vec<&str> = lambdas.iter().map(|l| row.get(l).map_or("", String::as_str)).collect();
        out.push_str(&format!("{h}\t{}\n", vals.join("\t")));
    }
    Ok(out)
}

pub fn run(a: ReportArgs) -> Result<()> {
    let records = a.dir.join("records.jsonl");
    let sweep = a.dir.join("sweep.tsv");
    let text = if records.exists() {
        curves(&fs::read_to_string(&records)?)?
    } else if sweep.exists() {
        heatmap(&fs::read_to_string(&sweep)?)?
    } else {
        bail!("{} holds neither records.jsonl nor sweep.tsv", a.dir.display());
    };
    crate::emit(a.out.as_ref(), &text)
}
