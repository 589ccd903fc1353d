//! Dataset directory format.
//!
//! ```text
//! meta.json     {"num_nodes": N, "num_classes": C, "feature_dim": D}
//! edges.tsv     u<TAB>v per undirected edge, u < v, 0-indexed
//! features.tsv  N lines of D tab-separated decimals
//! labels.tsv    N lines, one class index
//! envs.tsv      N lines, one environment id (-1 = unknown)
//! splits.tsv    N lines, train | val | test
//! targets.tsv   optional, N lines of real regression targets
//! ```
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! write/read cycle reproduces every value exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Split};
use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// A graph plus the optional continuous target of the regression SCM.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub targets: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(graph: Graph) -> Self {
        Self { graph, targets: None }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn lines_of<T: ToString>(items: impl Iterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&item.to_string());
        out.push('\n');
    }
    out
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let g = &dataset.graph;
    let meta = DatasetMeta {
        num_nodes: g.num_nodes(),
        num_classes: g.num_classes(),
        feature_dim: g.feature_dim(),
    };
    let meta_json = serde_json::to_string(&meta).map_err(|e| DataError::Meta(e.to_string()))?;
    write(&dir.join("meta.json"), &(meta_json + "\n"))?;

    let mut edges = String::new();
    for &(u, v) in g.edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    write(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(i).iter().map(|v| v.to_string()).collect();
        feats.push_str(&row.join("\t"));
        feats.push('\n');
    }
    write(&dir.join("features.tsv"), &feats)?;
    write(&dir.join("labels.tsv"), &lines_of(g.labels().iter()))?;
    write(&dir.join("envs.tsv"), &lines_of(g.envs().iter()))?;
    write(&dir.join("splits.tsv"), &lines_of(g.split().iter()))?;
    if let Some(targets) = &dataset.targets {
        write(&dir.join("targets.tsv"), &lines_of(targets.iter()))?;
    }
    Ok(())
}

fn parse_lines<T: std::str::FromStr>(
    file: &str,
    text: &str,
    expected: usize,
) -> Result<Vec<T>, DataError>
where
    T::Err: std::fmt::Display,
{
    let values: Vec<T> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<T>().map_err(|e| DataError::Parse {
                file: file.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != expected {
        return Err(DataError::Parse {
            file: file.to_string(),
            line: values.len(),
            msg: format!("expected {expected} lines, found {}", values.len()),
        });
    }
    Ok(values)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta: DatasetMeta = serde_json::from_str(&read(&dir.join("meta.json"))?)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    let n = meta.num_nodes;

    let mut edges = Vec::new();
    for (ln, line) in read(&dir.join("edges.tsv"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse { file: "edges.tsv".into(), line: ln + 1, msg };
        let mut parts = line.split('\t');
        let mut next = || -> Result<usize, DataError> {
            parts
                .next()
                .ok_or_else(|| parse_err("expected two columns".into()))?
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(e.to_string()))
        };
        let (u, v) = (next()?, next()?);
        edges.push((u, v));
    }

    let mut feats = Vec::with_capacity(n * meta.feature_dim);
    let text = read(&dir.join("features.tsv"))?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(DataError::Parse {
            file: "features.tsv".into(),
            line: rows.len(),
            msg: format!("expected {n} rows"),
        });
    }
    for (ln, line) in rows.iter().enumerate() {
        let before = feats.len();
        for tok in line.split('\t') {
            feats.push(tok.trim().parse::<f64>().map_err(|e| DataError::Parse {
                file: "features.tsv".into(),
                line: ln + 1,
                msg: e.to_string(),
            })?);
        }
        if feats.len() - before != meta.feature_dim {
            return Err(DataError::Parse {
                file: "features.tsv".into(),
                line: ln + 1,
                msg: format!("expected {} columns", meta.feature_dim),
            });
        }
    }
    let features = Tensor::matrix(n, meta.feature_dim, feats)?;
    let labels = parse_lines::<usize>("labels.tsv", &read(&dir.join("labels.tsv"))?, n)?;
    let envs = parse_lines::<i64>("envs.tsv", &read(&dir.join("envs.tsv"))?, n)?;
    let split = parse_lines::<Split>("splits.tsv", &read(&dir.join("splits.tsv"))?, n)?;
    let targets_path = dir.join("targets.tsv");
    let targets = if targets_path.exists() {
        Some(parse_lines::<f64>("targets.tsv", &read(&targets_path)?, n)?)
    } else {
        None
    };
    let graph = Graph::new(n, meta.num_classes, edges, features, labels, envs, split)?;
    Ok(Dataset { graph, targets })
}
