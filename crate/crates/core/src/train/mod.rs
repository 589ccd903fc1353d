//! Training runs: one update per epoch under any objective, a record per
//! epoch, and best-validation model selection.

mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{ConfigError, TrainError};
use crate::models::{Head, MaskMode};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};

pub use run::{objective_gradcheck, train, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Scalar linear GNN of the theory checks, trained on regression targets.
    TheoryLinear,
    Gcn,
    Gat,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TheoryLinear => "theory_linear",
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theory_linear" | "theory" => Ok(ModelKind::TheoryLinear),
            "gcn" => Ok(ModelKind::Gcn),
            "gat" => Ok(ModelKind::Gat),
            other => Err(format!("unknown model {other:?} (expected theory_linear|gcn|gat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub lr: f64,
    pub mask_lr: f64,
    pub hidden: usize,
    pub layers: usize,
    /// 2 splits the input features and the representation into an
    /// invariant and a spurious half.
    pub towers: usize,
    pub head: Head,
    pub bias: bool,
    pub mask_mode: MaskMode,
    /// Nodes sampled per step; 0 or ≥ N trains on the whole graph.
    pub subgraph: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Gcn,
            objective: ObjectiveConfig::default(),
            epochs: 200,
            lr: 1e-2,
            mask_lr: 1e-3,
            hidden: 64,
            layers: 3,
            towers: 1,
            head: Head::Linear,
            bias: true,
            mask_mode: MaskMode::Sigmoid,
            subgraph: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Setup of the four-class toy experiments: one GCN layer with separate
    /// towers over the invariant and spurious feature halves, summed into
    /// the logits.
    pub fn toy(kind: ObjectiveKind, seed: u64) -> Self {
        Self {
            objective: ObjectiveConfig { kind, ..ObjectiveConfig::default() },
            hidden: 8,
            layers: 1,
            towers: 2,
            head: Head::TowerSum,
            seed,
            ..Self::default()
        }
    }

    /// Reads a run file. `preset = toy` starts from [`RunConfig::toy`],
    /// anything else from the defaults; individual keys then override.
    /// Unknown keys are an error listing them all.
    ///
    /// Keys: preset, model, objective, lambda, hops, epochs, lr, mask_lr,
    /// pair_budget, subgraph, seed, hidden, layers, towers, head, bias,
    /// mask_mode, warmup, no_rdiff, no_inv_rsame, no_inv_d, no_mask,
    /// rsame_numerator.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        fn parsed<T: FromStr<Err = String>>(kv: &KvConfig, key: &str) -> Result<Option<T>, ConfigError> {
            kv.get::<String>(key)?
                .map(|s| s.parse().map_err(|msg| ConfigError::Value { key: key.into(), msg }))
                .transpose()
        }
        let kind = parsed::<ObjectiveKind>(kv, "objective")?.unwrap_or(ObjectiveKind::Erm);
        let seed = kv.get_or("seed", 0u64)?;
        let preset: String = kv.get_or("preset", "default".to_string())?;
        let mut c = match preset.as_str() {
            "toy" => Self::toy(kind, seed),
            "default" => Self { seed, objective: ObjectiveConfig { kind, ..ObjectiveConfig::default() }, ..Self::default() },
            other => {
                return Err(ConfigError::Value { key: "preset".into(), msg: format!("{other:?} (expected default|toy)") })
            }
        };
        if let Some(m) = parsed(kv, "model")? {
            c.model = m;
        }
        if let Some(m) = parsed(kv, "mask_mode")? {
            c.mask_mode = m;
        }
        if let Some(h) = kv.get::<String>("head")? {
            c.head = match h.as_str() {
                "linear" => Head::Linear,
                "tower_sum" => Head::TowerSum,
                other => {
                    return Err(ConfigError::Value { key: "head".into(), msg: format!("{other:?} (expected linear|tower_sum)") })
                }
            };
        }
        let o = &mut c.objective;
        o.lambda = kv.get_or("lambda", o.lambda)?;
        o.hops = kv.get_or("hops", o.hops)?;
        o.pair_budget = kv.get_or("pair_budget", o.pair_budget)?;
        o.warmup_epochs = kv.get_or("warmup", o.warmup_epochs)?;
        let a = &mut o.ablations;
        a.use_r_diff = !kv.get_or("no_rdiff", !a.use_r_diff)?;
        a.use_inv_r_same = !kv.get_or("no_inv_rsame", !a.use_inv_r_same)?;
        a.use_inv_d = !kv.get_or("no_inv_d", !a.use_inv_d)?;
        a.use_mask = !kv.get_or("no_mask", !a.use_mask)?;
        a.r_same_in_numerator = kv.get_or("rsame_numerator", a.r_same_in_numerator)?;
        c.epochs = kv.get_or("epochs", c.epochs)?;
        c.lr = kv.get_or("lr", c.lr)?;
        c.mask_lr = kv.get_or("mask_lr", c.mask_lr)?;
        c.subgraph = kv.get_or("subgraph", c.subgraph)?;
        c.hidden = kv.get_or("hidden", c.hidden)?;
        c.layers = kv.get_or("layers", c.layers)?;
        c.towers = kv.get_or("towers", c.towers)?;
        c.bias = kv.get_or("bias", c.bias)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let o = &self.objective;
        if !(o.lambda >= 0.0 && o.lambda.is_finite()) {
            return bad(format!("lambda must be finite and ≥ 0, got {}", o.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.mask_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if o.hops == 0 {
            return bad("hops must be ≥ 1".into());
        }
        if o.pair_budget == 0 {
            return bad("pair budget must be ≥ 1".into());
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden width must be ≥ 1".into());
        }
        Ok(())
    }

    /// The edge mask only exists to serve the CIA-LRA penalty, so it is
    /// off at λ = 0 as well.
    fn uses_mask(&self) -> bool {
        self.model != ModelKind::TheoryLinear
            && self.objective.lambda > 0.0
            && self.objective.kind == ObjectiveKind::CiaLra
            && self.objective.ablations.use_mask
    }
}

/// One line of the training log. Record `e` describes the model after `e`
/// updates: losses and metrics come from the same forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    pub erm_loss: f64,
    /// Exactly 0 while the penalty is gated off.
    pub penalty: f64,
    pub total_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spurious_norm: Option<f64>,
    pub wall_ms: u64,
}

impl TrainingRecord {
    /// Higher is better: accuracy, or negated MSE for regression.
    fn val_score(&self) -> Option<f64> {
        self.val_acc.or(self.val_mse.map(|m| -m))
    }

    fn test_value(&self) -> Option<f64> {
        self.test_acc.or(self.test_mse)
    }
}

/// Run outcome. Contains no timing, so identical inputs give identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelKind,
    pub objective: ObjectiveKind,
    pub lambda: f64,
    pub hops: usize,
    pub ablations: String,
    pub seed: u64,
    pub epochs: usize,
    /// `accuracy` or `mse`.
    pub metric: String,
    /// Earliest epoch with the best validation score; `None` without a
    /// validation split.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub test_at_best: Option<f64>,
    pub final_train: Option<f64>,
    pub final_val: Option<f64>,
    pub final_test: Option<f64>,
    pub final_invariant_variance: Option<f64>,
    pub final_spurious_norm: Option<f64>,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}
