use std::borrow::Cow;
use std::time::Instant;

use rand::seq::index;

use super::{ModelKind, RunConfig, RunSummary, TrainingRecord};
use crate::autodiff::{Adam, Gradients, Tape, Var};
use crate::error::{TensorError, TrainError};
use crate::graph::{
    bounded_shortest_paths_among, build_normalized_weighted, neighborhood_label_distribution, Dataset, Graph,
    HopDistanceTable, NeighborhoodProfile, Split,
};
use crate::metrics::{invariant_variance, ood_accuracy, spurious_norm};
use crate::models::checkpoint::{Checkpoint, NamedTensor};
use crate::models::{
    edge_mask_apply, mpnn_forward, theory_gnn_tape, Aggregation, EdgeMaskParams, Head, GraphContext, MpnnArch, MpnnParams,
    TheoryGnnParams, TheoryVars,
};
use crate::objectives::{
    alignment_loss, build_cia_lra_pairs, build_cia_pairs, erm_loss, irmv1_penalty, per_env_losses, total_loss,
    vrex_penalty, EnvPartition, ObjectiveKind, Targets,
};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainingRecord>,
    pub summary: RunSummary,
    /// Parameters at the selected epoch (the last one without validation
    /// nodes).
    pub checkpoint: Checkpoint,
}

/// Graph of one step plus everything derived from it alone.
struct StepGraph<'a> {
    graph: Cow<'a, Graph>,
    ctx: GraphContext,
    train: Vec<usize>,
    partition: EnvPartition,
    /// Train-split labels are the only ones neighborhood statistics see.
    known: Vec<bool>,
    targets: Option<Tensor>,
}

impl<'a> StepGraph<'a> {
    fn new(graph: Cow<'a, Graph>, targets: Option<Tensor>) -> Self {
        let train = graph.nodes_in_split(Split::Train);
        let partition = EnvPartition::from_nodes(&graph, &train);
        let known = graph.split().iter().map(|&s| s == Split::Train).collect();
        let ctx = GraphContext::new(&graph);
        Self { graph, ctx, train, partition, known, targets }
    }

    fn targets(&self) -> Targets<'_> {
        match &self.targets {
            Some(y) => Targets::Regression(y),
            None => Targets::Classes(self.graph.labels()),
        }
    }
}

enum Model {
    Mpnn { params: MpnnParams, mask: Option<EdgeMaskParams>, opt: Adam, mask_opt: Adam },
    Theory { params: TheoryGnnParams, opt: Adam },
}

/// Handles of one forward pass.
struct Forward {
    /// Logits, or the `N × 1` prediction.
    output: Var,
    /// What the alignment penalties act on.
    aligned: Var,
    /// `[invariant | spurious]` halves, when the model has them.
    halves: Option<Var>,
    edge_mask: Option<Var>,
    model_vars: Vec<Var>,
    mask_vars: Vec<Var>,
}

impl Model {
    fn init(cfg: &RunConfig, graph: &Graph) -> Result<Self, TrainError> {
        Ok(match cfg.model {
            ModelKind::TheoryLinear => {
                if graph.feature_dim() != 2 {
                    return Err(TrainError::Config(format!(
                        "theory_linear needs the two-column (x1, x2) features of an SCM dataset, found {}",
                        graph.feature_dim()
                    )));
                }
                let params = crate::theory::random_init(cfg.layers, &mut stream(cfg.seed, "train/theory-init"));
                Model::Theory { params, opt: Adam::new(cfg.lr) }
            }
            ModelKind::Gcn | ModelKind::Gat => {
                let arch = MpnnArch {
                    aggregation: if cfg.model == ModelKind::Gcn { Aggregation::Gcn } else { Aggregation::Attention },
                    input_dim: graph.feature_dim(),
                    hidden: cfg.hidden,
                    layers: cfg.layers,
                    towers: cfg.towers,
                    num_classes: graph.num_classes(),
                    head: cfg.head,
                    bias: cfg.bias,
                };
                let params = MpnnParams::init(arch, cfg.seed, "model")?;
                let mask = if cfg.uses_mask() {
                    // Same encoder family as the main model, independent weights.
                    Some(EdgeMaskParams::init(MpnnArch { towers: 1, head: Head::Linear, ..arch }, cfg.mask_mode, cfg.seed)?)
                } else {
                    None
                };
                Model::Mpnn { params, mask, opt: Adam::new(cfg.lr), mask_opt: Adam::new(cfg.mask_lr) }
            }
        })
    }

    fn forward(&self, tape: &mut Tape, step: &StepGraph<'_>, trainable: bool) -> Result<Forward, TensorError> {
        let x = step.graph.features();
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        match self {
            Model::Mpnn { params, mask, .. } => {
                let model_vars: Vec<Var> = params.tensors.iter().map(|t| reg(tape, t)).collect();
                let (edge_mask, mask_vars) = match mask {
                    Some(m) => {
                        let mv: Vec<Var> = m.encoder.tensors.iter().map(|t| reg(tape, t)).collect();
                        (Some(edge_mask_apply(tape, m, &mv, &step.ctx, x)?), mv)
                    }
                    None => (None, Vec::new()),
                };
                let out = mpnn_forward(tape, params, &model_vars, &step.ctx, x, edge_mask)?;
                let halves = (params.arch.towers == 2).then_some(out.representation);
                Ok(Forward { output: out.logits, aligned: out.representation, halves, edge_mask, model_vars, mask_vars })
            }
            Model::Theory { params, .. } => {
                let vars = if trainable {
                    TheoryVars::register(tape, params)
                } else {
                    TheoryVars { scalars: params.to_vec().into_iter().map(|v| tape.constant(Tensor::scalar(v))).collect() }
                };
                let x1 = tape.constant(x.slice_cols(0, 1)?);
                let x2 = tape.constant(x.slice_cols(1, 2)?);
                let (h1, h2, pred) = theory_gnn_tape(tape, &vars, &step.ctx.tilde_a, x1, x2)?;
                let halves = tape.concat_cols(h1, h2)?;
                Ok(Forward {
                    output: pred,
                    aligned: pred,
                    halves: Some(halves),
                    edge_mask: None,
                    model_vars: vars.scalars,
                    mask_vars: Vec::new(),
                })
            }
        }
    }

    fn update(&mut self, grads: &Gradients, fwd: &Forward) -> Result<(), TensorError> {
        let collect = |vars: &[Var]| -> Vec<Tensor> { vars.iter().map(|&v| grads.get(v)).collect() };
        let g = collect(&fwd.model_vars);
        if g.iter().any(|t| !t.is_finite()) {
            return Err(TensorError::NonFinite { op: "gradient" });
        }
        match self {
            Model::Mpnn { params, mask, opt, mask_opt } => {
                opt.step(&mut params.tensors, &g)?;
                if let Some(m) = mask {
                    let mg = collect(&fwd.mask_vars);
                    if mg.iter().any(|t| !t.is_finite()) {
                        return Err(TensorError::NonFinite { op: "gradient" });
                    }
                    mask_opt.step(&mut m.encoder.tensors, &mg)?;
                }
            }
            Model::Theory { params, opt } => {
                let mut flat: Vec<Tensor> = params.to_vec().into_iter().map(Tensor::scalar).collect();
                opt.step(&mut flat, &g)?;
                *params = TheoryGnnParams::from_slice(&flat.iter().map(Tensor::item).collect::<Vec<_>>());
            }
        }
        Ok(())
    }

    /// Model tensors followed by mask-encoder tensors.
    fn flat(&self) -> Vec<Tensor> {
        match self {
            Model::Mpnn { params, mask, .. } => {
                let mut out = params.tensors.clone();
                if let Some(m) = mask {
                    out.extend(m.encoder.tensors.iter().cloned());
                }
                out
            }
            Model::Theory { params, .. } => params.to_vec().into_iter().map(Tensor::scalar).collect(),
        }
    }

    fn set_flat(&mut self, flat: &[Tensor]) {
        match self {
            Model::Mpnn { params, mask, .. } => {
                let k = params.tensors.len();
                params.tensors.clone_from_slice(&flat[..k]);
                if let Some(m) = mask {
                    m.encoder.tensors.clone_from_slice(&flat[k..]);
                }
            }
            Model::Theory { params, .. } => {
                *params = TheoryGnnParams::from_slice(&flat.iter().map(Tensor::item).collect::<Vec<_>>());
            }
        }
    }

    fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        match self {
            Model::Mpnn { params, mask, .. } => {
                let mut tensors: Vec<NamedTensor> = params
                    .arch
                    .layout()
                    .iter()
                    .zip(&params.tensors)
                    .map(|((name, _), t)| NamedTensor::new(name.clone(), t))
                    .collect();
                if let Some(m) = mask {
                    for ((name, _), t) in m.encoder.arch.layout().iter().zip(&m.encoder.tensors) {
                        tensors.push(NamedTensor::new(format!("mask.{name}"), t));
                    }
                }
                Checkpoint {
                    model: cfg.model.as_str().into(),
                    arch: serde_json::to_value(params.arch).expect("arch serializes"),
                    tensors,
                }
            }
            Model::Theory { params, .. } => Checkpoint {
                model: cfg.model.as_str().into(),
                arch: serde_json::json!({ "depth": params.depth() }),
                tensors: vec![NamedTensor::new("scalars", &Tensor::vector(params.to_vec()))],
            },
        }
    }
}

/// Neighbor lists of the edges whose mask value exceeds 0.5 (all edges
/// without a mask).
fn reachable_lists(graph: &Graph, mask: Option<&Tensor>) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); graph.num_nodes()];
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        if mask.is_none_or(|m| m.data()[e] > 0.5) {
            lists[u].push(v);
            lists[v].push(u);
        }
    }
    lists
}

fn local_structure(cfg: &RunConfig, step: &StepGraph<'_>, mask: Option<&Tensor>) -> (HopDistanceTable, NeighborhoodProfile) {
    let g = &step.graph;
    // Pairs only join training nodes, so only their distances are needed.
    let hops = bounded_shortest_paths_among(&reachable_lists(g, mask), cfg.objective.hops, &step.known);
    let weights = mask.map_or_else(|| vec![1.0; g.edges().len()], |m| m.data().to_vec());
    let adj = build_normalized_weighted(g, &weights);
    let profile = neighborhood_label_distribution(g, &adj, cfg.layers, Some(&step.known));
    (hops, profile)
}

fn penalty(
    tape: &mut Tape,
    cfg: &RunConfig,
    step: &StepGraph<'_>,
    fwd: &Forward,
    cache: &mut Option<(HopDistanceTable, NeighborhoodProfile)>,
    frozen: bool,
    rng: &mut StreamRng,
) -> Result<Var, crate::error::ObjectiveError> {
    let g = &step.graph;
    match cfg.objective.kind {
        ObjectiveKind::Erm => Ok(tape.constant(Tensor::scalar(0.0))),
        ObjectiveKind::Irmv1 => irmv1_penalty(tape, fwd.output, step.targets(), &step.partition),
        ObjectiveKind::Vrex => {
            let losses = per_env_losses(tape, fwd.output, step.targets(), &step.partition)?;
            vrex_penalty(tape, &losses)
        }
        ObjectiveKind::Cia => {
            let pairs =
                build_cia_pairs(g.labels(), g.num_classes(), &step.partition, cfg.objective.pair_budget, rng)?;
            alignment_loss(tape, fwd.aligned, &pairs)
        }
        ObjectiveKind::CiaLra => {
            let fresh;
            let (hops, profile) = match fwd.edge_mask.filter(|_| !frozen || cache.is_none()) {
                Some(m) if frozen => {
                    let values = tape.value(m).clone();
                    let s = cache.insert(local_structure(cfg, step, Some(&values)));
                    (&s.0, &s.1)
                }
                Some(m) => {
                    let values = tape.value(m).clone();
                    fresh = local_structure(cfg, step, Some(&values));
                    (&fresh.0, &fresh.1)
                }
                None => {
                    let s = cache.get_or_insert_with(|| local_structure(cfg, step, None));
                    (&s.0, &s.1)
                }
            };
            let pairs =
                build_cia_lra_pairs(g.labels(), g.num_classes(), &step.train, profile, hops, &cfg.objective, rng);
            alignment_loss(tape, fwd.aligned, &pairs)
        }
    }
}

#[derive(Default)]
struct Evaluation {
    acc: [Option<f64>; 3],
    mse: [Option<f64>; 3],
    invariant_variance: Option<f64>,
    spurious_norm: Option<f64>,
}

fn mse(pred: &Tensor, y: &Tensor, rows: &[usize]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|&i| (pred.get(i, 0) - y.get(i, 0)).powi(2)).sum::<f64>() / rows.len() as f64)
}

fn evaluate(step: &StepGraph<'_>, output: &Tensor, halves: Option<&Tensor>) -> Evaluation {
    let g = &step.graph;
    let rows = [Split::Train, Split::Val, Split::Test].map(|s| g.nodes_in_split(s));
    let mut ev = Evaluation::default();
    for (k, r) in rows.iter().enumerate() {
        match &step.targets {
            Some(y) => ev.mse[k] = mse(output, y, r),
            None => ev.acc[k] = ood_accuracy(output, g.labels(), r).ok(),
        }
    }
    if let Some(h) = halves {
        ev.invariant_variance = invariant_variance(h, g.labels()).ok();
        ev.spurious_norm = spurious_norm(h).ok();
    }
    ev
}

struct Loss {
    fwd: Forward,
    total: Var,
    values: (f64, f64, f64),
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    tape: &mut Tape,
    model: &Model,
    cfg: &RunConfig,
    step: &StepGraph<'_>,
    epoch: usize,
    cache: &mut Option<(HopDistanceTable, NeighborhoodProfile)>,
    frozen: bool,
    rng: &mut StreamRng,
) -> Result<Loss, TrainError> {
    let fwd = model.forward(tape, step, true)?;
    let erm = erm_loss(tape, fwd.output, step.targets(), &step.train)?;
    let terms = total_loss(tape, &cfg.objective, epoch, erm, |tape| penalty(tape, cfg, step, &fwd, cache, frozen, rng))?;
    let values = (
        tape.value(terms.erm).item(),
        terms.penalty.map_or(0.0, |p| tape.value(p).item()),
        tape.value(terms.total).item(),
    );
    Ok(Loss { fwd, total: terms.total, values })
}

/// Largest relative error between the tape gradient of the full training
/// objective (penalty active) and central finite differences, over every
/// model and mask parameter at initialization.
///
/// Discrete choices (pairs, hop distances, label ratios) are fixed from
/// the unperturbed point, since they carry no gradient by construction.
/// The per-coordinate error is `|a − n| / max(1, |a|, |n|)`.
pub fn objective_gradcheck(dataset: &Dataset, cfg: &RunConfig, eps: f64) -> Result<f64, TrainError> {
    cfg.validate()?;
    let graph = &dataset.graph;
    let targets = match (cfg.model, &dataset.targets) {
        (ModelKind::TheoryLinear, Some(t)) => Some(Tensor::matrix(graph.num_nodes(), 1, t.clone())?),
        (ModelKind::TheoryLinear, None) => return Err(TrainError::Config("theory_linear needs regression targets".into())),
        _ => None,
    };
    let mut model = Model::init(cfg, graph)?;
    let step = StepGraph::new(Cow::Borrowed(graph), targets);
    if step.train.is_empty() {
        return Err(TrainError::Config("dataset has no training nodes".into()));
    }
    let epoch = cfg.objective.warmup_epochs;
    let rng0 = stream(cfg.seed, "train/pairs");
    let mut cache = None;

    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, &model, cfg, &step, epoch, &mut cache, true, &mut rng0.clone())?;
    let grads = tape.backward(loss.total)?;
    let vars: Vec<Var> = loss.fwd.model_vars.iter().chain(&loss.fwd.mask_vars).copied().collect();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let base = model.flat();
    let mut value_at = |flat: &[Tensor]| -> Result<f64, TrainError> {
        model.set_flat(flat);
        let mut tape = Tape::new();
        Ok(build_loss(&mut tape, &model, cfg, &step, epoch, &mut cache, true, &mut rng0.clone())?.values.2)
    };
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for (t, a) in analytic.iter().enumerate() {
        for k in 0..base[t].len() {
            let orig = base[t].data()[k];
            probe[t].data_mut()[k] = orig + eps;
            let up = value_at(&probe)?;
            probe[t].data_mut()[k] = orig - eps;
            let down = value_at(&probe)?;
            probe[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let g = a.data()[k];
            worst = worst.max((g - numeric).abs() / 1.0f64.max(g.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

fn diverged(epoch: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::Diverged { epoch, reason: e.to_string() }
}

fn is_non_finite(e: &TrainError) -> bool {
    use crate::error::ObjectiveError;
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Objective(ObjectiveError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Trains `cfg.model` on `dataset`, calling `on_record` after every epoch.
///
/// Each epoch: sample the step subgraph, compute the edge mask, then (for
/// CIA-LRA, once the penalty is active) hop distances on the mask
/// thresholded at 0.5 and neighborhood label ratios from training labels,
/// then the loss and one Adam update. A non-finite loss or gradient stops
/// the run with [`TrainError::Diverged`] after the last finite record.
pub fn train(
    dataset: &Dataset,
    cfg: &RunConfig,
    mut on_record: impl FnMut(&TrainingRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let graph = &dataset.graph;
    let n = graph.num_nodes();
    let targets = match (cfg.model, &dataset.targets) {
        (ModelKind::TheoryLinear, Some(t)) => Some(Tensor::matrix(n, 1, t.clone())?),
        (ModelKind::TheoryLinear, None) => {
            return Err(TrainError::Config("theory_linear needs regression targets (targets.tsv)".into()))
        }
        _ => None,
    };
    let mut model = Model::init(cfg, graph)?;
    let full = StepGraph::new(Cow::Borrowed(graph), targets.clone());
    if full.train.is_empty() {
        return Err(TrainError::Config("dataset has no training nodes".into()));
    }
    let sampling = cfg.subgraph > 0 && cfg.subgraph < n;
    let mut sub_rng = stream(cfg.seed, "train/subgraph");
    let mut pair_rng = stream(cfg.seed, "train/pairs");
    let mut cache = None;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut last_checkpoint = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let sampled;
        let step = if sampling {
            // Redraw samples without training nodes; they give no loss.
            let mut nodes = Vec::new();
            for _ in 0..100 {
                nodes = index::sample(&mut sub_rng, n, cfg.subgraph).into_vec();
                if nodes.iter().any(|&i| full.known[i]) {
                    break;
                }
            }
            if !nodes.iter().any(|&i| full.known[i]) {
                return Err(TrainError::Config(format!(
                    "subgraph size {} keeps missing the training split",
                    cfg.subgraph
                )));
            }
            nodes.sort_unstable();
            let (g, map) = graph.induced_subgraph(&nodes)?;
            let t = targets.as_ref().map(|t| {
                Tensor::matrix(map.len(), 1, map.iter().map(|&i| t.get(i, 0)).collect()).expect("column")
            });
            sampled = StepGraph::new(Cow::Owned(g), t);
            &sampled
        } else {
            &full
        };

        let run_step = |model: &mut Model, cache: &mut Option<_>, pair_rng: &mut StreamRng| {
            let mut tape = Tape::new();
            let Loss { fwd, total, values } = build_loss(&mut tape, model, cfg, step, epoch, cache, false, pair_rng)?;
            if !(values.0.is_finite() && values.1.is_finite() && values.2.is_finite()) {
                return Err(TrainError::Tensor(TensorError::NonFinite { op: "loss" }));
            }
            let eval = if sampling {
                let mut eval_tape = Tape::new();
                let f = model.forward(&mut eval_tape, &full, false)?;
                let halves = f.halves.map(|h| eval_tape.value(h).clone());
                evaluate(&full, eval_tape.value(f.output), halves.as_ref())
            } else {
                evaluate(&full, tape.value(fwd.output), fwd.halves.map(|h| tape.value(h)))
            };
            let checkpoint = model.checkpoint(cfg);
            let grads = tape.backward(total)?;
            model.update(&grads, &fwd)?;
            Ok::<_, TrainError>((values, eval, checkpoint))
        };
        let ((erm, pen, total), eval, checkpoint) = match run_step(&mut model, &mut cache, &mut pair_rng) {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => return Err(diverged(epoch, e)),
            Err(e) => return Err(e),
        };
        let record = TrainingRecord {
            epoch,
            erm_loss: erm,
            penalty: pen,
            total_loss: total,
            train_acc: eval.acc[0],
            val_acc: eval.acc[1],
            test_acc: eval.acc[2],
            train_mse: eval.mse[0],
            val_mse: eval.mse[1],
            test_mse: eval.mse[2],
            invariant_variance: eval.invariant_variance,
            spurious_norm: eval.spurious_norm,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_record(&record);
        if let Some(score) = record.val_score() {
            // Strict improvement keeps the earliest of tied epochs.
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((epoch, score, checkpoint.clone()));
            }
        }
        last_checkpoint = Some(checkpoint);
        records.push(record);
    }

    let last = records.last().expect("epochs ≥ 1");
    let best_epoch = best.as_ref().map(|b| b.0);
    let summary = RunSummary {
        model: cfg.model,
        objective: cfg.objective.kind,
        lambda: cfg.objective.lambda,
        hops: cfg.objective.hops,
        ablations: cfg.objective.ablations.tag(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        metric: if targets.is_some() { "mse" } else { "accuracy" }.into(),
        best_epoch,
        best_val: best.as_ref().map(|b| b.1.abs()),
        test_at_best: best_epoch.and_then(|e| records[e].test_value()),
        final_train: last.train_acc.or(last.train_mse),
        final_val: last.val_acc.or(last.val_mse),
        final_test: last.test_value(),
        final_invariant_variance: last.invariant_variance,
        final_spurious_norm: last.spurious_norm,
    };
    let checkpoint = match best {
        Some((_, _, c)) => c,
        None => last_checkpoint.expect("epochs ≥ 1"),
    };
    Ok(TrainOutcome { records, summary, checkpoint })
}

