use super::*;
use crate::autodiff::{gradcheck, Adam, Tape, Var};
use crate::error::TensorError;
use crate::synth::{gen_csbm, CsbmConfig};
use crate::tensor::Tensor;
use crate::testutil::{max_abs_diff, random_graph, random_perm, random_tensor};

fn arch(aggregation: Aggregation, input_dim: usize, towers: usize) -> MpnnArch {
    MpnnArch { aggregation, input_dim, hidden: 6, layers: 2, towers, num_classes: 3, head: Head::Linear, bias: true }
}

const ALL: [Aggregation; 3] = [Aggregation::Gcn, Aggregation::Mean, Aggregation::Attention];

#[test]
fn zero_weights_give_uniform_softmax() {
    let g = random_graph(15, 0.2, 4, 3, 1);
    let ctx = GraphContext::new(&g);
    for agg in ALL {
        let params = MpnnParams::zeros(arch(agg, 4, 2)).unwrap();
        let (_, logits) = mpnn_predict(&params, &ctx, g.features(), None).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let p = tape.row_softmax(z).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}

#[test]
fn permutation_equivariance() {
    let g = random_graph(20, 0.2, 4, 3, 2);
    let perm = random_perm(20, 3);
    let gp = g.permuted(&perm).unwrap();
    let (ctx, ctxp) = (GraphContext::new(&g), GraphContext::new(&gp));
    for agg in ALL {
        let params = MpnnParams::init(arch(agg, 4, 1), 7, "m").unwrap();
        let mask_params = EdgeMaskParams::init(arch(agg, 4, 1), MaskMode::Sigmoid, 8).unwrap();
        for masked in [false, true] {
            let run = |ctx: &GraphContext, x: &Tensor| {
                let mask = masked.then(|| edge_mask_values(&mask_params, ctx, x).unwrap());
                mpnn_predict(&params, ctx, x, mask.as_ref()).unwrap().1
            };
            let out = run(&ctx, g.features());
            let outp = run(&ctxp, gp.features());
            for (k, &old) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert!((outp.get(k, c) - out.get(old, c)).abs() < 1e-12, "{agg} masked={masked}");
                }
            }
        }
    }
}

#[test]
fn uniform_attention_equals_mean_aggregation() {
    let g = random_graph(25, 0.15, 4, 3, 4);
    let ctx = GraphContext::new(&g);
    let att = MpnnParams::init(arch(Aggregation::Attention, 4, 1), 9, "att").unwrap();
    let names = att.arch.layout();
    let mut mean = MpnnParams::zeros(arch(Aggregation::Mean, 4, 1)).unwrap();
    let mut zeroed = att.clone();
    let mut k = 0;
    for ((name, _), t) in names.iter().zip(zeroed.tensors.iter_mut()) {
        if name.contains("att_") {
            *t = Tensor::zeros(t.shape());
        } else {
            mean.tensors[k] = t.clone();
            k += 1;
        }
    }
    let (_, a) = mpnn_predict(&zeroed, &ctx, g.features(), None).unwrap();
    let (_, m) = mpnn_predict(&mean, &ctx, g.features(), None).unwrap();
    assert!(max_abs_diff(&a, &m) < 1e-10);
}

#[test]
fn isolated_node_uses_only_own_features() {
    let mut g = random_graph(12, 0.3, 4, 3, 5);
    let edges: Vec<(usize, usize)> = g.edges().iter().copied().filter(|&(u, v)| u != 0 && v != 0).collect();
    g = crate::graph::Graph::new(12, 3, edges, g.features().clone(), g.labels().to_vec(), g.envs().to_vec(), g.split().to_vec()).unwrap();
    let params = MpnnParams::init(arch(Aggregation::Attention, 4, 1), 3, "iso").unwrap();
    let base = mpnn_predict(&params, &GraphContext::new(&g), g.features(), None).unwrap().1;
    let mut x = g.features().clone();
    for i in 1..12 {
        for v in x.row_mut(i) {
            *v += 10.0;
        }
    }
    let moved = mpnn_predict(&params, &GraphContext::new(&g), &x, None).unwrap().1;
    assert_eq!(base.row(0), moved.row(0));
}

fn flat_loss(
    tape: &mut Tape,
    flat: Var,
    params: &MpnnParams,
    mask: Option<&EdgeMaskParams>,
    ctx: &GraphContext,
    x: &Tensor,
) -> Result<Var, TensorError> {
    let mut offset = 0;
    let mut take = |tape: &mut Tape, shape: &[usize]| -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        let idx: Vec<usize> = (offset..offset + n).collect();
        offset += n;
        let v = tape.gather_rows(flat, &idx)?;
        tape.reshape(v, shape)
    };
    let vars: Vec<Var> = params.tensors.iter().map(|t| take(tape, t.shape())).collect::<Result<_, _>>()?;
    let mvars: Option<Vec<Var>> = match mask {
        Some(m) => Some(m.encoder.tensors.iter().map(|t| take(tape, t.shape())).collect::<Result<_, _>>()?),
        None => None,
    };
    let edge = match (mask, mvars) {
        (Some(m), Some(v)) => Some(edge_mask_apply(tape, m, &v, ctx, x)?),
        _ => None,
    };
    let out = mpnn_forward(tape, params, &vars, ctx, x, edge)?;
    let labels: Vec<usize> = (0..ctx.num_nodes).map(|i| i % 3).collect();
    let rows: Vec<usize> = (0..ctx.num_nodes).collect();
    tape.cross_entropy_with_logits(out.logits, &rows, &labels)
}

#[test]
fn gradcheck_every_aggregation_with_and_without_mask() {
    let g = random_graph(10, 0.3, 4, 3, 6);
    let ctx = GraphContext::new(&g);
    for agg in ALL {
        for mode in [None, Some(MaskMode::Sigmoid), Some(MaskMode::MinMax)] {
            let params = MpnnParams::init(arch(agg, 4, 2), 11, "gc").unwrap();
            let mask = mode.map(|m| EdgeMaskParams::init(arch(agg, 4, 2), m, 12).unwrap());
            let mut flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data().to_vec()).collect();
            if let Some(m) = &mask {
                flat.extend(m.encoder.tensors.iter().flat_map(|t| t.data().to_vec()));
            }
            // biases start at zero; move them off the init so every path is exercised
            let flat: Vec<f64> = flat.iter().enumerate().map(|(k, v)| v + 0.01 * ((k % 7) as f64 - 3.0)).collect();
            let err = gradcheck(
                |t, p| flat_loss(t, p, &params, mask.as_ref(), &ctx, g.features()),
                &Tensor::vector(flat),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{agg} {mode:?}: {err}");
        }
    }
}

#[test]
fn mask_examples() {
    let g = random_graph(15, 0.3, 4, 3, 7);
    let ctx = GraphContext::new(&g);
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[15, 4]));
    let m = edge_scores_to_mask(&mut tape, zero, &ctx, MaskMode::Sigmoid).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    let same = tape.constant(Tensor::filled(&[15, 4], 0.3));
    let m = edge_scores_to_mask(&mut tape, same, &ctx, MaskMode::MinMax).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| (v - (1.0 - MASK_FLOOR)).abs() < 1e-15));

    let emb = tape.constant(random_tensor(&[15, 4], 1, "emb"));
    let m = edge_scores_to_mask(&mut tape, emb, &ctx, MaskMode::Sigmoid).unwrap();
    let entry = tape.gather_rows(m, ctx.index.entry_edge()).unwrap();
    let values = tape.value(entry).data().to_vec();
    let dense = crate::graph::CsrMatrix::new(ctx.index.pattern().clone(), values).unwrap().to_dense();
    assert_eq!(dense, dense.transpose().unwrap());
    assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn all_ones_mask_reproduces_normalization_bit_exactly() {
    let g = random_graph(30, 0.15, 2, 2, 8);
    let ctx = GraphContext::new(&g);
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::filled(&[ctx.index.nnz(), 1], 1.0));
    let (vals, self_w) = masked_gcn_values(&mut tape, &ctx, ones).unwrap();
    let adj = crate::graph::build_normalized(&g);
    assert_eq!(tape.value(vals).data(), adj.bar_a.values());
    for i in 0..30 {
        assert_eq!(tape.value(self_w).data()[i].to_bits(), adj.tilde_a.get(i, i).to_bits());
    }
    let weighted = crate::graph::build_normalized_weighted(&g, &vec![1.0; g.edges().len()]);
    assert_eq!(weighted, adj);
}

#[test]
fn single_layer_separates_noiseless_csbm() {
    let sample = gen_csbm(&CsbmConfig { noise_variance: 0.0, num_envs: 1, homophily: vec![0.9], ..Default::default() }).unwrap();
    let g = &sample.dataset.graph;
    let ctx = GraphContext::new(g);
    let arch = MpnnArch { aggregation: Aggregation::Gcn, input_dim: 8, hidden: 8, layers: 1, towers: 1, num_classes: 3, head: Head::Linear, bias: true };
    let mut params = MpnnParams::init(arch, 1, "csbm").unwrap();
    let mut adam = Adam::new(0.05);
    let rows: Vec<usize> = (0..g.num_nodes()).collect();
    let mut acc = 0.0;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = mpnn_forward(&mut tape, &params, &vars, &ctx, g.features(), None).unwrap();
        let logits = tape.value(out.logits).clone();
        let correct = rows.iter().filter(|&&i| argmax(logits.row(i)) == g.labels()[i]).count();
        acc = correct as f64 / rows.len() as f64;
        if acc == 1.0 {
            break;
        }
        let loss = tape.cross_entropy_with_logits(out.logits, &rows, g.labels()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut params.tensors, &gs).unwrap();
    }
    assert_eq!(acc, 1.0);
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}
