use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::graph::{CsrMatrix, CsrPattern};
use crate::rng::stream;

fn random(shape: &[usize], label: &str) -> Tensor {
    let mut rng = stream(11, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ring_pattern(n: usize) -> Arc<CsrPattern> {
    let mut coords = Vec::new();
    for i in 0..n {
        coords.push((i, (i + 1) % n));
        coords.push(((i + 1) % n, i));
    }
    // node n-1 gets an extra chord so row sizes differ
    coords.push((0, n / 2));
    coords.push((n / 2, 0));
    Arc::new(CsrPattern::from_coords(n, n, &coords))
}

fn assert_grad(f: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>, point: Tensor) {
    let err = gradcheck(f, &point, 1e-6).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn square_derivative() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.hadamard(x, x).unwrap();
    assert_eq!(tape.backward(y).unwrap().get(x).item(), 6.0);
}

#[test]
fn uniform_logits_cross_entropy() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::zeros(&[2, 4]));
    let p = tape.row_softmax(z).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let loss = tape.cross_entropy_with_logits(z, &[0, 1], &[1, 3]).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    let g = tape.backward(loss).unwrap().get(z);
    let expect = [0.125, -0.375, 0.125, 0.125, 0.125, 0.125, 0.125, -0.375];
    for (a, b) in g.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn matmul_chain_gradcheck() {
    let b = random(&[4, 3], "b");
    let c = random(&[3, 2], "c");
    assert_grad(
        |t, x| {
            let b = t.constant(b.clone());
            let c = t.constant(c.clone());
            let y = t.matmul(x, b)?;
            let y = t.matmul(y, c)?;
            let y = t.hadamard(y, y)?;
            t.sum(y)
        },
        random(&[5, 4], "a"),
    );
}

#[test]
fn every_op_passes_gradcheck_at_random_points() {
    let pattern = ring_pattern(5);
    let mat = Arc::new(CsrMatrix::new(Arc::clone(&pattern), random(&[pattern.nnz()], "vals").into_data()).unwrap());
    let w = random(&[3, 3], "w");
    for point in 0..10 {
        let x0 = random(&[5, 3], &format!("x{point}"));
        let pos = x0.map(|v| v.abs() + 0.5);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>, Tensor)> = vec![
            ("matmul", Box::new(|t, x| { let w = t.constant(w.clone()); let y = t.matmul(x, w)?; t.sq_l2_norm(y) }), x0.clone()),
            ("spmm", Box::new(|t, x| { let y = t.sparse_dense_matmul(&mat, x)?; t.sq_l2_norm(y) }), x0.clone()),
            ("spmm_values", Box::new(|t, v| {
                let x = t.constant(random(&[5, 3], "sx"));
                let y = t.sparse_values_matmul(&pattern, v, x)?;
                t.sq_l2_norm(y)
            }), random(&[pattern.nnz()], &format!("v{point}"))),
            ("add_sub", Box::new(|t, x| { let y = t.add(x, x)?; let z = t.sub(y, x)?; let z = t.hadamard(z, x)?; t.sum(z) }), x0.clone()),
            ("scale", Box::new(|t, x| { let y = t.scale(x, -1.5)?; let y = t.add_scalar(y, 0.3)?; t.sq_l2_norm(y) }), x0.clone()),
            ("scalar_mul", Box::new(|t, s| { let x = t.constant(random(&[5, 3], "sm")); let y = t.scalar_mul(s, x)?; let y = t.hadamard(y, y)?; t.mean(y) }), Tensor::scalar(0.7 + point as f64 * 0.1)),
            ("bias", Box::new(|t, b| { let x = t.constant(random(&[5, 3], "bx")); let y = t.add_row_broadcast(x, b)?; let y = t.relu(y)?; t.sq_l2_norm(y) }), random(&[3], &format!("b{point}"))),
            ("row_scale", Box::new(|t, s| { let x = t.constant(random(&[5, 3], "rx")); let y = t.row_scale(s, x)?; t.sq_l2_norm(y) }), random(&[5], &format!("s{point}"))),
            ("relu", Box::new(|t, x| { let y = t.relu(x)?; t.sq_l2_norm(y) }), x0.clone()),
            ("leaky_relu", Box::new(|t, x| { let y = t.leaky_relu(x, 0.2)?; t.sq_l2_norm(y) }), x0.clone()),
            ("sigmoid", Box::new(|t, x| { let y = t.sigmoid(x)?; t.sq_l2_norm(y) }), x0.clone()),
            ("exp", Box::new(|t, x| { let y = t.exp(x)?; t.sum(y) }), x0.clone()),
            ("rsqrt", Box::new(|t, x| { let y = t.rsqrt(x)?; t.sum(y) }), pos.clone()),
            ("row_softmax", Box::new(|t, x| { let y = t.row_softmax(x)?; let c = t.constant(random(&[5, 3], "sw")); let y = t.hadamard(y, c)?; t.sum(y) }), x0.clone()),
            ("cross_entropy", Box::new(|t, x| t.cross_entropy_with_logits(x, &[0, 2, 4], &[1, 0, 2])), x0.clone()),
            ("mse", Box::new(|t, x| t.mse(x, &random(&[5, 3], "target"), &[1, 3])), x0.clone()),
            ("variance", Box::new(|t, x| t.population_variance(x)), x0.clone()),
            ("gather", Box::new(|t, x| { let y = t.gather_rows(x, &[4, 0, 4])?; t.sq_l2_norm(y) }), x0.clone()),
            ("scatter", Box::new(|t, x| { let y = t.scatter_add_rows(x, &[1, 1, 0, 3, 1], 4)?; let y = t.hadamard(y, y)?; let y = t.hadamard(y, y)?; t.sum(y) }), x0.clone()),
            ("segment_softmax", Box::new(|t, v| {
                let y = t.segment_softmax(v, &pattern)?;
                let c = t.constant(random(&[pattern.nnz()], "segw"));
                let y = t.hadamard(y, c)?;
                t.sum(y)
            }), random(&[pattern.nnz()], &format!("seg{point}"))),
            ("min_max", Box::new(|t, x| { let y = t.min_max_normalize(x)?; let c = t.constant(random(&[5, 3], "mmw")); let y = t.hadamard(y, c)?; t.sum(y) }), x0.clone()),
            ("concat", Box::new(|t, x| { let c = t.constant(random(&[5, 2], "cc")); let y = t.concat_cols(x, c)?; let w = t.constant(random(&[3, 1], "cw")); let y = t.matmul(y, w)?; t.sq_l2_norm(y) }), random(&[5, 1], &format!("cx{point}"))),
        ];
        for (name, f, p) in checks {
            let err = gradcheck(f, &p, 1e-6).unwrap();
            assert!(err < 1e-4, "{name} at point {point}: {err}");
        }
    }
}

#[test]
fn gradcheck_linear_and_constant() {
    let err = gradcheck(|t, x| { let y = t.scale(x, 2.5)?; t.sum(y) }, &random(&[3, 2], "lin"), 1e-4).unwrap();
    assert!(err < 1e-9);
    let mut tape = Tape::new();
    let x = tape.param(random(&[2, 2], "c"));
    let c = tape.constant(Tensor::scalar(4.0));
    let y = tape.sum(c).unwrap();
    assert!(tape.backward(y).unwrap().get(x).data().iter().all(|&v| v == 0.0));
    let err = gradcheck(|t, _| { let c = t.constant(Tensor::scalar(4.0)); t.sum(c) }, &random(&[2], "k"), 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn min_max_degenerate_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.4; 3]));
    let y = t.min_max_normalize(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0]);
    let s = t.sum(y).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn variance_convention() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.3; 7]));
    let b = tape.constant(Tensor::vector(vec![1.0, 3.0]));
    let va = tape.population_variance(a).unwrap();
    let vb = tape.population_variance(b).unwrap();
    assert_eq!(tape.value(va).item(), 0.0);
    assert_eq!(tape.value(vb).item(), 1.0);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(random(&[6, 4], "det"));
        let w = t.param(random(&[4, 4], "detw"));
        let y = t.matmul(x, w).unwrap();
        let y = t.sigmoid(y).unwrap();
        let l = t.population_variance(y).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(x), g.get(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_and_finiteness_errors() {
    let mut t = Tape::new();
    let a = t.param(Tensor::zeros(&[2, 3]));
    let b = t.param(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(TensorError::Shape(_))));
    let z = t.param(Tensor::vector(vec![0.0]));
    assert!(matches!(t.rsqrt(z), Err(TensorError::NonFinite { .. })));
}

#[test]
fn sgd_examples() {
    let mut p = vec![Tensor::scalar(1.0)];
    Sgd::new(0.1).step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
    assert!((p[0].item() - 0.8).abs() < 1e-15);
    let before = random(&[3], "zero");
    let mut p = vec![before.clone()];
    Sgd::new(0.1).step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
    assert_eq!(p[0], before);
    let mut adam = Adam::new(0.1);
    adam.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
    assert_eq!(p[0], before);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let target = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let mut params = vec![Tensor::zeros(&[3])];
    let mut adam = Adam::new(0.1);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let mut t = Tape::new();
        let x = t.param(params[0].clone());
        let c = t.constant(target.clone());
        let d = t.sub(x, c).unwrap();
        let l = t.sq_l2_norm(d).unwrap();
        loss = t.value(l).item();
        if loss < 1e-6 {
            break;
        }
        let g = t.backward(l).unwrap().get(x);
        adam.step(&mut params, &[g]).unwrap();
    }
    assert!(loss < 1e-6, "loss {loss}");
}

#[test]
fn non_finite_gradient_aborts() {
    let mut p = vec![Tensor::scalar(1.0)];
    let err = Adam::new(0.1).step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { .. }));
}
