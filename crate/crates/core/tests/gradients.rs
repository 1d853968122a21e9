mod common;

use cact::tensor::{Graph, ParamStore};
use common::*;

fn assert_suite(results: Vec<(String, f64)>) {
    let failures: Vec<_> = results.iter().filter(|(_, e)| !(*e < FD_TOL)).collect();
    assert!(failures.is_empty(), "finite-difference mismatches: {failures:#?}");
}

#[test]
fn every_op_matches_finite_differences() {
    assert_suite(op_gradient_suite(1));
}

#[test]
fn composed_model_matches_finite_differences() {
    assert_suite(model_gradient_suite(&[2, 4], 3));
}

#[test]
fn extractor_families_match_finite_differences() {
    assert_suite(extractor_gradient_suite(5));
}

#[test]
fn shared_subexpressions_accumulate_like_the_unrolled_graph() {
    let mut r = rng(11);
    let x = random(&[2, 3], &mut r);
    // y is used three times
    let shared = {
        let mut g = Graph::new();
        let xv = g.input_with_grad(x.clone());
        let y = g.leaky_relu(xv, 0.1);
        let yy = g.hadamard(y, y).unwrap();
        let s = g.add(yy, y).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut ParamStore::new()).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let unrolled = {
        let mut g = Graph::new();
        let xv = g.input_with_grad(x.clone());
        let y1 = g.leaky_relu(xv, 0.1);
        let y2 = g.leaky_relu(xv, 0.1);
        let y3 = g.leaky_relu(xv, 0.1);
        let yy = g.hadamard(y1, y2).unwrap();
        let s = g.add(yy, y3).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut ParamStore::new()).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    for (a, b) in shared.iter().zip(&unrolled) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn attention_gate_gradient() {
    use cact::context_net::{AttentionAxis, AttentionGate};
    for axis in [AttentionAxis::Spatial, AttentionAxis::Channel] {
        let mut ps = ParamStore::new();
        let gate = AttentionGate::new(&mut ps, 3, axis, 4).unwrap();
        let cube = random(&[1, 3, 4, 4], &mut rng(2));
        let (e, _) = check_params(&mut ps, |ctx| {
            let x = ctx.graph.input(cube.clone());
            let y = gate.forward(ctx, x).unwrap();
            ctx.graph.sum(y)
        });
        assert!(e < FD_TOL, "{axis:?}: {e}");
    }
}
