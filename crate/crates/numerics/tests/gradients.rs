use std::time::Instant;

use fian_numerics::gradcheck::{check_gradients, primitive_suite, FdSettings};
use fian_numerics::{Graph, Tensor};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_primitive_passes_finite_differences_over_twenty_seeds() {
    let start = Instant::now();
    let mut worst = std::collections::BTreeMap::new();
    for seed in 0..20 {
        for check in primitive_suite(seed, FdSettings::default()).unwrap() {
            let e = worst.entry(check.name).or_insert(0.0f64);
            *e = e.max(check.max_error);
            assert!(check.max_error < TOLERANCE, "seed {seed}: {} error {:e}", check.name, check.max_error);
        }
    }
    for (name, err) in &worst {
        println!("{name:<24} {err:.3e}");
    }
    assert!(worst.len() >= 28);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
    let outcome = check_gradients(&[x], FdSettings::default(), |g, v| {
        let value = v[0].value().map(|a| a * a);
        // d(x²)/dx is 2x; this rule reports 3x
        let sq = g.custom(&[v[0]], value, |inputs, _, dy| {
            vec![Tensor::new(
                dy.shape().to_vec(),
                inputs[0].data().iter().zip(dy.data()).map(|(a, g)| 3.0 * a * g).collect(),
            )
            .unwrap()]
        })?;
        sq.sum()
    })
    .unwrap();
    assert!(outcome.max_error() > 0.3, "{outcome:?}");
}

#[test]
fn correct_custom_rule_passes() {
    let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
    let outcome = check_gradients(&[x], FdSettings::default(), |g, v| {
        let value = v[0].value().map(|a| a * a);
        let sq = g.custom(&[v[0]], value, |inputs, _, dy| {
            vec![Tensor::new(
                dy.shape().to_vec(),
                inputs[0].data().iter().zip(dy.data()).map(|(a, g)| 2.0 * a * g).collect(),
            )
            .unwrap()]
        })?;
        sq.sum()
    })
    .unwrap();
    assert!(outcome.max_error() < TOLERANCE);
}

#[test]
fn composed_graph_with_reuse() {
    // softmax(x·W)·x then layer norm, with x used three times
    let x = Tensor::from_f64(vec![3, 4], &[0.1, -0.3, 0.8, 1.2, -0.7, 0.4, 0.0, 0.9, 1.1, -1.4, 0.2, 0.5]).unwrap();
    let w = Tensor::from_f64(vec![4, 3], &[0.3, -0.2, 0.1, 0.5, 0.7, -0.6, -0.1, 0.2, 0.9, 0.4, -0.8, 0.05]).unwrap();
    let gain = Tensor::from_f64(vec![4], &[1.0, 0.8, 1.2, 0.9]).unwrap();
    let bias = Tensor::from_f64(vec![4], &[0.0, 0.1, -0.1, 0.2]).unwrap();
    let outcome = check_gradients(&[x, w, gain, bias], FdSettings::default(), |_: &Graph<f64>, v| {
        let attn = v[0].matmul(&v[1])?.softmax_rows()?;
        let mixed = attn.matmul(&v[0])?.add(&v[0])?;
        let y = mixed.layer_norm(&v[2], &v[3], 1e-5)?.tanh()?;
        y.mul(&y)?.sum()
    })
    .unwrap();
    assert!(outcome.max_error() < TOLERANCE, "{outcome:?}");
}
