use fian_numerics::{gru_cell, window_count, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn loop_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.at(i, l) * b.at(l, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, k, n) in [(3, 4, 2), (1, 7, 5), (9, 3, 8), (17, 33, 6)] {
        let (a, b) = (random(&mut rng, &[m, k]), random(&mut rng, &[k, n]));
        let got = a.matmul(&b).unwrap();
        let want = loop_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Independent sliding-window oracle for conv1d.
fn loop_conv(seq: &Tensor<f64>, filters: &Tensor<f64>, bias: &[f64], kernel: usize, stride: usize) -> Vec<Vec<f64>> {
    let (len, dim) = (seq.shape()[0], seq.shape()[1]);
    let count = filters.shape()[0];
    let mut out = Vec::new();
    let mut start = 0;
    while start + kernel <= len {
        let mut row = vec![0.0; count];
        for (c, r) in row.iter_mut().enumerate() {
            *r = bias[c];
            for j in 0..kernel {
                for i in 0..dim {
                    *r += filters.data()[(c * kernel + j) * dim + i] * seq.at(start + j, i);
                }
            }
        }
        out.push(row);
        start += stride;
    }
    out
}

#[test]
fn conv1d_examples() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = g.constant(random(&mut rng, &[16, 3]));
    let zero_f = g.constant(Tensor::zeros(vec![2, 8, 3]));
    let zero_b = g.constant(Tensor::zeros(vec![2]));
    let out = seq.conv1d(&zero_f, &zero_b, 8, 1).unwrap();
    assert_eq!(out.shape(), vec![9, 2]);
    assert!(out.to_tensor().data().iter().all(|&v| v == 0.0));

    // kernel equal to the length: one window holding the full dot product
    let f = random(&mut rng, &[1, 16, 3]);
    let full: f64 = f.data().iter().zip(seq.to_tensor().data()).map(|(a, b)| a * b).sum();
    let one = seq.conv1d(&g.constant(f), &g.constant(Tensor::from_f64(vec![1], &[0.5]).unwrap()), 16, 7).unwrap();
    assert_eq!(one.shape(), vec![1, 1]);
    assert!((one.to_tensor().data()[0] - (full + 0.5)).abs() < 1e-12);

    assert!(seq.conv1d(&zero_f, &zero_b, 17, 1).is_err());
}

#[test]
fn conv1d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let kernel = rng.gen_range(1..6);
        let len = kernel + rng.gen_range(0..12);
        let (dim, count, stride) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let seq = random(&mut rng, &[len, dim]);
        let filters = random(&mut rng, &[count, kernel, dim]);
        let bias = random(&mut rng, &[count]);
        let g = Graph::new();
        let got = g
            .constant(seq.clone())
            .conv1d(&g.constant(filters.clone()), &g.constant(bias.clone()), kernel, stride)
            .unwrap()
            .to_tensor();
        let want = loop_conv(&seq, &filters, bias.data(), kernel, stride);
        assert_eq!(got.rows(), want.len());
        for (w, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((got.at(w, c) - v).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn conv_window_count_formula(kernel in 1usize..40, extra in 0usize..200, stride in 1usize..20) {
        let len = kernel + extra;
        let count = window_count(len, kernel, stride).unwrap();
        prop_assert_eq!(count, (len - kernel) / stride + 1);
        // last window fits, the next would not
        prop_assert!((count - 1) * stride + kernel <= len);
        prop_assert!(count * stride + kernel > len);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-1.0..1.0) * scale);
        let g = Graph::new();
        let s = g.constant(x).softmax_rows().unwrap().to_tensor();
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

struct ScalarGru {
    w_ih: Vec<Vec<f64>>,
    w_hh: Vec<Vec<f64>>,
    b_ih: Vec<f64>,
    b_hh: Vec<f64>,
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ScalarGru {
    /// One textbook GRU step written elementwise.
    fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hidden = h.len();
        let lin = |gate: usize, j: usize| {
            let col = gate * hidden + j;
            let xi: f64 = x.iter().enumerate().map(|(i, &v)| v * self.w_ih[i][col]).sum::<f64>() + self.b_ih[col];
            let hh: f64 = h.iter().enumerate().map(|(i, &v)| v * self.w_hh[i][col]).sum::<f64>() + self.b_hh[col];
            (xi, hh)
        };
        (0..hidden)
            .map(|j| {
                let (ri, rh) = lin(0, j);
                let (zi, zh) = lin(1, j);
                let (ni, nh) = lin(2, j);
                let r = sig(ri + rh);
                let z = sig(zi + zh);
                let n = (ni + r * nh).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn fused_gru_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (steps, d_in, hidden) = (rng.gen_range(1..8), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = random(&mut rng, &[steps, d_in]);
        let w_ih = random(&mut rng, &[d_in, 3 * hidden]);
        let w_hh = random(&mut rng, &[hidden, 3 * hidden]);
        let b_ih = random(&mut rng, &[3 * hidden]);
        let b_hh = random(&mut rng, &[3 * hidden]);
        let oracle = ScalarGru {
            w_ih: rows_of(&w_ih),
            w_hh: rows_of(&w_hh),
            b_ih: b_ih.data().to_vec(),
            b_hh: b_hh.data().to_vec(),
        };
        let valid = rng.gen_range(1..=steps);
        for reverse in [false, true] {
            let g = Graph::new();
            let out = g
                .gru_sequence(
                    g.constant(x.clone()),
                    g.constant(w_ih.clone()),
                    g.constant(w_hh.clone()),
                    g.constant(b_ih.clone()),
                    g.constant(b_hh.clone()),
                    reverse,
                    Some(valid),
                )
                .unwrap()
                .to_tensor();
            let mut h = vec![0.0; hidden];
            let order: Vec<usize> = if reverse { (0..valid).rev().collect() } else { (0..valid).collect() };
            for t in order {
                h = oracle.step(x.row(t), &h);
                for j in 0..hidden {
                    assert!((out.at(t, j) - h[j]).abs() < 1e-10);
                }
            }
            for t in valid..steps {
                assert!(out.row(t).iter().all(|&v| v == 0.0));
            }

            // the composed cell agrees with the fused kernel step by step
            let mut h_var = g.constant(Tensor::zeros(vec![1, hidden]));
            let order: Vec<usize> = if reverse { (0..valid).rev().collect() } else { (0..valid).collect() };
            for t in order {
                let xt = g.constant(Tensor::matrix(1, d_in, x.row(t).to_vec()).unwrap());
                h_var = gru_cell(
                    xt,
                    h_var,
                    g.constant(w_ih.clone()),
                    g.constant(w_hh.clone()),
                    g.constant(b_ih.clone()),
                    g.constant(b_hh.clone()),
                )
                .unwrap();
                let hv = h_var.to_tensor();
                for j in 0..hidden {
                    assert!((out.at(t, j) - hv.data()[j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn gru_cell_closed_forms() {
    let (d_in, hidden) = (3, 4);
    let g = Graph::<f64>::new();
    let zeros = |shape: Vec<usize>| g.constant(Tensor::zeros(shape));
    let x = g.constant(Tensor::from_f64(vec![1, d_in], &[0.3, -2.0, 1.0]).unwrap());
    let h = g.constant(Tensor::from_f64(vec![1, hidden], &[1.0, -0.5, 0.25, 4.0]).unwrap());
    // zero weights: r = z = σ(0) = 0.5, n = tanh(0) = 0, h' = 0.5·h
    let out = gru_cell(
        x,
        h,
        zeros(vec![d_in, 3 * hidden]),
        zeros(vec![hidden, 3 * hidden]),
        zeros(vec![3 * hidden]),
        zeros(vec![3 * hidden]),
    )
    .unwrap();
    assert_eq!(out.to_tensor().data(), &[0.5, -0.25, 0.125, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = gru_cell(
        zeros(vec![1, d_in]),
        zeros(vec![1, hidden]),
        g.constant(random(&mut rng, &[d_in, 3 * hidden])),
        g.constant(random(&mut rng, &[hidden, 3 * hidden])),
        zeros(vec![3 * hidden]),
        zeros(vec![3 * hidden]),
    )
    .unwrap();
    assert!(out.to_tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_dimension_mismatch_is_an_error() {
    let g = Graph::<f64>::new();
    let r = g.gru_sequence(
        g.constant(Tensor::zeros(vec![4, 3])),
        g.constant(Tensor::zeros(vec![2, 6])),
        g.constant(Tensor::zeros(vec![2, 6])),
        g.constant(Tensor::zeros(vec![6])),
        g.constant(Tensor::zeros(vec![6])),
        false,
        None,
    );
    assert!(r.is_err());
}
