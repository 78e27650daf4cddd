//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use fian_core::attention::MultiHead;
use fian_core::config::{ModelConfig, StrideRule};
use fian_core::harness::data::{generate_dataset, DatasetSpec, Synthetic};
use fian_numerics::{ParamId, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![r, c], |_| rng.gen_range(-1.0..1.0))
}

pub fn rows(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum()).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    a.iter().flatten().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Multi-head attention computed head by head with explicit loops.
pub fn loop_attention(store: &ParamStore<f64>, mh: &MultiHead, q: &Mat, v: &Mat, mask: Option<&[bool]>) -> (Mat, Vec<Mat>) {
    let p = |id: ParamId| rows(store.value(id));
    let (qp, kp, vp) = (mm(q, &p(mh.w_q)), mm(v, &p(mh.w_k)), mm(v, &p(mh.w_v)));
    let d_h = q[0].len();
    let d_k = d_h / mh.heads;
    let mut joined = vec![vec![0.0; d_h]; q.len()];
    let mut all_weights = Vec::new();
    for h in 0..mh.heads {
        let cols = h * d_k..(h + 1) * d_k;
        let mut weights = Vec::new();
        for (i, qi) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    if mask.is_some_and(|m| !m[j]) {
                        f64::NEG_INFINITY
                    } else {
                        cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (d_k as f64).sqrt()
                    }
                })
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                joined[i][c] = w.iter().zip(&vp).map(|(wj, vj)| wj * vj[c]).sum();
            }
            weights.push(w);
        }
        all_weights.push(weights);
    }
    (mm(&joined, &p(mh.w_o)), all_weights)
}


/// A model small enough to train for a few epochs inside a unit test.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_h: 16,
        heads: 2,
        n_v: 16,
        max_n_q: 8,
        d_f: 8,
        d_emb: 16,
        ffn_mult: 2,
        kernel_sizes: vec![4, 8],
        stride: StrideRule::Ratio(0.25),
        batch_size: 8,
        epochs: 2,
        lr: 3e-3,
        ..ModelConfig::desk()
    }
}

pub fn small_spec() -> DatasetSpec {
    DatasetSpec {
        n_v: 16,
        d_f: 8,
        min_len: 3,
        max_len: 6,
        max_segments: 2,
        train: 64,
        val: 16,
        test: 32,
        ..DatasetSpec::default()
    }
}

pub fn small_data() -> Synthetic {
    generate_dataset(&small_spec()).unwrap()
}
