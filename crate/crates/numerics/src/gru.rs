//! Fused single-direction GRU over a whole sequence.
//!
//! Per step, with gate columns laid out `[r | z | n]`:
//!
//! ```text
//! r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
//! z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
//! n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

pub(crate) struct GruWeights<'a, T> {
    pub w_ih: &'a Tensor<T>,
    pub w_hh: &'a Tensor<T>,
    pub b_ih: &'a Tensor<T>,
    pub b_hh: &'a Tensor<T>,
}

/// Per-step activations saved for the backward pass, indexed by time step.
pub(crate) struct GruCache<T> {
    hidden: usize,
    valid: usize,
    reverse: bool,
    h_prev: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

pub(crate) struct GruGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw_ih: Vec<T>,
    pub dw_hh: Vec<T>,
    pub db_ih: Vec<T>,
    pub db_hh: Vec<T>,
}

fn order(valid: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..valid).rev())
    } else {
        Box::new(0..valid)
    }
}

pub(crate) fn gru_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &GruWeights<'_, T>,
    reverse: bool,
    valid: usize,
) -> Result<(Tensor<T>, GruCache<T>)> {
    let (len, d_in) = (x.rows(), x.cols());
    let hidden = w.w_hh.shape().first().copied().unwrap_or(0);
    let g3 = 3 * hidden;
    let ok = x.rank() == 2
        && w.w_ih.shape() == [d_in, g3]
        && w.w_hh.shape() == [hidden, g3]
        && w.b_ih.len() == g3
        && w.b_hh.len() == g3;
    if !ok {
        return Err(Error::ShapeMismatch { op: "gru_sequence", lhs: x.shape().to_vec(), rhs: w.w_ih.shape().to_vec() });
    }
    if valid == 0 || valid > len {
        return Err(Error::InvalidShape {
            op: "gru_sequence",
            shape: x.shape().to_vec(),
            reason: format!("valid length {valid} outside 1..={len}"),
        });
    }

    let mut gi = vec![T::zero(); valid * g3];
    gemm(MatRef::dense(&x.data()[..valid * d_in], valid, d_in), w.w_ih.as_mat(), &mut gi, false);
    for row in gi.chunks_mut(g3) {
        row.iter_mut().zip(w.b_ih.data()).for_each(|(v, &b)| *v = *v + b);
    }

    let mut cache = GruCache {
        hidden,
        valid,
        reverse,
        h_prev: vec![T::zero(); valid * hidden],
        r: vec![T::zero(); valid * hidden],
        z: vec![T::zero(); valid * hidden],
        n: vec![T::zero(); valid * hidden],
        hn: vec![T::zero(); valid * hidden],
    };
    let mut out = vec![T::zero(); len * hidden];
    let mut h = vec![T::zero(); hidden];
    let mut gh = vec![T::zero(); g3];
    for t in order(valid, reverse) {
        gh.copy_from_slice(w.b_hh.data());
        gemm(MatRef::dense(&h, 1, hidden), w.w_hh.as_mat(), &mut gh, true);
        let git = &gi[t * g3..(t + 1) * g3];
        let base = t * hidden;
        for j in 0..hidden {
            let r = sigmoid(git[j] + gh[j]);
            let z = sigmoid(git[hidden + j] + gh[hidden + j]);
            let hn = gh[2 * hidden + j];
            let n = (git[2 * hidden + j] + r * hn).tanh();
            cache.h_prev[base + j] = h[j];
            cache.r[base + j] = r;
            cache.z[base + j] = z;
            cache.n[base + j] = n;
            cache.hn[base + j] = hn;
            h[j] = (T::one() - z) * n + z * h[j];
        }
        out[base..base + hidden].copy_from_slice(&h);
    }
    Ok((Tensor::matrix(len, hidden, out)?, cache))
}

pub(crate) fn gru_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &GruWeights<'_, T>,
    c: &GruCache<T>,
    dy: &[T],
    want_x: bool,
) -> GruGrads<T> {
    let hidden = c.hidden;
    let g3 = 3 * hidden;
    let d_in = x.cols();
    let valid = c.valid;
    let mut dgi = vec![T::zero(); valid * g3];
    let mut dgh = vec![T::zero(); valid * g3];
    let mut carry = vec![T::zero(); hidden];
    let steps: Vec<usize> = order(valid, c.reverse).collect();
    for &t in steps.iter().rev() {
        let base = t * hidden;
        let (gi_row, gh_row) = (&mut dgi[t * g3..(t + 1) * g3], &mut dgh[t * g3..(t + 1) * g3]);
        for j in 0..hidden {
            let k = base + j;
            let (r, z, n, hn, hp) = (c.r[k], c.z[k], c.n[k], c.hn[k], c.h_prev[k]);
            let dh = dy[k] + carry[j];
            let dn = dh * (T::one() - z);
            let dz = dh * (hp - n);
            let da_n = dn * (T::one() - n * n);
            let dr = da_n * hn;
            let da_z = dz * z * (T::one() - z);
            let da_r = dr * r * (T::one() - r);
            gi_row[j] = da_r;
            gi_row[hidden + j] = da_z;
            gi_row[2 * hidden + j] = da_n;
            gh_row[j] = da_r;
            gh_row[hidden + j] = da_z;
            gh_row[2 * hidden + j] = da_n * r;
            carry[j] = dh * z;
        }
        // carry += dgh_t · W_hhᵀ
        gemm(
            MatRef::dense(&dgh[t * g3..(t + 1) * g3], 1, g3),
            MatRef::dense_t(w.w_hh.data(), hidden, g3),
            &mut carry,
            true,
        );
    }

    let mut dw_hh = vec![T::zero(); hidden * g3];
    gemm(MatRef::dense_t(&c.h_prev, valid, hidden), MatRef::dense(&dgh, valid, g3), &mut dw_hh, false);
    let mut dw_ih = vec![T::zero(); d_in * g3];
    gemm(
        MatRef::dense_t(&x.data()[..valid * d_in], valid, d_in),
        MatRef::dense(&dgi, valid, g3),
        &mut dw_ih,
        false,
    );
    let colsum = |m: &[T]| {
        let mut s = vec![T::zero(); g3];
        for row in m.chunks(g3) {
            s.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
        }
        s
    };
    let db_ih = colsum(&dgi);
    let db_hh = colsum(&dgh);
    let dx = want_x.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        gemm(
            MatRef::dense(&dgi, valid, g3),
            MatRef::dense_t(w.w_ih.data(), d_in, g3),
            &mut dx[..valid * d_in],
            false,
        );
        dx
    });
    GruGrads { dx, dw_ih, dw_hh, db_ih, db_hh }
}
