//! Central finite differences as an oracle for the reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step and error floor used for every check.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub step: f64,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h) − f(x − h)) / 2h` for element `index` of `x`.
pub fn central_difference(
    x: &mut Tensor<f64>,
    index: usize,
    step: f64,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    let orig = x.data()[index];
    x.data_mut()[index] = orig + step;
    let plus = eval(x);
    x.data_mut()[index] = orig - step;
    let minus = eval(x);
    x.data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckOutcome {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the reverse pass of the scalar function `f` at `inputs`.
///
/// `f` is re-evaluated on fresh graphs with constant inputs for the
/// numeric side, so the oracle never touches the backward rules.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], settings: FdSettings, f: F) -> Result<GradCheckOutcome>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = out.value().item();
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut worst: f64 = 0.0;
        for j in 0..work[i].len() {
            let mut x = work[i].clone();
            let numeric = central_difference(&mut x, j, settings.step, |xi| {
                let saved = std::mem::replace(&mut work[i], xi.clone());
                let v = eval(&work);
                work[i] = saved;
                v
            })?;
            worst = worst.max(relative_error(analytic.data()[j], numeric, settings.floor));
        }
        per_input.push(worst);
    }
    Ok(GradCheckOutcome { per_input })
}

/// Worst relative error observed for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `[-hi, -margin] ∪ [margin, hi]` shifted by `center`, keeping
/// finite differences away from a kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], center: f64, margin: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.gen_range(margin..hi);
        center + if rng.gen_bool(0.5) { mag } else { -mag }
    })
}

/// Contracts an output with fixed pseudo-random weights so every element
/// contributes a distinct gradient.
fn contract<'g>(out: Var<'g, f64>, salt: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(&out.graph().constant(w))?.sum()
}

/// Finite-difference checks over every primitive of the tape, on random
/// shapes with extents in `1..=5` drawn from `seed`.
pub fn primitive_suite(seed: u64, settings: FdSettings) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..=5usize);
    let salt = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>| -> Result<()> {
        let r = check_gradients(&inputs, settings, |g, v| f(g, v))?;
        out.push(OpCheck { name, max_error: r.max_error() });
        Ok(())
    };

    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    run("matmul", vec![uniform(&mut rng, &[m, k], -1.0, 1.0), uniform(&mut rng, &[k, n], -1.0, 1.0)], &|_, v| {
        contract(v[0].matmul(&v[1])?, salt)
    })?;
    run("matmul_t", vec![uniform(&mut rng, &[m, k], -1.0, 1.0), uniform(&mut rng, &[n, k], -1.0, 1.0)], &|_, v| {
        contract(v[0].matmul_t(&v[1])?, salt)
    })?;
    let pair = vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)];
    run("add", pair.clone(), &|_, v| contract(v[0].add(&v[1])?, salt))?;
    run("sub", pair.clone(), &|_, v| contract(v[0].sub(&v[1])?, salt))?;
    run("mul", pair.clone(), &|_, v| contract(v[0].mul(&v[1])?, salt))?;
    run("add_row_bias", vec![pair[0].clone(), uniform(&mut rng, &[n], -1.0, 1.0)], &|_, v| {
        contract(v[0].add_row_bias(&v[1])?, salt)
    })?;
    run("add_col_bias", vec![pair[0].clone(), uniform(&mut rng, &[m], -1.0, 1.0)], &|_, v| {
        contract(v[0].add_col_bias(&v[1])?, salt)
    })?;
    run("affine", vec![pair[0].clone()], &|_, v| contract(v[0].affine(-1.7, 0.3)?, salt))?;
    let wide = uniform(&mut rng, &[m, n], -3.0, 3.0);
    run("sigmoid", vec![wide.clone()], &|_, v| contract(v[0].sigmoid()?, salt))?;
    run("tanh", vec![wide.clone()], &|_, v| contract(v[0].tanh()?, salt))?;
    run("relu", vec![off_kink(&mut rng, &[m, n], 0.0, 0.05, 2.0)], &|_, v| contract(v[0].relu()?, salt))?;
    run("ln", vec![uniform(&mut rng, &[m, n], 0.2, 3.0)], &|_, v| contract(v[0].ln()?, salt))?;
    run("clamp", vec![off_kink(&mut rng, &[m, n], 0.0, 0.05, 1.0)], &|_, v| {
        contract(v[0].clamp(-0.5, 0.5)?, salt)
    })?;
    run("smooth_l1", vec![off_kink(&mut rng, &[m, n], 0.0, 0.0, 3.0)], &|_, v| {
        contract(v[0].smooth_l1()?, salt)
    })?;
    run("softmax_rows", vec![wide.clone()], &|_, v| contract(v[0].softmax_rows()?, salt))?;
    let mask: Vec<bool> = (0..n).map(|j| j == 0 || rng.gen_bool(0.6)).collect();
    run("softmax_rows_masked", vec![wide.clone()], &|_, v| {
        contract(v[0].softmax_rows_masked(Some(&mask))?, salt)
    })?;
    let ln_in = uniform(&mut rng, &[m, n.max(2)], -2.0, 2.0);
    let d = n.max(2);
    run(
        "layer_norm",
        vec![ln_in, uniform(&mut rng, &[d], 0.5, 1.5), uniform(&mut rng, &[d], -0.5, 0.5)],
        &|_, v| contract(v[0].layer_norm(&v[1], &v[2], 1e-5)?, salt),
    )?;
    let k2 = dim(&mut rng);
    run("concat_cols", vec![pair[0].clone(), uniform(&mut rng, &[m, k2], -1.0, 1.0)], &|g, v| {
        contract(g.concat_cols(&[v[0], v[1]])?, salt)
    })?;
    run("concat_rows", vec![pair[0].clone(), uniform(&mut rng, &[k2, n], -1.0, 1.0)], &|g, v| {
        contract(g.concat_rows(&[v[0], v[1]])?, salt)
    })?;
    let (c0, r0) = (rng.gen_range(0..n), rng.gen_range(0..m));
    run("slice_cols", vec![pair[0].clone()], &|_, v| contract(v[0].slice_cols(c0, n)?, salt))?;
    run("slice_rows", vec![pair[0].clone()], &|_, v| contract(v[0].slice_rows(r0, m)?, salt))?;
    run("transpose", vec![pair[0].clone()], &|_, v| contract(v[0].transpose()?, salt))?;
    run("reshape", vec![pair[0].clone()], &|_, v| contract(v[0].reshape(&[n * m])?, salt))?;
    let idx: Vec<usize> = (0..k2 + 1).map(|_| rng.gen_range(0..m)).collect();
    run("gather_rows", vec![pair[0].clone()], &|_, v| contract(v[0].gather_rows(&idx)?, salt))?;
    run("sum", vec![pair[0].clone()], &|_, v| v[0].sum())?;
    run("mean", vec![pair[0].clone()], &|_, v| v[0].mean())?;

    let (kernel, feat, filters) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let stride = rng.gen_range(1..=3);
    let len = kernel + rng.gen_range(0..=5);
    run(
        "conv1d",
        vec![
            uniform(&mut rng, &[len, feat], -1.0, 1.0),
            uniform(&mut rng, &[filters, kernel, feat], -1.0, 1.0),
            uniform(&mut rng, &[filters], -1.0, 1.0),
        ],
        &|_, v| contract(v[0].conv1d(&v[1], &v[2], kernel, stride)?, salt),
    )?;

    let (steps, d_in, hidden) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let gru_inputs = vec![
        uniform(&mut rng, &[steps, d_in], -1.0, 1.0),
        uniform(&mut rng, &[d_in, 3 * hidden], -0.8, 0.8),
        uniform(&mut rng, &[hidden, 3 * hidden], -0.8, 0.8),
        uniform(&mut rng, &[3 * hidden], -0.5, 0.5),
        uniform(&mut rng, &[3 * hidden], -0.5, 0.5),
    ];
    let valid = rng.gen_range(1..=steps);
    for (name, reverse) in [("gru_sequence_forward", false), ("gru_sequence_reverse", true)] {
        run(name, gru_inputs.clone(), &|g, v| {
            contract(g.gru_sequence(v[0], v[1], v[2], v[3], v[4], reverse, Some(valid))?, salt)
        })?;
    }
    let mut cell_inputs = gru_inputs.clone();
    cell_inputs[0] = uniform(&mut rng, &[1, d_in], -1.0, 1.0);
    cell_inputs.push(uniform(&mut rng, &[1, hidden], -1.0, 1.0));
    run("gru_cell", cell_inputs, &|_, v| contract(crate::cell::gru_cell(v[0], v[5], v[1], v[2], v[3], v[4])?, salt))?;
    Ok(out)
}
