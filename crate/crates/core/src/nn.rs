//! Parameter initialization and the small layers shared by every module.

use fian_numerics::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GruSizing;
use crate::error::Result;

/// Registers parameters with deterministic initial values.
///
/// Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero,
/// layer-norm gains one.
pub struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-limit..limit));
        Ok(self.store.add(name, value)?)
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.uniform(name, &[rows, cols], rows, cols)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape.to_vec(), value))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), d_in, d_out)?;
        let bias = if bias { Some(init.constant(&format!("{name}.bias"), &[d_out], 0.0)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(&s.param(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add_row_bias(&s.param(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: init.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(&s.param(self.gain), &s.param(self.bias), self.eps)?)
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruDirection {
    fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: init.uniform(&format!("{name}.w_ih"), &[d_in, 3 * hidden], d_in, hidden)?,
            w_hh: init.uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], hidden, hidden)?,
            b_ih: init.constant(&format!("{name}.b_ih"), &[3 * hidden], 0.0)?,
            b_hh: init.constant(&format!("{name}.b_hh"), &[3 * hidden], 0.0)?,
        })
    }

    fn run<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
        reverse: bool,
        valid: Option<usize>,
    ) -> Result<Var<'g, T>> {
        let p = |id| s.param(id);
        Ok(s.graph().gru_sequence(x, p(self.w_ih), p(self.w_hh), p(self.b_ih), p(self.b_hh), reverse, valid)?)
    }
}

/// Bidirectional GRU whose output row `t` is `[forward_t ; backward_t]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    forward: GruDirection,
    backward: GruDirection,
    merge: Option<Linear>,
    pub d_out: usize,
}

impl BiGru {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, sizing: GruSizing) -> Result<Self> {
        let hidden = match sizing {
            GruSizing::Split => d_out / 2,
            GruSizing::Full => d_out,
        };
        let forward = GruDirection::new(init, &format!("{name}.fwd"), d_in, hidden)?;
        let backward = GruDirection::new(init, &format!("{name}.bwd"), d_in, hidden)?;
        let merge = match sizing {
            GruSizing::Split => None,
            GruSizing::Full => Some(Linear::new(init, &format!("{name}.merge"), 2 * hidden, d_out, true)?),
        };
        Ok(Self { forward, backward, merge, d_out })
    }

    /// Runs over the first `valid` rows (all rows when `None`); later rows of
    /// the output are zero unless a merge projection adds its bias.
    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
        valid: Option<usize>,
    ) -> Result<Var<'g, T>> {
        let f = self.forward.run(s, x, false, valid)?;
        let b = self.backward.run(s, x, true, valid)?;
        let both = s.graph().concat_cols(&[f, b])?;
        match &self.merge {
            Some(m) => m.forward(s, both),
            None => Ok(both),
        }
    }
}

/// `n × cols` constant whose row `i` is one for `i < valid` and zero after.
pub(crate) fn row_mask<T: Scalar>(rows: usize, cols: usize, valid: usize) -> Tensor<T> {
    Tensor::from_fn(vec![rows, cols], |i| if i / cols < valid { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fian_numerics::Graph;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let build = || {
            let mut store = ParamStore::new();
            let mut init = Init::new(&mut store, 9);
            Linear::new(&mut init, "l", 10, 6, true).unwrap();
            store
        };
        let (a, b) = (build(), build());
        let w = a.value(a.id("l.weight").unwrap());
        assert_eq!(w, b.value(b.id("l.weight").unwrap()));
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < limit));
        assert!(a.value(a.id("l.bias").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_output_width() {
        for (sizing, d_out) in [(GruSizing::Split, 6), (GruSizing::Full, 6)] {
            let mut store = ParamStore::new();
            let gru = BiGru::new(&mut Init::new(&mut store, 1), "g", 3, d_out, sizing).unwrap();
            let g = Graph::new();
            let s = Session::new(&g, &store);
            let x = s.input(Tensor::from_fn(vec![5, 3], |i| (i as f64 * 0.37).sin()));
            assert_eq!(gru.forward(&s, x, None).unwrap().shape(), vec![5, d_out]);
        }
    }
}
