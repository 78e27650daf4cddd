use crate::error::Result;
use crate::graph::Var;
use crate::scalar::Scalar;

/// One GRU step assembled from primitive graph operations.
///
/// `x` is `1 × d_in`, `h_prev` is `1 × H`; weights use the same
/// `[reset | update | candidate]` column layout as
/// [`Graph::gru_sequence`](crate::Graph::gru_sequence), which fuses this
/// recurrence over a whole sequence.
pub fn gru_cell<'g, T: Scalar>(
    x: Var<'g, T>,
    h_prev: Var<'g, T>,
    w_ih: Var<'g, T>,
    w_hh: Var<'g, T>,
    b_ih: Var<'g, T>,
    b_hh: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let hidden = h_prev.cols();
    let gi = x.matmul(&w_ih)?.add_row_bias(&b_ih)?;
    let gh = h_prev.matmul(&w_hh)?.add_row_bias(&b_hh)?;
    let r = gi.slice_cols(0, hidden)?.add(&gh.slice_cols(0, hidden)?)?.sigmoid()?;
    let z = gi.slice_cols(hidden, 2 * hidden)?.add(&gh.slice_cols(hidden, 2 * hidden)?)?.sigmoid()?;
    let n = gi
        .slice_cols(2 * hidden, 3 * hidden)?
        .add(&r.mul(&gh.slice_cols(2 * hidden, 3 * hidden)?)?)?
        .tanh()?;
    // (1 - z)·n + z·h = n + z·(h - n)
    n.add(&z.mul(&h_prev.sub(&n)?)?)
}
