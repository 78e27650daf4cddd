//! Strided temporal convolution. Each output row is one window of `kernel`
//! consecutive input rows flattened and dotted with every filter.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub len: usize,
    pub dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
    pub windows: usize,
}

/// Number of windows of width `kernel` placed every `stride` rows over a
/// sequence of `len` rows.
pub fn window_count(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    if len < kernel {
        return Err(Error::Config(format!("sequence length {len} is shorter than kernel {kernel}")));
    }
    Ok((len - kernel) / stride + 1)
}

pub(crate) fn conv1d_forward<T: Scalar>(
    seq: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    if seq.rank() != 2 {
        return Err(Error::InvalidShape { op: "conv1d", shape: seq.shape().to_vec(), reason: "sequence must be L×d".into() });
    }
    let (len, dim) = (seq.rows(), seq.cols());
    let windows = window_count(len, kernel, stride)?;
    let count = filters.shape().first().copied().unwrap_or(0);
    if count == 0 || filters.len() != count * kernel * dim || bias.len() != count {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: filters.shape().to_vec(),
            rhs: vec![count, kernel, dim],
        });
    }
    let geom = ConvGeometry { len, dim, kernel, stride, filters: count, windows };
    let span = kernel * dim;
    let view = window_view(seq.data(), &geom);
    let mut out = vec![T::zero(); windows * count];
    gemm(view, MatRef::dense_t(filters.data(), count, span), &mut out, false);
    for row in out.chunks_mut(count) {
        row.iter_mut().zip(bias.data()).for_each(|(o, &b)| *o = *o + b);
    }
    Ok((Tensor::matrix(windows, count, out)?, geom))
}

/// Overlapping windows as a `windows × (kernel·dim)` matrix without copying:
/// consecutive rows of a row-major sequence are contiguous, so window `w`
/// starts at `w·stride·dim`.
fn window_view<'a, T>(seq: &'a [T], geom: &ConvGeometry) -> MatRef<'a, T> {
    MatRef {
        data: seq,
        rows: geom.windows,
        cols: geom.kernel * geom.dim,
        row_stride: geom.stride * geom.dim,
        col_stride: 1,
    }
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv1d_backward<T: Scalar>(
    seq: &Tensor<T>,
    filters: &Tensor<T>,
    dy: &[T],
    geom: &ConvGeometry,
    want_seq: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let span = geom.kernel * geom.dim;
    let mut dfilt = vec![T::zero(); geom.filters * span];
    gemm(
        MatRef::dense_t(dy, geom.windows, geom.filters),
        window_view(seq.data(), geom),
        &mut dfilt,
        false,
    );
    let mut dbias = vec![T::zero(); geom.filters];
    for row in dy.chunks(geom.filters) {
        dbias.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
    }
    let dseq = want_seq.then(|| {
        let mut dwin = vec![T::zero(); geom.windows * span];
        gemm(MatRef::dense(dy, geom.windows, geom.filters), MatRef::dense(filters.data(), geom.filters, span), &mut dwin, false);
        let mut dseq = vec![T::zero(); geom.len * geom.dim];
        for (w, chunk) in dwin.chunks(span).enumerate() {
            let start = w * geom.stride * geom.dim;
            dseq[start..start + span].iter_mut().zip(chunk).for_each(|(d, &g)| *d = *d + g);
        }
        dseq
    });
    (dseq, dfilt, dbias)
}
