//! Cross-modal attention blocks.
//!
//! Rows of the first argument attend over rows of the second. `key_mask`
//! marks which rows of the second argument may receive weight; masked rows
//! get an additive −∞ logit.

use std::fmt;
use std::str::FromStr;

use fian_numerics::{ParamId, Scalar, Session, Var};

use crate::error::{FianError, Result};
use crate::nn::{Init, LayerNorm, Linear};

/// Which attention sits inside each encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Multi-head attention filtered by the information gate.
    FullCga,
    /// Multi-head attention without the gate.
    CmaOnly,
    /// Single-space dot-product attention.
    SoftAttention,
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::FullCga => "full-cga",
            AblationMode::CmaOnly => "cma-only",
            AblationMode::SoftAttention => "soft",
        })
    }
}

impl FromStr for AblationMode {
    type Err = FianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-cga" => Ok(AblationMode::FullCga),
            "cma-only" => Ok(AblationMode::CmaOnly),
            "soft" => Ok(AblationMode::SoftAttention),
            _ => Err(FianError::Config(format!("unknown ablation mode {s:?}"))),
        }
    }
}

/// Where layer normalization sits relative to each residual connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `LN(x + f(x))`.
    Post,
    /// `x + f(LN(x))`.
    Pre,
}

/// Multi-head scaled dot-product attention. Head `i` uses columns
/// `i·d_k .. (i+1)·d_k` of the query, key and value projections.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl MultiHead {
    pub fn new(init: &mut Init, name: &str, d_h: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_h.is_multiple_of(heads) {
            return Err(FianError::Config(format!("d_h = {d_h} is not divisible by heads = {heads}")));
        }
        Ok(Self {
            w_q: init.weight(&format!("{name}.w_q"), d_h, d_h)?,
            w_k: init.weight(&format!("{name}.w_k"), d_h, d_h)?,
            w_v: init.weight(&format!("{name}.w_v"), d_h, d_h)?,
            w_o: init.weight(&format!("{name}.w_o"), d_h, d_h)?,
            heads,
        })
    }

    /// Output and the per-head attention weight matrices (`n_q × n_v` each).
    pub fn forward_with_weights<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let d_h = q.cols();
        let d_k = d_h / self.heads;
        let qp = q.matmul(&s.param(self.w_q))?;
        let kp = v.matmul(&s.param(self.w_k))?;
        let vp = v.matmul(&s.param(self.w_v))?;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let cols = (i * d_k, (i + 1) * d_k);
            let logits = qp.slice_cols(cols.0, cols.1)?.matmul_t(&kp.slice_cols(cols.0, cols.1)?)?.scale(scale)?;
            let w = logits.softmax_rows_masked(key_mask)?;
            heads.push(w.matmul(&vp.slice_cols(cols.0, cols.1)?)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { s.graph().concat_cols(&heads)? };
        Ok((joined.matmul(&s.param(self.w_o))?, weights))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(s, q, v, key_mask)?.0)
    }
}

/// Gated multi-head attention. The gate and the content branch share their
/// projection weights and differ only in their biases:
/// `t = Q·W_q + CMA(Q,V)·W_v`, output `σ(t + b_g) ⊙ (t + b_i)`.
#[derive(Clone, Debug)]
pub struct Cga {
    pub cma: MultiHead,
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub b_g: ParamId,
    pub b_i: ParamId,
}

/// Intermediate values of one gated attention evaluation.
pub struct CgaParts<'g, T: Scalar> {
    pub attended: Var<'g, T>,
    pub gate: Var<'g, T>,
    pub content: Var<'g, T>,
    pub output: Var<'g, T>,
}

impl Cga {
    pub fn new(init: &mut Init, name: &str, d_h: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            cma: MultiHead::new(init, &format!("{name}.cma"), d_h, heads)?,
            w_q: init.weight(&format!("{name}.gate.w_q"), d_h, d_h)?,
            w_v: init.weight(&format!("{name}.gate.w_v"), d_h, d_h)?,
            b_g: init.constant(&format!("{name}.gate.b_g"), &[d_h], 0.0)?,
            b_i: init.constant(&format!("{name}.gate.b_i"), &[d_h], 0.0)?,
        })
    }

    pub fn forward_parts<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<CgaParts<'g, T>> {
        let attended = self.cma.forward(s, q, v, key_mask)?;
        let shared = q.matmul(&s.param(self.w_q))?.add(&attended.matmul(&s.param(self.w_v))?)?;
        let gate = shared.add_row_bias(&s.param(self.b_g))?.sigmoid()?;
        let content = shared.add_row_bias(&s.param(self.b_i))?;
        let output = gate.mul(&content)?;
        Ok(CgaParts { attended, gate, content, output })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_parts(s, q, v, key_mask)?.output)
    }
}

/// `softmax(Q·Vᵀ / sqrt(d_h)) · V` with no projections. Returns the output and
/// the weight matrix.
pub fn soft_attention<'g, T: Scalar>(
    q: Var<'g, T>,
    v: Var<'g, T>,
    key_mask: Option<&[bool]>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let w = q.matmul_t(&v)?.scale(scale)?.softmax_rows_masked(key_mask)?;
    Ok((w.matmul(&v)?, w))
}

#[derive(Clone, Debug)]
pub enum Attention {
    Gated(Cga),
    MultiHead(MultiHead),
    Soft,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, d_h: usize, heads: usize, mode: AblationMode) -> Result<Self> {
        Ok(match mode {
            AblationMode::FullCga => Attention::Gated(Cga::new(init, &format!("{name}.cga"), d_h, heads)?),
            AblationMode::CmaOnly => Attention::MultiHead(MultiHead::new(init, &format!("{name}.cma"), d_h, heads)?),
            AblationMode::SoftAttention => Attention::Soft,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        match self {
            Attention::Gated(c) => c.forward(s, q, v, key_mask),
            Attention::MultiHead(m) => m.forward(s, q, v, key_mask),
            Attention::Soft => Ok(soft_attention(q, v, key_mask)?.0),
        }
    }
}

/// Cross-modal encoder: attention sublayer then a position-wise ReLU
/// feed-forward sublayer, each wrapped in a residual connection and layer
/// norm. Produces one output row per row of its first argument.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: Attention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub placement: NormPlacement,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        d_h: usize,
        heads: usize,
        ffn_mult: usize,
        mode: AblationMode,
        placement: NormPlacement,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: Attention::new(init, name, d_h, heads, mode)?,
            ffn_in: Linear::new(init, &format!("{name}.ffn.in"), d_h, ffn_mult * d_h, true)?,
            ffn_out: Linear::new(init, &format!("{name}.ffn.out"), ffn_mult * d_h, d_h, true)?,
            norm_attn: LayerNorm::new(init, &format!("{name}.norm_attn"), d_h, eps)?,
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d_h, eps)?,
            placement,
        })
    }

    pub fn ffn<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let hidden = self.ffn_in.forward(s, x)?.relu()?;
        self.ffn_out.forward(s, hidden)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        match self.placement {
            NormPlacement::Post => {
                let y1 = self.norm_attn.forward(s, q.add(&self.attention.forward(s, q, v, key_mask)?)?)?;
                self.norm_ffn.forward(s, y1.add(&self.ffn(s, y1)?)?)
            }
            NormPlacement::Pre => {
                let normed = self.norm_attn.forward(s, q)?;
                let y1 = q.add(&self.attention.forward(s, normed, v, key_mask)?)?;
                Ok(y1.add(&self.ffn(s, self.norm_ffn.forward(s, y1)?)?)?)
            }
        }
    }
}
