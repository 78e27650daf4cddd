//! Symmetric iterative attention and the video-enhanced integration that
//! produces the fused `n_v × 2d_h` sequence.

use std::fmt;
use std::str::FromStr;

use fian_numerics::{ParamId, Scalar, Session, Var};

use crate::attention::EncoderBlock;
use crate::config::ModelConfig;
use crate::encoders::{QueryRep, VideoRep};
use crate::error::{FianError, Result};
use crate::nn::{row_mask, Init, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Both branches, projected queries and the filter gate.
    Full,
    /// Query-video branch only, its pair duplicated.
    QvOnly,
    /// Video-query branch only, its pair duplicated.
    VqOnly,
    /// A single video-query encoder; its output is widened to `2d_h`.
    VqNoQuery,
    /// `[V1, V2]`.
    Concat,
    /// `[V1, V2, V1 − V2, V1 ⊙ V2]` projected to `2d_h`.
    Matrix,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Full => "full",
            FusionMode::QvOnly => "qv-only",
            FusionMode::VqOnly => "vq-only",
            FusionMode::VqNoQuery => "vq-no-query",
            FusionMode::Concat => "concat",
            FusionMode::Matrix => "matrix",
        })
    }
}

impl FromStr for FusionMode {
    type Err = FianError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => FusionMode::Full,
            "qv-only" => FusionMode::QvOnly,
            "vq-only" => FusionMode::VqOnly,
            "vq-no-query" => FusionMode::VqNoQuery,
            "concat" => FusionMode::Concat,
            "matrix" => FusionMode::Matrix,
            _ => return Err(FianError::Config(format!("unknown fusion mode {s:?}"))),
        })
    }
}

impl FusionMode {
    fn uses_qv(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::QvOnly | FusionMode::Concat | FusionMode::Matrix)
    }

    fn uses_vq_query(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::VqOnly)
    }

    fn uses_vq_video(self) -> bool {
        self != FusionMode::QvOnly
    }

    fn gated(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::QvOnly | FusionMode::VqOnly)
    }
}

/// Branch outputs; entries not computed by the active mode are `None`.
#[derive(Clone, Copy)]
pub struct BranchOutputs<'g, T: Scalar> {
    pub q1: Option<Var<'g, T>>,
    pub v1: Option<Var<'g, T>>,
    pub v2: Option<Var<'g, T>>,
    pub q2: Option<Var<'g, T>>,
}

/// Maps a fixed-length query sequence onto the video length:
/// `Q̂ = W·Q + b`, with `W` of shape `n_v × n_q` and `b` of length `n_v`
/// added to every feature column.
#[derive(Clone, Debug)]
pub struct QueryProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    n_q: usize,
}

impl QueryProjection {
    pub fn new(init: &mut Init, name: &str, n_v: usize, n_q: usize) -> Result<Self> {
        Ok(Self {
            weight: init.uniform(&format!("{name}.weight"), &[n_v, n_q], n_q, n_v)?,
            bias: init.constant(&format!("{name}.bias"), &[n_v], 0.0)?,
            n_q,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
        if q.rows() != self.n_q {
            return Err(FianError::Input(format!("query has {} rows, projection expects {}", q.rows(), self.n_q)));
        }
        Ok(s.param(self.weight).matmul(&q)?.add_col_bias(&s.param(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub qv_query: Option<EncoderBlock>,
    pub qv_video: Option<EncoderBlock>,
    pub vq_video: Option<EncoderBlock>,
    pub vq_query: Option<EncoderBlock>,
    pub project1: Option<QueryProjection>,
    pub project2: Option<QueryProjection>,
    pub filter: Option<Linear>,
    pub norm: Option<LayerNorm>,
    pub widen: Option<Linear>,
}

impl Fusion {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let mode = cfg.fusion;
        let d = cfg.d_h;
        let mut block = |name: &str, on: bool| -> Result<Option<EncoderBlock>> {
            on.then(|| {
                EncoderBlock::new(init, name, d, cfg.heads, cfg.ffn_mult, cfg.ablation, cfg.norm, cfg.ln_eps)
            })
            .transpose()
        };
        let qv_query = block("fusion.qv.query", mode.uses_qv())?;
        let qv_video = block("fusion.qv.video", mode.uses_qv())?;
        let vq_video = block("fusion.vq.video", mode.uses_vq_video())?;
        let vq_query = block("fusion.vq.query", mode.uses_vq_query())?;
        let gated = mode.gated();
        let project1 = (gated && mode != FusionMode::VqOnly)
            .then(|| QueryProjection::new(init, "fusion.project1", cfg.n_v, cfg.max_n_q))
            .transpose()?;
        let project2 = (gated && mode != FusionMode::QvOnly)
            .then(|| QueryProjection::new(init, "fusion.project2", cfg.n_v, cfg.max_n_q))
            .transpose()?;
        let filter = gated.then(|| Linear::new(init, "fusion.filter", 2 * d, 2 * d, true)).transpose()?;
        let norm = gated.then(|| LayerNorm::new(init, "fusion.norm", 2 * d, cfg.ln_eps)).transpose()?;
        let widen = match mode {
            FusionMode::Matrix => Some(Linear::new(init, "fusion.widen", 4 * d, 2 * d, true)?),
            FusionMode::VqNoQuery => Some(Linear::new(init, "fusion.widen", d, 2 * d, true)?),
            _ => None,
        };
        Ok(Self { mode, qv_query, qv_video, vq_video, vq_query, project1, project2, filter, norm, widen })
    }

    /// `Q1 = Enc(Q, V)`, `V1 = Enc(V, Q1)`.
    pub fn qv_branch<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: &QueryRep<'g, T>,
        v: &VideoRep<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (eq, ev) = (missing(&self.qv_query)?, missing(&self.qv_video)?);
        let q1 = mask_rows(s, eq.forward(s, q.h, v.h, None)?, q.valid)?;
        let v1 = ev.forward(s, v.h, q1, Some(&q.key_mask()))?;
        Ok((q1, v1))
    }

    /// `V2 = Enc(V, Q)`, `Q2 = Enc(Q, V2)`; `Q2` only when the mode uses it.
    pub fn vq_branch<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: &QueryRep<'g, T>,
        v: &VideoRep<'g, T>,
    ) -> Result<(Var<'g, T>, Option<Var<'g, T>>)> {
        let v2 = missing(&self.vq_video)?.forward(s, v.h, q.h, Some(&q.key_mask()))?;
        let q2 = match &self.vq_query {
            Some(e) => Some(mask_rows(s, e.forward(s, q.h, v2, None)?, q.valid)?),
            None => None,
        };
        Ok((v2, q2))
    }

    pub fn branches<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: &QueryRep<'g, T>,
        v: &VideoRep<'g, T>,
    ) -> Result<BranchOutputs<'g, T>> {
        let (q1, v1) = if self.mode.uses_qv() {
            let (a, b) = self.qv_branch(s, q, v)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let (v2, q2) = if self.mode.uses_vq_video() {
            let (a, b) = self.vq_branch(s, q, v)?;
            (Some(a), b)
        } else {
            (None, None)
        };
        Ok(BranchOutputs { q1, v1, v2, q2 })
    }

    /// Combines branch outputs into the `n_v × 2d_h` fused sequence.
    pub fn integrate<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, b: &BranchOutputs<'g, T>) -> Result<Var<'g, T>> {
        let g = s.graph();
        let need = |v: Option<Var<'g, T>>, what: &str| {
            v.ok_or_else(|| FianError::Input(format!("{what} is required by fusion mode {}", self.mode)))
        };
        match self.mode {
            FusionMode::Full | FusionMode::QvOnly | FusionMode::VqOnly => {
                let (v_hat, q_hat) = match self.mode {
                    FusionMode::Full => {
                        let p1 = missing(&self.project1)?.forward(s, need(b.q1, "Q1")?)?;
                        let p2 = missing(&self.project2)?.forward(s, need(b.q2, "Q2")?)?;
                        (g.concat_cols(&[need(b.v1, "V1")?, need(b.v2, "V2")?])?, g.concat_cols(&[p1, p2])?)
                    }
                    FusionMode::QvOnly => {
                        let (v1, p1) = (need(b.v1, "V1")?, missing(&self.project1)?.forward(s, need(b.q1, "Q1")?)?);
                        (g.concat_cols(&[v1, v1])?, g.concat_cols(&[p1, p1])?)
                    }
                    _ => {
                        let (v2, p2) = (need(b.v2, "V2")?, missing(&self.project2)?.forward(s, need(b.q2, "Q2")?)?);
                        (g.concat_cols(&[v2, v2])?, g.concat_cols(&[p2, p2])?)
                    }
                };
                let r = missing(&self.filter)?.forward(s, q_hat)?.sigmoid()?;
                missing(&self.norm)?.forward(s, v_hat.add(&r.mul(&q_hat)?)?)
            }
            FusionMode::Concat => Ok(g.concat_cols(&[need(b.v1, "V1")?, need(b.v2, "V2")?])?),
            FusionMode::Matrix => {
                let (v1, v2) = (need(b.v1, "V1")?, need(b.v2, "V2")?);
                let all = g.concat_cols(&[v1, v2, v1.sub(&v2)?, v1.mul(&v2)?])?;
                missing(&self.widen)?.forward(s, all)
            }
            FusionMode::VqNoQuery => missing(&self.widen)?.forward(s, need(b.v2, "V2")?),
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: &QueryRep<'g, T>,
        v: &VideoRep<'g, T>,
    ) -> Result<Var<'g, T>> {
        let b = self.branches(s, q, v)?;
        self.integrate(s, &b)
    }
}

fn missing<M>(m: &Option<M>) -> Result<&M> {
    m.as_ref().ok_or_else(|| FianError::Input("component not built for this fusion mode".into()))
}

fn mask_rows<'g, T: Scalar>(s: &Session<'g, '_, T>, x: Var<'g, T>, valid: usize) -> Result<Var<'g, T>> {
    if valid >= x.rows() {
        return Ok(x);
    }
    Ok(x.mul(&s.input(row_mask(x.rows(), x.cols(), valid)))?)
}
