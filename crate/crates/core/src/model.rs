//! The full grounding model: encoders, iterative attention fusion and the
//! localization heads.

use fian_numerics::{Graph, ParamStore, Scalar, Session, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoders::{pad_query, QueryEncoder, VideoEncoder};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::localizer::{self, alignment_loss, boundary_loss, label_candidates, total_loss, Candidate, Segment, Window};
use crate::nn::Init;

/// One query/video pair ready for the model.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// Token ids padded to `max_n_q`.
    pub ids: Vec<usize>,
    pub valid: usize,
    /// Raw per-frame features, `raw_len × d_f`.
    pub features: Tensor<T>,
    pub duration: f64,
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(ids: &[usize], max_n_q: usize, features: Tensor<T>, duration: f64) -> Result<Self> {
        let (ids, valid) = pad_query(ids, max_n_q)?;
        Ok(Self { ids, valid, features, duration })
    }
}

pub struct ModelOutput<'g, T: Scalar> {
    /// Window logits, `W × 1`.
    pub logits: Var<'g, T>,
    /// Predicted start/end offsets, `W × 2`.
    pub offsets: Var<'g, T>,
}

impl<'g, T: Scalar> ModelOutput<'g, T> {
    pub fn confidences(&self) -> Result<Var<'g, T>> {
        Ok(self.logits.sigmoid()?)
    }
}

pub struct LossParts<'g, T: Scalar> {
    pub align: Var<'g, T>,
    pub boundary: Var<'g, T>,
    pub total: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Fian {
    pub cfg: ModelConfig,
    pub query: QueryEncoder,
    pub video: VideoEncoder,
    pub fusion: Fusion,
    pub localizer: localizer::LocalizerHeads,
}

impl Fian {
    /// Builds the model and its freshly initialized parameters (seeded by
    /// `cfg.seed`). Only components used by the configured modes register
    /// parameters.
    pub fn new(cfg: &ModelConfig, vocab_size: usize) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, cfg.seed);
        let model = Self {
            cfg: cfg.clone(),
            query: QueryEncoder::new(&mut init, cfg, vocab_size)?,
            video: VideoEncoder::new(&mut init, cfg)?,
            fusion: Fusion::new(&mut init, cfg)?,
            localizer: localizer::LocalizerHeads::new(&mut init, cfg)?,
        };
        Ok((model, store))
    }

    pub fn windows(&self) -> &[Window] {
        self.localizer.windows()
    }

    /// Fused `n_v × 2d_h` sequence.
    pub fn fuse<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, input: &ModelInput<T>) -> Result<Var<'g, T>> {
        let q = self.query.encode(s, &input.ids, input.valid)?;
        let v = self.video.encode(s, &input.features, input.duration)?;
        self.fusion.forward(s, &q, &v)
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, input: &ModelInput<T>) -> Result<ModelOutput<'g, T>> {
        let m = self.fuse(s, input)?;
        let (logits, offsets) = self.localizer.forward(s, m)?;
        Ok(ModelOutput { logits, offsets })
    }

    /// Training objective against a ground-truth segment in frame units.
    pub fn loss<'g, T: Scalar>(&self, out: &ModelOutput<'g, T>, gt: Segment) -> Result<LossParts<'g, T>> {
        let labels = label_candidates(self.windows(), gt, self.cfg.tau, self.cfg.offset_targets)?;
        let align = alignment_loss(out.confidences()?, &labels)?;
        let boundary = boundary_loss(out.offsets, &labels)?;
        let total = total_loss(align, boundary, self.cfg.alpha)?;
        Ok(LossParts { align, boundary, total })
    }

    /// Scored candidates for one input, without recording gradients.
    pub fn candidates<T: Scalar>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<Vec<Candidate>> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let out = self.forward(&s, input)?;
        let (logits, offsets) = (out.logits.to_tensor(), out.offsets.to_tensor());
        Ok(localizer::candidates(self.windows(), &logits, &offsets))
    }

    /// Top-`keep_n` refined segments after suppression, in score order.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, input: &ModelInput<T>, keep_n: usize) -> Result<Vec<(Segment, f64)>> {
        let cands = self.candidates(store, input)?;
        Ok(localizer::predict(&cands, self.cfg.n_v, self.cfg.offset_targets, keep_n, self.cfg.nms_threshold))
    }
}
