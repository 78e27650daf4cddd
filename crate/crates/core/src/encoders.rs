//! Query and video encoders producing contextual `d_h`-wide sequences.

use std::collections::BTreeSet;
use std::collections::HashMap;

use fian_numerics::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::attention::MultiHead;
use crate::config::ModelConfig;
use crate::error::{FianError, Result};
use crate::nn::{row_mask, BiGru, Init, LayerNorm, Linear};

pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_ID: usize = 0;

/// Token to id mapping. Id 0 is the padding token and doubles as the
/// fallback for unknown words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from every distinct token, sorted.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != PAD_TOKEN).collect();
        let list = std::iter::once(PAD_TOKEN).chain(distinct).map(str::to_string).collect();
        Self::from_list(list).expect("distinct tokens")
    }

    /// Vocabulary whose id `i` is `list[i]`; `list[0]` must be the pad token.
    pub fn from_list(list: Vec<String>) -> Result<Self> {
        if list.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(FianError::Input(format!("vocabulary must start with {PAD_TOKEN}")));
        }
        let mut ids = HashMap::with_capacity(list.len());
        for (i, t) in list.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(FianError::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens: list, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn encode(&self, tokens: &[String], unknown_to_pad: bool) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| match self.id(t) {
                Some(i) => Ok(i),
                None if unknown_to_pad => Ok(PAD_ID),
                None => Err(FianError::Input(format!("token {t:?} is not in the vocabulary"))),
            })
            .collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_list(text.lines().map(str::to_string).collect())
    }
}

/// Pads (with [`PAD_ID`]) or rejects a query so that it has exactly `max_len`
/// ids. Returns the padded ids and the number of real tokens.
pub fn pad_query(ids: &[usize], max_len: usize) -> Result<(Vec<usize>, usize)> {
    if ids.is_empty() {
        return Err(FianError::Input("empty query".into()));
    }
    if ids.len() > max_len {
        return Err(FianError::Input(format!("query has {} tokens, the maximum is {max_len}", ids.len())));
    }
    let mut padded = ids.to_vec();
    padded.resize(max_len, PAD_ID);
    Ok((padded, ids.len()))
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(init: &mut Init, name: &str, vocab_size: usize, dim: usize) -> Result<Self> {
        let table = init.uniform(&format!("{name}.table"), &[vocab_size, dim], 1, dim)?;
        Ok(Self { table, vocab_size, dim })
    }

    /// Replaces the table with pretrained vectors (`vocab_size × dim`).
    pub fn load<T: Scalar>(&self, store: &mut ParamStore<T>, vectors: &Tensor<T>) -> Result<()> {
        if vectors.shape() != [self.vocab_size, self.dim] {
            return Err(FianError::Input(format!(
                "pretrained embeddings are {:?}, expected [{}, {}]",
                vectors.shape(),
                self.vocab_size,
                self.dim
            )));
        }
        *store.value_mut(self.table) = vectors.clone();
        Ok(())
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, ids: &[usize]) -> Result<Var<'g, T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(FianError::Input(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(s.param(self.table).gather_rows(ids)?)
    }
}

/// Contextual query representation: `h` is `len × d_h`, rows at or past
/// `valid` are zero.
#[derive(Clone, Copy)]
pub struct QueryRep<'g, T: Scalar> {
    pub h: Var<'g, T>,
    pub valid: usize,
}

impl<T: Scalar> QueryRep<'_, T> {
    /// Key mask admitting only real tokens.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.h.rows()).map(|i| i < self.valid).collect()
    }
}

#[derive(Clone, Copy)]
pub struct VideoRep<'g, T: Scalar> {
    pub h: Var<'g, T>,
    pub duration: f64,
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: Embedding,
    pub gru: BiGru,
}

impl QueryEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            embedding: Embedding::new(init, "query.embedding", vocab_size, cfg.d_emb)?,
            gru: BiGru::new(init, "query.gru", cfg.d_emb, cfg.d_h, cfg.gru_sizing)?,
        })
    }

    /// Encodes `ids`, of which the first `valid` are real tokens.
    pub fn encode<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, ids: &[usize], valid: usize) -> Result<QueryRep<'g, T>> {
        if valid == 0 || valid > ids.len() {
            return Err(FianError::Input(format!("query valid length {valid} outside 1..={}", ids.len())));
        }
        let h = self.gru.forward(s, self.embedding.forward(s, ids)?, Some(valid))?;
        let h = if valid < ids.len() { h.mul(&s.input(row_mask(h.rows(), h.cols(), valid)))? } else { h };
        Ok(QueryRep { h, valid })
    }
}

/// Row `i` of the resampled sequence is row `floor(i · raw_len / n_v)` of the
/// original; downsampling skips rows uniformly, upsampling repeats them.
pub fn resample_indices(raw_len: usize, n_v: usize) -> Vec<usize> {
    (0..n_v).map(|i| i * raw_len / n_v).collect()
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub project: Linear,
    pub self_attention: MultiHead,
    pub norm: LayerNorm,
    pub gru: BiGru,
    n_v: usize,
    d_f: usize,
}

impl VideoEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            project: Linear::new(init, "video.project", cfg.d_f, cfg.d_h, true)?,
            self_attention: MultiHead::new(init, "video.self_attention", cfg.d_h, cfg.heads)?,
            norm: LayerNorm::new(init, "video.norm", cfg.d_h, cfg.ln_eps)?,
            gru: BiGru::new(init, "video.gru", cfg.d_h, cfg.d_h, cfg.gru_sizing)?,
            n_v: cfg.n_v,
            d_f: cfg.d_f,
        })
    }

    /// Encodes raw per-frame features (`raw_len × d_f`) into `n_v × d_h`.
    pub fn encode<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        features: &Tensor<T>,
        duration: f64,
    ) -> Result<VideoRep<'g, T>> {
        if features.rank() != 2 || features.cols() != self.d_f {
            return Err(FianError::Input(format!(
                "video features are {:?}, expected [_, {}]",
                features.shape(),
                self.d_f
            )));
        }
        let grid = features.gather_rows(&resample_indices(features.rows(), self.n_v))?;
        let x = self.project.forward(s, s.input(grid))?;
        let attended = self.self_attention.forward(s, x, x, None)?;
        let x = self.norm.forward(s, x.add(&attended)?)?;
        Ok(VideoRep { h: self.gru.forward(s, x, None)?, duration })
    }
}
