//! Hyperparameters, presets and the flat `key = value` config format.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AblationMode, NormPlacement};
use crate::error::{FianError, Result};
use crate::fusion::FusionMode;

/// How the stride θ_s of each window scale is derived from its kernel θ_k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StrideRule {
    /// One frame regardless of kernel size.
    Frame,
    /// `max(1, round(ratio · θ_k))`.
    Ratio(f64),
}

impl StrideRule {
    pub fn stride(self, kernel: usize) -> usize {
        match self {
            StrideRule::Frame => 1,
            StrideRule::Ratio(r) => ((r * kernel as f64).round() as usize).max(1),
        }
    }
}

impl fmt::Display for StrideRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrideRule::Frame => write!(f, "frame"),
            StrideRule::Ratio(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for StrideRule {
    type Err = FianError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "frame" || s == "1" {
            return Ok(StrideRule::Frame);
        }
        let ratio = match s.split_once('/') {
            Some((a, b)) => parse_num::<f64>("stride", a)? / parse_num::<f64>("stride", b)?,
            None => parse_num("stride", s)?,
        };
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(FianError::Config(format!("stride ratio must be positive, got {s}")));
        }
        Ok(StrideRule::Ratio(ratio))
    }
}

/// Width of each GRU direction in the bidirectional encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GruSizing {
    /// `d_h / 2` per direction; concatenation is `d_h` wide.
    Split,
    /// `d_h` per direction, concatenation projected back to `d_h`.
    Full,
}

/// Units of the boundary-offset regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetTargets {
    Frames,
    /// Divided by the window length.
    WindowNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_h: usize,
    pub heads: usize,
    pub n_v: usize,
    pub max_n_q: usize,
    pub d_f: usize,
    pub d_emb: usize,
    pub ffn_mult: usize,
    pub kernel_sizes: Vec<usize>,
    pub stride: StrideRule,
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub ablation: AblationMode,
    pub fusion: FusionMode,
    pub norm: NormPlacement,
    pub gru_sizing: GruSizing,
    pub offset_targets: OffsetTargets,
    pub nms_threshold: f64,
    pub ln_eps: f64,
    pub unknown_to_pad: bool,
    pub rank_n: Vec<usize>,
    pub rank_m: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const PRESETS: [&str; 4] = ["desk", "activitynet", "tacos", "charades"];

/// Ablation variants by name, as (ablation, fusion).
pub const VARIANTS: [(&str, AblationMode, FusionMode); 8] = [
    ("fian", AblationMode::FullCga, FusionMode::Full),
    ("fian-soft", AblationMode::SoftAttention, FusionMode::VqNoQuery),
    ("fian-cma", AblationMode::CmaOnly, FusionMode::VqNoQuery),
    ("fian-vq", AblationMode::FullCga, FusionMode::VqNoQuery),
    ("fian-vqma", AblationMode::FullCga, FusionMode::VqOnly),
    ("fian-qvma", AblationMode::FullCga, FusionMode::QvOnly),
    ("fian-concat", AblationMode::FullCga, FusionMode::Concat),
    ("fian-matrix", AblationMode::FullCga, FusionMode::Matrix),
];

impl ModelConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_h: 64,
            heads: 4,
            n_v: 32,
            max_n_q: 12,
            d_f: 32,
            d_emb: 64,
            ffn_mult: 4,
            kernel_sizes: vec![8, 16],
            stride: StrideRule::Ratio(0.125),
            tau: 0.55,
            alpha: 0.005,
            lr: 1e-3,
            batch_size: 16,
            seed: 17,
            epochs: 60,
            patience: 10,
            ablation: AblationMode::FullCga,
            fusion: FusionMode::Full,
            norm: NormPlacement::Post,
            gru_sizing: GruSizing::Split,
            offset_targets: OffsetTargets::Frames,
            nms_threshold: 0.5,
            ln_eps: 1e-5,
            unknown_to_pad: true,
            rank_n: vec![1, 5],
            rank_m: vec![0.3, 0.5, 0.7],
        }
    }

    /// Smallest configuration exercising every component; used for
    /// finite-difference checks of the whole model.
    pub fn tiny() -> Self {
        Self { d_h: 8, heads: 2, n_v: 8, max_n_q: 4, d_f: 6, d_emb: 8, ffn_mult: 2, kernel_sizes: vec![4], ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let paper = |heads, n_v, d_f, kernels: &[usize], ratio, alpha, lr, batch| Self {
            d_h: 512,
            heads,
            n_v,
            max_n_q: 20,
            d_f,
            d_emb: 300,
            kernel_sizes: kernels.to_vec(),
            stride: StrideRule::Ratio(ratio),
            alpha,
            lr,
            batch_size: batch,
            ..Self::desk()
        };
        Ok(match name {
            "desk" => Self::desk(),
            "tiny" => Self::tiny(),
            "activitynet" => paper(8, 200, 4096, &[16, 32, 64, 96, 128, 160, 192], 0.25, 0.001, 8e-4, 128),
            "tacos" => paper(8, 200, 4096, &[8, 16, 32, 64], 0.125, 0.005, 4e-4, 64),
            "charades" => paper(4, 64, 1024, &[16, 24, 32, 40], 0.125, 0.005, 4e-4, 64),
            other => return Err(FianError::Config(format!("unknown preset {other:?}"))),
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_h / self.heads
    }

    /// Name of the variant matching the ablation switches, if any.
    pub fn variant(&self) -> Option<&'static str> {
        VARIANTS.iter().find(|(_, a, f)| *a == self.ablation && *f == self.fusion).map(|(n, _, _)| *n)
    }

    pub fn set_variant(&mut self, name: &str) -> Result<()> {
        let (_, a, f) = VARIANTS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| FianError::Config(format!("unknown variant {name:?}")))?;
        self.ablation = *a;
        self.fusion = *f;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FianError::Config(m));
        if self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return fail(format!("d_h = {} is not divisible by heads = {}", self.d_h, self.heads));
        }
        if self.gru_sizing == GruSizing::Split && !self.d_h.is_multiple_of(2) {
            return fail(format!("d_h = {} must be even to split across GRU directions", self.d_h));
        }
        for (name, v) in [("d_h", self.d_h), ("n_v", self.n_v), ("max_n_q", self.max_n_q), ("d_f", self.d_f)] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_emb == 0 || self.ffn_mult == 0 || self.batch_size == 0 {
            return fail("d_emb, ffn_mult and batch_size must be positive".into());
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return fail("kernel_sizes must be a nonempty list of positive sizes".into());
        }
        if !self.kernel_sizes.iter().any(|&k| k <= self.n_v) {
            return fail(format!("no kernel size fits n_v = {}", self.n_v));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.lr >= 0.0 && self.ln_eps > 0.0) {
            return fail("alpha and lr must be nonnegative, ln_eps positive".into());
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return fail("nms_threshold must lie in [0, 1]".into());
        }
        if self.rank_n.is_empty() || self.rank_n.contains(&0) || self.rank_m.is_empty() {
            return fail("rank_n and rank_m must be nonempty, rank_n positive".into());
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => *self = Self::preset(v)?,
            "variant" => self.set_variant(v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "n_v" => self.n_v = parse_num(key, v)?,
            "max_n_q" => self.max_n_q = parse_num(key, v)?,
            "d_f" => self.d_f = parse_num(key, v)?,
            "d_emb" => self.d_emb = parse_num(key, v)?,
            "ffn_mult" => self.ffn_mult = parse_num(key, v)?,
            "kernel_sizes" => self.kernel_sizes = parse_list(key, v)?,
            "stride" => self.stride = v.parse()?,
            "tau" => self.tau = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "norm" => {
                self.norm = match v {
                    "post" => NormPlacement::Post,
                    "pre" => NormPlacement::Pre,
                    _ => return Err(bad(key, v)),
                }
            }
            "gru_sizing" => {
                self.gru_sizing = match v {
                    "split" => GruSizing::Split,
                    "full" => GruSizing::Full,
                    _ => return Err(bad(key, v)),
                }
            }
            "offset_targets" => {
                self.offset_targets = match v {
                    "frames" => OffsetTargets::Frames,
                    "window" => OffsetTargets::WindowNormalized,
                    _ => return Err(bad(key, v)),
                }
            }
            "nms_threshold" => self.nms_threshold = parse_num(key, v)?,
            "ln_eps" => self.ln_eps = parse_num(key, v)?,
            "unknown_to_pad" => self.unknown_to_pad = parse_num(key, v)?,
            "rank_n" => self.rank_n = parse_list(key, v)?,
            "rank_m" => self.rank_m = parse_list(key, v)?,
            other => return Err(FianError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text. A `preset` line, wherever it appears, is applied
    /// before every other key.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its effective value, one per line, readable by
    /// [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let lines = [
            ("d_h", self.d_h.to_string()),
            ("heads", self.heads.to_string()),
            ("n_v", self.n_v.to_string()),
            ("max_n_q", self.max_n_q.to_string()),
            ("d_f", self.d_f.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("kernel_sizes", join(&self.kernel_sizes.iter().map(|k| k.to_string()).collect::<Vec<_>>())),
            ("stride", self.stride.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("ablation", self.ablation.to_string()),
            ("fusion", self.fusion.to_string()),
            ("norm", match self.norm { NormPlacement::Post => "post", NormPlacement::Pre => "pre" }.into()),
            ("gru_sizing", match self.gru_sizing { GruSizing::Split => "split", GruSizing::Full => "full" }.into()),
            (
                "offset_targets",
                match self.offset_targets { OffsetTargets::Frames => "frames", OffsetTargets::WindowNormalized => "window" }
                    .into(),
            ),
            ("nms_threshold", self.nms_threshold.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("unknown_to_pad", self.unknown_to_pad.to_string()),
            ("rank_n", join(&self.rank_n.iter().map(|k| k.to_string()).collect::<Vec<_>>())),
            ("rank_m", join(&self.rank_m.iter().map(|k| k.to_string()).collect::<Vec<_>>())),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn bad(key: &str, value: &str) -> FianError {
    FianError::Config(format!("invalid value {value:?} for {key}"))
}

pub(crate) fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn parse_list<N: FromStr>(key: &str, value: &str) -> Result<Vec<N>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FianError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
