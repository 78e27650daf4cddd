//! Candidate windows, their scoring heads, training losses, inference and
//! ranking metrics.
//!
//! Frames are numbered from 1. A window `(ŝ, ê)` covers frames `ŝ..=ê` and is
//! compared with other segments as the continuous interval `[ŝ, ê]`.

use std::fmt;

use fian_numerics::{window_count, ParamId, Scalar, Session, Tensor, Var};

use crate::config::{ModelConfig, OffsetTargets, StrideRule};
use crate::error::{FianError, Result};
use crate::nn::{BiGru, Init};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Seconds covered by frames `start..=end` of an `n_v`-frame grid.
    pub fn to_seconds(self, n_v: usize, duration: f64) -> (f64, f64) {
        let n = n_v as f64;
        ((self.start - 1.0) / n * duration, self.end / n * duration)
    }

    /// Inverse of [`Segment::to_seconds`].
    pub fn from_seconds(start_s: f64, end_s: f64, n_v: usize, duration: f64) -> Self {
        let n = n_v as f64;
        Self { start: start_s / duration * n + 1.0, end: end_s / duration * n }
    }
}

/// Intersection over union of two intervals.
pub fn compute_iou(a: Segment, b: Segment) -> Result<f64> {
    if !(a.len() > 0.0 && b.len() > 0.0) {
        return Err(FianError::Input(format!("degenerate segment in IoU: {a:?}, {b:?}")));
    }
    let overlap = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    Ok(overlap / (a.len() + b.len() - overlap))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    pub kernel: usize,
    pub stride: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub kernel: usize,
}

impl Window {
    pub fn segment(&self) -> Segment {
        Segment::new(self.start as f64, self.end as f64)
    }
}

/// Scales that fit in `n_v` frames, plus a message for each skipped kernel.
pub fn scales(n_v: usize, kernels: &[usize], rule: StrideRule) -> (Vec<Scale>, Vec<String>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for &kernel in kernels {
        let stride = rule.stride(kernel);
        match window_count(n_v, kernel, stride) {
            Ok(count) => out.push(Scale { kernel, stride, count }),
            Err(_) => skipped.push(format!("kernel size {kernel} exceeds n_v = {n_v}; scale skipped")),
        }
    }
    (out, skipped)
}

/// Every candidate window, scale-major then by start frame.
pub fn enumerate_windows(n_v: usize, kernels: &[usize], rule: StrideRule) -> Vec<Window> {
    let (scales, skipped) = scales(n_v, kernels, rule);
    for message in skipped {
        log::warn!("{message}");
    }
    windows_of(&scales)
}

pub fn windows_of(scales: &[Scale]) -> Vec<Window> {
    scales
        .iter()
        .flat_map(|sc| {
            (0..sc.count).map(move |w| {
                let start = 1 + w * sc.stride;
                Window { start, end: start + sc.kernel - 1, kernel: sc.kernel }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub iou: f64,
    pub positive: bool,
    /// Start and end regression targets; positives only.
    pub target: Option<(f64, f64)>,
}

/// IoU of each window with the ground truth; positives have IoU strictly
/// above `tau`.
pub fn label_candidates(windows: &[Window], gt: Segment, tau: f64, targets: OffsetTargets) -> Result<Vec<Label>> {
    windows
        .iter()
        .map(|w| {
            let iou = compute_iou(w.segment(), gt)?;
            let positive = iou > tau;
            let unit = match targets {
                OffsetTargets::Frames => 1.0,
                OffsetTargets::WindowNormalized => w.segment().len(),
            };
            let target = positive.then(|| ((gt.start - w.start as f64) / unit, (gt.end - w.end as f64) / unit));
            Ok(Label { iou, positive, target })
        })
        .collect()
}

pub const CONFIDENCE_EPS: f64 = 1e-7;

/// Cross-entropy between confidences `cs` (`W × 1`, in (0,1)) and IoU
/// targets, averaged separately over positives and negatives and summed.
/// An empty partition contributes zero.
pub fn alignment_loss<'g, T: Scalar>(cs: Var<'g, T>, labels: &[Label]) -> Result<Var<'g, T>> {
    if cs.rows() != labels.len() || cs.cols() != 1 {
        return Err(FianError::Input(format!("{:?} confidences for {} labels", cs.shape(), labels.len())));
    }
    let g = cs.graph();
    let n_pos = labels.iter().filter(|l| l.positive).count();
    let n_neg = labels.len() - n_pos;
    let col = |f: &dyn Fn(&Label) -> f64| {
        Tensor::from_fn(vec![labels.len(), 1], |i| T::from_f64(f(&labels[i])))
    };
    let o = g.constant(col(&|l| l.iou));
    let not_o = g.constant(col(&|l| 1.0 - l.iou));
    let weight = g.constant(col(&|l| if l.positive { -1.0 / n_pos as f64 } else { -1.0 / n_neg as f64 }));
    let cs = cs.clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS)?;
    let term = o.mul(&cs.ln()?)?.add(&not_o.mul(&cs.affine(-1.0, 1.0)?.ln()?)?)?;
    Ok(term.mul(&weight)?.sum()?)
}

/// Mean over positives of the smooth-L1 error of both predicted offsets
/// (`offsets` is `W × 2`). Zero without positives.
pub fn boundary_loss<'g, T: Scalar>(offsets: Var<'g, T>, labels: &[Label]) -> Result<Var<'g, T>> {
    if offsets.rows() != labels.len() || offsets.cols() != 2 {
        return Err(FianError::Input(format!("{:?} offsets for {} labels", offsets.shape(), labels.len())));
    }
    let g = offsets.graph();
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].positive).collect();
    if pos.is_empty() {
        return Ok(offsets.scale(0.0)?.sum()?);
    }
    let targets: Vec<T> = pos
        .iter()
        .flat_map(|&i| {
            let (a, b) = labels[i].target.expect("positives carry targets");
            [T::from_f64(a), T::from_f64(b)]
        })
        .collect();
    let diff = offsets.gather_rows(&pos)?.sub(&g.constant(Tensor::matrix(pos.len(), 2, targets)?))?;
    Ok(diff.smooth_l1()?.sum()?.scale(1.0 / pos.len() as f64)?)
}

pub fn total_loss<'g, T: Scalar>(align: Var<'g, T>, boundary: Var<'g, T>, alpha: f64) -> Result<Var<'g, T>> {
    Ok(align.add(&boundary.scale(alpha)?)?)
}

/// A scored window with its predicted offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub window: Window,
    pub score: f64,
    pub offsets: (f64, f64),
}

/// Applies predicted offsets, clamps into `[1, n_v]` and falls back to the
/// window itself when the result collapses.
pub fn refine_boundaries(c: &Candidate, n_v: usize, targets: OffsetTargets) -> Segment {
    let w = c.window.segment();
    let unit = match targets {
        OffsetTargets::Frames => 1.0,
        OffsetTargets::WindowNormalized => w.len(),
    };
    let hi = n_v as f64;
    let start = (w.start + c.offsets.0 * unit).clamp(1.0, hi);
    let end = (w.end + c.offsets.1 * unit).clamp(1.0, hi);
    if end > start && start.is_finite() && end.is_finite() {
        Segment::new(start, end)
    } else {
        w
    }
}

/// Greedy non-maximum suppression by descending score. Keeps at most
/// `keep_n`; a segment is dropped when its IoU with a kept one exceeds
/// `threshold`.
pub fn nms(items: &[(Segment, f64)], keep_n: usize, threshold: f64) -> Vec<(Segment, f64)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(a.cmp(&b)));
    let mut kept: Vec<(Segment, f64)> = Vec::new();
    for i in order {
        if kept.len() == keep_n {
            break;
        }
        let (seg, score) = items[i];
        if kept.iter().all(|(k, _)| compute_iou(*k, seg).map_or(true, |o| o <= threshold)) {
            kept.push((seg, score));
        }
    }
    kept
}

/// Recall at each `(n, m)`: the fraction of queries with at least one of
/// their top-`n` predictions above IoU `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    /// `values[i][j]` is Rank@ns[i], IoU@ms[j].
    pub values: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        let j = self.ms.iter().position(|&x| (x - m).abs() < 1e-12)?;
        Some(self.values[i][j])
    }
}

impl fmt::Display for MetricTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, n) in self.ns.iter().enumerate() {
            for (j, m) in self.ms.iter().enumerate() {
                if !first {
                    write!(f, "  ")?;
                }
                first = false;
                write!(f, "R@{n},IoU={m}: {:.4}", self.values[i][j])?;
            }
        }
        Ok(())
    }
}

pub fn rank_metrics(predictions: &[Vec<Segment>], gts: &[Segment], ns: &[usize], ms: &[f64]) -> Result<MetricTable> {
    if predictions.len() != gts.len() {
        return Err(FianError::Input(format!("{} prediction lists for {} queries", predictions.len(), gts.len())));
    }
    let total = gts.len().max(1) as f64;
    let mut values = vec![vec![0.0; ms.len()]; ns.len()];
    for (preds, gt) in predictions.iter().zip(gts) {
        let ious: Vec<f64> = preds.iter().map(|p| compute_iou(*p, *gt)).collect::<Result<_>>()?;
        for (i, &n) in ns.iter().enumerate() {
            let best = ious.iter().take(n).copied().fold(f64::NEG_INFINITY, f64::max);
            for (j, &m) in ms.iter().enumerate() {
                if best > m {
                    values[i][j] += 1.0;
                }
            }
        }
    }
    values.iter_mut().flatten().for_each(|v| *v /= total);
    Ok(MetricTable { ns: ns.to_vec(), ms: ms.to_vec(), values })
}

#[derive(Clone, Debug)]
struct ScaleHead {
    scale: Scale,
    score_filters: ParamId,
    score_bias: ParamId,
    offset_filters: ParamId,
    offset_bias: ParamId,
}

/// Contextual GRU over the fused sequence and one score convolution
/// (`C_f = 1`) plus one offset convolution (`C_f = 2`) per scale.
#[derive(Clone, Debug)]
pub struct LocalizerHeads {
    pub gru: BiGru,
    heads: Vec<ScaleHead>,
    windows: Vec<Window>,
}

impl LocalizerHeads {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_h;
        let gru = BiGru::new(init, "localizer.gru", 2 * d, d, cfg.gru_sizing)?;
        let (scales, skipped) = scales(cfg.n_v, &cfg.kernel_sizes, cfg.stride);
        for message in skipped {
            log::warn!("{message}");
        }
        let mut heads = Vec::new();
        for sc in &scales {
            let k = sc.kernel;
            let name = format!("localizer.k{k}");
            heads.push(ScaleHead {
                scale: *sc,
                score_filters: init.uniform(&format!("{name}.score.filters"), &[1, k, d], k * d, 1)?,
                score_bias: init.constant(&format!("{name}.score.bias"), &[1], 0.0)?,
                offset_filters: init.uniform(&format!("{name}.offset.filters"), &[2, k, d], k * d, 2)?,
                offset_bias: init.constant(&format!("{name}.offset.bias"), &[2], 0.0)?,
            });
        }
        let windows = windows_of(&scales);
        Ok(Self { gru, heads, windows })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn scales(&self) -> Vec<Scale> {
        self.heads.iter().map(|h| h.scale).collect()
    }

    /// Score logits (`W × 1`) and offsets (`W × 2`) over the contextual
    /// sequence, rows aligned with [`LocalizerHeads::windows`].
    pub fn score<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, m_hat: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut offsets = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (k, st) = (h.scale.kernel, h.scale.stride);
            let l = m_hat.conv1d(&s.param(h.score_filters), &s.param(h.score_bias), k, st)?;
            let o = m_hat.conv1d(&s.param(h.offset_filters), &s.param(h.offset_bias), k, st)?;
            if l.rows() != h.scale.count {
                return Err(FianError::Input(format!(
                    "kernel {k}: convolution produced {} windows, enumeration has {}",
                    l.rows(),
                    h.scale.count
                )));
            }
            logits.push(l);
            offsets.push(o);
        }
        let g = s.graph();
        let join = |v: Vec<Var<'g, T>>| if v.len() == 1 { Ok(v[0]) } else { g.concat_rows(&v) };
        Ok((join(logits)?, join(offsets)?))
    }

    /// Runs the contextual GRU over the fused sequence `m`, then scores.
    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, m: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let m_hat = self.gru.forward(s, m, None)?;
        self.score(s, m_hat)
    }
}

/// Pairs scored windows with their values read off the graph.
pub fn candidates<T: Scalar>(windows: &[Window], logits: &Tensor<T>, offsets: &Tensor<T>) -> Vec<Candidate> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| Candidate {
            window: *w,
            score: fian_numerics::sigmoid(logits.data()[i].as_f64()),
            offsets: (offsets.at(i, 0).as_f64(), offsets.at(i, 1).as_f64()),
        })
        .collect()
}

/// Refines, suppresses and returns the top-`keep_n` predictions.
pub fn predict(cands: &[Candidate], n_v: usize, targets: OffsetTargets, keep_n: usize, threshold: f64) -> Vec<(Segment, f64)> {
    let refined: Vec<(Segment, f64)> = cands.iter().map(|c| (refine_boundaries(c, n_v, targets), c.score)).collect();
    nms(&refined, keep_n, threshold)
}
