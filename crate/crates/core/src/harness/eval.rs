//! Inference over a split, the prediction export and ranking metrics.

use std::io::Write;
use std::path::Path;

use fian_numerics::{ParamStore, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoders::Vocabulary;
use crate::error::{FianError, Result};
use crate::harness::data::{Annotation, Sample};
use crate::localizer::{rank_metrics, MetricTable, Segment};
use crate::model::{Fian, ModelInput};

/// Frame coordinates are snapped to a 1e-9 grid before scoring so that the
/// in-process metrics and those recomputed from exported seconds agree.
fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn snap_segment(s: Segment) -> Segment {
    Segment::new(snap(s.start), snap(s.end))
}

/// One exported line: the query id and its ranked `[start_s, end_s, score]`
/// triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predictions: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: MetricTable,
    pub records: Vec<PredictionRecord>,
}

pub fn prepare<T: Scalar>(cfg: &ModelConfig, vocab: &Vocabulary, samples: &[Sample]) -> Result<Vec<(ModelInput<T>, Segment)>> {
    samples
        .iter()
        .map(|s| {
            let ids = vocab.encode(&s.tokens, cfg.unknown_to_pad)?;
            let input = ModelInput::new(&ids, cfg.max_n_q, s.features.cast(), s.duration)
                .map_err(|e| FianError::Input(format!("{}: {e}", s.id)))?;
            Ok((input, s.gt()))
        })
        .collect()
}

/// Ranked predictions for prepared inputs, in frame coordinates.
pub fn predict_all<T: Scalar>(
    model: &Fian,
    store: &ParamStore<T>,
    inputs: &[(ModelInput<T>, Segment)],
    keep_n: usize,
) -> Result<Vec<Vec<(Segment, f64)>>> {
    inputs
        .iter()
        .map(|(input, _)| {
            Ok(model.predict(store, input, keep_n)?.into_iter().map(|(s, c)| (snap_segment(s), c)).collect())
        })
        .collect()
}

pub fn metrics_of(preds: &[Vec<(Segment, f64)>], gts: &[Segment], ns: &[usize], ms: &[f64]) -> Result<MetricTable> {
    let segs: Vec<Vec<Segment>> = preds.iter().map(|p| p.iter().map(|(s, _)| *s).collect()).collect();
    rank_metrics(&segs, gts, ns, ms)
}

pub fn evaluate<T: Scalar>(
    model: &Fian,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    samples: &[Sample],
    ns: &[usize],
    ms: &[f64],
) -> Result<Evaluation> {
    let inputs = prepare::<T>(&model.cfg, vocab, samples)?;
    let keep_n = ns.iter().copied().max().unwrap_or(1);
    let preds = predict_all(model, store, &inputs, keep_n)?;
    let gts: Vec<Segment> = inputs.iter().map(|(_, g)| *g).collect();
    let table = metrics_of(&preds, &gts, ns, ms)?;
    let n_v = model.cfg.n_v;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| PredictionRecord {
            id: s.id.clone(),
            predictions: p
                .iter()
                .map(|(seg, score)| {
                    let (a, b) = seg.to_seconds(n_v, s.duration);
                    [a, b, *score]
                })
                .collect(),
        })
        .collect();
    Ok(Evaluation { table, records })
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| FianError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| FianError::io(path, e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FianError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FianError::Annotation {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Metrics from an exported prediction file against annotations. Times are
/// mapped back onto the `n_v` frame grid through each video's duration.
pub fn metrics_from_export(
    records: &[PredictionRecord],
    annotations: &[Annotation],
    n_v: usize,
    ns: &[usize],
    ms: &[f64],
) -> Result<MetricTable> {
    let by_id: std::collections::HashMap<&str, &PredictionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut preds = Vec::with_capacity(annotations.len());
    let mut gts = Vec::with_capacity(annotations.len());
    for a in annotations {
        let p = by_id.get(a.id.as_str()).map_or_else(Vec::new, |r| {
            r.predictions
                .iter()
                .map(|[s, e, c]| (snap_segment(Segment::from_seconds(*s, *e, n_v, a.duration)), *c))
                .collect()
        });
        preds.push(p);
        gts.push(Segment::new(a.start as f64, a.end as f64));
    }
    metrics_of(&preds, &gts, ns, ms)
}
