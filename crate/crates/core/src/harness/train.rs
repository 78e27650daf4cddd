//! Mini-batch training with Adam and early stopping on validation recall.

use std::time::Instant;

use fian_numerics::{Adam, AdamConfig, Graph, ParamStore, Scalar, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::Vocabulary;
use crate::error::{FianError, Result};
use crate::harness::data::Dataset;
use crate::harness::eval::{metrics_of, predict_all, prepare};
use crate::localizer::{MetricTable, Segment};
use crate::model::{Fian, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub align: f64,
    pub boundary: f64,
    /// Validation R@1, IoU=0.5 when a validation split exists.
    pub val_r1: Option<f64>,
    pub seconds: f64,
}

pub struct Trained<T> {
    pub model: Fian,
    pub store: ParamStore<T>,
    pub vocab: Vocabulary,
    pub history: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Vocabulary over the training queries.
pub fn vocabulary_for(data: &Dataset) -> Vocabulary {
    Vocabulary::from_tokens(data.train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
}

fn non_finite(epoch: usize, batch: usize, component: &str, e: impl std::fmt::Display) -> FianError {
    FianError::NonFinite { epoch, batch, component: component.into(), detail: e.to_string() }
}

/// Stage-tagged error: arithmetic failures become [`FianError::NonFinite`].
fn stage(epoch: usize, batch: usize, component: &str) -> impl Fn(FianError) -> FianError + '_ {
    move |e| if e.is_numerical() { non_finite(epoch, batch, component, &e) } else { e }
}

/// Loss and parameter gradients for one sample, accumulated into `store`
/// with weight `scale`. Returns (total, align, boundary).
pub fn accumulate_sample<T: Scalar>(
    model: &Fian,
    store: &mut ParamStore<T>,
    input: &ModelInput<T>,
    gt: Segment,
    scale: f64,
    at: (usize, usize),
) -> Result<(f64, f64, f64)> {
    let (epoch, batch) = at;
    let g = Graph::new();
    let (values, grads) = {
        let s = Session::new(&g, store);
        let out = model.forward(&s, input).map_err(stage(epoch, batch, "forward"))?;
        let parts = model.loss(&out, gt).map_err(stage(epoch, batch, "loss"))?;
        let item = |v: fian_numerics::Var<'_, T>| v.value().item().as_f64();
        let values = (item(parts.total), item(parts.align), item(parts.boundary));
        for (name, v) in [("total loss", values.0), ("alignment loss", values.1), ("boundary loss", values.2)] {
            if !v.is_finite() {
                return Err(non_finite(epoch, batch, name, v));
            }
        }
        let g_all = g.backward(parts.total).map_err(|e| stage(epoch, batch, "backward")(e.into()))?;
        (values, s.param_grads(&g_all))
    };
    let w = T::from_f64(scale);
    for (id, grad) in &grads {
        store.accumulate_grad(*id, grad, w)?;
    }
    Ok(values)
}

/// Validation R@1 at IoU 0.5.
pub fn recall_at_1<T: Scalar>(model: &Fian, store: &ParamStore<T>, inputs: &[(ModelInput<T>, Segment)]) -> Result<f64> {
    let preds = predict_all(model, store, inputs, 1)?;
    let gts: Vec<Segment> = inputs.iter().map(|(_, g)| *g).collect();
    let t: MetricTable = metrics_of(&preds, &gts, &[1], &[0.5])?;
    Ok(t.values[0][0])
}

/// Trains a fresh model. `log` receives one line per epoch.
pub fn train<T: Scalar>(cfg: &ModelConfig, data: &Dataset, log: &mut dyn FnMut(&str)) -> Result<Trained<T>> {
    let vocab = vocabulary_for(data);
    let (model, init) = Fian::new(cfg, vocab.len())?;
    train_from(model, init.cast(), vocab, data, log)
}

/// Continues training the given parameters.
pub fn train_from<T: Scalar>(
    model: Fian,
    mut store: ParamStore<T>,
    vocab: Vocabulary,
    data: &Dataset,
    log: &mut dyn FnMut(&str),
) -> Result<Trained<T>> {
    let cfg = model.cfg.clone();
    if data.train.is_empty() {
        return Err(FianError::Input("training split is empty".into()));
    }
    let train_set = prepare::<T>(&cfg, &vocab, &data.train)?;
    let val_set = prepare::<T>(&cfg, &vocab, &data.val)?;
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    log(&format!(
        "training {} parameters on {} samples ({} validation), {} windows per query",
        store.numel(),
        train_set.len(),
        val_set.len(),
        model.windows().len()
    ));
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (b, batch) in (1..).zip(order.chunks(cfg.batch_size)) {
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (input, gt) = &train_set[i];
                let (t, a, bl) = accumulate_sample(&model, &mut store, input, *gt, scale, (epoch, b))?;
                batch_loss += t * scale;
                sums = (sums.0 + t, sums.1 + a, sums.2 + bl);
            }
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(non_finite(epoch, b, "gradient", norm));
            }
            adam.step(&mut store)?;
            step_losses.push(batch_loss);
        }
        let n = train_set.len() as f64;
        let val_r1 = if val_set.is_empty() { None } else { Some(recall_at_1(&model, &store, &val_set)?) };
        let rec = EpochRecord {
            epoch,
            loss: sums.0 / n,
            align: sums.1 / n,
            boundary: sums.2 / n,
            val_r1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&format!(
            "epoch {:>3}  loss {:.5}  align {:.5}  boundary {:.5}  val R@1,IoU=0.5 {}  ({:.1}s)",
            rec.epoch,
            rec.loss,
            rec.align,
            rec.boundary,
            rec.val_r1.map_or("-".into(), |v| format!("{v:.4}")),
            rec.seconds
        ));
        history.push(rec);
        let score = val_r1.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score <= *b && val_r1.is_some() => {}
            _ => best = Some((score, epoch, store.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if val_r1.is_some() && epoch - best_epoch >= cfg.patience {
            log(&format!("early stop: no validation improvement for {} epochs", cfg.patience));
            break;
        }
    }
    let (best_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    Ok(Trained { model, store, vocab, history, step_losses, best_epoch })
}
