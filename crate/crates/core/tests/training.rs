use fian_core::harness::data::Dataset;
use fian_core::harness::eval::prepare;
use fian_core::harness::train::{accumulate_sample, train, train_from, vocabulary_for};
use fian_core::localizer::Segment;
use fian_core::model::{Fian, ModelInput};
use fian_core::{FianError, ModelConfig};
use fian_numerics::{Adam, AdamConfig, Graph, ParamStore, Session};

mod common;
use common::{small_config, small_data};

fn quiet(_: &str) {}

fn without_val(data: &Dataset) -> Dataset {
    Dataset { train: data.train.clone(), val: Vec::new(), test: Vec::new() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = without_val(&small_data().data);
    let cfg = ModelConfig { lr: 0.0, epochs: 1, ..small_config() };
    let vocab = vocabulary_for(&data);
    let (model, init) = Fian::new(&cfg, vocab.len()).unwrap();
    let trained = train_from(model, init.clone(), vocab, &data, &mut quiet).unwrap();
    for ((_, a), (_, b)) in init.iter().zip(trained.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

fn batch_loss(model: &Fian, store: &ParamStore<f64>, batch: &[(ModelInput<f64>, Segment)]) -> f64 {
    batch
        .iter()
        .map(|(input, gt)| {
            let g = Graph::new();
            let s = Session::frozen(&g, store);
            let out = model.forward(&s, input).unwrap();
            let v = model.loss(&out, *gt).unwrap().total.value().item();
            v
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Loss on one frozen batch after each of `steps` Adam updates.
fn frozen_batch_curve(seed: u64, steps: usize) -> Vec<f64> {
    let data = small_data().data;
    let cfg = ModelConfig { seed, lr: 1e-4, ..small_config() };
    let vocab = vocabulary_for(&data);
    let (model, mut store) = Fian::new(&cfg, vocab.len()).unwrap();
    let start = (seed as usize * 8) % (data.train.len() - 8);
    let batch = prepare::<f64>(&cfg, &vocab, &data.train[start..start + 8]).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut curve = vec![batch_loss(&model, &store, &batch)];
    for _ in 0..steps {
        store.zero_grads();
        for (input, gt) in &batch {
            accumulate_sample(&model, &mut store, input, *gt, 1.0 / 8.0, (1, 1)).unwrap();
        }
        adam.step(&mut store).unwrap();
        curve.push(batch_loss(&model, &store, &batch));
    }
    curve
}

#[test]
fn small_steps_on_a_frozen_batch_reduce_the_loss() {
    let curves: Vec<Vec<f64>> = (0..20).map(|seed| frozen_batch_curve(seed, 10)).collect();
    let first_step = curves.iter().filter(|c| c[1] < c[0]).count();
    let monotone = curves.iter().filter(|c| c.windows(2).all(|w| w[1] <= w[0])).count();
    assert!(first_step >= 19, "one step lowered the loss for {first_step}/20 seeds");
    assert!(monotone >= 19, "loss was non-increasing for {monotone}/20 seeds");
}

#[test]
fn f64_training_is_reproducible() {
    let data = small_data().data;
    let cfg = small_config();
    let a = train::<f64>(&cfg, &data, &mut quiet).unwrap();
    let b = train::<f64>(&cfg, &data, &mut quiet).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.history.iter().map(|h| h.val_r1).collect::<Vec<_>>(), b.history.iter().map(|h| h.val_r1).collect::<Vec<_>>());
    for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn training_logs_each_epoch_and_keeps_the_best() {
    let data = small_data().data;
    let cfg = ModelConfig { epochs: 3, ..small_config() };
    let mut lines = Vec::new();
    let t = train::<f32>(&cfg, &data, &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(t.history.len(), 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("epoch")).count(), 3);
    assert!(t.history.iter().all(|h| h.loss.is_finite() && h.val_r1.is_some()));
    let best = t.history.iter().map(|h| h.val_r1.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(t.history[t.best_epoch - 1].val_r1, Some(best));
    assert_eq!(t.step_losses.len(), 3 * data.train.len().div_ceil(cfg.batch_size));
}

#[test]
fn non_finite_parameters_abort_with_location() {
    let data = without_val(&small_data().data);
    let cfg = small_config();
    let vocab = vocabulary_for(&data);
    let (model, mut store) = Fian::new(&cfg, vocab.len()).unwrap();
    let id = store.id("video.project.weight").unwrap();
    store.value_mut(id).data_mut()[0] = f64::NAN;
    match train_from(model, store, vocab, &data, &mut quiet) {
        Err(FianError::NonFinite { epoch, batch, component, .. }) => {
            assert_eq!((epoch, batch), (1, 1));
            assert!(!component.is_empty());
        }
        other => panic!("expected a non-finite error, got {:?}", other.err()),
    }
}

#[test]
fn empty_training_split_is_rejected() {
    let data = Dataset { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    assert!(train::<f32>(&small_config(), &data, &mut quiet).is_err());
}
