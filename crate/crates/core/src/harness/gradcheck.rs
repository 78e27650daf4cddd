//! Finite-difference verification of every primitive and of each model
//! component on the tiny configuration.

use std::collections::HashMap;
use std::fmt;

use fian_numerics::gradcheck::{primitive_suite, relative_error, FdSettings};
use fian_numerics::{Graph, ParamId, ParamStore, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{soft_attention, AblationMode, Cga, EncoderBlock, MultiHead, NormPlacement};
use crate::config::{ModelConfig, VARIANTS};
use crate::encoders::{QueryEncoder, QueryRep, VideoEncoder, VideoRep};
use crate::error::Result;
use crate::fusion::{Fusion, FusionMode};
use crate::localizer::{alignment_loss, boundary_loss, label_candidates, LocalizerHeads, Segment};
use crate::model::{Fian, ModelInput};
use crate::nn::{row_mask, Init};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&CheckLine> {
        self.lines.iter().filter(|l| !(l.max_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check, seed {}, tolerance {:e}", self.seed, self.tolerance)?;
        for l in &self.lines {
            let verdict = if l.max_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<32} {:>10.3e} {:>6} {verdict}", l.name, l.max_error, l.checked)?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `f` with respect to every parameter of
/// `store` against central differences, sampling at most `per_tensor`
/// entries of each parameter. Returns the worst relative error and the
/// number of entries compared.
pub fn check_store<F>(store: &ParamStore<f64>, per_tensor: usize, seed: u64, settings: FdSettings, f: F) -> Result<(f64, usize)>
where
    F: for<'g, 's> Fn(&Session<'g, 's, f64>) -> Result<Var<'g, f64>>,
{
    let analytic: HashMap<ParamId, Tensor<f64>> = {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let loss = f(&s)?;
        let grads = g.backward(loss)?;
        s.param_grads(&grads).into_iter().collect()
    };
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let s = Session::frozen(&g, st);
        let v = f(&s)?.value().item();
        Ok(v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (id, p) in store.iter() {
        let n = p.value.len();
        let picks: Vec<usize> =
            if n <= per_tensor { (0..n).collect() } else { rand::seq::index::sample(&mut rng, n, per_tensor).into_vec() };
        for i in picks {
            let orig = p.value.data()[i];
            work.value_mut(id).data_mut()[i] = orig + settings.step;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - settings.step;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * settings.step);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(a, numeric, settings.floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Scalar `sum(x ⊙ R)` for a fixed random `R`, so every output entry carries
/// a distinct weight.
fn contract<'g>(x: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
    Ok(x.mul(&x.graph().constant(r))?.sum()?)
}

fn random_input(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    Ok(store.add(name, Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)))?)
}

/// Query-side input with `valid` real rows; later rows are zeroed.
fn query_rep<'g>(s: &Session<'g, '_, f64>, id: ParamId, valid: usize) -> Result<QueryRep<'g, f64>> {
    let h = s.param(id);
    let h = h.mul(&s.input(row_mask(h.rows(), h.cols(), valid)))?;
    Ok(QueryRep { h, valid })
}

struct Checker {
    seed: u64,
    settings: FdSettings,
    per_tensor: usize,
    lines: Vec<CheckLine>,
}

impl Checker {
    fn run<F>(&mut self, name: &str, store: &ParamStore<f64>, f: F) -> Result<()>
    where
        F: for<'g, 's> Fn(&Session<'g, 's, f64>) -> Result<Var<'g, f64>>,
    {
        let (max_error, checked) = check_store(store, self.per_tensor, self.seed, self.settings, f)?;
        self.lines.push(CheckLine { name: name.into(), max_error, checked });
        Ok(())
    }
}

/// Full report for one seed: primitives first, then model components on
/// the tiny configuration.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let settings = FdSettings::default();
    let mut lines: Vec<CheckLine> = primitive_suite(seed, settings)?
        .into_iter()
        .map(|c| CheckLine { name: c.name.to_string(), max_error: c.max_error, checked: 0 })
        .collect();
    let mut ck = Checker { seed, settings, per_tensor: 24, lines: Vec::new() };
    let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
    let (d, n_q, n_v) = (cfg.d_h, cfg.max_n_q, cfg.n_v);
    let valid = n_q - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mask: Vec<bool> = (0..n_q).map(|i| i < valid).collect();

    // attention blocks over explicit inputs
    {
        let mut store = ParamStore::new();
        let mha = MultiHead::new(&mut Init::new(&mut store, seed), "cma", d, cfg.heads)?;
        let q = random_input(&mut store, &mut rng, "input.q", &[n_v, d])?;
        let v = random_input(&mut store, &mut rng, "input.v", &[n_q, d])?;
        ck.run("cma", &store, |s| contract(mha.forward(s, s.param(q), s.param(v), Some(&mask))?, seed))?;
    }
    {
        let mut store = ParamStore::new();
        let cga = Cga::new(&mut Init::new(&mut store, seed), "cga", d, cfg.heads)?;
        let q = random_input(&mut store, &mut rng, "input.q", &[n_q, d])?;
        let v = random_input(&mut store, &mut rng, "input.v", &[n_v, d])?;
        ck.run("cga", &store, |s| contract(cga.forward(s, s.param(q), s.param(v), None)?, seed))?;
    }
    {
        let mut store = ParamStore::new();
        let q = random_input(&mut store, &mut rng, "input.q", &[n_q, d])?;
        let v = random_input(&mut store, &mut rng, "input.v", &[n_v, d])?;
        ck.run("soft_attention", &store, |s| contract(soft_attention(s.param(q), s.param(v), None)?.0, seed))?;
    }
    for (mode, placement, tag) in [
        (AblationMode::FullCga, NormPlacement::Post, "encoder_block[cga,post]"),
        (AblationMode::FullCga, NormPlacement::Pre, "encoder_block[cga,pre]"),
        (AblationMode::CmaOnly, NormPlacement::Post, "encoder_block[cma]"),
        (AblationMode::SoftAttention, NormPlacement::Post, "encoder_block[soft]"),
    ] {
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut Init::new(&mut store, seed), "enc", d, cfg.heads, cfg.ffn_mult, mode, placement, cfg.ln_eps)?;
        let q = random_input(&mut store, &mut rng, "input.q", &[n_v, d])?;
        let v = random_input(&mut store, &mut rng, "input.v", &[n_q, d])?;
        ck.run(tag, &store, |s| contract(block.forward(s, s.param(q), s.param(v), Some(&mask))?, seed))?;
    }

    // encoders
    let ids: Vec<usize> = (0..n_q).map(|i| if i < valid { 1 + (i * 3 + seed as usize) % 6 } else { 0 }).collect();
    let features = Tensor::from_fn(vec![12, cfg.d_f], |_| rng.gen_range(-1.0..1.0));
    {
        let mut store = ParamStore::new();
        let enc = QueryEncoder::new(&mut Init::new(&mut store, seed), &cfg, 7)?;
        ck.run("query_encoder", &store, |s| contract(enc.encode(s, &ids, valid)?.h, seed))?;
    }
    {
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut Init::new(&mut store, seed), &cfg)?;
        ck.run("video_encoder", &store, |s| contract(enc.encode(s, &features, 6.0)?.h, seed))?;
    }

    // fusion in every mode
    for mode in [
        FusionMode::Full,
        FusionMode::QvOnly,
        FusionMode::VqOnly,
        FusionMode::VqNoQuery,
        FusionMode::Concat,
        FusionMode::Matrix,
    ] {
        let mut store = ParamStore::new();
        let fcfg = ModelConfig { fusion: mode, ..cfg.clone() };
        let fusion = Fusion::new(&mut Init::new(&mut store, seed), &fcfg)?;
        let q = random_input(&mut store, &mut rng, "input.q", &[n_q, d])?;
        let v = random_input(&mut store, &mut rng, "input.v", &[n_v, d])?;
        ck.run(&format!("fusion[{mode}]"), &store, |s| {
            let qr = query_rep(s, q, valid)?;
            let vr = VideoRep { h: s.param(v), duration: 1.0 };
            contract(fusion.forward(s, &qr, &vr)?, seed)
        })?;
    }

    // localization heads and losses
    {
        let mut store = ParamStore::new();
        let heads = LocalizerHeads::new(&mut Init::new(&mut store, seed), &cfg)?;
        let m = random_input(&mut store, &mut rng, "input.m", &[n_v, 2 * d])?;
        ck.run("localizer", &store, |s| {
            let (l, o) = heads.forward(s, s.param(m))?;
            Ok(contract(l, seed)?.add(&contract(o, seed + 1)?)?)
        })?;
        let gt = Segment::new(2.0, 5.0);
        let labels = label_candidates(heads.windows(), gt, cfg.tau, cfg.offset_targets)?;
        let w = labels.len();
        let mut ls = ParamStore::new();
        let cs = ls.add("input.cs", Tensor::from_fn(vec![w, 1], |_| rng.gen_range(0.1..0.9)))?;
        let off = ls.add("input.offsets", Tensor::from_fn(vec![w, 2], |_| rng.gen_range(-2.0..2.0)))?;
        ck.run("alignment_loss", &ls, |s| alignment_loss(s.param(cs), &labels))?;
        ck.run("boundary_loss", &ls, |s| boundary_loss(s.param(off), &labels))?;
    }

    // whole model, every variant
    let input = ModelInput::new(&ids[..valid], n_q, features.clone(), 6.0)?;
    for (name, ablation, fusion) in VARIANTS {
        let vcfg = ModelConfig { ablation, fusion, ..cfg.clone() };
        let (model, store) = Fian::new(&vcfg, 7)?;
        ck.run(&format!("model[{name}]"), &store, |s| {
            let out = model.forward(s, &input)?;
            Ok(model.loss(&out, Segment::new(2.0, 5.0))?.total)
        })?;
    }

    lines.extend(ck.lines);
    Ok(GradcheckReport { seed, tolerance: TOLERANCE, lines })
}
