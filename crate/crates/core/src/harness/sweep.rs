//! Trains one model per stride rule and tabulates the results side by side.

use crate::config::{ModelConfig, StrideRule};
use crate::error::{FianError, Result};
use crate::harness::data::Dataset;
use crate::harness::eval::evaluate;
use crate::harness::train::train;
use crate::localizer::{enumerate_windows, MetricTable};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub stride: StrideRule,
    pub windows: usize,
    pub best_epoch: usize,
    pub table: MetricTable,
}

/// Rows follow the order of `rules`; every run shares `cfg.seed`.
pub fn stride_sweep(cfg: &ModelConfig, data: &Dataset, rules: &[StrideRule], log: &mut dyn FnMut(&str)) -> Result<Vec<SweepRow>> {
    if rules.is_empty() {
        return Err(FianError::Config("no stride rules to sweep".into()));
    }
    let held_out = if data.test.is_empty() { &data.val } else { &data.test };
    let mut rows = Vec::with_capacity(rules.len());
    for &stride in rules {
        let run_cfg = ModelConfig { stride, ..cfg.clone() };
        log(&format!("stride {stride}"));
        let trained = train::<f32>(&run_cfg, data, log)?;
        let eval = evaluate(&trained.model, &trained.store, &trained.vocab, held_out, &cfg.rank_n, &cfg.rank_m)?;
        rows.push(SweepRow {
            stride,
            windows: enumerate_windows(cfg.n_v, &cfg.kernel_sizes, stride).len(),
            best_epoch: trained.best_epoch,
            table: eval.table,
        });
    }
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut out = format!("{:<10} {:>8}", "stride", "windows");
    for n in &first.table.ns {
        for m in &first.table.ms {
            out.push_str(&format!(" {:>12}", format!("R@{n},IoU={m}")));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<10} {:>8}", r.stride.to_string(), r.windows));
        for v in r.table.values.iter().flatten() {
            out.push_str(&format!(" {v:>12.4}"));
        }
        out.push('\n');
    }
    out
}
