//! Label-shift and vocabulary-shift series.

use std::collections::BTreeSet;

use timesteer::corpus::{
    label_shift_series, total_variation, vocab_shift_series, ShiftSlice, Split, TemporalExample,
};
use timesteer::model::{HookSite, Interventions, Model};
use timesteer::numerics::derive_seed;
use timesteer::steering::{capture, steering_from_captures, SteeringVectorSet};

use super::{first_train_period, need_periods, Cell};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::report::Row;
use crate::select::{add_scores, pick_alpha, sweep};
use crate::workbench::{correct, restrict, Captures, Workbench};

/// Vector from the `s` pool of `split` to `examples`; the pool itself gives
/// the zero vector exactly.
fn vector_to(
    bench: &mut Workbench,
    model: &Model,
    s: i64,
    split: Split,
    sites: &BTreeSet<HookSite>,
    target: &ShiftSlice,
    unshifted: bool,
) -> Result<SteeringVectorSet> {
    let src = restrict(&*bench.captures(s, s, split)?, sites)?;
    let tgt: Captures = if unshifted {
        src.clone()
    } else {
        capture(model, &target.examples, sites)?
    };
    Ok(steering_from_captures(
        &src,
        &tgt,
        s,
        target.period,
        model.content_hash(),
    )?)
}

struct Series {
    test: Vec<ShiftSlice>,
    val: Vec<ShiftSlice>,
    /// Shift magnitude per step.
    shift: Vec<f64>,
    /// Whether step `i` is the unshifted source pool itself.
    unshifted: Vec<bool>,
}

fn run_series(
    bench: &mut Workbench,
    cfg: &ExperimentConfig,
    kind: ExperimentKind,
    s: i64,
    series: Series,
) -> Result<Vec<Row>> {
    let model = bench.model(s)?;
    let sites = cfg.resolve_sites(&bench.model_config)?;
    let pool = cfg.extraction_pool.split();
    let seed = bench.seed;

    let mut val_scores = Vec::new();
    let mut vectors = Vec::new();
    for (i, (test, val)) in series.test.iter().zip(&series.val).enumerate() {
        let pool_slice = if pool == Split::Val { val } else { test };
        let set = vector_to(bench, &model, s, pool, &sites, pool_slice, series.unshifted[i])?;
        if !series.unshifted[i] {
            let val_set = if pool == Split::Val {
                set.clone()
            } else {
                vector_to(bench, &model, s, Split::Val, &sites, val, false)?
            };
            add_scores(&mut val_scores, &sweep(&model, &val.examples, &val_set, &cfg.alpha_grid)?);
        }
        vectors.push(set);
    }
    if val_scores.is_empty() {
        val_scores = vec![0; cfg.alpha_grid.len()];
    }
    let alpha = pick_alpha(&cfg.alpha_grid, &val_scores)?;

    let mut rows = Vec::new();
    for (i, (slice, set)) in series.test.iter().zip(&vectors).enumerate() {
        let examples: &[TemporalExample] = &slice.examples;
        let cell = Cell {
            kind,
            s,
            seed,
            grid: &cfg.alpha_grid,
            baseline: correct(&model, examples, &Interventions::new())?,
        };
        let (t, shift) = (slice.period, series.shift[i]);
        rows.push(cell.baseline_row(examples.len()).eval(t).step(i, shift));
        cell.steered(&model, examples, set, "mean_diff", Some(alpha), |r| r.eval(t).step(i, shift), &mut rows)?;
    }
    Ok(rows)
}

/// Increasingly skewed label priors on the training period's own test split.
pub(super) fn label(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let s = first_train_period(cfg, &bench.periods())?;
    let k = bench.corpus.n_classes;
    let sh = &cfg.shift;
    let mk = |bench: &mut Workbench, split: Split| -> Result<Vec<ShiftSlice>> {
        let slice = bench.slice(s, split)?;
        Ok(label_shift_series(
            &slice,
            k,
            sh.class,
            sh.steps,
            sh.max_weight,
            derive_seed(bench.seed, &format!("label-shift/{}", split.as_str())),
        )?)
    };
    let test = mk(bench, Split::Test)?;
    let val = mk(bench, Split::Val)?;
    let shift = test
        .iter()
        .map(|x| total_variation(&x.target_priors, &test[0].target_priors))
        .collect();
    let unshifted = (0..test.len()).map(|i| i == 0).collect();
    let series = Series {
        test,
        val,
        shift,
        unshifted,
    };
    run_series(bench, cfg, ExperimentKind::LabelShift, s, series)
}

/// Every period at the training period's label prior.
pub(super) fn vocab(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let periods = bench.periods();
    need_periods(&periods, 2, "the vocabulary-shift series")?;
    let s = first_train_period(cfg, &periods)?;
    let mk = |bench: &Workbench, split: Split| {
        vocab_shift_series(
            &bench.corpus,
            s,
            split,
            derive_seed(bench.seed, &format!("vocab-shift/{}", split.as_str())),
        )
    };
    let test = mk(bench, Split::Test)?;
    let val = mk(bench, Split::Val)?;
    let shift = test.iter().map(|x| (x.period - s).abs() as f64).collect();
    let unshifted = test.iter().map(|x| x.period == s).collect();
    let series = Series {
        test,
        val,
        shift,
        unshifted,
    };
    run_series(bench, cfg, ExperimentKind::VocabShift, s, series)
}
