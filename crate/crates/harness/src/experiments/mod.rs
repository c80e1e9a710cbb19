//! The experiments. Each one turns a workbench and a config into rows.

mod ablate;
mod dynamic;
mod matrix;
mod shift;
mod timeline;

use std::collections::BTreeSet;
use std::time::Instant;

use log::info;
use timesteer::corpus::{Split, TemporalExample};
use timesteer::model::{HookSite, Model};
use timesteer::steering::{apply, SteeringVectorSet};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::report::{sort_rows, ExperimentReport, Row, BASELINE};
use crate::select::{add_scores, pick_alpha, sweep};
use crate::workbench::{correct, Workbench};

/// Rows of `cfg.experiment` for the workbench's seed.
pub fn run_on(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    cfg.validate()?;
    if !bench.serves(cfg) {
        return Err(HarnessError::usage(
            "workbench was built for a different corpus, model or training config",
        ));
    }
    let mut rows = match cfg.experiment {
        ExperimentKind::Matrix => matrix::run(bench, cfg),
        ExperimentKind::LabelShift => shift::label(bench, cfg),
        ExperimentKind::VocabShift => shift::vocab(bench, cfg),
        ExperimentKind::Timeline => timeline::run(bench, cfg),
        ExperimentKind::Dynamic => dynamic::run(bench, cfg),
        ExperimentKind::AblateRank => ablate::rank(bench, cfg),
        ExperimentKind::AblateSite => ablate::site(bench, cfg),
        ExperimentKind::AblateSize => ablate::size(bench, cfg),
    }?;
    sort_rows(&mut rows);
    Ok(rows)
}

/// Runs `cfg` for every seed with a fresh workbench each.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        info!("{}: seed {seed}", cfg.experiment);
        let mut bench = Workbench::new(cfg, seed)?;
        rows.extend(run_on(&mut bench, cfg)?);
    }
    Ok(ExperimentReport::new(cfg.clone(), rows, start.elapsed().as_secs_f64()))
}

/// Rows of one seed rebuilt from the report's config snapshot.
pub fn regenerate_rows(report: &ExperimentReport, seed: u64) -> Result<Vec<Row>> {
    let mut bench = Workbench::new(&report.config, seed)?;
    run_on(&mut bench, &report.config)
}

/// Seeds whose regenerated rows differ from the stored ones.
pub fn check_report(report: &ExperimentReport) -> Result<Vec<u64>> {
    let mut bad = Vec::new();
    for &seed in &report.config.seeds {
        let stored: Vec<&Row> = report.rows.iter().filter(|r| r.seed == seed).collect();
        let fresh = regenerate_rows(report, seed)?;
        if stored.len() != fresh.len() || stored.iter().zip(&fresh).any(|(a, b)| **a != *b) {
            bad.push(seed);
        }
    }
    Ok(bad)
}

/// Configured training periods, or every period.
fn train_periods(cfg: &ExperimentConfig, periods: &[i64]) -> Result<Vec<i64>> {
    match &cfg.train_periods {
        None => Ok(periods.to_vec()),
        Some(ps) => {
            if let Some(p) = ps.iter().find(|p| !periods.contains(p)) {
                return Err(HarnessError::usage(format!("corpus has no period {p}")));
            }
            Ok(ps.clone())
        }
    }
}

/// The first configured training period, or the earliest period.
fn first_train_period(cfg: &ExperimentConfig, periods: &[i64]) -> Result<i64> {
    train_periods(cfg, periods)?
        .first()
        .copied()
        .ok_or_else(|| HarnessError::data("corpus has no periods"))
}

fn need_periods(periods: &[i64], n: usize, what: &str) -> Result<()> {
    if periods.len() < n {
        return Err(HarnessError::data(format!(
            "{what} needs at least {n} periods, corpus has {}",
            periods.len()
        )));
    }
    Ok(())
}

fn frac(correct: usize, n: usize) -> f64 {
    correct as f64 / n as f64
}

/// α for source `s` from validation accuracy summed over `targets`, with
/// vectors given by `vector(bench, t)` on the validation pools. Returns the
/// α and its summed count of correct predictions.
fn select_with<F>(
    bench: &mut Workbench,
    cfg: &ExperimentConfig,
    s: i64,
    targets: &[i64],
    mut vector: F,
) -> Result<(f64, usize)>
where
    F: FnMut(&mut Workbench, i64) -> Result<SteeringVectorSet>,
{
    let model = bench.model(s)?;
    let mut scores = Vec::new();
    for &t in targets.iter().filter(|t| **t != s) {
        let set = vector(bench, t)?;
        let val = bench.slice(t, Split::Val)?;
        add_scores(&mut scores, &sweep(&model, &val, &set, &cfg.alpha_grid)?);
    }
    if scores.is_empty() {
        scores = vec![0; cfg.alpha_grid.len()];
    }
    let alpha = pick_alpha(&cfg.alpha_grid, &scores)?;
    let i = cfg.alpha_grid.iter().position(|a| *a == alpha).expect("alpha from grid");
    Ok((alpha, scores[i]))
}

/// α for mean-difference vectors at `sites`.
fn select_alpha(
    bench: &mut Workbench,
    cfg: &ExperimentConfig,
    s: i64,
    targets: &[i64],
    sites: &BTreeSet<HookSite>,
) -> Result<f64> {
    Ok(select_with(bench, cfg, s, targets, |b, t| b.vector(s, t, Split::Val, sites))?.0)
}

/// Sweep rows plus the selected row of one steered cell.
struct Cell<'a> {
    kind: ExperimentKind,
    s: i64,
    seed: u64,
    grid: &'a [f64],
    baseline: usize,
}

impl Cell<'_> {
    fn baseline_row(&self, n: usize) -> Row {
        let b = frac(self.baseline, n);
        Row::new(self.kind, self.s, BASELINE, self.seed, n, b, b)
    }

    /// Rows for `set` on `examples`; `decorate` fills the descriptive fields.
    #[allow(clippy::too_many_arguments)]
    fn steered(
        &self,
        model: &Model,
        examples: &[TemporalExample],
        set: &SteeringVectorSet,
        method: &str,
        selected_alpha: Option<f64>,
        decorate: impl Fn(Row) -> Row,
        rows: &mut Vec<Row>,
    ) -> Result<()> {
        let n = examples.len();
        let base = frac(self.baseline, n);
        let counts = sweep(model, examples, set, self.grid)?;
        for (a, c) in self.grid.iter().zip(&counts) {
            let r = Row::new(self.kind, self.s, method, self.seed, n, frac(*c, n), base).alpha(*a, false);
            rows.push(decorate(r));
        }
        if let Some(alpha) = selected_alpha {
            let i = self
                .grid
                .iter()
                .position(|a| *a == alpha)
                .expect("selected alpha comes from the grid");
            let r = Row::new(self.kind, self.s, method, self.seed, n, frac(counts[i], n), base).alpha(alpha, true);
            rows.push(decorate(r));
        }
        Ok(())
    }

    /// The single row of `set` at a fixed, selected α.
    fn at_alpha(
        &self,
        model: &Model,
        examples: &[TemporalExample],
        set: &SteeringVectorSet,
        method: &str,
        alpha: f64,
    ) -> Result<Row> {
        let n = examples.len();
        let c = correct(model, examples, &apply(set, alpha)?)?;
        Ok(Row::new(self.kind, self.s, method, self.seed, n, frac(c, n), frac(self.baseline, n)).alpha(alpha, true))
    }
}
