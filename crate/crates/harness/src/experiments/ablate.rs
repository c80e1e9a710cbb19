//! Rank, hook-site and extraction-pool-size ablations.
//!
//! All three train on the first training period and evaluate on every other
//! period.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::index::sample;
use timesteer::corpus::Split;
use timesteer::model::{all_sites, HookSite};
use timesteer::numerics::{derive_seed, seeded_rng, Matrix};
use timesteer::steering::{lowrank_from_captures, steering_from_captures, SteeringVectorSet};

use super::{first_train_period, need_periods, select_alpha, select_with, Cell};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::report::Row;
use crate::workbench::{restrict, Captures, Workbench};

struct Setup {
    s: i64,
    targets: Vec<i64>,
    sites: BTreeSet<HookSite>,
    pool: Split,
}

fn setup(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Setup> {
    let periods = bench.periods();
    need_periods(&periods, 2, "ablations")?;
    let s = first_train_period(cfg, &periods)?;
    Ok(Setup {
        s,
        targets: periods.into_iter().filter(|t| *t != s).collect(),
        sites: cfg.resolve_sites(&bench.model_config)?,
        pool: cfg.extraction_pool.split(),
    })
}

fn cell<'a>(bench: &mut Workbench, cfg: &'a ExperimentConfig, kind: ExperimentKind, s: i64, t: i64) -> Result<Cell<'a>> {
    Ok(Cell {
        kind,
        s,
        seed: bench.seed,
        grid: &cfg.alpha_grid,
        baseline: bench.baseline_correct(s, t, Split::Test)?,
    })
}

fn pair(bench: &mut Workbench, st: &Setup, t: i64, split: Split) -> Result<(Captures, Captures)> {
    Ok((
        restrict(&*bench.captures(st.s, st.s, split)?, &st.sites)?,
        restrict(&*bench.captures(st.s, t, split)?, &st.sites)?,
    ))
}

/// Ranks clamped to what every pool supports, deduplicated in order.
fn clamp_ranks(ranks: &[usize], max_k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &k in ranks {
        let c = k.min(max_k);
        if c != k {
            warn!("rank {k} clamped to {c}");
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Mean difference against rank-`k` denoised mean differences.
pub(super) fn rank(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    const KIND: ExperimentKind = ExperimentKind::AblateRank;
    let st = setup(bench, cfg)?;
    let model = bench.model(st.s)?;
    let hash = model.content_hash();
    let mut max_k = bench.model_config.d_model;
    for &t in st.targets.iter().chain([&st.s]) {
        for split in [st.pool, Split::Val] {
            max_k = max_k.min(bench.slice(t, split)?.len());
        }
    }
    let ranks = clamp_ranks(&cfg.ranks, max_k);
    let (s, targets) = (st.s, st.targets.clone());

    let build = |bench: &mut Workbench, t: i64, split: Split, k: Option<usize>| -> Result<SteeringVectorSet> {
        let (a, b) = pair(bench, &st, t, split)?;
        Ok(match k {
            None => steering_from_captures(&a, &b, s, t, hash)?,
            Some(k) => lowrank_from_captures(&a, &b, k, s, t, hash)?,
        })
    };
    let mut methods: Vec<(Option<usize>, f64)> = Vec::new();
    for k in std::iter::once(None).chain(ranks.iter().map(|k| Some(*k))) {
        let (alpha, _) = select_with(bench, cfg, s, &targets, |b, t| build(b, t, Split::Val, k))?;
        methods.push((k, alpha));
    }

    let mut rows = Vec::new();
    for &t in &targets {
        let test = bench.slice(t, Split::Test)?;
        let c = cell(bench, cfg, KIND, s, t)?;
        rows.push(c.baseline_row(test.len()).eval(t));
        for &(k, alpha) in &methods {
            let set = build(bench, t, st.pool, k)?;
            let (method, param) = match k {
                None => ("mean_diff", "full".to_string()),
                Some(k) => ("svd", k.to_string()),
            };
            c.steered(&model, &test, &set, method, Some(alpha), |r| r.eval(t).param(param.clone()), &mut rows)?;
        }
    }
    Ok(rows)
}

/// Every single hook site and the default site set.
pub(super) fn site(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    const KIND: ExperimentKind = ExperimentKind::AblateSite;
    let st = setup(bench, cfg)?;
    let model = bench.model(st.s)?;
    let (s, targets) = (st.s, st.targets.clone());
    let mut configs: Vec<(String, BTreeSet<HookSite>)> = all_sites(&bench.model_config)
        .into_iter()
        .map(|h| (h.to_string(), std::iter::once(h).collect()))
        .collect();
    configs.push(("default".into(), st.sites.clone()));

    let mut rows = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    for (ci, (label, sites)) in configs.iter().enumerate() {
        let (alpha, val_score) = select_with(bench, cfg, s, &targets, |b, t| b.vector(s, t, Split::Val, sites))?;
        let single = ci + 1 < configs.len();
        if single && best.is_none_or(|(_, b)| val_score >= b) {
            best = Some((ci, val_score));
        }
        for &t in &targets {
            let test = bench.slice(t, Split::Test)?;
            let c = cell(bench, cfg, KIND, s, t)?;
            if ci == 0 {
                rows.push(c.baseline_row(test.len()).eval(t));
            }
            let set = bench.vector(s, t, st.pool, sites)?;
            c.steered(&model, &test, &set, "mean_diff", Some(alpha), |r| r.eval(t).param(label.clone()), &mut rows)?;
        }
    }
    if let Some((ci, _)) = best {
        let label = &configs[ci].0;
        let picked: Vec<Row> = rows
            .iter()
            .filter(|r| r.selected && r.param.as_deref() == Some(label))
            .map(|r| Row {
                method: "best_site".into(),
                ..r.clone()
            })
            .collect();
        rows.extend(picked);
    }
    Ok(rows)
}

/// The rows of `m` at sorted random indices.
fn subsample(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| m.row(i)).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn subsample_all(c: &Captures, n: usize, seed: u64) -> Result<Captures> {
    let total = c.values().next().map(Matrix::rows).unwrap_or(0);
    let mut idx = sample(&mut seeded_rng(seed), total, n).into_vec();
    idx.sort_unstable();
    c.iter()
        .map(|(s, m)| Ok((*s, subsample(m, &idx)?)))
        .collect()
}

/// Extraction pools cut to a fixed size, repeated with different draws.
pub(super) fn size(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    const KIND: ExperimentKind = ExperimentKind::AblateSize;
    let st = setup(bench, cfg)?;
    let model = bench.model(st.s)?;
    let hash = model.content_hash();
    let (s, targets) = (st.s, st.targets.clone());
    let alpha = select_alpha(bench, cfg, s, &targets, &st.sites)?;
    let mut sizes: Vec<usize> = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();

    let mut rows = Vec::new();
    let mut skipped = BTreeSet::new();
    for &t in &targets {
        let test = bench.slice(t, Split::Test)?;
        let c = cell(bench, cfg, KIND, s, t)?;
        rows.push(c.baseline_row(test.len()).eval(t));
        let (src, tgt) = pair(bench, &st, t, st.pool)?;
        let full = steering_from_captures(&src, &tgt, s, t, hash)?;
        rows.push(c.at_alpha(&model, &test, &full, "mean_diff", alpha)?.eval(t).param("full"));

        let n_min = src.values().chain(tgt.values()).map(Matrix::rows).min().unwrap_or(0);
        for &n in &sizes {
            if n >= n_min {
                if skipped.insert(n) {
                    warn!("pool size {n} is not below the smallest pool ({n_min}); skipped");
                }
                continue;
            }
            for r in 0..cfg.size_repeats {
                let tag = format!("size/{n}/{r}");
                let a = subsample_all(&src, n, derive_seed(bench.seed, &format!("{tag}/source")))?;
                let b = subsample_all(&tgt, n, derive_seed(bench.seed, &format!("{tag}/target/{t}")))?;
                let set = steering_from_captures(&a, &b, s, t, hash)?;
                let row = c.at_alpha(&model, &test, &set, "mean_diff", alpha)?;
                rows.push(row.eval(t).param(n.to_string()).replicate(r));
            }
        }
    }
    Ok(rows)
}
