//! Summaries of report rows used by the directional checks.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::report::Row;
use crate::stats::{binomial_upper_p, mean, spearman};

fn mean_where(rows: &[Row], pred: impl Fn(&Row) -> bool, what: &str) -> Result<f64> {
    let xs: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.accuracy).collect();
    if xs.is_empty() {
        return Err(HarnessError::data(format!("no rows for {what}")));
    }
    Ok(mean(&xs))
}

/// Mean sweep delta per (α, step) over seeds, for α with the given sign.
fn sweep_means(rows: &[Row], positive: bool) -> BTreeMap<(i64, usize), (f64, Vec<f64>)> {
    let mut acc: BTreeMap<(i64, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let (Some(a), Some(step)) = (r.alpha, r.step) else {
            continue;
        };
        if r.selected || r.method != "mean_diff" || (a > 0.0) != positive {
            continue;
        }
        let key = ((a * 1e6).round() as i64, step);
        let e = acc.entry(key).or_default();
        e.0.push(r.delta);
        e.1.extend(r.shift);
    }
    acc.into_iter()
        .map(|(k, (d, s))| (k, (mean(&d), s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftCurve {
    pub alpha: f64,
    /// Mean shift magnitude per step.
    pub shift: Vec<f64>,
    /// Mean delta over seeds per step.
    pub delta: Vec<f64>,
}

impl ShiftCurve {
    pub fn last_delta(&self) -> f64 {
        *self.delta.last().expect("non-empty curve")
    }

    pub fn spearman(&self) -> Option<f64> {
        spearman(&self.shift, &self.delta)
    }
}

/// Per-α curves of mean delta over steps, for one sign of α.
pub fn shift_curves(rows: &[Row], positive: bool) -> Vec<ShiftCurve> {
    let means = sweep_means(rows, positive);
    let mut curves: BTreeMap<i64, ShiftCurve> = BTreeMap::new();
    for ((a, _step), (d, s)) in means {
        let c = curves.entry(a).or_insert_with(|| ShiftCurve {
            alpha: a as f64 / 1e6,
            shift: Vec::new(),
            delta: Vec::new(),
        });
        c.shift.push(mean(&s));
        c.delta.push(d);
    }
    curves.into_values().collect()
}

fn best_by(curves: Vec<ShiftCurve>, score: impl Fn(&ShiftCurve) -> f64) -> Result<ShiftCurve> {
    curves
        .into_iter()
        .max_by(|a, b| {
            score(a)
                .total_cmp(&score(b))
                .then(b.alpha.abs().total_cmp(&a.alpha.abs()))
        })
        .ok_or_else(|| HarnessError::data("no sweep rows for the requested α sign"))
}

/// The positive-α curve with the largest mean delta over the shifted steps.
pub fn best_positive_label_curve(rows: &[Row]) -> Result<ShiftCurve> {
    best_by(shift_curves(rows, true), |c| mean(&c.delta[1.min(c.delta.len() - 1)..]))
}

/// The negative-α curve with the largest delta at the largest shift.
pub fn best_negative_vocab_curve(rows: &[Row]) -> Result<ShiftCurve> {
    best_by(shift_curves(rows, false), ShiftCurve::last_delta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineSummary {
    pub eval_period: i64,
    pub baseline: f64,
    pub exact: f64,
    pub interpolated: f64,
    pub extrapolated: f64,
}

/// Mean accuracies over seeds at `eval_period`, steered rows at the selected α.
pub fn timeline_summary(rows: &[Row], eval_period: i64) -> Result<TimelineSummary> {
    let at = |method: &str| {
        mean_where(
            rows,
            |r| r.eval_period == Some(eval_period) && r.method == method && (r.selected || method == "baseline"),
            method,
        )
    };
    Ok(TimelineSummary {
        eval_period,
        baseline: at("baseline")?,
        exact: at("exact")?,
        interpolated: at("interpolated")?,
        extrapolated: at("extrapolated")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicSummary {
    pub baseline: f64,
    pub gt: f64,
    pub dynamic: f64,
    pub dynamic_oracle: f64,
    pub classifier_accuracy: f64,
    pub chance: f64,
    /// One-sided binomial p-value of the classifier against chance, pooled
    /// over seeds.
    pub classifier_p_value: f64,
    /// Whether every oracle row equals its ground-truth row.
    pub oracle_matches_gt: bool,
}

pub fn dynamic_summary(rows: &[Row]) -> Result<DynamicSummary> {
    let m = |method: &str| mean_where(rows, |r| r.method == method, method);
    let mut successes = 0u64;
    let mut trials = 0u64;
    let mut chance = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in rows.iter().filter(|r| r.method == "period_classifier") {
        if seen.insert(r.seed) {
            successes += (r.accuracy * r.n_eval as f64).round() as u64;
            trials += r.n_eval as u64;
            chance.push(r.baseline_accuracy);
        }
    }
    if trials == 0 {
        return Err(HarnessError::data("no period classifier rows"));
    }
    let p0 = mean(&chance);
    let gt: Vec<&Row> = rows.iter().filter(|r| r.method == "gt").collect();
    let oracle_matches_gt = gt.iter().all(|g| {
        rows.iter().any(|o| {
            o.method == "dynamic_oracle"
                && o.seed == g.seed
                && o.train_period == g.train_period
                && o.accuracy.to_bits() == g.accuracy.to_bits()
        })
    });
    Ok(DynamicSummary {
        baseline: m("baseline")?,
        gt: m("gt")?,
        dynamic: m("dynamic")?,
        dynamic_oracle: m("dynamic_oracle")?,
        classifier_accuracy: successes as f64 / trials as f64,
        chance: p0,
        classifier_p_value: binomial_upper_p(successes, trials, p0),
        oracle_matches_gt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSummary {
    pub full: f64,
    pub rank: usize,
    pub lowrank: f64,
}

/// Mean selected-α accuracy of the full-rank and rank-`k` rows over seeds
/// and evaluation periods.
pub fn rank_summary(rows: &[Row], k: usize) -> Result<RankSummary> {
    let key = k.to_string();
    Ok(RankSummary {
        full: mean_where(rows, |r| r.is("mean_diff", Some("full"), true), "full rank")?,
        rank: k,
        lowrank: mean_where(rows, |r| r.is("svd", Some(&key), true), "low rank")?,
    })
}
