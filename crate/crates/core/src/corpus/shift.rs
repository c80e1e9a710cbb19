use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_simplex, Split, TemporalCorpus, TemporalExample};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};

pub fn label_counts(slice: &[TemporalExample], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for e in slice {
        if e.label < n_classes {
            counts[e.label] += 1;
        }
    }
    counts
}

pub fn empirical_priors(slice: &[TemporalExample], n_classes: usize) -> Vec<f64> {
    let n = slice.len().max(1) as f64;
    label_counts(slice, n_classes)
        .into_iter()
        .map(|c| c as f64 / n)
        .collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Subsamples `slice` so that its class proportions approach `target`.
///
/// Counts follow the floor-on-minority rule. With `N* = min_c count_c/t_c`
/// over classes with positive target, the class `m` with the smallest
/// positive target keeps `floor(t_m·N*)` examples and every other class `c`
/// keeps `round(t_c·n_m/t_m)`. Classes with zero target are dropped. Kept
/// examples are a seeded random choice within each class and stay in input
/// order.
pub fn resample_label_distribution(
    slice: &[TemporalExample],
    target: &[f64],
    seed: u64,
) -> Result<Vec<TemporalExample>> {
    let k = target.len();
    check_simplex(target, k, "target prior")?;
    if let Some(e) = slice.iter().find(|e| e.label >= k) {
        return Err(Error::arg(format!(
            "slice has label {} but the target covers {k} classes",
            e.label
        )));
    }
    let counts = label_counts(slice, k);
    let positive: Vec<usize> = (0..k).filter(|&c| target[c] > 0.0).collect();
    let max_skew = max_achievable_skew(&counts, target);
    if let Some(&c) = positive.iter().find(|&&c| counts[c] == 0) {
        return Err(Error::arg(format!(
            "target prior {target:?} needs class {c}, which has no examples; {max_skew}"
        )));
    }
    let n_star = positive
        .iter()
        .map(|&c| counts[c] as f64 / target[c])
        .fold(f64::INFINITY, f64::min);
    let m = *positive
        .iter()
        .min_by(|&&a, &&b| target[a].total_cmp(&target[b]).then(a.cmp(&b)))
        .expect("a simplex has a positive entry");
    let n_m = (target[m] * n_star + 1e-9).floor() as usize;
    if n_m == 0 {
        return Err(Error::arg(format!(
            "target prior {target:?} is unachievable from counts {counts:?} by subsampling; {max_skew}"
        )));
    }
    let mut keep = vec![0usize; k];
    for &c in &positive {
        keep[c] = if c == m {
            n_m
        } else {
            ((target[c] * n_m as f64 / target[m]).round() as usize).min(counts[c])
        };
    }

    let mut rng = seeded_rng(derive_seed(seed, "resample"));
    let mut selected = vec![false; slice.len()];
    for c in 0..k {
        let mut idx: Vec<usize> = (0..slice.len()).filter(|&i| slice[i].label == c).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(keep[c]) {
            selected[i] = true;
        }
    }
    Ok(slice
        .iter()
        .zip(&selected)
        .filter(|(_, s)| **s)
        .map(|(e, _)| e.clone())
        .collect())
}

fn max_achievable_skew(counts: &[usize], target: &[f64]) -> String {
    let Some(major) = (0..target.len()).max_by(|&a, &b| target[a].total_cmp(&target[b])) else {
        return "no classes".into();
    };
    let others: usize = (0..target.len())
        .filter(|&c| c != major && target[c] > 0.0)
        .count();
    if counts[major] == 0 {
        return format!("the maximum achievable share of class {major} is 0 because it has no examples");
    }
    let best = counts[major] as f64 / (counts[major] + others) as f64;
    format!(
        "the maximum achievable share of class {major} while keeping one example of every other targeted class is {best:.4}"
    )
}

/// One evaluation slice of a shift series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSlice {
    pub step: usize,
    pub period: i64,
    /// Requested class prior.
    pub target_priors: Vec<f64>,
    pub examples: Vec<TemporalExample>,
}

/// Increasingly skewed copies of `slice`, all subsets of it.
///
/// Step 0 is the slice itself. Step `i ≥ 1` targets
/// `(1 − w_i)·p + w_i·e_class` with `w_i = max_weight·i/(steps − 1)` and `p`
/// the slice's empirical prior.
pub fn label_shift_series(
    slice: &[TemporalExample],
    n_classes: usize,
    class: usize,
    steps: usize,
    max_weight: f64,
    seed: u64,
) -> Result<Vec<ShiftSlice>> {
    if steps == 0 {
        return Err(Error::arg("steps must be >= 1"));
    }
    if class >= n_classes {
        return Err(Error::arg(format!("class {class} >= n_classes {n_classes}")));
    }
    if !(max_weight > 0.0 && max_weight < 1.0) {
        return Err(Error::arg("max_weight must lie in (0, 1)"));
    }
    if slice.is_empty() {
        return Err(Error::arg("cannot build a shift series from an empty slice"));
    }
    let period = slice[0].period;
    let base = empirical_priors(slice, n_classes);
    let mut out = vec![ShiftSlice {
        step: 0,
        period,
        target_priors: base.clone(),
        examples: slice.to_vec(),
    }];
    for i in 1..steps {
        let w = max_weight * i as f64 / (steps - 1) as f64;
        let mut target: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(c, p)| (1.0 - w) * p + if c == class { w } else { 0.0 })
            .collect();
        let s: f64 = target.iter().sum();
        target.iter_mut().for_each(|t| *t /= s);
        let examples =
            resample_label_distribution(slice, &target, derive_seed(seed, &format!("label/{i}")))?;
        out.push(ShiftSlice {
            step: i,
            period,
            target_priors: target,
            examples,
        });
    }
    Ok(out)
}

/// Every period's `split`, resampled to the empirical prior of
/// `base_period`'s `split`. Periods ascend; the base period is unchanged.
pub fn vocab_shift_series(
    corpus: &TemporalCorpus,
    base_period: i64,
    split: Split,
    seed: u64,
) -> Result<Vec<ShiftSlice>> {
    let base = corpus.slice(base_period, split)?;
    if base.is_empty() {
        return Err(Error::arg(format!("period {base_period} has an empty {} split", split.as_str())));
    }
    let priors = empirical_priors(&base, corpus.n_classes);
    let mut out = Vec::new();
    for (step, period) in corpus.periods().into_iter().enumerate() {
        let examples = if period == base_period {
            base.clone()
        } else {
            let slice = corpus.slice(period, split)?;
            resample_label_distribution(&slice, &priors, derive_seed(seed, &format!("vocab/{period}")))?
        };
        out.push(ShiftSlice {
            step,
            period,
            target_priors: priors.clone(),
            examples,
        });
    }
    Ok(out)
}
