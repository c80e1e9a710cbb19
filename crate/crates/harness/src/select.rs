//! Grid search over the steering strength.

use timesteer::corpus::TemporalExample;
use timesteer::model::Model;
use timesteer::steering::{apply, SteeringVectorSet};

use crate::error::{HarnessError, Result};
use crate::workbench::correct;

/// Correct predictions on `examples` for every α of `grid`, in grid order.
pub fn sweep(
    model: &Model,
    examples: &[TemporalExample],
    set: &SteeringVectorSet,
    grid: &[f64],
) -> Result<Vec<usize>> {
    grid.iter()
        .map(|a| correct(model, examples, &apply(set, *a)?))
        .collect()
}

/// The α with the highest score. Ties go to the smaller |α|, then to the
/// positive sign.
pub fn pick_alpha(grid: &[f64], scores: &[usize]) -> Result<f64> {
    if grid.is_empty() || grid.len() != scores.len() {
        return Err(HarnessError::usage("alpha grid and scores differ in length or are empty"));
    }
    let best = (0..grid.len())
        .max_by(|&i, &j| {
            scores[i]
                .cmp(&scores[j])
                .then(grid[j].abs().total_cmp(&grid[i].abs()))
                .then(grid[i].total_cmp(&grid[j]))
        })
        .expect("non-empty grid");
    Ok(grid[best])
}

/// Element-wise sum of score vectors.
pub fn add_scores(acc: &mut Vec<usize>, scores: &[usize]) {
    if acc.is_empty() {
        acc.resize(scores.len(), 0);
    }
    for (a, s) in acc.iter_mut().zip(scores) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn highest_score_wins() {
        assert_eq!(pick_alpha(&[-1.0, 1.0, 2.0], &[3, 4, 9]).unwrap(), 2.0);
    }

    #[test]
    fn ties_prefer_small_magnitude_then_positive() {
        let grid = [-5.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 5.0];
        assert_eq!(pick_alpha(&grid, &[7; 8]).unwrap(), 1.0);
        assert_eq!(pick_alpha(&grid, &[9, 1, 1, 1, 1, 1, 1, 9]).unwrap(), 5.0);
        assert_eq!(pick_alpha(&grid, &[0, 0, 4, 0, 0, 0, 4, 0]).unwrap(), -2.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(pick_alpha(&[1.0], &[]).is_err());
        assert!(pick_alpha(&[], &[]).is_err());
    }

    #[test]
    fn scores_accumulate() {
        let mut acc = Vec::new();
        add_scores(&mut acc, &[1, 2]);
        add_scores(&mut acc, &[3, 4]);
        assert_eq!(acc, vec![4, 6]);
    }
}
