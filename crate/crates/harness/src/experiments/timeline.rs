//! Exact, interpolated and extrapolated vectors for periods the model was
//! not trained on.
//!
//! Forward runs train on the first period and steer towards later ones,
//! backward runs train on the last period and steer towards earlier ones.
//! Interpolated vectors rescale the vector to the far end of the timeline,
//! extrapolated ones repeat the vector to the adjacent period.

use timesteer::corpus::Split;
use timesteer::steering::{extrapolate, interpolate, Direction};

use super::{need_periods, select_alpha, Cell};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::report::Row;
use crate::workbench::Workbench;

pub(super) fn run(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let periods = bench.periods();
    need_periods(&periods, 3, "the timeline experiment")?;
    if periods.windows(2).any(|w| w[1] - w[0] != 1) {
        return Err(HarnessError::data("the timeline experiment needs consecutive periods"));
    }
    let (first, last) = (periods[0], periods[periods.len() - 1]);
    let (s, far, near) = match cfg.direction {
        Direction::Forward => (first, last, first + 1),
        Direction::Backward => (last, first, last - 1),
    };
    let sites = cfg.resolve_sites(&bench.model_config)?;
    let pool = cfg.extraction_pool.split();
    let model = bench.model(s)?;
    let alpha = select_alpha(bench, cfg, s, &[near, far], &sites)?;
    let v_far = bench.vector(s, far, pool, &sites)?;
    let v_near = bench.vector(s, near, pool, &sites)?;

    let mut rows = Vec::new();
    for &t in periods.iter().filter(|t| **t != s) {
        let j = (t - s).unsigned_abs() as usize;
        let test = bench.slice(t, Split::Test)?;
        let cell = Cell {
            kind: ExperimentKind::Timeline,
            s,
            seed: bench.seed,
            grid: &cfg.alpha_grid,
            baseline: bench.baseline_correct(s, t, Split::Test)?,
        };
        rows.push(cell.baseline_row(test.len()).eval(t));
        let candidates = [
            ("exact", bench.vector(s, t, pool, &sites)?),
            ("interpolated", interpolate(&v_far, j)?),
            ("extrapolated", extrapolate(&v_near, j, Direction::Forward)?),
        ];
        for (method, set) in &candidates {
            let param = set.method.to_string();
            cell.steered(&model, &test, set, method, Some(alpha), |r| r.eval(t).param(param.clone()), &mut rows)?;
        }
    }
    Ok(rows)
}
