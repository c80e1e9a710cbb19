//! Accuracy of every training period's model on every period, with and
//! without steering.

use timesteer::corpus::Split;

use super::{need_periods, select_alpha, train_periods, Cell};
use crate::config::{AlphaSelection, ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::report::Row;
use crate::workbench::Workbench;

pub(super) fn run(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let periods = bench.periods();
    need_periods(&periods, 2, "the misalignment matrix")?;
    let sites = cfg.resolve_sites(&bench.model_config)?;
    let pool = cfg.extraction_pool.split();
    let mut rows = Vec::new();
    for s in train_periods(cfg, &periods)? {
        let model = bench.model(s)?;
        let per_source = match cfg.alpha_selection {
            AlphaSelection::PerSource => Some(select_alpha(bench, cfg, s, &periods, &sites)?),
            AlphaSelection::PerPair => None,
        };
        for &t in &periods {
            let alpha = match per_source {
                Some(a) => a,
                None => select_alpha(bench, cfg, s, &[t], &sites)?,
            };
            let test = bench.slice(t, Split::Test)?;
            let cell = Cell {
                kind: ExperimentKind::Matrix,
                s,
                seed: bench.seed,
                grid: &cfg.alpha_grid,
                baseline: bench.baseline_correct(s, t, Split::Test)?,
            };
            rows.push(cell.baseline_row(test.len()).eval(t));
            let set = bench.vector(s, t, pool, &sites)?;
            cell.steered(&model, &test, &set, "mean_diff", Some(alpha), |r| r.eval(t), &mut rows)?;
        }
    }
    Ok(rows)
}
