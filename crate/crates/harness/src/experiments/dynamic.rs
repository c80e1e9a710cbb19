//! Steering on the union of all periods' test splits when the period of an
//! input is estimated rather than known.

use timesteer::corpus::{Split, TemporalExample};
use timesteer::dynamic::{
    dynamic_steer, train_period_classifier, DynamicSteeringPlan, OraclePeriodEstimator,
    PeriodClassifier, PeriodEstimator,
};
use timesteer::model::{argmax, Interventions, Model};
use timesteer::numerics::derive_seed;
use timesteer::steering::apply;

use super::{frac, need_periods, select_alpha, train_periods};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::report::{Row, BASELINE};
use crate::select::pick_alpha;
use crate::workbench::{correct, Workbench};

const KIND: ExperimentKind = ExperimentKind::Dynamic;

fn dynamic_correct(
    model: &Model,
    examples: &[TemporalExample],
    plan: &DynamicSteeringPlan,
    estimator: &dyn PeriodEstimator,
) -> Result<usize> {
    let logits = dynamic_steer(model, examples, plan, estimator)?;
    Ok(examples
        .iter()
        .enumerate()
        .filter(|(i, e)| argmax(logits.row(*i)) == e.label)
        .count())
}

/// Period classifier of one seed.
pub fn classifier(bench: &Workbench, cfg: &ExperimentConfig) -> Result<PeriodClassifier> {
    let mut cc = cfg.classifier.clone();
    cc.model.vocab_size = bench.corpus.vocab_size;
    cc.model.max_seq_len = cc.model.max_seq_len.max(bench.corpus.max_len());
    cc.model.seed = derive_seed(bench.seed, "classifier/model");
    cc.train.seed = derive_seed(bench.seed, "classifier/train");
    Ok(train_period_classifier(&bench.corpus, &cc)?)
}

pub(super) fn run(bench: &mut Workbench, cfg: &ExperimentConfig) -> Result<Vec<Row>> {
    let periods = bench.periods();
    need_periods(&periods, 2, "dynamic steering")?;
    let sites = cfg.resolve_sites(&bench.model_config)?;
    let pool = cfg.extraction_pool.split();
    let seed = bench.seed;
    let clf = classifier(bench, cfg)?;
    let oracle = OraclePeriodEstimator::new(periods.clone());
    let test = bench.corpus.combined(Split::Test);
    let n = test.len();
    let clf_correct = clf
        .predict_periods(&test)?
        .iter()
        .zip(&test)
        .filter(|(p, e)| **p == e.period)
        .count();
    let chance = 1.0 / periods.len() as f64;

    let mut rows = Vec::new();
    for s in train_periods(cfg, &periods)? {
        let model = bench.model(s)?;
        let alpha = select_alpha(bench, cfg, s, &periods, &sites)?;
        let sets = periods
            .iter()
            .map(|&t| bench.vector(s, t, pool, &sites))
            .collect::<Result<Vec<_>>>()?;

        let base = frac(correct(&model, &test, &Interventions::new())?, n);
        let mut gt = 0;
        for (&t, set) in periods.iter().zip(&sets) {
            let slice = bench.slice(t, Split::Test)?;
            gt += correct(&model, &slice, &apply(set, alpha)?)?;
        }
        let plan = DynamicSteeringPlan::new(sets.clone(), alpha)?;
        let with_oracle = dynamic_correct(&model, &test, &plan, &oracle)?;

        let dyn_alpha = if cfg.retune_dynamic_alpha {
            let val = bench.corpus.combined(Split::Val);
            let scores = cfg
                .alpha_grid
                .iter()
                .map(|a| dynamic_correct(&model, &val, &DynamicSteeringPlan::new(sets.clone(), *a)?, &clf))
                .collect::<Result<Vec<_>>>()?;
            pick_alpha(&cfg.alpha_grid, &scores)?
        } else {
            alpha
        };
        let dyn_plan = DynamicSteeringPlan::new(sets, dyn_alpha)?;
        let with_clf = dynamic_correct(&model, &test, &dyn_plan, &clf)?;

        rows.push(Row::new(KIND, s, BASELINE, seed, n, base, base));
        rows.push(Row::new(KIND, s, "gt", seed, n, frac(gt, n), base).alpha(alpha, true));
        rows.push(Row::new(KIND, s, "dynamic_oracle", seed, n, frac(with_oracle, n), base).alpha(alpha, true));
        rows.push(Row::new(KIND, s, "dynamic", seed, n, frac(with_clf, n), base).alpha(dyn_alpha, true));
        rows.push(Row::new(KIND, s, "period_classifier", seed, n, frac(clf_correct, n), chance));
    }
    Ok(rows)
}
