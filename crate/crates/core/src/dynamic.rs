//! Steering when the target period is unknown: a period classifier
//! supplies probabilities and each example receives the probability-weighted
//! sum of per-period steering vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Split, TemporalCorpus, TemporalExample};
use crate::error::{Error, Result};
use crate::model::{
    argmax, Batch, CheckpointMeta, HookSite, Interventions, Model, ModelCheckpoint, ModelConfig,
};
use crate::numerics::{derive_seed, seeded_rng, softmax, Matrix, Vector};
use crate::steering::SteeringVectorSet;
use crate::trainer::{self, TrainConfig, TrainReport, EVAL_BATCH};

/// Source of per-example period probabilities.
pub trait PeriodEstimator {
    /// Periods in probability order.
    fn periods(&self) -> &[i64];

    /// One simplex vector per example.
    fn probabilities(&self, examples: &[TemporalExample]) -> Result<Vec<Vec<f64>>>;
}

/// Puts all mass on each example's recorded period.
#[derive(Debug, Clone)]
pub struct OraclePeriodEstimator {
    periods: Vec<i64>,
}

impl OraclePeriodEstimator {
    pub fn new(periods: Vec<i64>) -> Self {
        Self { periods }
    }
}

impl PeriodEstimator for OraclePeriodEstimator {
    fn periods(&self) -> &[i64] {
        &self.periods
    }

    fn probabilities(&self, examples: &[TemporalExample]) -> Result<Vec<Vec<f64>>> {
        examples
            .iter()
            .map(|e| {
                let i = self
                    .periods
                    .iter()
                    .position(|p| *p == e.period)
                    .ok_or_else(|| Error::arg(format!("oracle knows no period {}", e.period)))?;
                let mut p = vec![0.0; self.periods.len()];
                p[i] = 1.0;
                Ok(p)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodClassifierConfig {
    /// Architecture; `n_classes` is replaced by the number of periods.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Share of the validation pool held out for scoring.
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodClassifier {
    pub model: Model,
    /// Class index `i` stands for `periods[i]`.
    pub periods: Vec<i64>,
    pub heldout_accuracy: f64,
    pub n_heldout: usize,
    pub report: TrainReport,
}

/// Trains a period classifier on the corpus's validation splits only.
///
/// Each period's validation examples are shuffled and cut into a training
/// part and a held-out part (`heldout_fraction`), and the classifier is
/// scored on the union of held-out parts.
pub fn train_period_classifier(
    corpus: &TemporalCorpus,
    config: &PeriodClassifierConfig,
) -> Result<PeriodClassifier> {
    let periods = corpus.periods();
    if periods.len() < 2 {
        return Err(Error::arg(format!(
            "a period classifier needs at least 2 periods, corpus has {}",
            periods.len()
        )));
    }
    if !(config.heldout_fraction > 0.0 && config.heldout_fraction < 1.0) {
        return Err(Error::arg("heldout_fraction must lie in (0, 1)"));
    }
    let mut fit = Vec::new();
    let mut heldout = Vec::new();
    for (class, &period) in periods.iter().enumerate() {
        let mut pool = corpus.slice(period, Split::Val)?;
        if pool.len() < 2 {
            return Err(Error::arg(format!(
                "period {period} has fewer than 2 validation examples"
            )));
        }
        let mut rng = seeded_rng(derive_seed(config.train.seed, &format!("period-split/{period}")));
        pool.shuffle(&mut rng);
        let n_held = ((pool.len() as f64 * config.heldout_fraction).round() as usize)
            .clamp(1, pool.len() - 1);
        for (k, mut e) in pool.into_iter().enumerate() {
            e.label = class;
            if k < n_held {
                heldout.push(e);
            } else {
                fit.push(e);
            }
        }
    }
    let mut model_config = config.model.clone();
    model_config.n_classes = periods.len();
    let model = Model::init(model_config)?;
    let (ckpt, report) = trainer::train(model, &fit, &config.train, &[])?;
    let heldout_accuracy = trainer::accuracy(&ckpt.model, &heldout, &Interventions::new())?;
    Ok(PeriodClassifier {
        model: ckpt.model,
        periods,
        heldout_accuracy,
        n_heldout: heldout.len(),
        report,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    periods: Vec<i64>,
    heldout_accuracy: f64,
    n_heldout: usize,
    report: TrainReport,
}

impl PeriodClassifier {
    /// Softmax over period logits for one example.
    pub fn predict_period_probs(&self, example: &TemporalExample) -> Result<Vec<f64>> {
        Ok(self
            .probabilities(std::slice::from_ref(example))?
            .pop()
            .expect("one example in, one out"))
    }

    /// Most probable period per example.
    pub fn predict_periods(&self, examples: &[TemporalExample]) -> Result<Vec<i64>> {
        Ok(self
            .probabilities(examples)?
            .iter()
            .map(|p| self.periods[argmax(p)])
            .collect())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".periods.json");
        PathBuf::from(s)
    }

    /// Writes the model checkpoint to `path` and the period mapping next to
    /// it as `<path>.periods.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        ModelCheckpoint::new(self.model.clone(), CheckpointMeta::untrained()).save(path)?;
        let side = Sidecar {
            periods: self.periods.clone(),
            heldout_accuracy: self.heldout_accuracy,
            n_heldout: self.n_heldout,
            report: self.report.clone(),
        };
        let sp = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&side)
            .map_err(|e| Error::format(&sp, e.to_string()))?;
        fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = ModelCheckpoint::load(path)?;
        let sp = Self::sidecar_path(path);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&sp, e.to_string()))?;
        if side.periods.len() != ckpt.model.config().n_classes {
            return Err(Error::format(&sp, "period mapping does not match the classifier"));
        }
        Ok(Self {
            model: ckpt.model,
            periods: side.periods,
            heldout_accuracy: side.heldout_accuracy,
            n_heldout: side.n_heldout,
            report: side.report,
        })
    }
}

impl PeriodEstimator for PeriodClassifier {
    fn periods(&self) -> &[i64] {
        &self.periods
    }

    fn probabilities(&self, examples: &[TemporalExample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let logits = self.model.logits(&Batch::from_sequences(&seqs, None)?)?;
            out.extend((0..chunk.len()).map(|i| softmax(logits.row(i))));
        }
        Ok(out)
    }
}

/// Steering sets from one source period to each target period, plus α.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSteeringPlan {
    sets: Vec<SteeringVectorSet>,
    alpha: f64,
}

impl DynamicSteeringPlan {
    /// Sets must share sites, `d_model`, model hash and source period, and
    /// their target periods must ascend strictly.
    pub fn new(sets: Vec<SteeringVectorSet>, alpha: f64) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::arg("a dynamic plan needs at least one steering set"))?;
        if !alpha.is_finite() {
            return Err(Error::arg("alpha must be finite"));
        }
        let sites = first.sites();
        for s in &sets[1..] {
            if s.sites() != sites || s.d_model != first.d_model {
                return Err(Error::Mismatch("plan sets differ in sites or d_model".into()));
            }
            if s.model_hash != first.model_hash {
                return Err(Error::Mismatch("plan sets come from different models".into()));
            }
            if s.source_period != first.source_period {
                return Err(Error::Mismatch("plan sets differ in source period".into()));
            }
        }
        if sets.windows(2).any(|w| w[0].target_period >= w[1].target_period) {
            return Err(Error::arg("plan target periods must ascend strictly"));
        }
        Ok(Self { sets, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sets(&self) -> &[SteeringVectorSet] {
        &self.sets
    }

    pub fn target_periods(&self) -> Vec<i64> {
        self.sets.iter().map(|s| s.target_period).collect()
    }

    pub fn sites(&self) -> BTreeSet<HookSite> {
        self.sets[0].sites()
    }

    /// `Σ p_i v_i` per site, summed in period order.
    pub fn effective_vectors(&self, p: &[f64]) -> Result<BTreeMap<HookSite, Vector>> {
        if p.len() != self.sets.len() {
            return Err(Error::arg(format!(
                "{} probabilities for a plan over {} periods",
                p.len(),
                self.sets.len()
            )));
        }
        let d = self.sets[0].d_model;
        let mut out = BTreeMap::new();
        for site in self.sites() {
            let mut acc = vec![0.0; d];
            for (set, w) in self.sets.iter().zip(p) {
                for (a, x) in acc.iter_mut().zip(set.vectors[&site].as_slice()) {
                    *a += w * x;
                }
            }
            out.insert(site, Vector::new(acc)?);
        }
        Ok(out)
    }

    /// Interventions for one example with period probabilities `p`.
    pub fn interventions(&self, p: &[f64]) -> Result<Interventions> {
        let mut out = Interventions::new();
        for (site, v) in self.effective_vectors(p)? {
            out.add(site, v, self.alpha);
        }
        Ok(out)
    }

    /// Checks that `model` and `estimator` fit the plan.
    pub fn check(&self, model: &Model, estimator: &dyn PeriodEstimator) -> Result<()> {
        self.sets[0].check_model(model, false)?;
        if estimator.periods() != self.target_periods().as_slice() {
            return Err(Error::Mismatch(format!(
                "estimator periods {:?} differ from plan periods {:?}",
                estimator.periods(),
                self.target_periods()
            )));
        }
        Ok(())
    }
}

/// Logits with per-example steering by the given probabilities.
pub fn dynamic_steer_with_probs(
    model: &Model,
    examples: &[TemporalExample],
    plan: &DynamicSteeringPlan,
    probs: &[Vec<f64>],
) -> Result<Matrix> {
    if probs.len() != examples.len() {
        return Err(Error::arg("one probability vector per example is required"));
    }
    let nc = model.config().n_classes;
    let mut logits = Vec::with_capacity(examples.len() * nc);
    for (e, p) in examples.iter().zip(probs) {
        let batch = Batch::from_sequences(&[e.tokens.as_slice()], None)?;
        let out = model.forward_with_intervention(&batch, &plan.interventions(p)?)?;
        logits.extend_from_slice(out.logits.row(0));
    }
    Matrix::from_vec(examples.len(), nc, logits)
}

/// Logits with per-example steering weighted by `estimator`.
pub fn dynamic_steer(
    model: &Model,
    examples: &[TemporalExample],
    plan: &DynamicSteeringPlan,
    estimator: &dyn PeriodEstimator,
) -> Result<Matrix> {
    plan.check(model, estimator)?;
    let probs = estimator.probabilities(examples)?;
    dynamic_steer_with_probs(model, examples, plan, &probs)
}

/// Accuracy of [`dynamic_steer`] predictions.
pub fn dynamic_accuracy(
    model: &Model,
    examples: &[TemporalExample],
    plan: &DynamicSteeringPlan,
    estimator: &dyn PeriodEstimator,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty slice"));
    }
    let logits = dynamic_steer(model, examples, plan, estimator)?;
    let correct = examples
        .iter()
        .enumerate()
        .filter(|(i, e)| argmax(logits.row(*i)) == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}
