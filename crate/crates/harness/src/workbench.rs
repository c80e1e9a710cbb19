//! Per-seed state shared by experiments: corpus, trained models, captures.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use log::info;
use timesteer::corpus::{generate, load_jsonl, Split, TemporalCorpus, TemporalExample};
use timesteer::model::{all_sites, HookSite, Interventions, Model, ModelConfig};
use timesteer::numerics::{derive_seed, Matrix};
use timesteer::steering::{capture, steering_from_captures, SteeringVectorSet};
use timesteer::trainer::{self, TrainConfig, TrainReport};

use crate::config::{CorpusSource, ExperimentConfig, ExtractionPool};
use crate::error::{HarnessError, Result};

pub type Captures = BTreeMap<HookSite, Matrix>;

/// Builds the corpus of one run seed.
pub fn build_corpus(source: &CorpusSource, seed: u64) -> Result<TemporalCorpus> {
    match source {
        CorpusSource::Synthetic {
            spec,
            n_per_period,
            fractions,
        } => {
            let spec = spec
                .clone()
                .with_seed(derive_seed(seed, &format!("corpus/{}", spec.seed)));
            Ok(generate(&spec, *n_per_period, *fractions)?)
        }
        CorpusSource::Jsonl { path, options } => Ok(load_jsonl(path, options)?),
    }
}

impl ExtractionPool {
    pub fn split(self) -> Split {
        match self {
            ExtractionPool::Val => Split::Val,
            ExtractionPool::Test => Split::Test,
        }
    }
}

/// Corpus, models and captures of one seed, built lazily and memoised.
///
/// Experiments whose configs agree on corpus, model and training settings
/// can share a workbench; their rows are the same as with fresh ones.
pub struct Workbench {
    pub seed: u64,
    pub corpus: TemporalCorpus,
    pub model_config: ModelConfig,
    source: CorpusSource,
    template: ModelConfig,
    train: TrainConfig,
    models: BTreeMap<i64, (Rc<Model>, TrainReport)>,
    slices: BTreeMap<(i64, Split), Rc<Vec<TemporalExample>>>,
    captures: BTreeMap<(i64, i64, Split), Rc<Captures>>,
    baselines: BTreeMap<(i64, i64, Split), usize>,
}

impl Workbench {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let corpus = build_corpus(&cfg.corpus, seed)?;
        let mut model_config = cfg.model.clone();
        model_config.vocab_size = corpus.vocab_size;
        model_config.n_classes = corpus.n_classes;
        model_config.max_seq_len = model_config.max_seq_len.max(corpus.max_len());
        model_config.seed = derive_seed(seed, "model");
        model_config.validate()?;
        Ok(Self {
            seed,
            corpus,
            model_config,
            source: cfg.corpus.clone(),
            template: cfg.model.clone(),
            train: cfg.train.clone(),
            models: BTreeMap::new(),
            slices: BTreeMap::new(),
            captures: BTreeMap::new(),
            baselines: BTreeMap::new(),
        })
    }

    /// Whether `cfg` would build the same corpus and models.
    pub fn serves(&self, cfg: &ExperimentConfig) -> bool {
        cfg.corpus == self.source && cfg.model == self.template && cfg.train == self.train
    }

    pub fn periods(&self) -> Vec<i64> {
        self.corpus.periods()
    }

    pub fn slice(&mut self, period: i64, split: Split) -> Result<Rc<Vec<TemporalExample>>> {
        if let Some(s) = self.slices.get(&(period, split)) {
            return Ok(Rc::clone(s));
        }
        let s = Rc::new(self.corpus.slice(period, split)?);
        if s.is_empty() {
            return Err(HarnessError::data(format!(
                "period {period} has an empty {} split",
                split.as_str()
            )));
        }
        self.slices.insert((period, split), Rc::clone(&s));
        Ok(s)
    }

    /// Model trained on `period`'s training split.
    pub fn model(&mut self, period: i64) -> Result<Rc<Model>> {
        if let Some((m, _)) = self.models.get(&period) {
            return Ok(Rc::clone(m));
        }
        let train = self.slice(period, Split::Train)?;
        let val = self.slice(period, Split::Val)?;
        let mut tc = self.train.clone();
        tc.seed = derive_seed(self.seed, &format!("train/{period}"));
        let model = Model::init(self.model_config.clone())?;
        let (ckpt, report) = trainer::train(model, &train, &tc, &val)?;
        info!(
            "seed {} period {period}: trained in {:.1}s, val accuracy {:.3}",
            self.seed,
            report.seconds,
            report.val_accuracy.unwrap_or(f64::NAN)
        );
        let m = Rc::new(ckpt.model);
        self.models.insert(period, (Rc::clone(&m), report));
        Ok(m)
    }

    pub fn train_report(&mut self, period: i64) -> Result<TrainReport> {
        self.model(period)?;
        Ok(self.models[&period].1.clone())
    }

    /// Captures at every hook site of the model trained on `model_period`.
    pub fn captures(&mut self, model_period: i64, period: i64, split: Split) -> Result<Rc<Captures>> {
        let key = (model_period, period, split);
        if let Some(c) = self.captures.get(&key) {
            return Ok(Rc::clone(c));
        }
        let model = self.model(model_period)?;
        let slice = self.slice(period, split)?;
        let sites: BTreeSet<HookSite> = all_sites(model.config()).into_iter().collect();
        let c = Rc::new(capture(&model, &slice, &sites)?);
        self.captures.insert(key, Rc::clone(&c));
        Ok(c)
    }

    /// Mean-difference set `source → target` for the model of `source`,
    /// extracted from the `pool` splits at `sites`.
    pub fn vector(
        &mut self,
        source: i64,
        target: i64,
        pool: Split,
        sites: &BTreeSet<HookSite>,
    ) -> Result<SteeringVectorSet> {
        let hash = self.model(source)?.content_hash();
        let src = restrict(&*self.captures(source, source, pool)?, sites)?;
        let tgt = restrict(&*self.captures(source, target, pool)?, sites)?;
        Ok(steering_from_captures(&src, &tgt, source, target, hash)?)
    }

    /// Correct unsteered predictions of the `model_period` model on a slice.
    pub fn baseline_correct(&mut self, model_period: i64, period: i64, split: Split) -> Result<usize> {
        let key = (model_period, period, split);
        if let Some(c) = self.baselines.get(&key) {
            return Ok(*c);
        }
        let model = self.model(model_period)?;
        let slice = self.slice(period, split)?;
        let c = correct(&model, &slice, &Interventions::new())?;
        self.baselines.insert(key, c);
        Ok(c)
    }
}

/// The captures at `sites` only.
pub fn restrict(captures: &Captures, sites: &BTreeSet<HookSite>) -> Result<Captures> {
    sites
        .iter()
        .map(|s| {
            captures
                .get(s)
                .cloned()
                .map(|m| (*s, m))
                .ok_or_else(|| HarnessError::usage(format!("no captures at site {s}")))
        })
        .collect()
}

/// Number of correctly predicted labels.
pub fn correct(model: &Model, examples: &[TemporalExample], iv: &Interventions) -> Result<usize> {
    let preds = trainer::predict(model, examples, iv)?;
    Ok(preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count())
}
