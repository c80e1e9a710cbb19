//! Experiment configuration, serialized as JSON.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use timesteer::corpus::{DriftSpec, JsonlOptions, SplitFractions};
use timesteer::dynamic::PeriodClassifierConfig;
use timesteer::model::{default_sites, parse_sites, AttentionMode, HookSite, ModelConfig};
use timesteer::steering::Direction;
use timesteer::trainer::TrainConfig;

use crate::error::{HarnessError, Result};

pub const DEFAULT_ALPHA_GRID: [f64; 8] = [-5.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 5.0];
pub const DEFAULT_RANKS: [usize; 4] = [1, 4, 16, 64];
/// Extraction pool sizes of the data-size ablation; the full pool is always added.
pub const DEFAULT_SIZES: [usize; 5] = [25, 50, 100, 200, 400];
pub const DEFAULT_SIZE_REPEATS: usize = 10;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Examples per period of the built-in benchmark.
pub const DRIFT_BENCH_N_PER_PERIOD: usize = 1500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    /// Generated per run seed from `spec`.
    Synthetic {
        spec: DriftSpec,
        n_per_period: usize,
        fractions: SplitFractions,
    },
    /// Loaded once; run seeds only affect models and resampling.
    Jsonl { path: PathBuf, options: JsonlOptions },
}

impl CorpusSource {
    pub fn drift_bench(spec: DriftSpec) -> Self {
        CorpusSource::Synthetic {
            spec,
            n_per_period: DRIFT_BENCH_N_PER_PERIOD,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Matrix,
    LabelShift,
    VocabShift,
    Timeline,
    Dynamic,
    AblateRank,
    AblateSite,
    AblateSize,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Matrix,
        ExperimentKind::LabelShift,
        ExperimentKind::VocabShift,
        ExperimentKind::Timeline,
        ExperimentKind::Dynamic,
        ExperimentKind::AblateRank,
        ExperimentKind::AblateSite,
        ExperimentKind::AblateSize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Matrix => "matrix",
            ExperimentKind::LabelShift => "label_shift",
            ExperimentKind::VocabShift => "vocab_shift",
            ExperimentKind::Timeline => "timeline",
            ExperimentKind::Dynamic => "dynamic",
            ExperimentKind::AblateRank => "ablate_rank",
            ExperimentKind::AblateSite => "ablate_site",
            ExperimentKind::AblateSize => "ablate_size",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HarnessError::usage(format!("unknown experiment `{s}`")))
    }
}

/// Which split supplies the inputs that steering vectors are extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPool {
    /// Validation inputs, disjoint from every evaluation slice.
    Val,
    /// The evaluation inputs themselves (labels unused).
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSelection {
    /// One α per training period, scored on every other period's validation split.
    PerSource,
    /// One α per (training, target) pair, scored on the target's validation split.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Number of label-shift steps including the unshifted step 0.
    pub steps: usize,
    /// Mixing weight of the one-hot prior at the last step.
    pub max_weight: f64,
    /// Class whose share grows along the series.
    pub class: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            max_weight: 0.8,
            class: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub corpus: CorpusSource,
    /// Architecture template; vocabulary, class count, length limit and
    /// seed are filled in per run.
    pub model: ModelConfig,
    /// Training settings; the seed is derived per run.
    pub train: TrainConfig,
    /// Comma-separated hook sites; the model's default sites when absent.
    pub sites: Option<String>,
    pub alpha_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub extraction_pool: ExtractionPool,
    pub alpha_selection: AlphaSelection,
    /// Training periods for the matrix and dynamic experiments; all when absent.
    pub train_periods: Option<Vec<i64>>,
    /// Timeline direction: forward trains on the first period, backward on the last.
    pub direction: Direction,
    pub shift: ShiftConfig,
    pub ranks: Vec<usize>,
    pub sizes: Vec<usize>,
    pub size_repeats: usize,
    pub classifier: PeriodClassifierConfig,
    /// Re-select α for dynamic steering instead of reusing the static choice.
    pub retune_dynamic_alpha: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Matrix,
            corpus: CorpusSource::drift_bench(DriftSpec::drift_bench(0)),
            model: ModelConfig::toy(3, AttentionMode::Causal, 0),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 10,
                ..TrainConfig::default()
            },
            sites: None,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: PathBuf::from("out"),
            extraction_pool: ExtractionPool::Val,
            alpha_selection: AlphaSelection::PerSource,
            train_periods: None,
            direction: Direction::Forward,
            shift: ShiftConfig::default(),
            ranks: DEFAULT_RANKS.to_vec(),
            sizes: DEFAULT_SIZES.to_vec(),
            size_repeats: DEFAULT_SIZE_REPEATS,
            classifier: PeriodClassifierConfig {
                model: ModelConfig::toy(0, AttentionMode::Bidirectional, 0),
                train: TrainConfig {
                    learning_rate: 1e-3,
                    epochs: 10,
                    ..TrainConfig::default()
                },
                heldout_fraction: 0.3,
            },
            retune_dynamic_alpha: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `kind` on drift-bench.
    ///
    /// Label shift uses a corpus without vocabulary drift and with uniform
    /// priors; vocabulary shift keeps the drift but fixes the priors.
    pub fn preset(kind: ExperimentKind) -> Self {
        let spec = match kind {
            ExperimentKind::LabelShift => DriftSpec::drift_bench(0)
                .with_uniform_priors()
                .with_intensity(0.0),
            ExperimentKind::VocabShift => DriftSpec::drift_bench(0).with_uniform_priors(),
            _ => DriftSpec::drift_bench(0),
        };
        Self {
            experiment: kind,
            corpus: CorpusSource::drift_bench(spec),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(HarnessError::usage("alpha grid must not be empty"));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !a.is_finite()) {
            return Err(HarnessError::usage(format!("alpha grid holds non-finite value {a}")));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::usage("seed list must not be empty"));
        }
        if self.shift.steps < 2 {
            return Err(HarnessError::usage("a shift series needs at least 2 steps"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(HarnessError::usage("ranks must be a non-empty list of positive values"));
        }
        if self.sizes.contains(&0) {
            return Err(HarnessError::usage("extraction sizes must be positive"));
        }
        if self.size_repeats == 0 {
            return Err(HarnessError::usage("size_repeats must be >= 1"));
        }
        if let Some(p) = &self.train_periods {
            if p.is_empty() {
                return Err(HarnessError::usage("train_periods must not be empty when given"));
            }
        }
        if let Some(s) = &self.sites {
            parse_sites(s)?;
        }
        self.train.validate()?;
        Ok(())
    }

    /// Hook sites for a model built from this config.
    pub fn resolve_sites(&self, model: &ModelConfig) -> Result<BTreeSet<HookSite>> {
        let sites = match &self.sites {
            Some(s) => parse_sites(s)?,
            None => default_sites(model),
        };
        for s in &sites {
            s.validate(model)?;
        }
        Ok(sites)
    }
}

/// Parses a comma-separated α list such as `-2,-1,1,2`.
pub fn parse_alpha_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|a| a.is_finite())
                .ok_or_else(|| HarnessError::usage(format!("bad alpha value `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(HarnessError::usage("alpha grid must not be empty"));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::preset(kind);
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(kind.as_str().parse::<ExperimentKind>().unwrap(), kind);
        }
        assert_eq!(ExperimentConfig::default().alpha_grid, DEFAULT_ALPHA_GRID);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"experiment":"dynamic","seeds":[9]}"#).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Dynamic);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.ranks, DEFAULT_RANKS);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.alpha_grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            sites: Some("mlp@1".into()),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alpha_grid_parsing() {
        assert_eq!(parse_alpha_grid("-2, -1,1,2").unwrap(), vec![-2.0, -1.0, 1.0, 2.0]);
        assert!(parse_alpha_grid("").is_err());
        assert!(parse_alpha_grid("1,x").is_err());
        assert!(parse_alpha_grid("inf").is_err());
    }
}
