//! Temporally drifting classification corpora.
//!
//! A synthetic corpus is drawn from a [`DriftSpec`]: per period, labels come
//! from that period's prior and tokens of class `c` come from a mixture of a
//! fixed base distribution and a drift distribution whose weight grows with
//! the period index. Label shift and vocabulary shift are therefore
//! independent knobs.

mod jsonl;
mod shift;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};

pub use jsonl::{hash_word, load_jsonl, save_jsonl, JsonlOptions};
pub use shift::{
    empirical_priors, label_counts, label_shift_series, resample_label_distribution,
    total_variation, vocab_shift_series, ShiftSlice,
};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalExample {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub period: i64,
}

/// How the drift weight grows with the period index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DriftSchedule {
    /// `λ·t/(T−1)`.
    Linear,
    /// `λ·(t/(T−1))^exponent`.
    Power { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub n_periods: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    /// Longest sequence; lengths are uniform in `[ceil(seq_len/2), seq_len]`.
    pub seq_len: usize,
    /// One prior over classes per period.
    pub label_priors: Vec<Vec<f64>>,
    /// λ in `[0, 1]`.
    pub vocab_drift_intensity: f64,
    /// One token distribution per class.
    pub base_token_dists: Vec<Vec<f64>>,
    /// One token distribution per class and period.
    pub drift_token_dists: Vec<Vec<Vec<f64>>>,
    pub schedule: DriftSchedule,
    pub seed: u64,
}

/// Vocabulary layout of the built-in benchmark.
///
/// The first 40% of the vocabulary is shared by all classes. The remainder is
/// cut in two halves, base and drift, each holding one equal band per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandLayout {
    pub common: usize,
    pub band: usize,
}

impl BandLayout {
    pub fn new(vocab_size: usize, n_classes: usize) -> Result<Self> {
        let common = vocab_size * 2 / 5;
        let band = (vocab_size - common) / (2 * n_classes.max(1));
        if common == 0 || band == 0 {
            return Err(Error::arg(format!(
                "vocab_size {vocab_size} too small for {n_classes} class bands"
            )));
        }
        Ok(Self { common, band })
    }

    pub fn common_band(&self) -> std::ops::Range<usize> {
        0..self.common
    }

    pub fn base_band(&self, class: usize) -> std::ops::Range<usize> {
        let s = self.common + class * self.band;
        s..s + self.band
    }

    pub fn drift_band(&self, class: usize, n_classes: usize) -> std::ops::Range<usize> {
        let s = self.common + (n_classes + class) * self.band;
        s..s + self.band
    }
}

/// How class token distributions are laid over a [`BandLayout`].
///
/// A base distribution puts `signal` mass uniformly on the class's base band
/// and the rest on the shared band. In the drift distribution the class mass
/// is split between the base band (`retained`) and the class's drift band,
/// and a `generic_share` of the shared mass moves onto the base band of
/// `generic_class`: words once specific to that class spread to every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    pub signal: f64,
    pub retained: f64,
    pub generic_share: f64,
    pub generic_class: usize,
}

impl BandProfile {
    /// Profile of the built-in benchmark.
    pub const DRIFT_BENCH: BandProfile = BandProfile {
        signal: 0.1,
        retained: 0.5,
        generic_share: 0.2,
        generic_class: 0,
    };

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        for (name, v) in [
            ("signal", self.signal),
            ("retained", self.retained),
            ("generic_share", self.generic_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(format!("band profile: {name} must lie in [0, 1]")));
            }
        }
        if self.generic_class >= n_classes {
            return Err(Error::arg(format!(
                "band profile: generic_class {} >= n_classes {n_classes}",
                self.generic_class
            )));
        }
        Ok(())
    }
}

fn spread(p: &mut [f64], band: std::ops::Range<usize>, mass: f64) {
    let per = mass / band.len() as f64;
    for x in &mut p[band] {
        *x += per;
    }
}

impl DriftSpec {
    /// The default benchmark: 5 periods, 3 classes, vocabulary 200, length
    /// 16, λ = 0.8, priors drifting from (0.5, 0.3, 0.2) to (0.2, 0.3, 0.5),
    /// bands per [`BandProfile::DRIFT_BENCH`].
    pub fn drift_bench(seed: u64) -> Self {
        let n_periods = 5;
        let n_classes = 3;
        let start = [0.5, 0.3, 0.2];
        let end = [0.2, 0.3, 0.5];
        let priors = (0..n_periods)
            .map(|t| {
                let w = t as f64 / (n_periods - 1) as f64;
                (0..n_classes)
                    .map(|c| (1.0 - w) * start[c] + w * end[c])
                    .collect()
            })
            .collect();
        Self::banded(n_periods, n_classes, 200, 16, priors, 0.8, &BandProfile::DRIFT_BENCH, seed)
            .expect("built-in benchmark is valid")
    }

    /// A banded spec; see [`BandLayout`] and [`BandProfile`].
    #[allow(clippy::too_many_arguments)]
    pub fn banded(
        n_periods: usize,
        n_classes: usize,
        vocab_size: usize,
        seq_len: usize,
        label_priors: Vec<Vec<f64>>,
        vocab_drift_intensity: f64,
        profile: &BandProfile,
        seed: u64,
    ) -> Result<Self> {
        profile.validate(n_classes)?;
        let layout = BandLayout::new(vocab_size, n_classes)?;
        let shared = 1.0 - profile.signal;
        let base = (0..n_classes)
            .map(|c| {
                let mut p = vec![0.0; vocab_size];
                spread(&mut p, layout.common_band(), shared);
                spread(&mut p, layout.base_band(c), profile.signal);
                p
            })
            .collect();
        let drift = (0..n_classes)
            .map(|c| {
                let mut p = vec![0.0; vocab_size];
                spread(&mut p, layout.common_band(), shared * (1.0 - profile.generic_share));
                spread(
                    &mut p,
                    layout.base_band(profile.generic_class),
                    shared * profile.generic_share,
                );
                spread(&mut p, layout.base_band(c), profile.signal * profile.retained);
                spread(
                    &mut p,
                    layout.drift_band(c, n_classes),
                    profile.signal * (1.0 - profile.retained),
                );
                vec![p; n_periods]
            })
            .collect();
        let spec = Self {
            n_periods,
            n_classes,
            vocab_size,
            seq_len,
            label_priors,
            vocab_drift_intensity,
            base_token_dists: base,
            drift_token_dists: drift,
            schedule: DriftSchedule::Linear,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same spec with uniform priors in every period.
    pub fn with_uniform_priors(mut self) -> Self {
        let u = vec![1.0 / self.n_classes as f64; self.n_classes];
        self.label_priors = vec![u; self.n_periods];
        self
    }

    pub fn with_intensity(mut self, lambda: f64) -> Self {
        self.vocab_drift_intensity = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_periods == 0 || self.n_classes == 0 || self.vocab_size == 0 || self.seq_len == 0
        {
            return Err(Error::arg("drift spec counts must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.vocab_drift_intensity) {
            return Err(Error::arg(format!(
                "vocab_drift_intensity {} outside [0, 1]",
                self.vocab_drift_intensity
            )));
        }
        if let DriftSchedule::Power { exponent } = self.schedule {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(Error::arg("power schedule exponent must be > 0"));
            }
        }
        if self.label_priors.len() != self.n_periods {
            return Err(Error::arg(format!(
                "expected {} label priors, got {}",
                self.n_periods,
                self.label_priors.len()
            )));
        }
        for (t, p) in self.label_priors.iter().enumerate() {
            check_simplex(p, self.n_classes, &format!("label prior of period {t}"))?;
        }
        if self.base_token_dists.len() != self.n_classes
            || self.drift_token_dists.len() != self.n_classes
        {
            return Err(Error::arg("token distributions must be given per class"));
        }
        for c in 0..self.n_classes {
            check_simplex(
                &self.base_token_dists[c],
                self.vocab_size,
                &format!("base token distribution of class {c}"),
            )?;
            if self.drift_token_dists[c].len() != self.n_periods {
                return Err(Error::arg(format!(
                    "class {c} needs one drift distribution per period"
                )));
            }
            for (t, d) in self.drift_token_dists[c].iter().enumerate() {
                check_simplex(
                    d,
                    self.vocab_size,
                    &format!("drift token distribution of class {c}, period {t}"),
                )?;
            }
        }
        Ok(())
    }

    /// Weight on the drift distribution at period `t`.
    pub fn drift_weight(&self, t: usize) -> f64 {
        if self.n_periods < 2 {
            return 0.0;
        }
        let x = t as f64 / (self.n_periods - 1) as f64;
        match self.schedule {
            DriftSchedule::Linear => self.vocab_drift_intensity * x,
            DriftSchedule::Power { exponent } => self.vocab_drift_intensity * x.powf(exponent),
        }
    }

    /// Token distribution of class `c` at period `t`.
    pub fn token_distribution(&self, c: usize, t: usize) -> Vec<f64> {
        let w = self.drift_weight(t);
        self.base_token_dists[c]
            .iter()
            .zip(&self.drift_token_dists[c][t])
            .map(|(b, d)| (1.0 - w) * b + w * d)
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_simplex(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::arg(format!("{what}: expected {n} entries, got {}", p.len())));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::arg(format!("{what}: entries must be finite and >= 0")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::arg(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

/// Fractions of each period assigned to train / val / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::arg("split fractions must be >= 0"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::arg("split fractions must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Indices into [`TemporalCorpus::examples`] for one period.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl PeriodSplits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Synthetic {
        spec: DriftSpec,
        spec_hash: String,
        n_per_period: usize,
        fractions: SplitFractions,
    },
    Jsonl {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCorpus {
    pub examples: Vec<TemporalExample>,
    pub splits: BTreeMap<i64, PeriodSplits>,
    pub provenance: Provenance,
    pub vocab_size: usize,
    pub n_classes: usize,
}

impl TemporalCorpus {
    pub fn periods(&self) -> Vec<i64> {
        self.splits.keys().copied().collect()
    }

    pub fn split_indices(&self, period: i64, split: Split) -> Result<&[usize]> {
        self.splits
            .get(&period)
            .map(|s| s.get(split))
            .ok_or_else(|| Error::arg(format!("corpus has no period {period}")))
    }

    /// Copies of the examples in one period's split, in index order.
    pub fn slice(&self, period: i64, split: Split) -> Result<Vec<TemporalExample>> {
        Ok(self
            .split_indices(period, split)?
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect())
    }

    /// One split across every period, periods in ascending order.
    pub fn combined(&self, split: Split) -> Vec<TemporalExample> {
        self.splits
            .values()
            .flat_map(|s| s.get(split).iter().map(|&i| self.examples[i].clone()))
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Checks split disjointness, index validity and example ranges.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.examples.len()];
        for (period, s) in &self.splits {
            for split in [Split::Train, Split::Val, Split::Test] {
                for &i in s.get(split) {
                    let e = self.examples.get(i).ok_or_else(|| {
                        Error::arg(format!("split index {i} out of range"))
                    })?;
                    if e.period != *period {
                        return Err(Error::arg(format!(
                            "example {i} has period {} but sits in period {period}",
                            e.period
                        )));
                    }
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::arg(format!("example {i} appears in two splits")));
                    }
                }
            }
        }
        for (i, e) in self.examples.iter().enumerate() {
            if e.tokens.is_empty() {
                return Err(Error::arg(format!("example {i} has no tokens")));
            }
            if e.label >= self.n_classes {
                return Err(Error::arg(format!(
                    "example {i} has label {} >= n_classes {}",
                    e.label, self.n_classes
                )));
            }
            if let Some(t) = e.tokens.iter().find(|t| **t as usize >= self.vocab_size) {
                return Err(Error::arg(format!(
                    "example {i} has token {t} >= vocab_size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self)
            .map_err(|e| Error::format(path, format!("encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let corpus: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Assigns each period's examples to train / val / test after a seeded
/// shuffle. Index lists are returned sorted.
pub fn build_splits(
    examples: &[TemporalExample],
    fractions: SplitFractions,
    seed: u64,
) -> Result<BTreeMap<i64, PeriodSplits>> {
    fractions.validate()?;
    let mut by_period: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_period.entry(e.period).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (period, mut idx) in by_period {
        let mut rng = seeded_rng(derive_seed(seed, &format!("split/{period}")));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((fractions.train * n as f64).round() as usize).min(n);
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        let mut s = PeriodSplits::default();
        for (k, i) in idx.into_iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            s.get_mut(split).push(i);
        }
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        out.insert(period, s);
    }
    Ok(out)
}

/// Draws `n_per_period` examples per period from `spec`.
pub fn generate(
    spec: &DriftSpec,
    n_per_period: usize,
    fractions: SplitFractions,
) -> Result<TemporalCorpus> {
    spec.validate()?;
    fractions.validate()?;
    if n_per_period < 10 {
        return Err(Error::arg("n_per_period must be >= 10"));
    }
    let min_len = spec.seq_len.div_ceil(2);
    let mut examples = Vec::with_capacity(spec.n_periods * n_per_period);
    for t in 0..spec.n_periods {
        let mut rng = seeded_rng(derive_seed(spec.seed, &format!("period/{t}")));
        let labels = WeightedIndex::new(&spec.label_priors[t])
            .map_err(|e| Error::arg(format!("label prior of period {t}: {e}")))?;
        let tokens: Vec<WeightedIndex<f64>> = (0..spec.n_classes)
            .map(|c| {
                WeightedIndex::new(spec.token_distribution(c, t))
                    .map_err(|e| Error::arg(format!("token distribution of class {c}: {e}")))
            })
            .collect::<Result<_>>()?;
        for _ in 0..n_per_period {
            let label = labels.sample(&mut rng);
            let len = rng.gen_range(min_len..=spec.seq_len);
            let seq = (0..len)
                .map(|_| tokens[label].sample(&mut rng) as u32)
                .collect();
            examples.push(TemporalExample {
                tokens: seq,
                label,
                period: t as i64,
            });
        }
    }
    let splits = build_splits(&examples, fractions, derive_seed(spec.seed, "splits"))?;
    Ok(TemporalCorpus {
        examples,
        splits,
        provenance: Provenance::Synthetic {
            spec: spec.clone(),
            spec_hash: spec.content_hash(),
            n_per_period,
            fractions,
        },
        vocab_size: spec.vocab_size,
        n_classes: spec.n_classes,
    })
}

#[cfg(test)]
mod tests;
