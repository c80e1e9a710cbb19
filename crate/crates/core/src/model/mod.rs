//! Pre-layernorm transformer classifier with hook sites.
//!
//! Every block has two hook sites, the attention sublayer output and the
//! feed-forward sublayer output, both taken immediately before the residual
//! addition. A site can capture the per-example mean over non-pad positions
//! and can receive additive interventions at every non-pad position.

mod backward;
mod checkpoint;
mod forward;
mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub use backward::{Gradients, LossOutput};
pub use checkpoint::{CheckpointMeta, ModelCheckpoint, TrainingStage, CHECKPOINT_FORMAT_VERSION};
pub use params::{ParamLayout, TensorSpec};

pub(crate) use forward::Packed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Each position attends to itself and earlier positions only.
    Causal,
    /// Each position attends to every non-pad position.
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub attention_mode: AttentionMode,
    pub seed: u64,
}

impl ModelConfig {
    /// The small configuration used throughout the tests.
    pub fn toy(n_classes: usize, attention_mode: AttentionMode, seed: u64) -> Self {
        Self {
            vocab_size: 200,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 24,
            n_classes,
            attention_mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::arg(format!("model config: {name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::arg(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    AttentionOut,
    FfnOut,
}

impl Sublayer {
    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::AttentionOut => "attention_out",
            Sublayer::FfnOut => "ffn_out",
        }
    }
}

/// A sublayer output at a given block.
///
/// Ordered by layer, then attention before feed-forward (execution order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub sublayer: Sublayer,
}

impl HookSite {
    pub fn attention(layer: usize) -> Self {
        Self {
            layer,
            sublayer: Sublayer::AttentionOut,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            sublayer: Sublayer::FfnOut,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::arg(format!(
                "hook site {self} out of range for a {}-layer model",
                config.n_layers
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.sublayer.as_str(), self.layer)
    }
}

impl FromStr for HookSite {
    type Err = Error;

    /// Parses `ffn_out@3` or `attention_out@0`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, layer) = s
            .trim()
            .split_once('@')
            .ok_or_else(|| Error::arg(format!("hook site `{s}` must look like ffn_out@3")))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| Error::arg(format!("hook site `{s}` has a bad layer index")))?;
        let sublayer = match kind {
            "attention_out" | "attn" => Sublayer::AttentionOut,
            "ffn_out" | "ffn" => Sublayer::FfnOut,
            _ => return Err(Error::arg(format!("unknown sublayer `{kind}` in `{s}`"))),
        };
        Ok(Self { layer, sublayer })
    }
}

/// Parses a comma-separated site list.
pub fn parse_sites(s: &str) -> Result<BTreeSet<HookSite>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Causal stacks steer the last three feed-forward outputs, bidirectional
/// stacks only the last one.
pub fn default_sites(config: &ModelConfig) -> BTreeSet<HookSite> {
    let n = config.n_layers;
    match config.attention_mode {
        AttentionMode::Causal => (n.saturating_sub(3)..n).map(HookSite::ffn).collect(),
        AttentionMode::Bidirectional => std::iter::once(HookSite::ffn(n - 1)).collect(),
    }
}

/// Every hook site of a model, in execution order.
pub fn all_sites(config: &ModelConfig) -> Vec<HookSite> {
    (0..config.n_layers)
        .flat_map(|l| [HookSite::attention(l), HookSite::ffn(l)])
        .collect()
}

/// Padded token batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    seq_len: usize,
    token_ids: Vec<u32>,
    /// `true` marks a padding position.
    pad_mask: Vec<bool>,
    labels: Option<Vec<usize>>,
}

impl Batch {
    /// Builds a batch from raw token rows plus an explicit pad mask.
    pub fn new(
        seq_len: usize,
        token_ids: Vec<u32>,
        pad_mask: Vec<bool>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if seq_len == 0 || !token_ids.len().is_multiple_of(seq_len) || token_ids.len() != pad_mask.len() {
            return Err(Error::arg("batch token/mask shapes are inconsistent"));
        }
        let batch = token_ids.len() / seq_len;
        if let Some(l) = &labels {
            if l.len() != batch {
                return Err(Error::arg(format!(
                    "batch has {batch} rows but {} labels",
                    l.len()
                )));
            }
        }
        for (i, row) in pad_mask.chunks(seq_len).enumerate() {
            if row.iter().all(|p| *p) {
                return Err(Error::arg(format!("batch row {i} has no non-pad token")));
            }
        }
        Ok(Self {
            seq_len,
            token_ids,
            pad_mask,
            labels,
        })
    }

    /// Right-pads variable-length sequences to the longest one.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], labels: Option<Vec<usize>>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut pad_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            token_ids.extend_from_slice(s);
            pad_mask.extend(std::iter::repeat_n(false, s.len()));
            token_ids.extend(std::iter::repeat_n(0, seq_len - s.len()));
            pad_mask.extend(std::iter::repeat_n(true, seq_len - s.len()));
        }
        Self::new(seq_len, token_ids, pad_mask, labels)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[bool]) {
        let r = i * self.seq_len..(i + 1) * self.seq_len;
        (&self.token_ids[r.clone()], &self.pad_mask[r])
    }

    /// Same batch with `extra` pad positions appended to every row.
    pub fn with_extra_padding(&self, extra: usize) -> Batch {
        let new_len = self.seq_len + extra;
        let mut token_ids = Vec::with_capacity(self.len() * new_len);
        let mut pad_mask = Vec::with_capacity(self.len() * new_len);
        for i in 0..self.len() {
            let (t, m) = self.row(i);
            token_ids.extend_from_slice(t);
            token_ids.extend(std::iter::repeat_n(0, extra));
            pad_mask.extend_from_slice(m);
            pad_mask.extend(std::iter::repeat_n(true, extra));
        }
        Batch {
            seq_len: new_len,
            token_ids,
            pad_mask,
            labels: self.labels.clone(),
        }
    }
}

/// Additive edits applied at hook sites.
///
/// A site may hold several `(vector, alpha)` pairs; they are added in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interventions {
    edits: BTreeMap<HookSite, Vec<(Vector, f64)>>,
}

impl Interventions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(site: HookSite, vector: Vector, alpha: f64) -> Self {
        let mut out = Self::new();
        out.add(site, vector, alpha);
        out
    }

    pub fn add(&mut self, site: HookSite, vector: Vector, alpha: f64) {
        self.edits.entry(site).or_default().push((vector, alpha));
    }

    /// Appends every edit of `other` after the existing ones.
    pub fn extend(&mut self, other: Interventions) {
        for (site, list) in other.edits {
            self.edits.entry(site).or_default().extend(list);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = &HookSite> {
        self.edits.keys()
    }

    pub fn get(&self, site: &HookSite) -> Option<&[(Vector, f64)]> {
        self.edits.get(site).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookSite, &[(Vector, f64)])> {
        self.edits.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

/// Logits plus pooled captures.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureResult {
    /// `batch × n_classes`.
    pub logits: Matrix,
    /// `batch × d_model` per captured site.
    pub captured: BTreeMap<HookSite, Matrix>,
}

/// Transformer weights and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Model {
    /// Deterministic initialisation from `config.seed`.
    ///
    /// Matrices are uniform in `±1/sqrt(fan_in)`, embeddings uniform in
    /// `±0.1`, layernorm gains one, biases zero, and the classifier head
    /// (weight and bias) zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = params::initialise(&config, &layout);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .find(name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    /// 64-bit digest of the configuration and every weight bit.
    pub fn content_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn check_sites<'a>(&self, sites: impl IntoIterator<Item = &'a HookSite>) -> Result<()> {
        for s in sites {
            s.validate(&self.config)?;
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len() > self.config.max_seq_len {
            // Only positions actually used matter.
            for i in 0..batch.len() {
                let (_, m) = batch.row(i);
                if let Some(last) = m.iter().rposition(|p| !*p) {
                    if last >= self.config.max_seq_len {
                        return Err(Error::arg(format!(
                            "batch row {i} uses position {last} beyond max_seq_len {}",
                            self.config.max_seq_len
                        )));
                    }
                }
            }
        }
        for i in 0..batch.len() {
            let (t, m) = batch.row(i);
            for (tok, pad) in t.iter().zip(m) {
                if !*pad && *tok as usize >= self.config.vocab_size {
                    return Err(Error::arg(format!(
                        "batch row {i} has token {tok} >= vocab_size {}",
                        self.config.vocab_size
                    )));
                }
            }
        }
        if let Some(labels) = batch.labels() {
            if let Some(bad) = labels.iter().find(|l| **l >= self.config.n_classes) {
                return Err(Error::arg(format!(
                    "label {bad} >= n_classes {}",
                    self.config.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Logits plus pooled captures at `sites`; no interventions.
    pub fn forward_with_capture(
        &self,
        batch: &Batch,
        sites: &BTreeSet<HookSite>,
    ) -> Result<CaptureResult> {
        self.forward_full(batch, &Interventions::new(), sites)
    }

    /// Logits with interventions applied; no captures.
    pub fn forward_with_intervention(
        &self,
        batch: &Batch,
        interventions: &Interventions,
    ) -> Result<CaptureResult> {
        self.forward_full(batch, interventions, &BTreeSet::new())
    }

    /// Interventions and captures together. Captures at an intervened site
    /// see the post-intervention values.
    pub fn forward_full(
        &self,
        batch: &Batch,
        interventions: &Interventions,
        sites: &BTreeSet<HookSite>,
    ) -> Result<CaptureResult> {
        self.check_sites(sites)?;
        self.check_sites(interventions.sites())?;
        for (site, edits) in interventions.iter() {
            for (v, a) in edits {
                if v.dim() != self.config.d_model {
                    return Err(Error::arg(format!(
                        "intervention at {site} has dimension {}, model d_model is {}",
                        v.dim(),
                        self.config.d_model
                    )));
                }
                if !a.is_finite() {
                    return Err(Error::arg(format!("intervention alpha at {site} is not finite")));
                }
            }
        }
        self.check_batch(batch)?;
        let packed = Packed::from_batch(batch);
        let out = forward::run(self, &packed, interventions, sites, false)?;
        Ok(CaptureResult {
            logits: out.logits,
            captured: out.captured,
        })
    }

    /// Plain logits.
    pub fn logits(&self, batch: &Batch) -> Result<Matrix> {
        Ok(self.forward_with_intervention(batch, &Interventions::new())?.logits)
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
