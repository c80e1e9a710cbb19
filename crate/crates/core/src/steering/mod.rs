//! Steering vectors: per-site differences between the mean pooled
//! representation of a target pool and that of a source pool.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TemporalExample;
use crate::error::{Error, Result};
use crate::model::{Batch, HookSite, Interventions, Model};
use crate::numerics::{mean_rows, truncated_svd, Matrix, Vector};
use crate::trainer::EVAL_BATCH;

pub use io::{load, load_for_model, save, FORMAT_VERSION, MAGIC};

/// Pooling recorded in every set built by this crate.
pub const POOLING: &str = "mean_non_pad";
/// Where vectors are captured and added.
pub const HOOK_POSITION: &str = "sublayer_out_pre_residual";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    MeanDiff,
    /// Mean difference of rank-k reconstructions.
    SvdK(usize),
    /// `j/d` times a set spanning `d` periods.
    Interpolated { j: usize, d: usize },
    /// `±j` times a set spanning one period; negative for backward.
    Extrapolated { j: i64 },
    Composed,
    Zero,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::MeanDiff => f.write_str("mean_diff"),
            Method::SvdK(k) => write!(f, "svd_k({k})"),
            Method::Interpolated { j, d } => write!(f, "interpolated({j}/{d})"),
            Method::Extrapolated { j } => write!(f, "extrapolated({j})"),
            Method::Composed => f.write_str("composed"),
            Method::Zero => f.write_str("zero"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(format!("unknown steering method `{s}`"));
        let arg = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')'))
        };
        match s {
            "mean_diff" => return Ok(Method::MeanDiff),
            "composed" => return Ok(Method::Composed),
            "zero" => return Ok(Method::Zero),
            _ => {}
        }
        if let Some(k) = arg("svd_k(") {
            return k.parse().map(Method::SvdK).map_err(|_| bad());
        }
        if let Some(jd) = arg("interpolated(") {
            let (j, d) = jd.split_once('/').ok_or_else(bad)?;
            return Ok(Method::Interpolated {
                j: j.parse().map_err(|_| bad())?,
                d: d.parse().map_err(|_| bad())?,
            });
        }
        if let Some(j) = arg("extrapolated(") {
            return j.parse().map(|j| Method::Extrapolated { j }).map_err(|_| bad());
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(Error::arg(format!("direction must be forward or backward, got `{s}`"))),
        }
    }
}

/// Per-site pool means kept from extraction so that composing sets that
/// share an intermediate pool reproduces direct extraction bit for bit.
#[derive(Debug, Clone, PartialEq)]
struct Anchors {
    source: BTreeMap<HookSite, Vector>,
    target: BTreeMap<HookSite, Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectorSet {
    pub vectors: BTreeMap<HookSite, Vector>,
    pub d_model: usize,
    pub source_period: i64,
    pub target_period: i64,
    pub n_source: usize,
    pub n_target: usize,
    pub method: Method,
    pub pooling: String,
    pub hook_position: String,
    pub model_hash: u64,
    anchors: Option<Anchors>,
}

impl SteeringVectorSet {
    /// A set with explicit vectors and no extraction anchors.
    #[allow(clippy::too_many_arguments)]
    pub fn from_vectors(
        vectors: BTreeMap<HookSite, Vector>,
        source_period: i64,
        target_period: i64,
        n_source: usize,
        n_target: usize,
        method: Method,
        model_hash: u64,
    ) -> Result<Self> {
        let d_model = vectors
            .values()
            .next()
            .map(Vector::dim)
            .ok_or_else(|| Error::arg("a steering set needs at least one site"))?;
        if vectors.values().any(|v| v.dim() != d_model) {
            return Err(Error::arg("steering vectors differ in dimension"));
        }
        if n_source == 0 || n_target == 0 {
            return Err(Error::arg("n_source and n_target must be >= 1"));
        }
        Ok(Self {
            vectors,
            d_model,
            source_period,
            target_period,
            n_source,
            n_target,
            method,
            pooling: POOLING.to_string(),
            hook_position: HOOK_POSITION.to_string(),
            model_hash,
            anchors: None,
        })
    }

    /// Zero vectors at `sites`, the identity for [`compose`].
    pub fn zeros(
        sites: &BTreeSet<HookSite>,
        d_model: usize,
        source_period: i64,
        target_period: i64,
        model_hash: u64,
    ) -> Result<Self> {
        let vectors = sites.iter().map(|s| (*s, Vector::zeros(d_model))).collect();
        Self::from_vectors(vectors, source_period, target_period, 1, 1, Method::Zero, model_hash)
    }

    pub fn sites(&self) -> BTreeSet<HookSite> {
        self.vectors.keys().copied().collect()
    }

    /// Same metadata, vectors multiplied by `c`, anchors dropped.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.vectors = self.vectors.iter().map(|(s, v)| (*s, v.scale(c))).collect();
        out.anchors = None;
        out
    }

    /// Largest per-site Euclidean distance to `other`.
    pub fn max_site_distance(&self, other: &Self) -> Result<f64> {
        check_same_sites(self, other)?;
        Ok(self
            .vectors
            .iter()
            .map(|(s, v)| v.sub(&other.vectors[s]).norm())
            .fold(0.0, f64::max))
    }

    /// Errors unless the set was extracted from `model`.
    pub fn check_model(&self, model: &Model, allow_foreign: bool) -> Result<()> {
        if self.d_model != model.config().d_model {
            return Err(Error::Mismatch(format!(
                "steering set has d_model {}, model has {}",
                self.d_model,
                model.config().d_model
            )));
        }
        for s in self.vectors.keys() {
            s.validate(model.config())?;
        }
        if !allow_foreign && self.model_hash != model.content_hash() {
            return Err(Error::Mismatch(format!(
                "steering set was extracted from model {:016x}, not {:016x}",
                self.model_hash,
                model.content_hash()
            )));
        }
        Ok(())
    }
}

fn check_same_sites(a: &SteeringVectorSet, b: &SteeringVectorSet) -> Result<()> {
    if a.sites() != b.sites() {
        return Err(Error::Mismatch("steering sets cover different sites".into()));
    }
    if a.d_model != b.d_model {
        return Err(Error::Mismatch("steering sets differ in d_model".into()));
    }
    Ok(())
}

/// Pooled captures of `examples` at `sites`, one row per example.
///
/// Rows are sorted bitwise so that later means do not depend on the input
/// order.
pub fn capture(
    model: &Model,
    examples: &[TemporalExample],
    sites: &BTreeSet<HookSite>,
) -> Result<BTreeMap<HookSite, Matrix>> {
    if examples.is_empty() {
        return Err(Error::arg("cannot capture an empty slice"));
    }
    if sites.is_empty() {
        return Err(Error::arg("no hook sites given"));
    }
    let d = model.config().d_model;
    let mut rows: BTreeMap<HookSite, Vec<Vec<f64>>> = BTreeMap::new();
    for chunk in examples.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, None)?;
        let out = model.forward_with_capture(&batch, sites)?;
        for (site, m) in out.captured {
            let entry = rows.entry(site).or_default();
            entry.extend((0..m.rows()).map(|r| m.row(r).to_vec()));
        }
    }
    rows.into_iter()
        .map(|(site, mut r)| {
            r.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let flat: Vec<f64> = r.into_iter().flatten().collect();
            let n = flat.len() / d;
            Ok((site, Matrix::from_vec(n, d, flat)?))
        })
        .collect()
}

fn site_means(captures: &BTreeMap<HookSite, Matrix>) -> Result<BTreeMap<HookSite, Vector>> {
    captures
        .iter()
        .map(|(s, m)| Ok((*s, mean_rows(m)?)))
        .collect()
}

fn pool_size(captures: &BTreeMap<HookSite, Matrix>) -> Result<usize> {
    let n = captures
        .values()
        .next()
        .map(Matrix::rows)
        .ok_or_else(|| Error::arg("no captures"))?;
    if captures.values().any(|m| m.rows() != n) {
        return Err(Error::arg("capture matrices differ in row count"));
    }
    Ok(n)
}

/// Mean difference from precomputed captures (rows are examples).
pub fn steering_from_captures(
    source: &BTreeMap<HookSite, Matrix>,
    target: &BTreeMap<HookSite, Matrix>,
    source_period: i64,
    target_period: i64,
    model_hash: u64,
) -> Result<SteeringVectorSet> {
    if source.keys().ne(target.keys()) {
        return Err(Error::Mismatch("source and target captures cover different sites".into()));
    }
    let src = site_means(source)?;
    let tgt = site_means(target)?;
    let vectors = src
        .iter()
        .map(|(s, a)| (*s, tgt[s].sub(a)))
        .collect();
    let mut set = SteeringVectorSet::from_vectors(
        vectors,
        source_period,
        target_period,
        pool_size(source)?,
        pool_size(target)?,
        Method::MeanDiff,
        model_hash,
    )?;
    set.anchors = Some(Anchors {
        source: src,
        target: tgt,
    });
    Ok(set)
}

fn slice_period(slice: &[TemporalExample]) -> i64 {
    slice.first().map(|e| e.period).unwrap_or(0)
}

/// `mean(target captures) − mean(source captures)` at every site.
///
/// Periods are taken from the first example of each slice.
pub fn extract(
    model: &Model,
    source: &[TemporalExample],
    target: &[TemporalExample],
    sites: &BTreeSet<HookSite>,
) -> Result<SteeringVectorSet> {
    let src = capture(model, source, sites)?;
    let tgt = capture(model, target, sites)?;
    steering_from_captures(
        &src,
        &tgt,
        slice_period(source),
        slice_period(target),
        model.content_hash(),
    )
}

/// Mean of the rank-`k` reconstruction's rows.
pub fn lowrank_mean(m: &Matrix, k: usize) -> Result<Vector> {
    let f = truncated_svd(m, k)?;
    mean_rows(&f.reconstruct())
}

/// Low-rank mean difference from precomputed captures.
pub fn lowrank_from_captures(
    source: &BTreeMap<HookSite, Matrix>,
    target: &BTreeMap<HookSite, Matrix>,
    k: usize,
    source_period: i64,
    target_period: i64,
    model_hash: u64,
) -> Result<SteeringVectorSet> {
    if source.keys().ne(target.keys()) {
        return Err(Error::Mismatch("source and target captures cover different sites".into()));
    }
    let n_s = pool_size(source)?;
    let n_t = pool_size(target)?;
    let d = source.values().next().map(Matrix::cols).unwrap_or(0);
    let max_k = d.min(n_s).min(n_t);
    if k == 0 || k > max_k {
        return Err(Error::arg(format!(
            "rank {k} outside [1, {max_k}] (d_model {d}, pools {n_s} and {n_t})"
        )));
    }
    let mut vectors = BTreeMap::new();
    for (site, s) in source {
        let a = lowrank_mean(s, k)?;
        let b = lowrank_mean(&target[site], k)?;
        vectors.insert(*site, b.sub(&a));
    }
    SteeringVectorSet::from_vectors(
        vectors,
        source_period,
        target_period,
        n_s,
        n_t,
        Method::SvdK(k),
        model_hash,
    )
}

/// Mean difference of rank-`k` reconstructions of the capture matrices.
pub fn extract_lowrank(
    model: &Model,
    source: &[TemporalExample],
    target: &[TemporalExample],
    sites: &BTreeSet<HookSite>,
    k: usize,
) -> Result<SteeringVectorSet> {
    let src = capture(model, source, sites)?;
    let tgt = capture(model, target, sites)?;
    lowrank_from_captures(
        &src,
        &tgt,
        k,
        slice_period(source),
        slice_period(target),
        model.content_hash(),
    )
}

/// Interventions adding `alpha·v` at each site of the set.
pub fn apply(set: &SteeringVectorSet, alpha: f64) -> Result<Interventions> {
    if !alpha.is_finite() {
        return Err(Error::arg("alpha must be finite"));
    }
    let mut out = Interventions::new();
    for (site, v) in &set.vectors {
        out.add(*site, v.clone(), alpha);
    }
    Ok(out)
}

/// [`apply`] after checking that the set belongs to `model`.
pub fn apply_to(
    set: &SteeringVectorSet,
    model: &Model,
    alpha: f64,
    allow_foreign: bool,
) -> Result<Interventions> {
    set.check_model(model, allow_foreign)?;
    apply(set, alpha)
}

/// `j/d` of a set spanning `d = |target − source|` periods.
pub fn interpolate(set: &SteeringVectorSet, j: usize) -> Result<SteeringVectorSet> {
    let span = set.target_period - set.source_period;
    let d = span.unsigned_abs() as usize;
    if d == 0 {
        return Err(Error::arg("cannot interpolate a set with equal source and target"));
    }
    if j > d {
        return Err(Error::arg(format!("interpolation step {j} outside [0, {d}]")));
    }
    let mut out = if j == d {
        let mut s = set.clone();
        s.anchors = None;
        s
    } else {
        set.scaled(j as f64 / d as f64)
    };
    out.target_period = set.source_period + span.signum() * j as i64;
    out.method = Method::Interpolated { j, d };
    Ok(out)
}

/// `j` times a one-period set, forward; `−j` times it, backward.
///
/// Backward applied to `v_{t→t+1}` gives `v̂_{t→t−j}`.
pub fn extrapolate(
    set: &SteeringVectorSet,
    j: usize,
    direction: Direction,
) -> Result<SteeringVectorSet> {
    let step = set.target_period - set.source_period;
    if step.abs() != 1 {
        return Err(Error::arg(format!(
            "extrapolation needs a set spanning one period, got {} -> {}",
            set.source_period, set.target_period
        )));
    }
    if j == 0 {
        return Err(Error::arg("extrapolation step must be >= 1"));
    }
    let sign = match direction {
        Direction::Forward => 1i64,
        Direction::Backward => -1,
    };
    let factor = sign * j as i64;
    let mut out = if factor == 1 {
        let mut s = set.clone();
        s.anchors = None;
        s
    } else {
        set.scaled(factor as f64)
    };
    out.target_period = set.source_period + factor * step;
    out.method = Method::Extrapolated { j: factor };
    Ok(out)
}

/// `v_{s→t} + v_{t→u}`.
///
/// When both sets carry extraction anchors and share the intermediate pool
/// mean, the result is recomputed from the outer anchors, so it equals direct
/// extraction between the outer pools exactly.
pub fn compose(a: &SteeringVectorSet, b: &SteeringVectorSet) -> Result<SteeringVectorSet> {
    check_same_sites(a, b)?;
    if a.target_period != b.source_period {
        return Err(Error::Mismatch(format!(
            "cannot compose {}->{} with {}->{}",
            a.source_period, a.target_period, b.source_period, b.target_period
        )));
    }
    if a.model_hash != b.model_hash {
        return Err(Error::Mismatch("steering sets come from different models".into()));
    }
    let shared = match (&a.anchors, &b.anchors) {
        (Some(x), Some(y)) if x.target == y.source => Some((x, y)),
        _ => None,
    };
    let (vectors, anchors) = match shared {
        Some((x, y)) => {
            let v = x
                .source
                .iter()
                .map(|(s, src)| (*s, y.target[s].sub(src)))
                .collect();
            let anchors = Anchors {
                source: x.source.clone(),
                target: y.target.clone(),
            };
            (v, Some(anchors))
        }
        None => {
            let v = a
                .vectors
                .iter()
                .map(|(s, v)| (*s, v.add(&b.vectors[s])))
                .collect();
            (v, None)
        }
    };
    let mut out = SteeringVectorSet::from_vectors(
        vectors,
        a.source_period,
        b.target_period,
        a.n_source,
        b.n_target,
        Method::Composed,
        a.model_hash,
    )?;
    out.anchors = anchors;
    Ok(out)
}
