use std::collections::{BTreeMap, BTreeSet};

use super::{AttentionMode, Batch, HookSite, Interventions, Model, Sublayer};
use crate::numerics::kernels::{dot, linear};
use crate::error::Result;
use crate::numerics::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Non-pad tokens of a batch laid end to end.
///
/// Positions keep their original index so that pad positions behave as if
/// they were masked out of attention.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// `(start, len)` per example.
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    pub fn from_batch(batch: &Batch) -> Self {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (t, m) = batch.row(i);
            let start = tokens.len();
            for (pos, (tok, pad)) in t.iter().zip(m).enumerate() {
                if !*pad {
                    tokens.push(*tok);
                    positions.push(pos);
                }
            }
            segments.push((start, tokens.len() - start));
        }
        Self {
            tokens,
            positions,
            segments,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_examples(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2: LnCache,
    pub b: Vec<f64>,
    pub h_pre: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    pub pooled: Vec<f64>,
}

pub(crate) struct ForwardOutput {
    pub logits: Matrix,
    pub captured: BTreeMap<HookSite, Matrix>,
    pub cache: Option<ForwardCache>,
}

/// Layer norm over rows of `x` (`n×d`); returns output and optionally caches.
pub(crate) fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
    cache: Option<&mut LnCache>,
) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat_all = Vec::new();
    let mut rstd_all = Vec::new();
    let keep = cache.is_some();
    if keep {
        xhat_all = vec![0.0; x.len()];
        rstd_all = vec![0.0; n];
    }
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            o[j] = xh * gain[j] + bias[j];
            if keep {
                xhat_all[r * d + j] = xh;
            }
        }
        if keep {
            rstd_all[r] = rstd;
        }
    }
    if let Some(c) = cache {
        c.xhat = xhat_all;
        c.rstd = rstd_all;
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn apply_and_capture(
    site: HookSite,
    out: &mut [f64],
    d: usize,
    packed: &Packed,
    interventions: &Interventions,
    capture: &BTreeSet<HookSite>,
    captured: &mut BTreeMap<HookSite, Matrix>,
) {
    if let Some(edits) = interventions.get(&site) {
        for (vector, alpha) in edits {
            let v = vector.as_slice();
            for row in out.chunks_exact_mut(d) {
                for (o, x) in row.iter_mut().zip(v) {
                    *o += alpha * x;
                }
            }
        }
    }
    if capture.contains(&site) {
        captured.insert(site, pool(out, d, packed));
    }
}

/// Mean over each example's rows.
fn pool(x: &[f64], d: usize, packed: &Packed) -> Matrix {
    let mut m = Matrix::zeros(packed.n_examples(), d);
    for (e, &(start, len)) in packed.segments.iter().enumerate() {
        let row = m.row_mut(e);
        for t in start..start + len {
            for (acc, v) in row.iter_mut().zip(&x[t * d..(t + 1) * d]) {
                *acc += v;
            }
        }
        let inv = len as f64;
        row.iter_mut().for_each(|v| *v /= inv);
    }
    m
}

pub(crate) fn run(
    model: &Model,
    packed: &Packed,
    interventions: &Interventions,
    capture: &BTreeSet<HookSite>,
    keep_cache: bool,
) -> Result<ForwardOutput> {
    let c = model.config();
    let lay = model.layout();
    let p = model.params();
    let d = c.d_model;
    let ff = c.d_ff;
    let nh = c.n_heads;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_total = packed.n_tokens();
    let causal = c.attention_mode == AttentionMode::Causal;

    let mut captured = BTreeMap::new();
    let mut cache = keep_cache.then(ForwardCache::default);

    // Embeddings.
    let mut x = vec![0.0; t_total * d];
    for t in 0..t_total {
        let tok = packed.tokens[t] as usize;
        let pos = packed.positions[t];
        let te = &p[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d];
        let pe = &p[lay.pos_emb + pos * d..lay.pos_emb + (pos + 1) * d];
        for j in 0..d {
            x[t * d + j] = te[j] + pe[j];
        }
    }

    for (l, o) in lay.layers.iter().enumerate() {
        let mut lc = LayerCache::default();

        // Attention sublayer.
        let a = layer_norm(
            &x,
            &p[o.ln1_g..o.ln1_g + d],
            &p[o.ln1_b..o.ln1_b + d],
            d,
            keep_cache.then_some(&mut lc.ln1),
        );
        let mut q = vec![0.0; t_total * d];
        let mut k = vec![0.0; t_total * d];
        let mut v = vec![0.0; t_total * d];
        linear(&a, &p[o.wq..o.wq + d * d], &p[o.bq..o.bq + d], t_total, d, d, &mut q);
        linear(&a, &p[o.wk..o.wk + d * d], &p[o.bk..o.bk + d], t_total, d, d, &mut k);
        linear(&a, &p[o.wv..o.wv + d * d], &p[o.bv..o.bv + d], t_total, d, d, &mut v);

        let mut ctx = vec![0.0; t_total * d];
        let mut probs_all = Vec::new();
        for &(start, len) in &packed.segments {
            for h in 0..nh {
                let hs = h * dh;
                let mut probs = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &q[(start + i) * d + hs..(start + i) * d + hs + dh];
                    let upto = if causal { i + 1 } else { len };
                    let row = &mut probs[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..upto {
                        let kj = &k[(start + j) * d + hs..(start + j) * d + hs + dh];
                        row[j] = dot(qi, kj) * scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(upto) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut().take(upto) {
                        *r /= sum;
                    }
                    let ci = (start + i) * d + hs;
                    for j in 0..upto {
                        let pij = row[j];
                        let vj = &v[(start + j) * d + hs..(start + j) * d + hs + dh];
                        for (cv, vv) in ctx[ci..ci + dh].iter_mut().zip(vj) {
                            *cv += pij * vv;
                        }
                    }
                }
                if keep_cache {
                    probs_all.extend_from_slice(&probs);
                }
            }
        }
        let mut attn = vec![0.0; t_total * d];
        linear(&ctx, &p[o.wo..o.wo + d * d], &p[o.bo..o.bo + d], t_total, d, d, &mut attn);
        apply_and_capture(
            HookSite {
                layer: l,
                sublayer: Sublayer::AttentionOut,
            },
            &mut attn,
            d,
            packed,
            interventions,
            capture,
            &mut captured,
        );
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv += av;
        }

        // Feed-forward sublayer.
        let b = layer_norm(
            &x,
            &p[o.ln2_g..o.ln2_g + d],
            &p[o.ln2_b..o.ln2_b + d],
            d,
            keep_cache.then_some(&mut lc.ln2),
        );
        let mut h_pre = vec![0.0; t_total * ff];
        linear(&b, &p[o.w1..o.w1 + d * ff], &p[o.b1..o.b1 + ff], t_total, d, ff, &mut h_pre);
        let g: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
        let mut f = vec![0.0; t_total * d];
        linear(&g, &p[o.w2..o.w2 + ff * d], &p[o.b2..o.b2 + d], t_total, ff, d, &mut f);
        apply_and_capture(
            HookSite {
                layer: l,
                sublayer: Sublayer::FfnOut,
            },
            &mut f,
            d,
            packed,
            interventions,
            capture,
            &mut captured,
        );
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }

        if let Some(cache) = cache.as_mut() {
            lc.a = a;
            lc.q = q;
            lc.k = k;
            lc.v = v;
            lc.probs = probs_all;
            lc.ctx = ctx;
            lc.b = b;
            lc.h_pre = h_pre;
            lc.g = g;
            cache.layers.push(lc);
        }
    }

    let mut lnf = LnCache::default();
    let z = layer_norm(
        &x,
        &p[lay.lnf_g..lay.lnf_g + d],
        &p[lay.lnf_b..lay.lnf_b + d],
        d,
        keep_cache.then_some(&mut lnf),
    );
    let pooled = pool(&z, d, packed);
    let nc = c.n_classes;
    let mut logits = vec![0.0; packed.n_examples() * nc];
    linear(
        pooled.as_slice(),
        &p[lay.head_w..lay.head_w + d * nc],
        &p[lay.head_b..lay.head_b + nc],
        packed.n_examples(),
        d,
        nc,
        &mut logits,
    );
    if let Some(cache) = cache.as_mut() {
        cache.lnf = lnf;
        cache.pooled = pooled.into_vec();
    }
    Ok(ForwardOutput {
        logits: Matrix::from_vec(packed.n_examples(), nc, logits)?,
        captured,
        cache,
    })
}
