use super::forward::{self, gelu_grad, ForwardCache, LnCache, Packed};
use super::{AttentionMode, Batch, Interventions, Model};
use crate::error::{Error, Result};
use crate::numerics::kernels::{column_sums_acc, dot, matmul_nt, matmul_tn_acc};
use crate::numerics::{log_sum_exp, softmax_in_place, Matrix};

/// Gradient buffer sharing the model's flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Loss summary of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Number of examples whose argmax matches the label.
    pub correct: usize,
    pub logits: Matrix,
}

impl Model {
    /// Mean cross-entropy of a labelled batch, no gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let labels = batch
            .labels()
            .ok_or_else(|| Error::arg("loss needs a labelled batch"))?;
        let logits = self.logits(batch)?;
        Ok(mean_cross_entropy(&logits, labels))
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(LossOutput, Gradients)> {
        self.check_batch(batch)?;
        let labels = batch
            .labels()
            .ok_or_else(|| Error::arg("gradients need a labelled batch"))?
            .to_vec();
        let packed = Packed::from_batch(batch);
        let out = forward::run(
            self,
            &packed,
            &Interventions::new(),
            &Default::default(),
            true,
        )?;
        let cache = out.cache.expect("cache requested");
        let nc = self.config().n_classes;
        let b = packed.n_examples();
        let loss = mean_cross_entropy(&out.logits, &labels);

        let mut dlogits = vec![0.0; b * nc];
        let mut correct = 0;
        for (e, &y) in labels.iter().enumerate() {
            let row = out.logits.row(e);
            if super::argmax(row) == y {
                correct += 1;
            }
            let dl = &mut dlogits[e * nc..(e + 1) * nc];
            dl.copy_from_slice(row);
            softmax_in_place(dl);
            dl[y] -= 1.0;
            dl.iter_mut().for_each(|v| *v /= b as f64);
        }
        let mut grads = Gradients::zeros(self.num_params());
        backward(self, &packed, &cache, &dlogits, &mut grads.0);
        Ok((
            LossOutput {
                loss,
                correct,
                logits: out.logits,
            },
            grads,
        ))
    }
}

pub(crate) fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (e, &y) in labels.iter().enumerate() {
        let row = logits.row(e);
        total += log_sum_exp(row) - row[y];
    }
    total / labels.len() as f64
}

/// Returns `dx` and accumulates gain/bias gradients.
fn ln_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = dyr[j] * gain[j];
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let rstd = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rstd * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn ln_backward_into(
    dy: &[f64],
    cache: &LnCache,
    params: &[f64],
    g_off: usize,
    b_off: usize,
    d: usize,
    grads: &mut [f64],
) -> Vec<f64> {
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let dx = ln_backward(dy, cache, &params[g_off..g_off + d], d, &mut dg, &mut db);
    for j in 0..d {
        grads[g_off + j] += dg[j];
        grads[b_off + j] += db[j];
    }
    dx
}

fn backward(model: &Model, packed: &Packed, cache: &ForwardCache, dlogits: &[f64], grads: &mut [f64]) {
    let c = model.config();
    let lay = model.layout();
    let p = model.params();
    let d = c.d_model;
    let ff = c.d_ff;
    let nc = c.n_classes;
    let nh = c.n_heads;
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_total = packed.n_tokens();
    let b = packed.n_examples();
    let causal = c.attention_mode == AttentionMode::Causal;

    // Classifier head.
    let mut dpooled = vec![0.0; b * d];
    matmul_nt(dlogits, &p[lay.head_w..lay.head_w + d * nc], b, nc, d, &mut dpooled);
    matmul_tn_acc(
        &cache.pooled,
        dlogits,
        b,
        d,
        nc,
        &mut grads[lay.head_w..lay.head_w + d * nc],
    );
    column_sums_acc(dlogits, nc, &mut grads[lay.head_b..lay.head_b + nc]);

    // Mean pooling.
    let mut dz = vec![0.0; t_total * d];
    for (e, &(start, len)) in packed.segments.iter().enumerate() {
        let src = &dpooled[e * d..(e + 1) * d];
        for t in start..start + len {
            for (o, s) in dz[t * d..(t + 1) * d].iter_mut().zip(src) {
                *o = s / len as f64;
            }
        }
    }
    let mut dx = ln_backward_into(&dz, &cache.lnf, p, lay.lnf_g, lay.lnf_b, d, grads);

    for (o, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // Feed-forward sublayer: x_out = x_mid + W2·gelu(W1·ln2(x_mid)).
        let df = &dx;
        matmul_tn_acc(&lc.g, df, t_total, ff, d, &mut grads[o.w2..o.w2 + ff * d]);
        column_sums_acc(df, d, &mut grads[o.b2..o.b2 + d]);
        let mut dhid = vec![0.0; t_total * ff];
        matmul_nt(df, &p[o.w2..o.w2 + ff * d], t_total, d, ff, &mut dhid);
        for (g, z) in dhid.iter_mut().zip(&lc.h_pre) {
            *g *= gelu_grad(*z);
        }
        matmul_tn_acc(&lc.b, &dhid, t_total, d, ff, &mut grads[o.w1..o.w1 + d * ff]);
        column_sums_acc(&dhid, ff, &mut grads[o.b1..o.b1 + ff]);
        let mut dln2 = vec![0.0; t_total * d];
        matmul_nt(&dhid, &p[o.w1..o.w1 + d * ff], t_total, ff, d, &mut dln2);
        let dres = ln_backward_into(&dln2, &lc.ln2, p, o.ln2_g, o.ln2_b, d, grads);
        let dx_mid: Vec<f64> = dx.iter().zip(&dres).map(|(a, b)| a + b).collect();

        // Attention sublayer: x_mid = x_in + Wo·attn(ln1(x_in)).
        let dattn = &dx_mid;
        matmul_tn_acc(&lc.ctx, dattn, t_total, d, d, &mut grads[o.wo..o.wo + d * d]);
        column_sums_acc(dattn, d, &mut grads[o.bo..o.bo + d]);
        let mut dctx = vec![0.0; t_total * d];
        matmul_nt(dattn, &p[o.wo..o.wo + d * d], t_total, d, d, &mut dctx);

        let mut dq = vec![0.0; t_total * d];
        let mut dk = vec![0.0; t_total * d];
        let mut dv = vec![0.0; t_total * d];
        let mut probs_off = 0usize;
        for &(start, len) in &packed.segments {
            for h in 0..nh {
                let hs = h * dh;
                let probs = &lc.probs[probs_off..probs_off + len * len];
                probs_off += len * len;
                let mut ds = vec![0.0; len];
                for i in 0..len {
                    let upto = if causal { i + 1 } else { len };
                    let prow = &probs[i * len..(i + 1) * len];
                    let dci = &dctx[(start + i) * d + hs..(start + i) * d + hs + dh];
                    let mut weighted = 0.0;
                    for j in 0..upto {
                        let vj = &lc.v[(start + j) * d + hs..(start + j) * d + hs + dh];
                        ds[j] = dot(dci, vj);
                        weighted += prow[j] * ds[j];
                        let pij = prow[j];
                        let dvj = &mut dv[(start + j) * d + hs..(start + j) * d + hs + dh];
                        for (o, x) in dvj.iter_mut().zip(dci) {
                            *o += pij * x;
                        }
                    }
                    for j in 0..upto {
                        let s = prow[j] * (ds[j] - weighted) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let qi = (start + i) * d + hs;
                        let kj = (start + j) * d + hs;
                        for u in 0..dh {
                            dq[qi + u] += s * lc.k[kj + u];
                            dk[kj + u] += s * lc.q[qi + u];
                        }
                    }
                }
            }
        }
        let mut dln1 = vec![0.0; t_total * d];
        let mut tmp = vec![0.0; t_total * d];
        for (dproj, w, bias) in [(&dq, o.wq, o.bq), (&dk, o.wk, o.bk), (&dv, o.wv, o.bv)] {
            matmul_tn_acc(&lc.a, dproj, t_total, d, d, &mut grads[w..w + d * d]);
            column_sums_acc(dproj, d, &mut grads[bias..bias + d]);
            matmul_nt(dproj, &p[w..w + d * d], t_total, d, d, &mut tmp);
            for (acc, v) in dln1.iter_mut().zip(&tmp) {
                *acc += v;
            }
        }
        let dres = ln_backward_into(&dln1, &lc.ln1, p, o.ln1_g, o.ln1_b, d, grads);
        dx = dx_mid.iter().zip(&dres).map(|(a, b)| a + b).collect();
    }

    for t in 0..t_total {
        let tok = packed.tokens[t] as usize;
        let pos = packed.positions[t];
        let src = &dx[t * d..(t + 1) * d];
        for (g, s) in grads[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d]
            .iter_mut()
            .zip(src)
        {
            *g += s;
        }
        for (g, s) in grads[lay.pos_emb + pos * d..lay.pos_emb + (pos + 1) * d]
            .iter_mut()
            .zip(src)
        {
            *g += s;
        }
    }
}
