use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::numerics::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named tensors packed into one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let d = c.d_model;
        let tok_emb = push("tok_emb".into(), vec![c.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![c.max_seq_len, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                wq: push(p("attn.wq"), vec![d, d]),
                bq: push(p("attn.bq"), vec![d]),
                wk: push(p("attn.wk"), vec![d, d]),
                bk: push(p("attn.bk"), vec![d]),
                wv: push(p("attn.wv"), vec![d, d]),
                bv: push(p("attn.bv"), vec![d]),
                wo: push(p("attn.wo"), vec![d, d]),
                bo: push(p("attn.bo"), vec![d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                w1: push(p("ffn.w1"), vec![d, c.d_ff]),
                b1: push(p("ffn.b1"), vec![c.d_ff]),
                w2: push(p("ffn.w2"), vec![c.d_ff, d]),
                b2: push(p("ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push("ln_final.gain".into(), vec![d]);
        let lnf_b = push("ln_final.bias".into(), vec![d]);
        let head_w = push("head.weight".into(), vec![d, c.n_classes]);
        let head_b = push("head.bias".into(), vec![c.n_classes]);
        Self {
            tensors,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor owning flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }
}

pub(crate) fn initialise(c: &ModelConfig, layout: &ParamLayout) -> Vec<f64> {
    let mut rng = seeded_rng(c.seed);
    let mut params = vec![0.0; layout.total()];
    for t in layout.tensors() {
        let name = t.name.as_str();
        let slot = &mut params[t.range()];
        if name.starts_with("head.") || name.ends_with(".bias") || is_bias_vector(name) {
            // zeros
        } else if name.ends_with(".gain") {
            slot.fill(1.0);
        } else if name.ends_with("_emb") {
            for v in slot.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        } else {
            let fan_in = t.shape[0] as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in slot.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    params
}

fn is_bias_vector(name: &str) -> bool {
    [".bq", ".bk", ".bv", ".bo", ".b1", ".b2"]
        .iter()
        .any(|s| name.ends_with(s))
}
