//! The alignment network (joint video/text transformer with an alignability
//! head) and the auxiliary dual encoder (video-only transformer compared
//! with raw sentence embeddings).
//!
//! Both share the visual projection, the text backbone and the learnable
//! temporal embedding. Parameters live in a flat [`ModelParams`] store and
//! are bound to a [`Tape`] through a [`Graph`], either as trainable leaves
//! or as frozen constants (used for the EMA teacher).

mod checkpoint;
mod params;

use std::cell::RefCell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Axis, ParamId, Tape, Tensor2D, TensorError, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use params::{BlockIds, Layout, ModelParams, StackIds};

/// Denominator clamp for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} out of vocabulary (size {vocab})")]
    OutOfVocabulary { token: u32, vocab: usize },
    #[error("sentence {0} has no tokens or more than the allowed maximum")]
    BadSentence(usize),
    #[error("window of {len} steps exceeds max_t {max_t}")]
    WindowTooLong { len: usize, max_t: usize },
    #[error("feature dimension {got} does not match the model's {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Longest window in seconds; one temporal-embedding row per second.
    pub max_t: usize,
    /// Raw visual feature size.
    pub feature_dim: usize,
    /// Word embedding size fed to the text MLP.
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Adds a learned video/text type embedding to the joint transformer input.
    pub segment_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 64,
            d_ff: 256,
            max_t: 64,
            feature_dim: 64,
            text_dim: 32,
            vocab_size: crate::corpus::Vocabulary::default().size(),
            max_tokens: crate::corpus::MAX_TOKENS,
            segment_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.max_t,
            self.feature_dim,
            self.text_dim,
            self.vocab_size,
            self.max_tokens,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Binds parameters to a tape, registering each at most once.
pub struct Graph<'a> {
    pub tape: &'a Tape,
    params: &'a ModelParams,
    trainable: bool,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Graph<'a> {
    /// Parameters become trainable leaves keyed by their [`ParamId`].
    pub fn trainable(tape: &'a Tape, params: &'a ModelParams) -> Self {
        Self::new(tape, params, true)
    }

    /// Parameters become constants: nothing reaches the gradient map.
    pub fn frozen(tape: &'a Tape, params: &'a ModelParams) -> Self {
        Self::new(tape, params, false)
    }

    fn new(tape: &'a Tape, params: &'a ModelParams, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn layout(&self) -> &Layout {
        &self.params.layout
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.params.tensor(id);
        let v = if self.trainable {
            self.tape.param(id, t)
        } else {
            self.tape.constant(t.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    fn linear(&self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = self.tape.matmul(x, self.p(w))?;
        Ok(self.tape.add_row(y, self.p(b))?)
    }

    fn layer_norm(&self, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = self.tape.layer_norm(x)?;
        let n = self.tape.mul_row(n, self.p(gain))?;
        Ok(self.tape.add_row(n, self.p(bias))?)
    }

    fn attention(&self, x: Var, b: &BlockIds) -> Result<Var> {
        let cfg = self.config();
        let dh = cfg.d_model / cfg.n_heads;
        let q = self.linear(x, b.wq, b.bq)?;
        let k = self.linear(x, b.wk, b.bk)?;
        let v = self.linear(x, b.wv, b.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scores = self.tape.scale(scores, scale)?;
            let attn = self.tape.row_softmax(scores)?;
            heads.push(self.tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)?
        };
        self.linear(merged, b.wo, b.bo)
    }

    /// Pre-norm encoder block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
    fn block(&self, x: Var, b: &BlockIds) -> Result<Var> {
        let h = self.layer_norm(x, b.ln1_g, b.ln1_b)?;
        let a = self.attention(h, b)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(x, b.ln2_g, b.ln2_b)?;
        let h = self.linear(h, b.w1, b.b1)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, b.w2, b.b2)?;
        Ok(self.tape.add(x, h)?)
    }

    fn stack(&self, x: Var, s: &StackIds) -> Result<Var> {
        let mut x = x;
        for b in &s.blocks {
            x = self.block(x, b)?;
        }
        self.layer_norm(x, s.ln_g, s.ln_b)
    }

    /// Word embeddings through the 2-layer MLP, max-pooled per sentence.
    /// Returns `K x d_model`. No positional information is used.
    pub fn embed_text(&self, sentences: &[Vec<u32>]) -> Result<Var> {
        let cfg = self.config();
        let l = self.layout();
        let mut flat = Vec::new();
        let mut lens = Vec::with_capacity(sentences.len());
        for (k, toks) in sentences.iter().enumerate() {
            if toks.is_empty() || toks.len() > cfg.max_tokens {
                return Err(ModelError::BadSentence(k));
            }
            for &t in toks {
                if t as usize >= cfg.vocab_size {
                    return Err(ModelError::OutOfVocabulary {
                        token: t,
                        vocab: cfg.vocab_size,
                    });
                }
                flat.push(t as usize);
            }
            lens.push(toks.len());
        }
        if sentences.is_empty() {
            return Err(ModelError::Config("embed_text needs at least one sentence".into()));
        }
        let words = self.tape.gather_rows(self.p(l.token_emb), &flat)?;
        let h = self.linear(words, l.txt_w1, l.txt_b1)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, l.txt_w2, l.txt_b2)?;
        let mut pooled = Vec::with_capacity(lens.len());
        let mut at = 0;
        for n in lens {
            let rows = self.tape.slice_rows(h, at, n)?;
            pooled.push(self.tape.max_over(rows, Axis::Rows)?);
            at += n;
        }
        Ok(self.tape.concat_rows(&pooled)?)
    }

    /// Per-timestep linear projection of raw features, `T x d_model`.
    pub fn embed_visual(&self, features: &Tensor2D) -> Result<Var> {
        let cfg = self.config();
        if features.rows() > cfg.max_t {
            return Err(ModelError::WindowTooLong {
                len: features.rows(),
                max_t: cfg.max_t,
            });
        }
        if features.cols() != cfg.feature_dim {
            return Err(ModelError::FeatureDim {
                got: features.cols(),
                want: cfg.feature_dim,
            });
        }
        let x = self.tape.constant(features.clone());
        let l = self.layout();
        self.linear(x, l.vis_w, l.vis_b)
    }

    fn with_temporal_embedding(&self, v: Var) -> Result<Var> {
        let (t, _) = self.tape.shape(v);
        if t > self.config().max_t {
            return Err(ModelError::WindowTooLong {
                len: t,
                max_t: self.config().max_t,
            });
        }
        let te = self.tape.slice_rows(self.p(self.layout().te), 0, t)?;
        Ok(self.tape.add(v, te)?)
    }

    /// Joint transformer over `[v + TE; s]`, split back into `(v_hat, s_hat)`.
    /// With no sentences, `s_hat` is `None`.
    pub fn multimodal_forward(&self, v: Var, s: Option<Var>) -> Result<(Var, Option<Var>)> {
        let (t, _) = self.tape.shape(v);
        let l = self.layout();
        let mut v_in = self.with_temporal_embedding(v)?;
        let mut s_in = s;
        if let Some(seg) = l.segment_emb {
            let table = self.p(seg);
            let vid = self.tape.slice_rows(table, 0, 1)?;
            v_in = self.tape.add_row(v_in, vid)?;
            if let Some(s) = s_in {
                let txt = self.tape.slice_rows(table, 1, 1)?;
                s_in = Some(self.tape.add_row(s, txt)?);
            }
        }
        let x = match s_in {
            Some(s) => self.tape.concat_rows(&[v_in, s])?,
            None => v_in,
        };
        let y = self.stack(x, &l.joint)?;
        match s {
            Some(s) => {
                let (k, _) = self.tape.shape(s);
                let v_hat = self.tape.slice_rows(y, 0, t)?;
                let s_hat = self.tape.slice_rows(y, t, k)?;
                Ok((v_hat, Some(s_hat)))
            }
            None => Ok((y, None)),
        }
    }

    /// Video-only transformer over `v + TE`.
    pub fn dual_forward(&self, v: Var) -> Result<Var> {
        let x = self.with_temporal_embedding(v)?;
        self.stack(x, &self.layout().dual)
    }

    /// Cosine similarity of every row of `a` (`K x d`) with every row of
    /// `b` (`T x d`): `K x T`.
    pub fn similarity(&self, a: Var, b: Var) -> Result<Var> {
        let an = self.tape.normalize_rows(a, COSINE_EPS)?;
        let bn = self.tape.normalize_rows(b, COSINE_EPS)?;
        Ok(self.tape.matmul_nt(an, bn)?)
    }

    /// `K x 2` logits; column 1 is "alignable".
    pub fn alignability_head(&self, s_hat: Var) -> Result<Var> {
        let l = self.layout();
        self.linear(s_hat, l.head_w, l.head_b)
    }

    /// Full forward pass for one window.
    pub fn forward_window(&self, features: &Tensor2D, sentences: &[Vec<u32>]) -> Result<WindowOutputs> {
        let v = self.embed_visual(features)?;
        let s = self.embed_text(sentences)?;
        let (v_hat, s_hat) = self.multimodal_forward(v, Some(s))?;
        let s_hat = s_hat.expect("sentences were given");
        let align = self.similarity(s_hat, v_hat)?;
        let logits = self.alignability_head(s_hat)?;
        let v_dual = self.dual_forward(v)?;
        let align_dual = self.similarity(s, v_dual)?;
        Ok(WindowOutputs {
            align,
            align_dual,
            logits,
        })
    }
}

/// Tape handles produced by [`Graph::forward_window`].
#[derive(Debug, Clone, Copy)]
pub struct WindowOutputs {
    /// Joint-model alignment matrix, `K x T`.
    pub align: Var,
    /// Dual-encoder alignment matrix, `K x T`.
    pub align_dual: Var,
    /// Alignability logits, `K x 2`.
    pub logits: Var,
}

/// Plain-value alignment outputs for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub align: Tensor2D,
    pub align_dual: Tensor2D,
    pub logits: Tensor2D,
}

impl WindowPrediction {
    /// Softmax probability of the "alignable" class per sentence.
    pub fn alignable_prob(&self) -> Vec<f64> {
        (0..self.logits.rows())
            .map(|k| {
                let (a, b) = (self.logits.get(k, 0), self.logits.get(k, 1));
                1.0 / (1.0 + (a - b).exp())
            })
            .collect()
    }
}

/// Inference without gradients.
pub fn predict_window(params: &ModelParams, features: &Tensor2D, sentences: &[Vec<u32>]) -> Result<WindowPrediction> {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, params);
    let out = g.forward_window(features, sentences)?;
    let pred = WindowPrediction {
        align: tape.value(out.align).clone(),
        align_dual: tape.value(out.align_dual).clone(),
        logits: tape.value(out.logits).clone(),
    };
    Ok(pred)
}

/// Dual-encoder visual output `T x d_model` for a feature sequence.
pub fn dual_visual(params: &ModelParams, features: &Tensor2D) -> Result<Tensor2D> {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, params);
    let v = g.embed_visual(features)?;
    let out = g.dual_forward(v)?;
    let value = tape.value(out).clone();
    Ok(value)
}

/// Raw sentence embeddings `K x d_model` (the dual encoder's text side).
pub fn text_embeddings(params: &ModelParams, sentences: &[Vec<u32>]) -> Result<Tensor2D> {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, params);
    let s = g.embed_text(sentences)?;
    let value = tape.value(s).clone();
    Ok(value)
}
