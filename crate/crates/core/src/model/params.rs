use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{ParamId, Tensor2D};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackIds {
    pub blocks: Vec<BlockIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

/// Where each parameter group lives in the flat store.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub vis_w: ParamId,
    pub vis_b: ParamId,
    pub token_emb: ParamId,
    pub txt_w1: ParamId,
    pub txt_b1: ParamId,
    pub txt_w2: ParamId,
    pub txt_b2: ParamId,
    pub te: ParamId,
    pub segment_emb: Option<ParamId>,
    pub joint: StackIds,
    pub dual: StackIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Layout {
    pub fn head_params(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor2D::zeros(rows, cols),
            Init::Ones => Tensor2D::filled(rows, cols, 1.0),
            Init::Normal(std) => Tensor2D::from_fn(rows, cols, |_, _| {
                std * self.rng.sample::<f64, _>(StandardNormal)
            }),
        };
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Normal(1.0 / (fan_in as f64).sqrt()));
        let b = self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        let g = self.add(format!("{prefix}.g"), 1, d, Init::Ones);
        let b = self.add(format!("{prefix}.b"), 1, d, Init::Zeros);
        (g, b)
    }

    fn stack(&mut self, prefix: &str, cfg: &ModelConfig) -> StackIds {
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                let (ln1_g, ln1_b) = self.norm(&format!("{p}.ln1"), d);
                let (wq, bq) = self.dense(&format!("{p}.attn.q"), d, d);
                let (wk, bk) = self.dense(&format!("{p}.attn.k"), d, d);
                let (wv, bv) = self.dense(&format!("{p}.attn.v"), d, d);
                let (wo, bo) = self.dense(&format!("{p}.attn.o"), d, d);
                let (ln2_g, ln2_b) = self.norm(&format!("{p}.ln2"), d);
                let (w1, b1) = self.dense(&format!("{p}.ff1"), d, cfg.d_ff);
                let (w2, b2) = self.dense(&format!("{p}.ff2"), cfg.d_ff, d);
                BlockIds {
                    ln1_g,
                    ln1_b,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_g,
                    ln2_b,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let (ln_g, ln_b) = self.norm(&format!("{prefix}.ln_f"), d);
        StackIds { blocks, ln_g, ln_b }
    }
}

fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tensor2D>, Layout) {
    let d = cfg.d_model;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let (vis_w, vis_b) = b.dense("visual_proj", cfg.feature_dim, d);
    let token_emb = b.add("text.token_emb".into(), cfg.vocab_size, cfg.text_dim, Init::Normal(1.0));
    let (txt_w1, txt_b1) = b.dense("text.mlp1", cfg.text_dim, d);
    let (txt_w2, txt_b2) = b.dense("text.mlp2", d, d);
    let te = b.add("temporal_emb".into(), cfg.max_t, d, Init::Normal(0.1));
    let segment_emb = cfg
        .segment_embedding
        .then(|| b.add("segment_emb".into(), 2, d, Init::Normal(0.1)));
    let joint = b.stack("joint", cfg);
    let dual = b.stack("dual", cfg);
    let (head_w, head_b) = b.dense("align_head", d, 2);
    let layout = Layout {
        vis_w,
        vis_b,
        token_emb,
        txt_w1,
        txt_b1,
        txt_w2,
        txt_b2,
        te,
        segment_emb,
        joint,
        dual,
        head_w,
        head_b,
    };
    (b.names, b.tensors, layout)
}

/// Every learnable tensor of the alignment network, the dual encoder and
/// the shared backbone, addressed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors, layout) = build(&config, &mut rng);
        Ok(Self {
            config,
            layout,
            names,
            tensors,
        })
    }

    /// Rebuilds a store from named tensors in layout order.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor2D)>) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        if named.len() != fresh.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != fresh.names[i] {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {i}: expected {}, found {name}",
                    fresh.names[i]
                )));
            }
            if t.shape() != fresh.tensors[i].shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    fresh.tensors[i].shape()
                )));
            }
            fresh.tensors[i] = t;
        }
        Ok(fresh)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor2D {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2D)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor2D::len).sum()
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2D::is_finite)
    }
}
