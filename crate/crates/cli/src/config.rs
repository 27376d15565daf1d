use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tan_core::corpus::{CorpusDims, NoiseModelParams};
use tan_core::losses::LossConfig;
use tan_core::model::ModelConfig;
use tan_core::trainer::TrainConfig;

use crate::io::{read_json, CliError};

/// Every tunable in one JSON document. Missing sections and fields take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub noise: NoiseModelParams,
    pub dims: CorpusDims,
    pub paths: PathConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct NoiseFlags {
    /// Fraction of sentences that depict something on screen [default: 0.3]
    #[arg(long)]
    pub frac_alignable: Option<f64>,
    /// Fraction of sentences with exact ASR timestamps [default: 0.15]
    #[arg(long)]
    pub frac_well_aligned: Option<f64>,
    /// Largest ASR shift in seconds for misaligned sentences [default: 8]
    #[arg(long)]
    pub max_offset_sec: Option<f64>,
    /// Chance of swapping two neighbouring misaligned sentences [default: 0.1]
    #[arg(long)]
    pub order_shuffle_prob: Option<f64>,
    /// Expected norm of the per-frame feature noise [default: 0.5]
    #[arg(long)]
    pub feature_noise: Option<f64>,
}

impl NoiseFlags {
    pub fn apply(&self, n: &mut NoiseModelParams) {
        set(&mut n.frac_alignable, self.frac_alignable);
        set(&mut n.frac_well_aligned, self.frac_well_aligned);
        set(&mut n.max_offset_sec, self.max_offset_sec);
        set(&mut n.order_shuffle_prob, self.order_shuffle_prob);
        set(&mut n.feature_noise, self.feature_noise);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Videos (one window each) per step [default: 8]
    #[arg(long)]
    pub batch_videos: Option<usize>,
    /// Training window length in seconds [default: 64]
    #[arg(long)]
    pub window_sec: Option<usize>,
    /// AdamW learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Stage-1 iterations [default: 2000]
    #[arg(long)]
    pub s1_iters: Option<usize>,
    /// Stage-2 iterations [default: 2000]
    #[arg(long)]
    pub s2_iters: Option<usize>,
    /// Fraction of sentences per batch kept as alignable pseudo-labels [default: 0.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// EMA teacher momentum [default: 0.99]
    #[arg(long)]
    pub ema_momentum: Option<f64>,
    /// Held-out evaluation period; 0 evaluates at stage ends only [default: 200]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Fraction of videos held out from the end of the corpus [default: 0.1]
    #[arg(long)]
    pub heldout_frac: Option<f64>,
    /// Seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Contrastive softmax temperature [default: 0.07]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Transformer layers per stack [default: 6]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Attention heads [default: 8]
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Model width [default: 64]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Feed-forward width [default: 256]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Token vocabulary size [default: 128]
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, c: &mut CliConfig) {
        let t = &mut c.train;
        set(&mut t.batch_videos, self.batch_videos);
        set(&mut t.window_sec, self.window_sec);
        set(&mut t.lr, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.s1_iters, self.s1_iters);
        set(&mut t.s2_iters, self.s2_iters);
        set(&mut t.alpha, self.alpha);
        set(&mut t.ema_momentum, self.ema_momentum);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.heldout_frac, self.heldout_frac);
        set(&mut t.seed, self.seed);
        set(&mut c.loss.temperature, self.temperature);
        let m = &mut c.model;
        set(&mut m.n_layers, self.n_layers);
        set(&mut m.n_heads, self.n_heads);
        set(&mut m.d_model, self.d_model);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.vocab_size, self.vocab_size);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
