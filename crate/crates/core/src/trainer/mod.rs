//! Two-stage training: stage 1 fits both the joint model and the dual
//! encoder to the ASR timestamps; stage 2 co-trains them on pseudo-labels
//! produced by an EMA teacher.

mod optim;

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{window_sample, window_starts, NarratedVideo, SentenceMask, WindowSample};
use crate::denoise::{denoise_batch, DenoiseError, EmaState, PseudoLabels, TeacherWindow};
use crate::eval::{evaluate_alignment, AlignmentReport, EvalError};
use crate::losses::{l_alignability_scaled, l_tc, LossConfig};
use crate::model::{save_checkpoint, Checkpoint, Graph, ModelError, ModelParams};
use crate::tensor::{Gradients, Tape, Tensor2D, TensorError};

pub use optim::{optimizer_step, AdamState, AdamWConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numerical failure at iteration {iter}: {what}")]
    Numerical { iter: usize, what: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training video has a usable window")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Windows (one per sampled video) per step.
    pub batch_videos: usize,
    pub window_sec: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub s1_iters: usize,
    pub s2_iters: usize,
    /// Fraction of each batch's sentences labelled alignable in stage 2.
    pub alpha: f64,
    pub ema_momentum: f64,
    /// Held-out evaluation period in iterations; 0 evaluates only at stage
    /// ends.
    pub eval_every: usize,
    /// Fraction of videos (taken from the end of the corpus) held out.
    pub heldout_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_videos: 8,
            window_sec: 64,
            lr: 1e-4,
            weight_decay: 1e-2,
            s1_iters: 2000,
            s2_iters: 2000,
            alpha: 0.5,
            ema_momentum: 0.99,
            eval_every: 200,
            heldout_frac: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_videos == 0 || self.window_sec == 0 {
            return bad("batch_videos and window_sec must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must be in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.heldout_frac) {
            return bad("heldout_frac must be in [0, 1)");
        }
        Ok(())
    }
}

/// Splits off the last `heldout_frac` of the videos (at least one when
/// the fraction is positive and there are two or more videos).
pub fn split_heldout(videos: &[NarratedVideo], heldout_frac: f64) -> (&[NarratedVideo], &[NarratedVideo]) {
    let n = videos.len();
    let mut held = (n as f64 * heldout_frac).round() as usize;
    if heldout_frac > 0.0 && n >= 2 {
        held = held.max(1);
    }
    held = held.min(n.saturating_sub(1));
    videos.split_at(n - held)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub ema: Option<EmaState>,
    pub adam: AdamState,
    /// Completed iterations across both stages.
    pub iter: usize,
    pub stage: Stage,
}

impl TrainState {
    pub fn new(student: ModelParams) -> Self {
        Self {
            adam: AdamState::new(&student),
            student,
            ema: None,
            iter: 0,
            stage: Stage::One,
        }
    }

    /// Enters stage 2 with the teacher as an exact copy of the student.
    pub fn begin_stage2(&mut self, momentum: f64) {
        self.ema = Some(EmaState::new(&self.student, momentum));
        self.stage = Stage::Two;
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, loss: &LossConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.student.clone());
        ckpt.meta = serde_json::json!({
            "stage": self.stage.number(),
            "iter": self.iter,
            "adam_step": self.adam.step,
            "ema_momentum": self.ema.as_ref().map(|e| e.momentum),
            "train": config,
            "loss": loss,
        });
        ckpt.extra.push(("adam_m".into(), self.adam.m.clone()));
        ckpt.extra.push(("adam_v".into(), self.adam.v.clone()));
        if let Some(ema) = &self.ema {
            ckpt.extra.push(("teacher".into(), ema.teacher.clone()));
        }
        ckpt
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`]. A plain
    /// parameter checkpoint starts fresh optimizer moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(ckpt.params.clone());
        if let (Some(m), Some(v)) = (ckpt.group("adam_m"), ckpt.group("adam_v")) {
            state.adam.m = m.clone();
            state.adam.v = v.clone();
        }
        state.adam.step = ckpt.meta.get("adam_step").and_then(|x| x.as_u64()).unwrap_or(0);
        state.iter = ckpt.meta.get("iter").and_then(|x| x.as_u64()).unwrap_or(0) as usize;
        if let Some(teacher) = ckpt.group("teacher") {
            let momentum = ckpt
                .meta
                .get("ema_momentum")
                .and_then(|x| x.as_f64())
                .ok_or_else(|| TrainError::Checkpoint("teacher without ema_momentum".into()))?;
            state.ema = Some(EmaState {
                teacher: teacher.clone(),
                momentum,
            });
            state.stage = Stage::Two;
        }
        Ok(state)
    }
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Contrastive loss summed over both models, averaged over windows.
    pub l_tc: f64,
    /// Alignability cross-entropy; `None` in stage 1.
    pub l_align: Option<f64>,
    /// Overlap rate of the two models' shifted windows (stage 2).
    pub overlap_rate: Option<f64>,
}

fn numerical(iter: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite(op) => TrainError::Numerical {
            iter,
            what: format!("non-finite value in {op}"),
        },
        other => TrainError::Model(other.into()),
    }
}

fn model_err(iter: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Tensor(t) => numerical(iter)(t),
        other => TrainError::Model(other),
    }
}

/// Sentences whose mask leaves at least one negative frame; an ASR window
/// covering the whole crop gives the contrastive loss nothing to contrast.
fn contrastable(masks: &[SentenceMask]) -> Vec<usize> {
    (0..masks.len()).filter(|&k| masks[k].any() && !masks[k].all()).collect()
}

fn apply_step(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(TrainError::Numerical {
            iter: state.iter + 1,
            what: "non-finite gradient".into(),
        });
    }
    optimizer_step(&mut state.student, grads, &mut state.adam, cfg.lr, cfg.weight_decay);
    if !state.student.is_finite() {
        return Err(TrainError::Numerical {
            iter: state.iter + 1,
            what: "non-finite parameter after update".into(),
        });
    }
    Ok(())
}

/// Stage 1: contrastive loss of both matrices against the ASR masks, all
/// sentences active. The alignability head receives no gradient.
pub fn stage1_step(
    state: &mut TrainState,
    batch: &[WindowSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<StepStats> {
    let it = state.iter + 1;
    let tape = Tape::new();
    let g = Graph::trainable(&tape, &state.student);
    let mut terms = Vec::with_capacity(batch.len() * 2);
    for w in batch {
        let out = g.forward_window(&w.features, &w.tokens).map_err(model_err(it))?;
        let active = contrastable(&w.masks);
        terms.push(l_tc(&tape, out.align, &w.masks, &active, loss.temperature).map_err(numerical(it))?);
        terms.push(l_tc(&tape, out.align_dual, &w.masks, &active, loss.temperature).map_err(numerical(it))?);
    }
    let total = tape.concat_rows(&terms).map_err(numerical(it))?;
    let total = tape.sum_all(total).map_err(numerical(it))?;
    let total = tape.scale(total, 1.0 / batch.len() as f64).map_err(numerical(it))?;
    let value = tape.scalar(total);
    drop(g);
    let grads = tape.backward(total).map_err(numerical(it))?;
    apply_step(state, &grads, cfg)?;
    state.iter += 1;
    Ok(StepStats {
        l_tc: value,
        l_align: None,
        overlap_rate: None,
    })
}

/// Teacher matrices and pseudo-labels for a batch, without gradients.
pub fn teacher_pseudo_labels(teacher: &ModelParams, batch: &[WindowSample], alpha: f64) -> Result<PseudoLabels> {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, teacher);
    let mut mats: Vec<(Tensor2D, Tensor2D)> = Vec::with_capacity(batch.len());
    for w in batch {
        let out = g.forward_window(&w.features, &w.tokens)?;
        mats.push((tape.value(out.align).clone(), tape.value(out.align_dual).clone()));
    }
    let windows: Vec<TeacherWindow<'_>> = batch
        .iter()
        .zip(&mats)
        .map(|(w, (a, d))| TeacherWindow {
            align: a,
            align_dual: d,
            masks: &w.masks,
        })
        .collect();
    Ok(denoise_batch(&windows, alpha)?)
}

/// Stage 2: EMA teacher → pseudo-labels → contrastive loss on the updated
/// masks of the top-alpha sentences plus alignability cross-entropy over
/// every sentence → optimizer step → EMA update.
pub fn stage2_step(
    state: &mut TrainState,
    batch: &[WindowSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(StepStats, PseudoLabels)> {
    let it = state.iter + 1;
    let ema = state
        .ema
        .as_ref()
        .ok_or_else(|| TrainError::Config("stage 2 needs an EMA teacher".into()))?;
    let labels = teacher_pseudo_labels(&ema.teacher, batch, cfg.alpha).map_err(|e| match e {
        TrainError::Model(m) => model_err(it)(m),
        other => other,
    })?;
    let n_sentences = labels.n_sentences();

    let tape = Tape::new();
    let g = Graph::trainable(&tape, &state.student);
    let mut tc_terms = Vec::with_capacity(batch.len() * 2);
    let mut ce_terms = Vec::with_capacity(batch.len());
    for (w, pl) in batch.iter().zip(&labels.windows) {
        let out = g.forward_window(&w.features, &w.tokens).map_err(model_err(it))?;
        let masks: Vec<SentenceMask> = pl.iter().map(|p| p.updated.clone()).collect();
        let eligible = contrastable(&masks);
        let active: Vec<usize> = eligible.into_iter().filter(|&k| pl[k].active).collect();
        tc_terms.push(l_tc(&tape, out.align, &masks, &active, loss.temperature).map_err(numerical(it))?);
        tc_terms.push(l_tc(&tape, out.align_dual, &masks, &active, loss.temperature).map_err(numerical(it))?);
        let y: Vec<bool> = pl.iter().map(|p| p.y_pseudo).collect();
        let all: Vec<usize> = (0..y.len()).collect();
        ce_terms.push(
            l_alignability_scaled(&tape, out.logits, &y, &all, 1.0 / n_sentences as f64).map_err(numerical(it))?,
        );
    }
    let tc = tape.concat_rows(&tc_terms).map_err(numerical(it))?;
    let tc = tape.sum_all(tc).map_err(numerical(it))?;
    let tc = tape.scale(tc, 1.0 / batch.len() as f64).map_err(numerical(it))?;
    let ce = tape.concat_rows(&ce_terms).map_err(numerical(it))?;
    let ce = tape.sum_all(ce).map_err(numerical(it))?;
    let total = crate::losses::l_total(&tape, tc, ce).map_err(numerical(it))?;
    let stats = StepStats {
        l_tc: tape.scalar(tc),
        l_align: Some(tape.scalar(ce)),
        overlap_rate: Some(labels.overlap_rate()),
    };
    drop(g);
    let grads = tape.backward(total).map_err(numerical(it))?;
    apply_step(state, &grads, cfg)?;
    if let Some(ema) = state.ema.as_mut() {
        ema.update(&state.student)?;
    }
    state.iter += 1;
    Ok((stats, labels))
}

/// Draws `batch_videos` windows, distinct videos when enough exist.
pub fn sample_batch<R: Rng>(videos: &[&NarratedVideo], cfg: &TrainConfig, max_t: usize, rng: &mut R) -> Vec<WindowSample> {
    let n = videos.len();
    let picks: Vec<usize> = if n >= cfg.batch_videos {
        index::sample(rng, n, cfg.batch_videos).into_vec()
    } else {
        (0..cfg.batch_videos).map(|_| rng.random_range(0..n)).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let v = videos[i];
            let w = cfg.window_sec.min(max_t).min(v.duration());
            window_sample(v, w, rng).expect("training videos are pre-filtered")
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub stage: u8,
    /// Mean training contrastive loss since the previous record.
    pub l_tc: f64,
    /// Mean training alignability loss since the previous record (stage 2).
    pub l_align: Option<f64>,
    /// Held-out pointing-game recall of the joint model.
    pub r_at_1: Option<f64>,
    /// Held-out ROC-AUC of the alignability head.
    pub roc_auc: Option<f64>,
}

/// Result of a stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub log: Vec<LogRecord>,
    /// Held-out report at the end of the stage.
    pub report: Option<AlignmentReport>,
}

/// Training videos with at least one usable window.
fn usable<'a>(videos: &'a [NarratedVideo], cfg: &TrainConfig, max_t: usize) -> Vec<&'a NarratedVideo> {
    videos
        .iter()
        .filter(|v| {
            let w = cfg.window_sec.min(max_t).min(v.duration());
            w > 0 && window_starts(v, w).is_ok()
        })
        .collect()
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(stage.number()));
    rng
}

/// Runs `iters` steps of the current stage, evaluating on `heldout` every
/// `eval_every` iterations and at the end.
pub fn run_stage(
    state: &mut TrainState,
    train: &[NarratedVideo],
    heldout: &[NarratedVideo],
    cfg: &TrainConfig,
    loss: &LossConfig,
    iters: usize,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<StageOutcome> {
    let max_t = state.student.config.max_t;
    let videos = usable(train, cfg, max_t);
    if videos.is_empty() && iters > 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = stage_rng(cfg.seed, state.stage);
    let mut log = Vec::new();
    let mut sum_tc = 0.0;
    let mut sum_align = 0.0;
    let mut n_since = 0usize;
    let mut report = None;
    for i in 1..=iters {
        let batch = sample_batch(&videos, cfg, max_t, &mut rng);
        let stats = match state.stage {
            Stage::One => stage1_step(state, &batch, cfg, loss)?,
            Stage::Two => stage2_step(state, &batch, cfg, loss)?.0,
        };
        sum_tc += stats.l_tc;
        sum_align += stats.l_align.unwrap_or(0.0);
        n_since += 1;
        let due = cfg.eval_every > 0 && i % cfg.eval_every == 0;
        if due || i == iters {
            let r = if heldout.is_empty() {
                None
            } else {
                Some(evaluate_alignment(&state.student, heldout, cfg.window_sec)?)
            };
            let rec = LogRecord {
                iter: state.iter,
                stage: state.stage.number(),
                l_tc: sum_tc / n_since as f64,
                l_align: (state.stage == Stage::Two).then(|| sum_align / n_since as f64),
                r_at_1: r.as_ref().map(|r| r.r_at_1),
                roc_auc: r.as_ref().and_then(|r| r.roc_auc),
            };
            on_log(&rec);
            log.push(rec);
            report = r;
            sum_tc = 0.0;
            sum_align = 0.0;
            n_since = 0;
        }
    }
    if iters == 0 && !heldout.is_empty() {
        report = Some(evaluate_alignment(&state.student, heldout, cfg.window_sec)?);
    }
    Ok(StageOutcome { log, report })
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub ckpt_s1: Checkpoint,
    pub ckpt_s2: Option<Checkpoint>,
    pub report_s1: Option<AlignmentReport>,
    pub report_s2: Option<AlignmentReport>,
}

/// Stage 1 from a fresh initialization, then (if `s2_iters > 0`) stage 2
/// from an EMA copy of the stage-1 student.
pub fn run(
    model: crate::model::ModelConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    corpus: &[NarratedVideo],
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    loss.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train, heldout) = split_heldout(corpus, cfg.heldout_frac);
    let mut state = TrainState::new(ModelParams::init(model, cfg.seed)?);
    let s1 = run_stage(&mut state, train, heldout, cfg, loss, cfg.s1_iters, on_log)?;
    let ckpt_s1 = state.to_checkpoint(cfg, loss);
    let mut log = s1.log;
    let (ckpt_s2, report_s2) = if cfg.s2_iters > 0 {
        state.begin_stage2(cfg.ema_momentum);
        let s2 = run_stage(&mut state, train, heldout, cfg, loss, cfg.s2_iters, on_log)?;
        log.extend(s2.log);
        (Some(state.to_checkpoint(cfg, loss)), s2.report)
    } else {
        (None, None)
    };
    Ok(RunOutcome {
        state,
        log,
        ckpt_s1,
        ckpt_s2,
        report_s1: s1.report,
        report_s2,
    })
}

/// Writes a checkpoint atomically.
pub fn write_checkpoint_file(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_checkpoint(path, ckpt).map_err(|e| TrainError::Checkpoint(e.to_string()))
}
