//! Criteria that train models. The stage-1 run and the stage-2 runs at each
//! alpha are computed once and shared between criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tan_core::corpus::{generate_corpus, CorpusDims, NarratedVideo, NoiseModelParams};
use tan_core::eval::{evaluate_alignment, AlignmentReport};
use tan_core::losses::LossConfig;
use tan_core::model::{Checkpoint, ModelConfig, ModelParams};
use tan_core::trainer::{run, run_stage, sample_batch, split_heldout, teacher_pseudo_labels, TrainConfig, TrainState};

use crate::Verdict;

const N_TRAIN: usize = 200;
const N_FRESH: usize = 200;

/// Desk-scale model and optimizer; everything else keeps the library defaults.
fn model_config(dims: &CorpusDims) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        feature_dim: dims.feature_dim,
        vocab_size: dims.vocab.size(),
        ..Default::default()
    }
}

fn train_config(alpha: f64) -> TrainConfig {
    TrainConfig {
        lr: 4e-3,
        s1_iters: 2000,
        s2_iters: 2000,
        alpha,
        eval_every: 0,
        ..Default::default()
    }
}

struct Stage1 {
    ckpt: Checkpoint,
    report: AlignmentReport,
    secs: f64,
}

struct Stage2 {
    report: AlignmentReport,
    secs: f64,
}

/// Training corpus, a disjoint set of fresh videos from the same generator,
/// and cached training runs.
#[derive(Default)]
pub struct Shared {
    data: Option<(Vec<NarratedVideo>, Vec<NarratedVideo>)>,
    stage1: Option<Stage1>,
    stage2: BTreeMap<u32, Stage2>,
}

impl Shared {
    fn data(&mut self) -> &(Vec<NarratedVideo>, Vec<NarratedVideo>) {
        self.data.get_or_insert_with(|| {
            let mut all = generate_corpus(N_TRAIN + N_FRESH, &NoiseModelParams::default(), &CorpusDims::default())
                .expect("default corpus");
            let fresh = all.split_off(N_TRAIN);
            (all, fresh)
        })
    }

    fn stage1(&mut self) -> &Stage1 {
        if self.stage1.is_none() {
            let t0 = Instant::now();
            let (train, fresh) = self.data();
            let cfg = TrainConfig {
                s2_iters: 0,
                ..train_config(0.5)
            };
            let out = run(
                model_config(&CorpusDims::default()),
                &cfg,
                &LossConfig::default(),
                train,
                &mut |_| {},
            )
            .expect("stage 1");
            let report = evaluate_alignment(&out.ckpt_s1.params, fresh, cfg.window_sec).expect("evaluation");
            self.stage1 = Some(Stage1 {
                ckpt: out.ckpt_s1,
                report,
                secs: t0.elapsed().as_secs_f64(),
            });
        }
        self.stage1.as_ref().unwrap()
    }

    fn stage2(&mut self, alpha: f64) -> &Stage2 {
        let key = (alpha * 100.0).round() as u32;
        if !self.stage2.contains_key(&key) {
            let t0 = Instant::now();
            let cfg = train_config(alpha);
            let loss = LossConfig::default();
            let mut state = TrainState::from_checkpoint(&self.stage1().ckpt).expect("stage-1 checkpoint");
            state.begin_stage2(cfg.ema_momentum);
            let (train, fresh) = self.data();
            let (fit, heldout) = split_heldout(train, cfg.heldout_frac);
            run_stage(&mut state, fit, heldout, &cfg, &loss, cfg.s2_iters, &mut |_| {}).expect("stage 2");
            let report = evaluate_alignment(&state.student, fresh, cfg.window_sec).expect("evaluation");
            let stage = Stage2 {
                report,
                secs: t0.elapsed().as_secs_f64(),
            };
            self.stage2.insert(key, stage);
        }
        &self.stage2[&key]
    }
}

pub fn denoising_recovery(shared: &mut Shared) -> Verdict {
    let (r1, s1_secs) = {
        let s1 = shared.stage1();
        (s1.report.r_at_1, s1.secs)
    };
    let s2 = shared.stage2(0.5);
    let gain = 100.0 * (s2.report.r_at_1 - r1);
    let secs = s1_secs + s2.secs;
    Verdict::new(
        gain >= 5.0 && secs < 900.0,
        format!(
            "held-out R@1 {:.3} after stage 1, {:.3} after stage 2 ({gain:+.1} points, target +5); training {secs:.0} s",
            r1, s2.report.r_at_1
        ),
    )
}

pub fn alignability(shared: &mut Shared) -> Verdict {
    let fallback = shared.stage1().report.roc_auc_fallback.unwrap_or(f64::NAN);
    let head = shared.stage2(0.5).report.roc_auc.unwrap_or(f64::NAN);
    Verdict::new(
        head >= 0.85 && head > fallback,
        format!("head ROC-AUC {head:.3} (target 0.85), stage-1 max-over-time fallback {fallback:.3}"),
    )
}

/// Fraction of sentences whose two teacher windows overlap, over 20 batches.
fn overlap_rate(teacher: &ModelParams, videos: &[NarratedVideo], cfg: &TrainConfig) -> f64 {
    let refs: Vec<&NarratedVideo> = videos.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut overlapping, mut total) = (0.0, 0.0);
    for _ in 0..20 {
        let batch = sample_batch(&refs, cfg, teacher.config.max_t, &mut rng);
        let labels = teacher_pseudo_labels(teacher, &batch, cfg.alpha).expect("pseudo-labels");
        overlapping += labels.overlap_rate() * labels.n_sentences() as f64;
        total += labels.n_sentences() as f64;
    }
    overlapping / total
}

pub fn update_rate(shared: &mut Shared) -> Verdict {
    let cfg = train_config(0.5);
    let teacher = shared.stage1().ckpt.params.clone();
    let (train, fresh) = shared.data();
    let (fit, _) = split_heldout(train, cfg.heldout_frac);
    let held = overlap_rate(&teacher, fresh, &cfg);
    let seen = overlap_rate(&teacher, fit, &cfg);
    Verdict::new(
        (0.15..=0.50).contains(&held),
        format!("IoU > 0 for {held:.3} of sentences in held-out videos ({seen:.3} in training videos)"),
    )
}

pub fn alpha_ordering(shared: &mut Shared) -> Verdict {
    let r: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&a| shared.stage2(a).report.r_at_1).collect();
    Verdict::new(
        r[0] < r[1],
        format!("held-out R@1 at alpha 0.25 / 0.5 / 0.75: {:.3} / {:.3} / {:.3}", r[0], r[1], r[2]),
    )
}

pub fn noiseless_noop(_: &mut Shared) -> Verdict {
    let noise = NoiseModelParams {
        frac_alignable: 1.0,
        frac_well_aligned: 1.0,
        max_offset_sec: 0.0,
        order_shuffle_prob: 0.0,
        ..Default::default()
    };
    let dims = CorpusDims::default();
    let videos = generate_corpus(N_TRAIN, &noise, &dims).expect("noiseless corpus");
    let cfg = TrainConfig {
        s2_iters: 0,
        ..train_config(0.5)
    };
    let out = run(model_config(&dims), &cfg, &LossConfig::default(), &videos, &mut |_| {}).expect("stage 1");
    let (fit, _) = split_heldout(&videos, cfg.heldout_frac);
    let refs: Vec<&NarratedVideo> = fit.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let (mut same, mut total) = (0, 0);
    for _ in 0..20 {
        let batch = sample_batch(&refs, &cfg, out.ckpt_s1.params.config.max_t, &mut rng);
        let labels = teacher_pseudo_labels(&out.ckpt_s1.params, &batch, cfg.alpha).expect("pseudo-labels");
        for (w, pl) in batch.iter().zip(&labels.windows) {
            for (asr, p) in w.masks.iter().zip(pl) {
                same += usize::from(&p.updated == asr);
                total += 1;
            }
        }
    }
    let frac = same as f64 / total as f64;
    Verdict::new(
        frac >= 0.95,
        format!("{same} of {total} timestamps unchanged ({frac:.3}) after stage 1 on a noiseless corpus"),
    )
}

fn tan(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tan"))
        .args(args)
        .stdout(Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

pub fn cli_determinism(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus = dir.path().join("corpus.jsonl");
    if !tan(&["synth", "--out", path(&corpus), "--videos", "12", "--seed", "5"]) {
        return Verdict::new(false, "synth failed");
    }
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for out in &outs {
        let ok = tan(&[
            "train", "--corpus", path(&corpus), "--stage", "both", "--ckpt-out", path(out), "--seed", "11",
            "--n-layers", "1", "--n-heads", "2", "--d-model", "16", "--d-ff", "32", "--s1-iters", "30",
            "--s2-iters", "30", "--batch-videos", "4", "--eval-every", "10", "--lr", "0.002", "--quiet",
        ]);
        if !ok {
            return Verdict::new(false, "train failed");
        }
    }
    let files = ["ckpt_s1.ckpt", "ckpt_s2.ckpt", "metrics.jsonl"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| match (std::fs::read(outs[0].join(f)), std::fs::read(outs[1].join(f))) {
            (Ok(a), Ok(b)) => a != b,
            _ => true,
        })
        .collect();
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("two seeded runs agree byte for byte on {}", files.join(", "))
        } else {
            format!("missing or different: {}", differing.join(", "))
        },
    )
}
