use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tan_core::corpus::{generate_corpus, read_jsonl, write_jsonl as write_corpus, NarratedVideo, SentenceRecord, WindowSample};
use tan_core::curation::{self, CurationConfig, CurationReport, HashTokenizer, RulePunctuator, TrigramClassifier};
use tan_core::denoise::SentencePseudoLabel;
use tan_core::eval::{
    dtw_decode, export_heatmap, predict_video, read_csv, retrieval_metrics, seg_metrics, segment_pool, tile_windows,
    trim_background, AlignmentReport, GtAnnotation, SegMetrics, Segmentation, SegmentationGt, VideoAlignment,
};
use tan_core::model::{dual_visual, load_checkpoint, text_embeddings, Checkpoint, ModelParams};
use tan_core::tensor::Tensor2D;
use tan_core::trainer::{
    run_stage, split_heldout, teacher_pseudo_labels, write_checkpoint_file, LogRecord, Stage, TrainError, TrainState,
};

use crate::config::CliConfig;
use crate::io::{print_json, read_json, read_text, write_atomic, write_json, write_jsonl, CliError, CliResult};
use crate::{Command, StageArg};

pub fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth {
            out,
            videos,
            seed,
            gt_out,
            config,
            noise,
        } => {
            let mut cfg = CliConfig::load(config.as_deref())?;
            noise.apply(&mut cfg.noise);
            if let Some(s) = seed {
                cfg.noise.seed = s;
            }
            synth(&cfg, videos, &out, gt_out.as_deref())
        }
        Command::Train {
            corpus,
            stage,
            ckpt_in,
            ckpt_out,
            metrics,
            quiet,
            config,
            flags,
        } => {
            let mut cfg = CliConfig::load(config.as_deref())?;
            flags.apply(&mut cfg);
            let corpus = corpus
                .or_else(|| cfg.paths.corpus.clone())
                .ok_or_else(|| CliError::usage(anyhow::anyhow!("--corpus is required")))?;
            let ckpt_out = ckpt_out
                .or_else(|| cfg.paths.ckpt_dir.clone())
                .ok_or_else(|| CliError::usage(anyhow::anyhow!("--ckpt-out is required")))?;
            let metrics = metrics.unwrap_or_else(|| ckpt_out.join("metrics.jsonl"));
            train(&cfg, &corpus, stage, ckpt_in.as_deref(), &ckpt_out, &metrics, quiet)
        }
        Command::Align {
            ckpt,
            corpus,
            out,
            window,
            teacher,
            heatmap_dir,
            pgm,
        } => align(&ckpt, &corpus, &out, window, teacher, heatmap_dir.as_deref(), pgm),
        Command::Denoise {
            ckpt,
            corpus,
            out,
            alpha,
            window,
            student,
        } => denoise(&ckpt, &corpus, &out, alpha.unwrap_or(0.5), window, student),
        Command::Eval { pred, gt } => eval(&pred, &gt),
        Command::Retrieve {
            ckpt,
            corpus,
            window,
            out,
        } => retrieve(&ckpt, &corpus, window, out.as_deref()),
        Command::Segment {
            matrix,
            ckpt,
            corpus,
            actions,
            window,
            out,
        } => segment(matrix, ckpt, corpus, actions, window, out.as_deref()),
        Command::Curate {
            inputs,
            out,
            report,
            samples,
            threshold,
            seed,
            vocab_size,
        } => {
            let mut cfg = CurationConfig::default();
            if let Some(n) = samples {
                cfg.n_samples = n;
            }
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            if let Some(v) = vocab_size {
                cfg.tokenizer = HashTokenizer { vocab_size: v };
            }
            curate(&inputs, &out, report.as_deref(), &cfg, seed.unwrap_or(0))
        }
        Command::Defaults => print_json(&CliConfig::default()),
    }
}

fn load_corpus(path: &Path) -> CliResult<Vec<NarratedVideo>> {
    let text = read_text(path)?;
    read_jsonl(text.as_bytes()).map_err(|e| CliError::data(e).context(format!("reading {}", path.display())))
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).map_err(|e| CliError::data(e).context(format!("reading {}", path.display())))
}

fn model_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::data(e)
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Numerical { .. } => CliError::numerical(e),
        TrainError::Config(_) => CliError::usage(e),
        other => CliError::data(other),
    }
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    videos: usize,
    sentences: usize,
    alignable: usize,
    alignable_fraction: f64,
    well_aligned: usize,
}

fn synth(cfg: &CliConfig, n: usize, out: &Path, gt_out: Option<&Path>) -> CliResult {
    let videos = generate_corpus(n, &cfg.noise, &cfg.dims).map_err(CliError::usage)?;
    let mut bytes = Vec::new();
    write_corpus(&mut bytes, &videos).map_err(CliError::data)?;
    write_atomic(out, &bytes)?;
    if let Some(p) = gt_out {
        let gt: Vec<GtAnnotation> = videos.iter().map(GtAnnotation::from_video).collect();
        write_json(p, &gt)?;
    }
    let all = || videos.iter().flat_map(|v| &v.sentences);
    let sentences = all().count();
    let alignable = all().filter(|s| s.gt.as_ref().is_some_and(|g| g.alignable)).count();
    let well_aligned = all()
        .filter(|s| {
            s.gt.as_ref()
                .and_then(|g| g.interval())
                .is_some_and(|(a, b)| a == s.start && b == s.end)
        })
        .count();
    print_json(&SynthSummary {
        videos: videos.len(),
        sentences,
        alignable,
        alignable_fraction: if sentences == 0 { 0.0 } else { alignable as f64 / sentences as f64 },
        well_aligned,
    })
}

fn train(
    cfg: &CliConfig,
    corpus_path: &Path,
    stage: StageArg,
    ckpt_in: Option<&Path>,
    ckpt_out: &Path,
    metrics: &Path,
    quiet: bool,
) -> CliResult {
    cfg.train.validate().map_err(CliError::usage)?;
    cfg.loss.validate().map_err(CliError::usage)?;
    let corpus = load_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("{} holds no videos", corpus_path.display())));
    }
    let mut state = match (ckpt_in, stage) {
        (None, StageArg::Two) => {
            return Err(CliError::usage(anyhow::anyhow!("--stage 2 needs --ckpt-in")));
        }
        (Some(p), _) => TrainState::from_checkpoint(&load_ckpt(p)?).map_err(train_err)?,
        (None, _) => {
            cfg.model.validate().map_err(CliError::usage)?;
            TrainState::new(ModelParams::init(cfg.model.clone(), cfg.train.seed).map_err(CliError::usage)?)
        }
    };
    let feature_dim = state.student.config.feature_dim;
    if let Some(v) = corpus.iter().find(|v| v.features.cols() != feature_dim) {
        return Err(CliError::data(anyhow::anyhow!(
            "video {} has {}-dimensional features but the model expects {feature_dim}",
            v.id,
            v.features.cols()
        )));
    }
    if stage != StageArg::Two && state.stage == Stage::Two {
        return Err(CliError::usage(anyhow::anyhow!(
            "checkpoint is already in stage 2; use --stage 2"
        )));
    }
    fs::create_dir_all(ckpt_out).map_err(|e| CliError::data(e).context(format!("creating {}", ckpt_out.display())))?;
    let (train_set, heldout) = split_heldout(&corpus, cfg.train.heldout_frac);
    let mut log: Vec<LogRecord> = Vec::new();
    let mut on_log = |r: &LogRecord| {
        if !quiet {
            eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
        }
    };
    if stage != StageArg::Two {
        let out = run_stage(&mut state, train_set, heldout, &cfg.train, &cfg.loss, cfg.train.s1_iters, &mut on_log)
            .map_err(train_err)?;
        log.extend(out.log);
        let ckpt = state.to_checkpoint(&cfg.train, &cfg.loss);
        write_checkpoint_file(&ckpt_out.join("ckpt_s1.ckpt"), &ckpt).map_err(train_err)?;
    }
    if stage != StageArg::One {
        if state.ema.is_none() {
            state.begin_stage2(cfg.train.ema_momentum);
        }
        let out = run_stage(&mut state, train_set, heldout, &cfg.train, &cfg.loss, cfg.train.s2_iters, &mut on_log)
            .map_err(train_err)?;
        log.extend(out.log);
        let ckpt = state.to_checkpoint(&cfg.train, &cfg.loss);
        write_checkpoint_file(&ckpt_out.join("ckpt_s2.ckpt"), &ckpt).map_err(train_err)?;
    }
    write_jsonl(metrics, &log)
}

fn inference_params(ckpt: &Checkpoint, teacher: bool) -> CliResult<&ModelParams> {
    if teacher {
        ckpt.group("teacher")
            .ok_or_else(|| CliError::usage(anyhow::anyhow!("checkpoint has no EMA teacher")))
    } else {
        Ok(&ckpt.params)
    }
}

fn align(
    ckpt: &Path,
    corpus: &Path,
    out: &Path,
    window: Option<usize>,
    teacher: bool,
    heatmap_dir: Option<&Path>,
    pgm: bool,
) -> CliResult {
    let ckpt = load_ckpt(ckpt)?;
    let params = inference_params(&ckpt, teacher)?;
    let videos = load_corpus(corpus)?;
    let window = window.unwrap_or(params.config.max_t);
    let preds = videos
        .iter()
        .map(|v| predict_video(params, v, window))
        .collect::<Result<Vec<_>, _>>()
        .map_err(model_err)?;
    if let Some(dir) = heatmap_dir {
        fs::create_dir_all(dir).map_err(CliError::data)?;
        for p in &preds {
            let csv = dir.join(format!("{}.csv", p.id));
            let img = pgm.then(|| dir.join(format!("{}.pgm", p.id)));
            export_heatmap(&p.align, &csv, img.as_deref()).map_err(CliError::data)?;
        }
    }
    write_json(out, &preds)
}

/// Pseudo-labels of one window, tied back to its video.
#[derive(Debug, Serialize, Deserialize)]
pub struct WindowLabels {
    pub video_id: String,
    pub offset: usize,
    pub sentence_index: Vec<usize>,
    pub labels: Vec<SentencePseudoLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DenoiseOutput {
    pub alpha: f64,
    pub window: usize,
    pub overlap_rate: f64,
    pub windows: Vec<WindowLabels>,
}

fn denoise(ckpt: &Path, corpus: &Path, out: &Path, alpha: f64, window: Option<usize>, student: bool) -> CliResult {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CliError::usage(anyhow::anyhow!("--alpha must lie in (0, 1]")));
    }
    let ckpt = load_ckpt(ckpt)?;
    let params = if student { &ckpt.params } else { ckpt.group("teacher").unwrap_or(&ckpt.params) };
    let videos = load_corpus(corpus)?;
    let window = window.unwrap_or(params.config.max_t).min(params.config.max_t);
    let mut batch: Vec<WindowSample> = Vec::new();
    for v in &videos {
        for (start, len) in tile_windows(v.duration(), window).map_err(CliError::usage)? {
            let w = WindowSample::crop(v, start, len);
            if w.n_sentences() > 0 {
                batch.push(w);
            }
        }
    }
    if batch.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("corpus has no sentences")));
    }
    let labels = teacher_pseudo_labels(params, &batch, alpha).map_err(train_err)?;
    let overlap_rate = labels.overlap_rate();
    let windows = batch
        .into_iter()
        .zip(labels.windows)
        .map(|(w, labels)| WindowLabels {
            video_id: w.video_id,
            offset: w.offset,
            sentence_index: w.sentence_index,
            labels,
        })
        .collect();
    write_json(
        out,
        &DenoiseOutput {
            alpha,
            window,
            overlap_rate,
            windows,
        },
    )
}

/// Decoded segmentation of one video.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPrediction {
    pub id: String,
    #[serde(flatten)]
    pub segmentation: Segmentation,
}

#[derive(Debug, Serialize)]
struct SegmentationReport {
    f_acc: f64,
    iou: f64,
    iod: f64,
    videos: Vec<(String, SegMetrics)>,
}

fn eval(pred: &Path, gt: &Path) -> CliResult {
    let gt_text = read_text(gt)?;
    let value: serde_json::Value = serde_json::from_str(&gt_text)
        .map_err(|e| CliError::data(e).context(format!("reading {}", gt.display())))?;
    let origin = gt.display().to_string();
    let is_segmentation = value
        .as_array()
        .and_then(|a| a.first())
        .is_some_and(|v| v.get("segments").is_some());
    if is_segmentation {
        let gt: Vec<SegmentationGt> = crate::io::from_json_str(&gt_text, &origin)?;
        let preds: Vec<SegmentPrediction> = read_json(pred)?;
        print_json(&evaluate_segmentation(&preds, &gt)?)
    } else {
        let gt: Vec<GtAnnotation> = crate::io::from_json_str(&gt_text, &origin)?;
        for g in &gt {
            g.validate().map_err(CliError::data)?;
        }
        let preds: Vec<VideoAlignment> = read_json(pred)?;
        let report = AlignmentReport::from_predictions(&preds, &gt).map_err(CliError::data)?;
        print_json(&report)
    }
}

/// Metrics over the frames between the first and last labelled ground
/// truth frame; background frames inside that span are not scored.
/// Frame accuracy pools frames, IoU and IoD average over videos.
fn evaluate_segmentation(preds: &[SegmentPrediction], gt: &[SegmentationGt]) -> CliResult<SegmentationReport> {
    let mut videos = Vec::new();
    let (mut correct, mut total) = (0.0, 0usize);
    for g in gt {
        let p = preds
            .iter()
            .find(|p| p.id == g.id)
            .ok_or_else(|| CliError::data(anyhow::anyhow!("no prediction for video {}", g.id)))?;
        let labels = g.frame_labels();
        if p.segmentation.labels.len() != labels.len() {
            return Err(CliError::data(anyhow::anyhow!(
                "video {}: {} predicted frames, {} in the ground truth",
                g.id,
                p.segmentation.labels.len(),
                labels.len()
            )));
        }
        let Some((a, b)) = trim_background(&labels) else {
            continue;
        };
        let (mut pv, mut gv) = (Vec::new(), Vec::new());
        for t in a..b {
            if let Some(l) = labels[t] {
                gv.push(l);
                pv.push(p.segmentation.labels[t]);
            }
        }
        let m = seg_metrics(&pv, &gv).map_err(CliError::data)?;
        correct += m.f_acc * gv.len() as f64;
        total += gv.len();
        videos.push((g.id.clone(), m));
    }
    if videos.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("no labelled frames in the ground truth")));
    }
    let n = videos.len() as f64;
    Ok(SegmentationReport {
        f_acc: correct / total as f64,
        iou: videos.iter().map(|v| v.1.iou).sum::<f64>() / n,
        iod: videos.iter().map(|v| v.1.iod).sum::<f64>() / n,
        videos,
    })
}

/// Dual-encoder visual features of a whole video, tile by tile.
fn dual_timeline(params: &ModelParams, v: &NarratedVideo, window: usize) -> CliResult<Tensor2D> {
    let mut out = Tensor2D::zeros(v.duration(), params.config.d_model);
    for (start, len) in tile_windows(v.duration(), window).map_err(CliError::usage)? {
        let feats = Tensor2D::from_fn(len, v.features.cols(), |i, j| v.features.get(start + i, j));
        let d = dual_visual(params, &feats).map_err(model_err)?;
        for i in 0..len {
            out.row_mut(start + i).copy_from_slice(d.row(i));
        }
    }
    Ok(out)
}

fn retrieve(ckpt: &Path, corpus: &Path, window: Option<usize>, out: Option<&Path>) -> CliResult {
    let ckpt = load_ckpt(ckpt)?;
    let params = &ckpt.params;
    let videos = load_corpus(corpus)?;
    let window = window.unwrap_or(params.config.max_t).min(params.config.max_t);
    let mut tokens = Vec::new();
    let mut segments: Vec<Vec<f64>> = Vec::new();
    for v in &videos {
        let timeline = dual_timeline(params, v, window)?;
        for s in &v.sentences {
            let Some((a, b)) = s.gt.as_ref().and_then(|g| g.interval()) else {
                continue;
            };
            let a = (a.max(0.0).floor() as usize).min(v.duration());
            let b = (b.ceil() as usize).min(v.duration());
            if a >= b {
                continue;
            }
            segments.push(segment_pool(&timeline, a, b).map_err(CliError::data)?);
            tokens.push(s.tokens.clone());
        }
    }
    if tokens.is_empty() {
        return Err(CliError::data(anyhow::anyhow!("corpus has no annotated segments")));
    }
    let queries = text_embeddings(params, &tokens).map_err(model_err)?;
    let segs = Tensor2D::from_fn(segments.len(), params.config.d_model, |i, j| segments[i][j]);
    let gt: Vec<usize> = (0..tokens.len()).collect();
    let metrics = retrieval_metrics(&queries, &segs, &gt).map_err(CliError::data)?;
    if let Some(p) = out {
        write_json(p, &metrics)?;
    }
    print_json(&metrics)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Step {
    Tokens(Vec<u32>),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionList {
    id: String,
    steps: Vec<Step>,
}

fn segment(
    matrix: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    corpus: Option<PathBuf>,
    actions: Option<PathBuf>,
    window: Option<usize>,
    out: Option<&Path>,
) -> CliResult {
    let preds: Vec<SegmentPrediction> = match (matrix, ckpt, corpus, actions) {
        (Some(m), ..) => {
            let align = read_csv(&read_text(&m)?).map_err(CliError::data)?;
            let id = m.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            vec![SegmentPrediction {
                id,
                segmentation: dtw_decode(&align).map_err(CliError::data)?,
            }]
        }
        (None, Some(c), Some(corpus), Some(actions)) => {
            let ckpt = load_ckpt(&c)?;
            let params = &ckpt.params;
            let videos = load_corpus(&corpus)?;
            let lists: Vec<ActionList> = read_json(&actions)?;
            let tok = HashTokenizer {
                vocab_size: params.config.vocab_size as u32,
            };
            let window = window.unwrap_or(params.config.max_t);
            let mut preds = Vec::new();
            for list in &lists {
                let v = videos
                    .iter()
                    .find(|v| v.id == list.id)
                    .ok_or_else(|| CliError::data(anyhow::anyhow!("no video {} in the corpus", list.id)))?;
                let steps = NarratedVideo {
                    id: v.id.clone(),
                    features: v.features.clone(),
                    sentences: list
                        .steps
                        .iter()
                        .map(|s| {
                            let (text, tokens) = match s {
                                Step::Tokens(t) => (String::new(), t.clone()),
                                Step::Text(t) => (t.clone(), tok.encode(t)),
                            };
                            SentenceRecord {
                                text,
                                tokens,
                                start: 0.0,
                                end: 0.0,
                                gt: None,
                            }
                        })
                        .collect(),
                };
                let pred = predict_video(params, &steps, window).map_err(model_err)?;
                preds.push(SegmentPrediction {
                    id: list.id.clone(),
                    segmentation: dtw_decode(&pred.align).map_err(CliError::data)?,
                });
            }
            preds
        }
        _ => {
            return Err(CliError::usage(anyhow::anyhow!(
                "give either --matrix or --ckpt with --corpus and --actions"
            )))
        }
    };
    match out {
        Some(p) => write_json(p, &preds),
        None => print_json(&preds),
    }
}

/// One curated sentence with the id of its source document.
#[derive(Debug, Serialize, Deserialize)]
pub struct CuratedSentence {
    pub video_id: String,
    #[serde(flatten)]
    pub sentence: SentenceRecord,
}

fn curate(inputs: &[PathBuf], out: &Path, report: Option<&Path>, cfg: &CurationConfig, seed: u64) -> CliResult {
    let classifier = TrigramClassifier::bundled();
    let mut records = Vec::new();
    let mut reports: Vec<CurationReport> = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let bytes = fs::read(path).map_err(|e| CliError::data(e).context(format!("reading {}", path.display())))?;
        let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let doc = curation::parse_vtt(&bytes, &id)
            .map_err(|e| CliError::data(e).context(path.display().to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (sentences, rep) = curation::curate(&doc, &classifier, &RulePunctuator, cfg, &mut rng)
            .map_err(|e| CliError::data(e).context(path.display().to_string()))?;
        records.extend(sentences.into_iter().map(|s| CuratedSentence {
            video_id: id.clone(),
            sentence: s,
        }));
        reports.push(rep);
    }
    write_jsonl(out, &records)?;
    match report {
        Some(p) => write_json(p, &reports),
        None => print_json(&reports),
    }
}
