use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tan_core::corpus::{NoiseModelParams, Vocabulary};
use tan_core::losses::LossConfig;
use tan_core::model::ModelConfig;
use tan_core::trainer::TrainConfig;
use tempfile::TempDir;

fn tan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tan")).args(args).output().expect("spawn tan")
}

fn ok(args: &[&str]) -> String {
    let out = tan(args);
    assert!(
        out.status.success(),
        "tan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn validate(schema: &str, instance: &Value) {
    let schema: Value = serde_json::from_str(&fs::read_to_string(manifest(&format!("schemas/{schema}"))).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema}: {errors:?}");
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn read_jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--n-layers",
    "1",
    "--n-heads",
    "2",
    "--d-model",
    "8",
    "--d-ff",
    "16",
    "--s1-iters",
    "4",
    "--s2-iters",
    "3",
    "--batch-videos",
    "2",
    "--eval-every",
    "2",
    "--quiet",
];

fn synth(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("corpus.jsonl");
    ok(&["synth", "--out", s(&p), "--videos", &n.to_string(), "--seed", "3"]);
    p
}

#[test]
fn help_lists_defaults() {
    let t = TrainConfig::default();
    let m = ModelConfig::default();
    let train_help = ok(&["train", "--help"]);
    for v in [
        t.batch_videos.to_string(),
        t.window_sec.to_string(),
        t.lr.to_string(),
        t.weight_decay.to_string(),
        t.s1_iters.to_string(),
        t.alpha.to_string(),
        t.ema_momentum.to_string(),
        t.eval_every.to_string(),
        t.heldout_frac.to_string(),
        LossConfig::default().temperature.to_string(),
        m.n_layers.to_string(),
        m.n_heads.to_string(),
        m.d_model.to_string(),
        m.d_ff.to_string(),
        Vocabulary::default().size().to_string(),
    ] {
        assert!(train_help.contains(&format!("[default: {v}]")), "train --help lacks default {v}");
    }
    let n = NoiseModelParams::default();
    let synth_help = ok(&["synth", "--help"]);
    for v in [n.frac_alignable, n.frac_well_aligned, n.max_offset_sec, n.order_shuffle_prob, n.feature_noise] {
        assert!(synth_help.contains(&format!("[default: {v}]")), "synth --help lacks default {v}");
    }
    assert_eq!(m.vocab_size, Vocabulary::default().size());
}

#[test]
fn defaults_round_trip_as_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, ok(&["defaults"])).unwrap();
    let corpus = dir.path().join("c.jsonl");
    ok(&["synth", "--out", s(&corpus), "--videos", "1", "--config", s(&cfg)]);
}

#[test]
fn synth_zero_videos_is_an_empty_file() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("c.jsonl");
    let summary: Value = serde_json::from_str(&ok(&["synth", "--out", s(&p), "--videos", "0"])).unwrap();
    assert_eq!(fs::read(&p).unwrap(), b"");
    assert_eq!(summary["videos"], 0);
    validate("synth_summary.schema.json", &summary);
}

#[test]
fn synth_is_reproducible_and_its_summary_matches_the_file() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let gt = dir.path().join("gt.json");
    let out = ok(&["synth", "--out", s(&a), "--videos", "5", "--seed", "9", "--gt-out", s(&gt)]);
    ok(&["synth", "--out", s(&b), "--videos", "5", "--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let summary: Value = serde_json::from_str(&out).unwrap();
    let videos = read_jsonl(&a);
    for v in &videos {
        validate("corpus_video.schema.json", v);
    }
    let sentences: Vec<&Value> = videos.iter().flat_map(|v| v["sentences"].as_array().unwrap()).collect();
    let alignable = sentences.iter().filter(|s| s["gt"]["alignable"] == true).count();
    assert_eq!(summary["sentences"], sentences.len());
    assert_eq!(summary["alignable"], alignable);
    let frac = summary["alignable_fraction"].as_f64().unwrap();
    assert!((frac - alignable as f64 / sentences.len() as f64).abs() < 1e-12);
    validate("alignment_gt.schema.json", &read_json(&gt));
}

#[test]
fn noise_flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, json!({"noise": {"frac_alignable": 0.0, "frac_well_aligned": 0.0}}).to_string()).unwrap();
    let p = dir.path().join("c.jsonl");
    let none: Value = serde_json::from_str(&ok(&["synth", "--out", s(&p), "--videos", "3", "--config", s(&cfg)])).unwrap();
    assert_eq!(none["alignable"], 0);
    let all: Value = serde_json::from_str(&ok(&[
        "synth",
        "--out",
        s(&p),
        "--videos",
        "3",
        "--config",
        s(&cfg),
        "--frac-alignable",
        "1",
    ]))
    .unwrap();
    assert_eq!(all["alignable"], all["sentences"]);
}

#[test]
fn unknown_config_keys_are_rejected_with_their_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, json!({"train": {"learning_rate": 0.1}}).to_string()).unwrap();
    let out = tan(&["synth", "--out", s(&dir.path().join("c.jsonl")), "--videos", "1", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train") && err.contains("learning_rate"), "{err}");
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&tan(&["synth"])), 2);
    assert_eq!(code(&tan(&["no-such-command"])), 2);
    let dir = TempDir::new().unwrap();
    let out = tan(&[
        "synth",
        "--out",
        s(&dir.path().join("c.jsonl")),
        "--videos",
        "1",
        "--frac-alignable",
        "2",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unwritable_output_is_a_data_error() {
    let out = tan(&["synth", "--out", "/nonexistent-dir/x/c.jsonl", "--videos", "1"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn stage_two_needs_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let corpus = synth(dir.path(), 4);
    let out = tan(&["train", "--corpus", s(&corpus), "--stage", "2", "--ckpt-out", s(&dir.path().join("ck"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn nan_loss_exits_with_the_numerical_code() {
    let dir = TempDir::new().unwrap();
    let corpus = synth(dir.path(), 4);
    let mut args = vec!["train", "--corpus", s(&corpus), "--stage", "1", "--ckpt-out"];
    let ck = dir.path().join("ck");
    args.push(s(&ck));
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--lr", "1e300"]);
    let out = tan(&args);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(corpus: &Path, out: &Path, stage: &str, ckpt_in: Option<&Path>) {
    let mut args = vec!["train", "--corpus", s(corpus), "--stage", stage, "--ckpt-out", s(out)];
    if let Some(c) = ckpt_in {
        args.extend_from_slice(&["--ckpt-in", s(c)]);
    }
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--lr", "0.001"]);
    ok(&args);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = TempDir::new().unwrap();
    let corpus = synth(dir.path(), 6);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&corpus, &a, "both", None);
    train(&corpus, &b, "both", None);
    for f in ["ckpt_s1.ckpt", "ckpt_s2.ckpt", "metrics.jsonl"] {
        assert!(a.join(f).exists(), "{f} missing");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let log = read_jsonl(&a.join("metrics.jsonl"));
    for rec in &log {
        validate("metrics_record.schema.json", rec);
    }
    assert!(log.iter().any(|r| r["stage"] == 1) && log.iter().any(|r| r["stage"] == 2));

    // stage 1 alone, then stage 2 from its checkpoint
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    train(&corpus, &s1, "1", None);
    train(&corpus, &s2, "2", Some(&s1.join("ckpt_s1.ckpt")));
    assert_eq!(fs::read(s1.join("ckpt_s1.ckpt")).unwrap(), fs::read(a.join("ckpt_s1.ckpt")).unwrap());
    assert_eq!(fs::read(s2.join("ckpt_s2.ckpt")).unwrap(), fs::read(a.join("ckpt_s2.ckpt")).unwrap());
    let mut resumed = read_jsonl(&s1.join("metrics.jsonl"));
    resumed.extend(read_jsonl(&s2.join("metrics.jsonl")));
    assert_eq!(resumed, log);

    // inference commands on the trained model
    let ck = a.join("ckpt_s2.ckpt");
    let aligned = dir.path().join("align.json");
    let heat = dir.path().join("heat");
    ok(&[
        "align",
        "--ckpt",
        s(&ck),
        "--corpus",
        s(&corpus),
        "--out",
        s(&aligned),
        "--heatmap-dir",
        s(&heat),
        "--pgm",
    ]);
    let preds = read_json(&aligned);
    validate("alignment.schema.json", &preds);
    assert_eq!(preds.as_array().unwrap().len(), 6);
    assert_eq!(fs::read_dir(&heat).unwrap().count(), 12);

    let gt = dir.path().join("gt.json");
    ok(&["synth", "--out", s(&dir.path().join("again.jsonl")), "--videos", "6", "--seed", "3", "--gt-out", s(&gt)]);
    let report: Value = serde_json::from_str(&ok(&["eval", "--pred", s(&aligned), "--gt", s(&gt)])).unwrap();
    validate("alignment_report.schema.json", &report);

    let pl = dir.path().join("pl.json");
    ok(&["denoise", "--ckpt", s(&ck), "--corpus", s(&corpus), "--out", s(&pl)]);
    let pl = read_json(&pl);
    validate("pseudo_labels.schema.json", &pl);
    let labels: Vec<&Value> = pl["windows"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|w| w["labels"].as_array().unwrap())
        .collect();
    let positives = labels.iter().filter(|l| l["y_pseudo"] == true).count();
    assert_eq!(positives, (0.5 * labels.len() as f64 - 1e-9).ceil() as usize);

    let r: Value = serde_json::from_str(&ok(&["retrieve", "--ckpt", s(&ck), "--corpus", s(&corpus)])).unwrap();
    validate("retrieval.schema.json", &r);
}

#[test]
fn eval_of_perfect_alignment_scores_one() {
    let dir = TempDir::new().unwrap();
    let gt = json!([{
        "id": "v",
        "sentences": [
            {"text": "a", "start": 0.0, "end": 2.0, "alignable": true, "gt_start": 1.0, "gt_end": 3.0},
            {"text": "b", "start": 2.0, "end": 4.0, "alignable": true, "gt_start": 4.0, "gt_end": 6.0},
            {"text": "c", "start": 4.0, "end": 6.0, "alignable": false}
        ]
    }]);
    let indicator = |a: usize, b: usize| (0..8).map(|t| if (a..b).contains(&t) { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let align = json!([indicator(1, 3), indicator(4, 6), vec![0.0; 8]]);
    let pred = json!([{"id": "v", "align": align, "align_dual": align, "alignable_prob": [0.9, 0.8, 0.1]}]);
    let gp = dir.path().join("gt.json");
    let pp = dir.path().join("pred.json");
    fs::write(&gp, gt.to_string()).unwrap();
    fs::write(&pp, pred.to_string()).unwrap();
    validate("alignment_gt.schema.json", &gt);
    validate("alignment.schema.json", &pred);
    let report: Value = serde_json::from_str(&ok(&["eval", "--pred", s(&pp), "--gt", s(&gp)])).unwrap();
    assert_eq!(report["r_at_1"], 1.0);
    assert_eq!(report["roc_auc"], 1.0);
}

#[test]
fn eval_reports_schema_errors_with_field_paths() {
    let dir = TempDir::new().unwrap();
    let gp = dir.path().join("gt.json");
    let pp = dir.path().join("pred.json");
    fs::write(&gp, r#"[{"id":"v","sentences":[{"text":"a","start":0,"end":1,"alignable":"yes"}]}]"#).unwrap();
    fs::write(&pp, "[]").unwrap();
    let out = tan(&["eval", "--pred", s(&pp), "--gt", s(&gp)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[0].sentences[0].alignable"), "{err}");
}

#[test]
fn segment_recovers_block_boundaries_and_evaluates() {
    let dir = TempDir::new().unwrap();
    let m = dir.path().join("vid.csv");
    // three actions over 3 + 4 + 2 frames
    let bounds = [(0, 3), (3, 7), (7, 9)];
    let rows: Vec<String> = bounds
        .iter()
        .map(|&(a, b)| {
            (0..9)
                .map(|t| if (a..b).contains(&t) { "0.9" } else { "0.1" })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    fs::write(&m, rows.join("\n") + "\n").unwrap();
    let out = dir.path().join("seg.json");
    ok(&["segment", "--matrix", s(&m), "--out", s(&out)]);
    let seg = read_json(&out);
    validate("segmentation.schema.json", &seg);
    assert_eq!(seg[0]["id"], "vid");
    assert_eq!(seg[0]["intervals"], json!([[0, 3], [3, 7], [7, 9]]));

    let gt = dir.path().join("gt.json");
    fs::write(
        &gt,
        json!([{"id": "vid", "n_frames": 9, "segments": [
            {"action": 0, "start": 0.0, "end": 3.0},
            {"action": 1, "start": 3.0, "end": 7.0},
            {"action": 2, "start": 7.0, "end": 9.0}
        ]}])
        .to_string(),
    )
    .unwrap();
    let report: Value = serde_json::from_str(&ok(&["eval", "--pred", s(&out), "--gt", s(&gt)])).unwrap();
    validate("segmentation_report.schema.json", &report);
    assert_eq!((report["f_acc"].clone(), report["iou"].clone(), report["iod"].clone()), (json!(1.0), json!(1.0), json!(1.0)));
}

#[test]
fn curate_fixture_counts() {
    let dir = TempDir::new().unwrap();
    let fixtures = manifest("tests/fixtures/vtt");
    let mut inputs: Vec<PathBuf> = fs::read_dir(&fixtures)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "vtt"))
        .collect();
    inputs.sort();
    let out = dir.path().join("sentences.jsonl");
    let report = dir.path().join("report.json");
    let mut args = vec!["curate", "--out", s(&out), "--report", s(&report), "--in"];
    args.extend(inputs.iter().map(|p| s(p)));
    ok(&args);

    let expected = read_json(&fixtures.join("counts.json"));
    let reports = read_json(&report);
    validate("curation_report.schema.json", &reports);
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), expected.as_object().unwrap().len());
    for r in reports {
        let want = &expected[r["video_id"].as_str().unwrap()];
        for key in ["kept", "cues_deduped", "sentences_out"] {
            assert_eq!(r[key], want[key], "{} {key}", r["video_id"]);
        }
    }
    let lines = read_jsonl(&out);
    for l in &lines {
        validate("curated_sentence.schema.json", l);
    }
    let total: u64 = reports.iter().map(|r| r["sentences_out"].as_u64().unwrap()).sum();
    assert_eq!(lines.len() as u64, total);
}
