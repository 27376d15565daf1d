//! Criteria that need no training: gradients, loss and decode oracles,
//! metric invariances and curation round trips.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tan_core::corpus::{HiddenGt, SentenceMask};
use tan_core::curation::{
    dedup_linebreaks, language_filter, parse_vtt, restitch_sentences, serialize_vtt, CurationError, Cue,
    HashTokenizer, LanguageClassifier, RulePunctuator, SubtitleDoc,
};
use tan_core::eval::{dtw_decode, recall_at_1, retrieval_metrics, roc_auc, seg_metrics};
use tan_core::losses::{l_alignability, l_tc, l_total, soft_dtw_loss};
use tan_core::model::{Graph, ModelConfig, ModelParams};
use tan_core::tensor::gradcheck::{finite_difference, relative_error};
use tan_core::tensor::{Axis, ParamId, Result, Tape, Tensor2D, Var};

use crate::training::Shared;
use crate::Verdict;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

type Primitive = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, Vec<(usize, usize)>, Primitive)> {
    let mask: Vec<bool> = (0..18).map(|i| i % 3 != 1).collect();
    vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![(3, 4), (5, 4)], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("transpose", vec![(3, 4)], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![(3, 4), (3, 4)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![(3, 4), (3, 4)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![(3, 4), (3, 4)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![(3, 4), (1, 4)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", vec![(3, 4), (1, 4)], Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("affine", vec![(2, 5)], Box::new(|t, v| t.affine(v[0], -2.5, 1.0))),
        ("scale", vec![(2, 5)], Box::new(|t, v| t.scale(v[0], 0.7))),
        ("row_softmax", vec![(3, 6)], Box::new(|t, v| t.row_softmax(v[0]))),
        ("log_softmax_rows", vec![(4, 3)], Box::new(|t, v| t.log_softmax_rows(v[0]))),
        ("layer_norm", vec![(3, 8)], Box::new(|t, v| t.layer_norm(v[0]))),
        ("gelu", vec![(3, 5)], Box::new(|t, v| t.gelu(v[0]))),
        ("concat_rows", vec![(2, 3), (4, 3)], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_rows", vec![(5, 3)], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("concat_cols", vec![(3, 2), (3, 4)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_cols", vec![(3, 6)], Box::new(|t, v| t.slice_cols(v[0], 2, 3))),
        ("mean_rows", vec![(4, 3)], Box::new(|t, v| t.mean_over(v[0], Axis::Rows))),
        ("mean_cols", vec![(4, 3)], Box::new(|t, v| t.mean_over(v[0], Axis::Cols))),
        ("max_rows", vec![(4, 3)], Box::new(|t, v| t.max_over(v[0], Axis::Rows))),
        ("max_cols", vec![(4, 3)], Box::new(|t, v| t.max_over(v[0], Axis::Cols))),
        ("sum_all", vec![(4, 3)], Box::new(|t, v| t.sum_all(v[0]))),
        ("normalize_rows", vec![(3, 5)], Box::new(|t, v| t.normalize_rows(v[0], 1e-8))),
        (
            "masked_row_logsumexp",
            vec![(3, 6)],
            Box::new(move |t, v| t.masked_row_logsumexp(v[0], &mask)),
        ),
        ("gather", vec![(3, 4)], Box::new(|t, v| t.gather(v[0], &[(0, 1), (2, 3), (0, 1)]))),
        ("gather_rows", vec![(5, 3)], Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))),
        ("soft_dtw", vec![(3, 5)], Box::new(|t, v| t.soft_dtw(v[0], 0.5))),
    ]
}

/// Worst relative error over 10 random points of `sum(f(x) * w)`.
fn primitive_error(shapes: &[(usize, usize)], f: &Primitive, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let inputs: Vec<Tensor2D> = shapes.iter().map(|&(r, c)| random(rng, r, c)).collect();
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let o = f(&tape, &vars).unwrap();
            tape.shape(o)
        };
        let weights = random(rng, out_shape.0, out_shape.1);
        let value = |xs: &[Tensor2D]| {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let o = f(&tape, &vars).unwrap();
            let v = tape.value(o);
            v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| tape.param(ParamId(i), x)).collect();
        let o = f(&tape, &vars).unwrap();
        let w = tape.constant(weights.clone());
        let root = tape.mul(o, w).and_then(|p| tape.sum_all(p)).unwrap();
        let grads = tape.backward(root).unwrap();
        for (i, num) in finite_difference(&inputs, 1e-5, value).iter().enumerate() {
            let zero = Tensor2D::zeros(num.rows(), num.cols());
            worst = worst.max(relative_error(grads.get(ParamId(i)).unwrap_or(&zero), num));
        }
    }
    worst
}

fn end_to_end_error() -> f64 {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_t: 8,
        feature_dim: 6,
        text_dim: 5,
        vocab_size: 12,
        max_tokens: 4,
        segment_embedding: false,
    };
    let params = ModelParams::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let features = random(&mut rng, 8, 6);
    let tokens = vec![vec![1, 4, 7], vec![2, 2], vec![11, 0, 5, 9]];
    let masks = vec![
        SentenceMask::run(8, 0, 3),
        SentenceMask::run(8, 3, 2),
        SentenceMask::run(8, 5, 3),
    ];
    let y = [true, false, true];
    let loss = |tape: &Tape, p: &ModelParams| {
        let g = Graph::trainable(tape, p);
        let out = g.forward_window(&features, &tokens).unwrap();
        let all = [0, 1, 2];
        let a = l_tc(tape, out.align, &masks, &all, 0.1).unwrap();
        let b = l_tc(tape, out.align_dual, &masks, &all, 0.1).unwrap();
        let tc = tape.add(a, b).unwrap();
        let ce = l_alignability(tape, out.logits, &y, &all).unwrap();
        l_total(tape, tc, ce).unwrap()
    };
    let tape = Tape::new();
    let root = loss(&tape, &params);
    let grads = tape.backward(root).unwrap();
    let ids: Vec<ParamId> = params.ids().collect();
    let inputs: Vec<Tensor2D> = ids.iter().map(|&id| params.tensor(id).clone()).collect();
    let numeric = finite_difference(&inputs, 1e-5, |xs| {
        let mut p = params.clone();
        for (&id, x) in ids.iter().zip(xs) {
            *p.tensor_mut(id) = x.clone();
        }
        let tape = Tape::new();
        let r = loss(&tape, &p);
        tape.scalar(r)
    });
    let flatten = |ts: Vec<Vec<f64>>| {
        let d: Vec<f64> = ts.into_iter().flatten().collect();
        Tensor2D::from_vec(1, d.len(), d).unwrap()
    };
    let analytic = flatten(
        ids.iter()
            .zip(&inputs)
            .map(|(&id, x)| grads.get(id).map_or(vec![0.0; x.len()], |g| g.data().to_vec()))
            .collect(),
    );
    let numeric = flatten(numeric.into_iter().map(Tensor2D::into_data).collect());
    relative_error(&analytic, &numeric)
}

pub fn gradients(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prims = primitives();
    let mut worst = (0.0f64, "");
    for (name, shapes, f) in &prims {
        let e = primitive_error(shapes, f, &mut rng);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let e2e = end_to_end_error();
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        worst.0 < 1e-4 && e2e < 1e-3 && secs < 60.0,
        format!(
            "{} primitives, worst relative error {:.2e} ({}); end-to-end d_model=8 {:.2e}",
            prims.len(),
            worst.0,
            worst.1,
            e2e
        ),
    )
}

fn path_costs(cost: &Tensor2D, i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
    let acc = acc + cost.get(i, j);
    let (k, t) = cost.shape();
    if i + 1 == k && j + 1 == t {
        out.push(acc);
        return;
    }
    if i + 1 < k {
        path_costs(cost, i + 1, j, acc, out);
    }
    if j + 1 < t {
        path_costs(cost, i, j + 1, acc, out);
    }
    if i + 1 < k && j + 1 < t {
        path_costs(cost, i + 1, j + 1, acc, out);
    }
}

pub fn loss_oracles(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        // contrastive loss against direct summation
        let (k, t) = (rng.random_range(1..=5), rng.random_range(2..=12));
        let tau = rng.random_range(0.05..1.0);
        let a = Tensor2D::from_fn(k, t, |_, _| rng.random_range(-1.0..1.0));
        let masks: Vec<SentenceMask> = (0..k)
            .map(|_| {
                let len = rng.random_range(1..t);
                SentenceMask::run(t, rng.random_range(0..=t - len), len)
            })
            .collect();
        let active: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.7)).collect();
        let mut want = 0.0;
        for &i in &active {
            let den: f64 = (0..t).map(|j| (a.get(i, j) / tau).exp()).sum();
            let num: f64 = (0..t).filter(|&j| masks[i].get(j)).map(|j| (a.get(i, j) / tau).exp()).sum();
            want -= (num / den).ln();
        }
        let tape = Tape::new();
        let av = tape.constant(a.clone());
        let got = tape.scalar(l_tc(&tape, av, &masks, &active, tau).unwrap());
        worst[0] = worst[0].max((got - want).abs());

        // alignability cross-entropy
        let n = rng.random_range(1..=8);
        let z = Tensor2D::from_fn(n, 2, |_, _| rng.random_range(-4.0..4.0));
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let labeled: Vec<usize> = (0..n).collect();
        let want: f64 = labeled
            .iter()
            .map(|&i| {
                let p1 = z.get(i, 1).exp() / (z.get(i, 0).exp() + z.get(i, 1).exp());
                -(if y[i] { p1 } else { 1.0 - p1 }).ln()
            })
            .sum::<f64>()
            / n as f64;
        let tape = Tape::new();
        let zv = tape.constant(z);
        let got = tape.scalar(l_alignability(&tape, zv, &y, &labeled).unwrap());
        worst[1] = worst[1].max((got - want).abs());

        // soft-DTW against enumeration of every monotone path
        let k = rng.random_range(1..=4);
        let t = rng.random_range(k..=7);
        let gamma = rng.random_range(0.05..1.0);
        let a = Tensor2D::from_fn(k, t, |_, _| rng.random_range(-1.0..1.0));
        let mut costs = Vec::new();
        path_costs(&a.map(|v| 1.0 - v), 0, 0, 0.0, &mut costs);
        let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let want = m - gamma * costs.iter().map(|c| (-(c - m) / gamma).exp()).sum::<f64>().ln();
        let tape = Tape::new();
        let av = tape.constant(a);
        let got = tape.scalar(soft_dtw_loss(&tape, av, gamma).unwrap());
        worst[2] = worst[2].max((got - want).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        worst.iter().all(|&w| w < 1e-10) && secs < 30.0,
        format!(
            "50 instances each, max abs error l_tc {:.1e}, l_alignability {:.1e}, soft_dtw {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn exhaustive_min(a: &Tensor2D, action: usize, start: usize, acc: f64, best: &mut f64) {
    let (k, t) = a.shape();
    if action + 1 == k {
        let c: f64 = (start..t).map(|j| 1.0 - a.get(action, j)).sum();
        *best = best.min(acc + c);
        return;
    }
    for end in start + 1..=t - (k - action - 1) {
        let c: f64 = (start..end).map(|j| 1.0 - a.get(action, j)).sum();
        exhaustive_min(a, action + 1, end, acc + c, best);
    }
}

pub fn dtw_exactness(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut mismatches = 0;
    for trial in 0..500 {
        let coarse = trial % 3 == 0;
        let full = Tensor2D::from_fn(4, 12, |_, _| {
            if coarse {
                f64::from(rng.random_range(-2i32..=2)) / 2.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        for k in 1..=4 {
            for t in k..=12 {
                let a = Tensor2D::from_fn(k, t, |i, j| full.get(i, j));
                let mut best = f64::INFINITY;
                exhaustive_min(&a, 0, 0, 0.0, &mut best);
                let got = dtw_decode(&a).unwrap().cost;
                checked += 1;
                if (got - best).abs() > 1e-9 {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        mismatches == 0 && secs < 60.0,
        format!("{checked} instances over 500 matrices, {mismatches} cost mismatches"),
    )
}

fn monotone(rng: &mut ChaCha8Rng, values: &[f64]) -> impl Fn(f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    loop {
        let pieces: Vec<(u8, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| (rng.random_range(0..4u8), rng.random_range(0.2..3.0), rng.random_range(-2.0..2.0)))
            .collect();
        let f = move |mut x: f64| {
            for &(kind, a, b) in &pieces {
                x = match kind {
                    0 => a * x + b,
                    1 => (a * x).exp(),
                    2 => x + x * x * x,
                    _ => (a * x).atan(),
                };
            }
            x
        };
        // keep maps that stay strictly increasing in floating point
        if sorted.windows(2).all(|w| f(w[0]) < f(w[1])) {
            return f;
        }
    }
}

pub fn metric_invariances(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut broken = Vec::new();
    for _ in 0..20 {
        let n = rng.random_range(4..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = monotone(&mut rng, &scores);
        let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
        if roc_auc(&scores, &labels).unwrap() != roc_auc(&mapped, &labels).unwrap() {
            broken.push("roc_auc");
        }

        let (k, t) = (rng.random_range(1..8), rng.random_range(4..30));
        let a = Tensor2D::from_fn(k, t, |_, _| rng.random_range(-1.0..1.0));
        let gt: Vec<HiddenGt> = (0..k)
            .map(|_| {
                let s = rng.random_range(0.0..(t - 1) as f64);
                HiddenGt::aligned(s, rng.random_range(s + 0.5..t as f64))
            })
            .collect();
        let f = monotone(&mut rng, a.data());
        if recall_at_1(&a, &gt).unwrap() != recall_at_1(&a.map(&f), &gt).unwrap() {
            broken.push("recall_at_1");
        }
    }
    for _ in 0..100 {
        let (q, n, d) = (rng.random_range(1..20), rng.random_range(1..30), rng.random_range(2..6));
        let queries = Tensor2D::from_fn(q, d, |_, _| rng.random_range(-1.0..1.0));
        let segments = Tensor2D::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let gt: Vec<usize> = (0..q).map(|_| rng.random_range(0..n)).collect();
        let m = retrieval_metrics(&queries, &segments, &gt).unwrap();
        if !(m.r_at_1 <= m.r_at_5 && m.r_at_5 <= m.r_at_10) {
            broken.push("recall ordering");
        }
        let t = rng.random_range(1..50);
        let k = rng.random_range(1..6);
        let pred: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
        let s = seg_metrics(&pred, &truth).unwrap();
        if s.iod < s.iou || s.per_action.iter().any(|&(_, iou, iod)| iod < iou) {
            broken.push("IoD >= IoU");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        broken.is_empty() && secs < 30.0,
        if broken.is_empty() {
            "20 monotone maps, 100 fuzzed ranking and segmentation cases, no violations".to_string()
        } else {
            format!("violations: {broken:?}")
        },
    )
}

const WORDS: &[&str] = &[
    "now", "we", "cut", "the", "onion", "Then", "add", "salt.", "stir", "it", "well!", "Okay?", "pan", "naïve",
];

fn fuzz_doc(rng: &mut ChaCha8Rng) -> SubtitleDoc {
    let line = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(1..6))
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut t: u64 = rng.random_range(0..5000);
    let mut cues: Vec<Cue> = Vec::new();
    for i in 0..rng.random_range(1..10) {
        let start = t;
        let end = start + rng.random_range(1..4000);
        t = start + rng.random_range(0..3000);
        let mut lines: Vec<String> = (0..rng.random_range(1..4)).map(|_| line(rng)).collect();
        if let Some(prev) = cues.last().and_then(|c| c.text.lines().last()) {
            if rng.random_bool(0.4) {
                lines.insert(0, prev.to_string());
            }
        }
        let text = lines.join("\n");
        let n = text.split_whitespace().count() as u64;
        let word_times = rng.random_bool(0.5).then(|| {
            (0..n)
                .map(|w| (start + 1 + w * (end - start) / (n + 1)) as f64 / 1000.0)
                .collect()
        });
        cues.push(Cue {
            id: rng.random_bool(0.3).then(|| format!("c{i}")),
            start: start as f64 / 1000.0,
            end: end as f64 / 1000.0,
            text,
            word_times,
        });
    }
    SubtitleDoc {
        video_id: "fuzz".into(),
        cues,
    }
}

struct Scripted;

impl LanguageClassifier for Scripted {
    fn classify(&self, text: &str) -> std::result::Result<Vec<(String, f64)>, CurationError> {
        let p: f64 = text.trim().parse().map_err(|_| CurationError::Classifier(text.into()))?;
        Ok(vec![("en".into(), p), ("de".into(), 1.0 - p)])
    }
}

pub fn curation_round_trips(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tok = HashTokenizer { vocab_size: 128 };
    let mut failures = Vec::new();
    let mut deduped = 0;
    for _ in 0..50 {
        let doc = fuzz_doc(&mut rng);
        let text = serialize_vtt(&doc);
        if parse_vtt(text.as_bytes(), "fuzz").ok().as_ref() != Some(&doc) {
            failures.push("round trip");
        }
        let (once, changed) = dedup_linebreaks(&doc);
        deduped += changed;
        if dedup_linebreaks(&once) != (once.clone(), 0) {
            failures.push("dedup idempotence");
        }
        let words: usize = once.cues.iter().map(|c| c.text.split_whitespace().count()).sum();
        let stitched: usize = restitch_sentences(&once, &RulePunctuator, &tok)
            .iter()
            .map(|s| s.text.split_whitespace().count())
            .sum();
        if words != stitched {
            failures.push("word count");
        }
    }
    let boundary = |p: f64| {
        let doc = SubtitleDoc {
            video_id: "b".into(),
            cues: (0..5).map(|i| Cue::new(i as f64, i as f64 + 1.0, &p.to_string())).collect(),
        };
        language_filter(&doc, &Scripted, 5, 0.9, &mut rng.clone()).unwrap().0
    };
    let (at, below) = (boundary(0.90), boundary(0.89999));
    if !at {
        failures.push("0.90 discarded");
    }
    if below {
        failures.push("0.89999 kept");
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::new(
        failures.is_empty() && secs < 30.0,
        if failures.is_empty() {
            format!("50 fuzzed documents ({deduped} cues deduplicated), 0.90 kept, 0.89999 discarded")
        } else {
            format!("failures: {failures:?}")
        },
    )
}
