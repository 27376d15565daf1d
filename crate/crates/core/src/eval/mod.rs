//! Alignment, retrieval and segmentation metrics, DTW decoding, window
//! stitching and heat-map export.

mod dtw;
mod harness;
mod heatmap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::HiddenGt;
use crate::tensor::Tensor2D;

pub use dtw::{dtw_decode, path_cost, seg_metrics, trim_background, SegMetrics, Segmentation};
pub use harness::{
    evaluate_alignment, predict_video, stitch_windows, tile_windows, AlignmentReport, GtAnnotation, GtFile,
    GtSegment, GtSentence, SegmentationGt, VideoAlignment,
};
pub use heatmap::{export_heatmap, read_csv, time_softmax, write_csv, write_pgm};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("{0}")]
    Contract(String),
    #[error("alignment infeasible: {t} frames for {k} actions")]
    Infeasible { k: usize, t: usize },
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pointing-game hits: the number of alignable sentences whose argmax
/// frame falls inside the ground-truth interval, and how many alignable
/// sentences there were. Frame `t` covers `[t, t + 1)`, so the interval
/// `[s, e]` accepts frames `floor(s)..ceil(e)`.
pub fn pointing_hits(align: &Tensor2D, gt: &[HiddenGt]) -> Result<(usize, usize)> {
    if gt.len() != align.rows() {
        return Err(EvalError::Contract(format!(
            "{} annotations for {} sentences",
            gt.len(),
            align.rows()
        )));
    }
    let mut hits = 0;
    let mut n = 0;
    for (k, g) in gt.iter().enumerate() {
        let Some((s, e)) = g.interval() else { continue };
        n += 1;
        let t = argmax(align.row(k)) as f64;
        if t >= s.floor() && t < e.ceil() {
            hits += 1;
        }
    }
    Ok((hits, n))
}

/// Fraction of alignable sentences whose argmax lands in their interval.
pub fn recall_at_1(align: &Tensor2D, gt: &[HiddenGt]) -> Result<f64> {
    let (hits, n) = pointing_hits(align, gt)?;
    if n == 0 {
        return Err(EvalError::Undefined("no alignable sentences"));
    }
    Ok(hits as f64 / n as f64)
}

/// Area under the ROC curve via average ranks: the probability a random
/// positive outscores a random negative, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::Contract("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined("ROC-AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-sentence alignability from the alignment matrix alone: the row max.
pub fn alignability_scores_fallback(align: &Tensor2D) -> Vec<f64> {
    (0..align.rows())
        .map(|k| align.row(k).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Mean of rows `a..b`.
pub fn segment_pool(v: &Tensor2D, a: usize, b: usize) -> Result<Vec<f64>> {
    if a >= b || b > v.rows() {
        return Err(EvalError::Contract(format!(
            "segment {a}..{b} outside 0..{}",
            v.rows()
        )));
    }
    let mut out = vec![0.0; v.cols()];
    for t in a..b {
        for (o, x) in out.iter_mut().zip(v.row(t)) {
            *o += x;
        }
    }
    let n = (b - a) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::COSINE_EPS);
    dot / (na * nb)
}

/// 1-based rank of the target among cosine similarities; an equal score
/// at a lower index ranks ahead.
pub fn retrieval_rank(sims: &[f64], target: usize) -> usize {
    let s = sims[target];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

/// Text-to-segment retrieval by cosine similarity. `gt[q]` indexes the
/// matching row of `segments`. The median of an even count is the mean of
/// the two middle ranks.
pub fn retrieval_metrics(queries: &Tensor2D, segments: &Tensor2D, gt: &[usize]) -> Result<RetrievalMetrics> {
    if gt.len() != queries.rows() || queries.cols() != segments.cols() {
        return Err(EvalError::Contract("retrieval shapes disagree".into()));
    }
    if gt.is_empty() {
        return Err(EvalError::Undefined("no queries"));
    }
    let mut ranks = Vec::with_capacity(gt.len());
    for (q, &g) in gt.iter().enumerate() {
        if g >= segments.rows() {
            return Err(EvalError::Contract(format!("query {q} targets missing segment {g}")));
        }
        let sims: Vec<f64> = (0..segments.rows()).map(|j| cosine(queries.row(q), segments.row(j))).collect();
        ranks.push(retrieval_rank(&sims, g));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let m = sorted.len();
    let median_rank = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    Ok(RetrievalMetrics {
        r_at_1: recall(1),
        r_at_5: recall(5),
        r_at_10: recall(10),
        median_rank,
    })
}
