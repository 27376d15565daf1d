//! Pseudo-labels from the agreement of the two alignment matrices, and the
//! EMA teacher that produces them.
//!
//! Per sentence: both matrices propose a shifted copy of the ASR window
//! (same length, placed at the best windowed mean). If the two proposals
//! overlap, the sentence's timestamps become their union; otherwise the ASR
//! window is kept. The align score is the mean of `A + A_d` over the
//! resulting window. Across the whole batch, the top `ceil(alpha * K)`
//! scores are labelled alignable and only those feed the contrastive loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentenceMask;
use crate::model::ModelParams;
use crate::tensor::Tensor2D;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("window length {window} does not fit a row of length {len}")]
    BadWindow { window: usize, len: usize },
    #[error("{0}")]
    Contract(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("EMA shapes differ between teacher and student")]
    ShapeMismatch,
}

pub type Result<T, E = DenoiseError> = std::result::Result<T, E>;

/// Shifts a `window_len` run to the start with the highest windowed mean
/// of `row`. Ties go to the lowest start.
pub fn infer_timestamps(row: &[f64], window_len: usize) -> Result<SentenceMask> {
    let t = row.len();
    if window_len == 0 || window_len > t {
        return Err(DenoiseError::BadWindow {
            window: window_len,
            len: t,
        });
    }
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for start in 0..=t - window_len {
        let s: f64 = row[start..start + window_len].iter().sum();
        if s > best_sum {
            best_sum = s;
            best = start;
        }
    }
    Ok(SentenceMask::run(t, best, window_len))
}

/// `|a & b| / |a | b|`.
pub fn iou(a: &SentenceMask, b: &SentenceMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DenoiseError::Contract(format!(
            "masks of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Err(DenoiseError::Contract("IoU of two empty masks".into()));
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Union of the two shifted windows when they agree at all, the original
/// ASR mask otherwise.
pub fn update_timestamps(
    asr: &SentenceMask,
    shifted: &SentenceMask,
    shifted_dual: &SentenceMask,
    iou: f64,
) -> SentenceMask {
    if iou > 0.0 {
        shifted.union(shifted_dual)
    } else {
        asr.clone()
    }
}

/// Mean of `(A + A_d)[k, :]` over the frames selected by `mask`.
pub fn align_score(align: &Tensor2D, align_dual: &Tensor2D, mask: &SentenceMask, k: usize) -> Result<f64> {
    if align.shape() != align_dual.shape() || k >= align.rows() || mask.len() != align.cols() {
        return Err(DenoiseError::Contract("align_score shape mismatch".into()));
    }
    let n = mask.count_ones();
    if n == 0 {
        return Err(DenoiseError::Contract("align_score over an empty mask".into()));
    }
    let sum: f64 = (0..align.cols())
        .filter(|&t| mask.get(t))
        .map(|t| align.get(k, t) + align_dual.get(k, t))
        .sum();
    Ok(sum / n as f64)
}

/// Number of positives for `alpha` over `n` sentences: `ceil(alpha * n)`,
/// tolerant of representation error in `alpha`.
pub fn n_positive(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Labels the top `ceil(alpha * K)` scores alignable (ties to the lower
/// index). Returns the labels and the sorted indices of the positives,
/// which form the contrastive-loss active set.
pub fn filter_alignability(scores: &[f64], alpha: f64) -> Result<(Vec<bool>, Vec<usize>)> {
    if scores.is_empty() {
        return Err(DenoiseError::EmptyBatch);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DenoiseError::Contract(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_pos = n_positive(alpha, scores.len());
    let mut labels = vec![false; scores.len()];
    for &i in &order[..n_pos] {
        labels[i] = true;
    }
    let active = (0..scores.len()).filter(|&i| labels[i]).collect();
    Ok((labels, active))
}

/// Teacher outputs and ASR masks for one window of a batch.
#[derive(Debug, Clone)]
pub struct TeacherWindow<'a> {
    pub align: &'a Tensor2D,
    pub align_dual: &'a Tensor2D,
    pub masks: &'a [SentenceMask],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePseudoLabel {
    pub shifted: SentenceMask,
    pub shifted_dual: SentenceMask,
    pub updated: SentenceMask,
    pub iou: f64,
    pub align_score: f64,
    pub y_pseudo: bool,
    pub active: bool,
}

/// Pseudo-labels for every sentence of every window in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub windows: Vec<Vec<SentencePseudoLabel>>,
}

impl PseudoLabels {
    pub fn iter(&self) -> impl Iterator<Item = &SentencePseudoLabel> {
        self.windows.iter().flatten()
    }

    pub fn n_sentences(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }

    /// Fraction of sentences whose two shifted windows overlap.
    pub fn overlap_rate(&self) -> f64 {
        let n = self.n_sentences();
        if n == 0 {
            return 0.0;
        }
        self.iter().filter(|p| p.iou > 0.0).count() as f64 / n as f64
    }
}

/// Steps (a)-(c) over a batch: shift, agree, update, score, filter. The
/// top-alpha filter pools all sentences of the batch.
pub fn denoise_batch(windows: &[TeacherWindow<'_>], alpha: f64) -> Result<PseudoLabels> {
    let mut out: Vec<Vec<SentencePseudoLabel>> = Vec::with_capacity(windows.len());
    let mut scores = Vec::new();
    for w in windows {
        let (k, t) = w.align.shape();
        if w.align_dual.shape() != (k, t) || w.masks.len() != k {
            return Err(DenoiseError::Contract("teacher window shapes disagree".into()));
        }
        let mut labels = Vec::with_capacity(k);
        for (i, m) in w.masks.iter().enumerate() {
            let len = m.count_ones().clamp(1, t);
            let shifted = infer_timestamps(w.align.row(i), len)?;
            let shifted_dual = infer_timestamps(w.align_dual.row(i), len)?;
            let agreement = iou(&shifted, &shifted_dual)?;
            let updated = update_timestamps(m, &shifted, &shifted_dual, agreement);
            let score = align_score(w.align, w.align_dual, &updated, i)?;
            scores.push(score);
            labels.push(SentencePseudoLabel {
                shifted,
                shifted_dual,
                updated,
                iou: agreement,
                align_score: score,
                y_pseudo: false,
                active: false,
            });
        }
        out.push(labels);
    }
    let (y, _) = filter_alignability(&scores, alpha)?;
    for (p, y) in out.iter_mut().flatten().zip(y) {
        p.y_pseudo = y;
        p.active = y;
    }
    Ok(PseudoLabels { windows: out })
}

/// Slowly updated copy of the student used to produce pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub teacher: ModelParams,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(student: &ModelParams, momentum: f64) -> Self {
        Self {
            teacher: student.clone(),
            momentum,
        }
    }

    /// `teacher <- momentum * teacher + (1 - momentum) * student`.
    pub fn update(&mut self, student: &ModelParams) -> Result<()> {
        if !self.teacher.same_shapes(student) {
            return Err(DenoiseError::ShapeMismatch);
        }
        let m = self.momentum;
        for id in student.ids() {
            let s = student.tensor(id);
            let t = self.teacher.tensor_mut(id);
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv += (1.0 - m) * (sv - *tv);
            }
        }
        Ok(())
    }
}
