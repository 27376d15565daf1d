use serde::{Deserialize, Serialize};

use super::{alignability_scores_fallback, pointing_hits, roc_auc, EvalError, Result};
use crate::corpus::{HiddenGt, NarratedVideo};
use crate::model::{predict_window, ModelParams};
use crate::tensor::{nested_rows, Tensor2D};

/// Non-overlapping `(start, len)` tiles covering `0..total`; the last one
/// may be shorter.
pub fn tile_windows(total: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 {
        return Err(EvalError::Tiling("window length 0".into()));
    }
    Ok((0..total)
        .step_by(window)
        .map(|s| (s, window.min(total - s)))
        .collect())
}

/// Concatenates per-window matrices along time. Windows must start at 0,
/// follow each other without gap or overlap and end at `total`.
pub fn stitch_windows(windows: &[(usize, Tensor2D)], total: usize) -> Result<Tensor2D> {
    let Some((_, first)) = windows.first() else {
        return Err(EvalError::Tiling("no windows".into()));
    };
    let k = first.rows();
    let mut out = Tensor2D::zeros(k, total);
    let mut cursor = 0;
    for (start, m) in windows {
        if *start != cursor {
            return Err(EvalError::Tiling(format!(
                "window at {start} but the previous one ends at {cursor}"
            )));
        }
        if m.rows() != k {
            return Err(EvalError::Tiling("windows disagree on sentence count".into()));
        }
        if cursor + m.cols() > total {
            return Err(EvalError::Tiling(format!("window at {start} runs past {total}")));
        }
        for r in 0..k {
            out.row_mut(r)[cursor..cursor + m.cols()].copy_from_slice(m.row(r));
        }
        cursor += m.cols();
    }
    if cursor != total {
        return Err(EvalError::Tiling(format!("windows cover {cursor} of {total} steps")));
    }
    Ok(out)
}

/// Full-video alignment from tiled inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAlignment {
    pub id: String,
    /// Joint-model matrix, `K x T`.
    #[serde(with = "nested_rows")]
    pub align: Tensor2D,
    /// Dual-encoder matrix, `K x T`.
    #[serde(with = "nested_rows")]
    pub align_dual: Tensor2D,
    /// Alignability head probability per sentence (max over tiles).
    pub alignable_prob: Vec<f64>,
}

/// Runs every tile with all of the video's sentences and stitches the
/// matrices back to the full timeline.
pub fn predict_video(params: &ModelParams, video: &NarratedVideo, window: usize) -> Result<VideoAlignment> {
    let t = video.duration();
    let k = video.sentences.len();
    let window = window.min(params.config.max_t);
    if k == 0 {
        return Ok(VideoAlignment {
            id: video.id.clone(),
            align: Tensor2D::zeros(0, t),
            align_dual: Tensor2D::zeros(0, t),
            alignable_prob: Vec::new(),
        });
    }
    let tokens: Vec<Vec<u32>> = video.sentences.iter().map(|s| s.tokens.clone()).collect();
    let mut joint = Vec::new();
    let mut dual = Vec::new();
    let mut prob = vec![0.0f64; k];
    for (start, len) in tile_windows(t, window)? {
        let feats = Tensor2D::from_fn(len, video.features.cols(), |i, j| video.features.get(start + i, j));
        let pred = predict_window(params, &feats, &tokens)?;
        for (p, q) in prob.iter_mut().zip(pred.alignable_prob()) {
            *p = p.max(q);
        }
        joint.push((start, pred.align));
        dual.push((start, pred.align_dual));
    }
    Ok(VideoAlignment {
        id: video.id.clone(),
        align: stitch_windows(&joint, t)?,
        align_dual: stitch_windows(&dual, t)?,
        alignable_prob: prob,
    })
}

/// One annotated sentence of an alignment ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSentence {
    pub text: String,
    pub start: f64,
    pub end: f64,
    pub alignable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_end: Option<f64>,
}

/// Alignment ground truth for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtAnnotation {
    pub id: String,
    pub sentences: Vec<GtSentence>,
}

impl GtAnnotation {
    /// Ground truth of a corpus video; sentences without hidden labels are
    /// treated as unalignable.
    pub fn from_video(video: &NarratedVideo) -> Self {
        let sentences = video
            .sentences
            .iter()
            .map(|s| {
                let gt = s.gt.clone().unwrap_or_else(HiddenGt::unalignable);
                GtSentence {
                    text: s.text.clone(),
                    start: s.start,
                    end: s.end,
                    alignable: gt.alignable,
                    gt_start: gt.start,
                    gt_end: gt.end,
                }
            })
            .collect();
        Self {
            id: video.id.clone(),
            sentences,
        }
    }

    pub fn hidden(&self) -> Vec<HiddenGt> {
        self.sentences
            .iter()
            .map(|s| HiddenGt {
                alignable: s.alignable,
                start: s.gt_start,
                end: s.gt_end,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.alignable {
                match (s.gt_start, s.gt_end) {
                    (Some(a), Some(b)) if a < b && a >= 0.0 => {}
                    _ => {
                        return Err(EvalError::Parse(format!(
                            "{}.sentences[{i}]: alignable sentence needs gt_start < gt_end",
                            self.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// One ground-truth action occurrence, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSegment {
    pub action: usize,
    pub start: f64,
    pub end: f64,
}

/// Segmentation ground truth for one video: ordered action occurrences on
/// an `n_frames` grid; uncovered frames are background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationGt {
    pub id: String,
    pub n_frames: usize,
    pub segments: Vec<GtSegment>,
}

impl SegmentationGt {
    /// Per-frame action, `None` for background.
    pub fn frame_labels(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_frames];
        for seg in &self.segments {
            let a = (seg.start.max(0.0).floor() as usize).min(self.n_frames);
            let b = (seg.end.ceil() as usize).min(self.n_frames);
            for slot in &mut out[a..b.max(a)] {
                *slot = Some(seg.action);
            }
        }
        out
    }
}

/// Either kind of ground-truth file: a JSON array of per-video records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GtFile {
    Alignment(Vec<GtAnnotation>),
    Segmentation(Vec<SegmentationGt>),
}

/// Pooled alignment metrics over a set of videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Pointing-game recall of the joint model, pooled over all alignable
    /// sentences.
    pub r_at_1: f64,
    /// Same for the dual encoder.
    pub r_at_1_dual: f64,
    /// ROC-AUC of the alignability head; `None` if only one class occurs.
    pub roc_auc: Option<f64>,
    /// ROC-AUC of the max-over-time score of the joint matrix.
    pub roc_auc_fallback: Option<f64>,
    pub n_sentences: usize,
    pub n_alignable: usize,
}

impl AlignmentReport {
    pub fn from_predictions(preds: &[VideoAlignment], gt: &[GtAnnotation]) -> Result<Self> {
        let mut hits = 0;
        let mut hits_dual = 0;
        let mut n_alignable = 0;
        let mut head = Vec::new();
        let mut fallback = Vec::new();
        let mut labels = Vec::new();
        for g in gt {
            let p = preds
                .iter()
                .find(|p| p.id == g.id)
                .ok_or_else(|| EvalError::Contract(format!("no prediction for video {}", g.id)))?;
            let hidden = g.hidden();
            if p.alignable_prob.len() != hidden.len() {
                return Err(EvalError::Contract(format!(
                    "video {}: {} predictions for {} sentences",
                    g.id,
                    p.alignable_prob.len(),
                    hidden.len()
                )));
            }
            let (h, n) = pointing_hits(&p.align, &hidden)?;
            let (hd, _) = pointing_hits(&p.align_dual, &hidden)?;
            hits += h;
            hits_dual += hd;
            n_alignable += n;
            head.extend_from_slice(&p.alignable_prob);
            fallback.extend(alignability_scores_fallback(&p.align));
            labels.extend(hidden.iter().map(|h| h.alignable));
        }
        if n_alignable == 0 {
            return Err(EvalError::Undefined("no alignable sentences"));
        }
        Ok(Self {
            r_at_1: hits as f64 / n_alignable as f64,
            r_at_1_dual: hits_dual as f64 / n_alignable as f64,
            roc_auc: roc_auc(&head, &labels).ok(),
            roc_auc_fallback: roc_auc(&fallback, &labels).ok(),
            n_sentences: labels.len(),
            n_alignable,
        })
    }
}

/// Tiled inference plus pooled metrics against the videos' hidden labels.
pub fn evaluate_alignment(params: &ModelParams, videos: &[NarratedVideo], window: usize) -> Result<AlignmentReport> {
    let preds = videos
        .iter()
        .map(|v| predict_video(params, v, window))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<GtAnnotation> = videos.iter().map(GtAnnotation::from_video).collect();
    AlignmentReport::from_predictions(&preds, &gt)
}
