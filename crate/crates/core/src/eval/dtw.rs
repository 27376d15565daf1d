use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::tensor::Tensor2D;

/// Frame labels from an ordered decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Action index of every frame, non-decreasing.
    pub labels: Vec<usize>,
    /// Half-open `[start, end)` frame interval of each action.
    pub intervals: Vec<(usize, usize)>,
    /// Summed `1 - A` along the path.
    pub cost: f64,
}

impl Segmentation {
    pub fn from_labels(labels: Vec<usize>, k: usize, cost: f64) -> Self {
        let intervals = (0..k)
            .map(|a| {
                let first = labels.iter().position(|&l| l == a);
                let last = labels.iter().rposition(|&l| l == a);
                match (first, last) {
                    (Some(f), Some(l)) => (f, l + 1),
                    _ => (0, 0),
                }
            })
            .collect();
        Self { labels, intervals, cost }
    }
}

/// Cost of a frame labelling under `1 - A`.
pub fn path_cost(align: &Tensor2D, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(t, &k)| 1.0 - align.get(k, t)).sum()
}

/// Minimum-cost monotone assignment of `T` frames to `K` ordered actions,
/// each action taking at least one frame. Among equal-cost paths the one
/// with earlier boundaries wins.
pub fn dtw_decode(align: &Tensor2D) -> Result<Segmentation> {
    let (k, t) = align.shape();
    if k == 0 || t < k {
        return Err(EvalError::Infeasible { k, t });
    }
    // d[a][j]: best cost of frames 0..=j ending in action a
    let mut d = vec![vec![f64::INFINITY; t]; k];
    d[0][0] = 1.0 - align.get(0, 0);
    for j in 1..t {
        for a in 0..k.min(j + 1) {
            let stay = d[a][j - 1];
            let advance = if a > 0 { d[a - 1][j - 1] } else { f64::INFINITY };
            d[a][j] = stay.min(advance) + 1.0 - align.get(a, j);
        }
    }
    let mut labels = vec![0; t];
    let mut a = k - 1;
    for j in (0..t).rev() {
        labels[j] = a;
        if j == 0 {
            break;
        }
        // stepping back, staying keeps the current action's start early
        let stay = d[a][j - 1];
        let must_advance = j == a;
        if a > 0 && (must_advance || d[a - 1][j - 1] < stay) {
            a -= 1;
        }
    }
    let cost = path_cost(align, &labels);
    Ok(Segmentation::from_labels(labels, k, cost))
}

/// Leading and trailing background removal: returns `[start, end)` of the
/// span between the first and last labelled frame.
pub fn trim_background(labels: &[Option<usize>]) -> Option<(usize, usize)> {
    let start = labels.iter().position(Option::is_some)?;
    let end = labels.iter().rposition(Option::is_some)? + 1;
    Some((start, end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub f_acc: f64,
    pub iou: f64,
    pub iod: f64,
    /// Per ground-truth action present: (action, IoU, IoD).
    pub per_action: Vec<(usize, f64, f64)>,
}

/// Frame accuracy, and IoU / IoD averaged over the actions present in the
/// ground truth. An action with no predicted frames has IoD 0.
pub fn seg_metrics(pred: &[usize], gt: &[usize]) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(EvalError::Contract(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(EvalError::Undefined("empty timeline"));
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let mut actions: Vec<usize> = gt.to_vec();
    actions.sort_unstable();
    actions.dedup();
    let mut per_action = Vec::with_capacity(actions.len());
    for &a in &actions {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut n_pred = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            let (ip, ig) = (p == a, g == a);
            inter += usize::from(ip && ig);
            union += usize::from(ip || ig);
            n_pred += usize::from(ip);
        }
        let iou = inter as f64 / union as f64;
        let iod = if n_pred == 0 { 0.0 } else { inter as f64 / n_pred as f64 };
        per_action.push((a, iou, iod));
    }
    let n = per_action.len() as f64;
    Ok(SegMetrics {
        f_acc: correct as f64 / gt.len() as f64,
        iou: per_action.iter().map(|x| x.1).sum::<f64>() / n,
        iod: per_action.iter().map(|x| x.2).sum::<f64>() / n,
        per_action,
    })
}
