//! Training objectives on tape nodes.

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceMask;
use crate::tensor::{Result, Tape, Tensor2D, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub temperature: f64,
    pub softdtw_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            softdtw_gamma: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.softdtw_gamma > 0.0) {
            return Err(TensorError::Contract(
                "temperature and soft-DTW gamma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Temporal-correspondence loss over the `active` sentences of a `K x T`
/// alignment matrix:
///
/// `-sum_k ln( sum_{P_k} e^{A/tau} / sum_{all t} e^{A/tau} )`
///
/// where `P_k` is the set of frames where `masks[k]` is set. Every active
/// mask needs at least one set and one unset frame. An empty active set
/// gives a constant zero.
pub fn l_tc(tape: &Tape, align: Var, masks: &[SentenceMask], active: &[usize], tau: f64) -> Result<Var> {
    let (k, t) = tape.shape(align);
    if masks.len() != k {
        return Err(TensorError::Contract(format!("{} masks for {k} sentences", masks.len())));
    }
    if !(tau > 0.0) {
        return Err(TensorError::Contract(format!("temperature must be > 0, got {tau}")));
    }
    if active.is_empty() {
        return Ok(tape.constant(Tensor2D::zeros(1, 1)));
    }
    let mut pos = Vec::with_capacity(active.len() * t);
    for &i in active {
        let m = masks
            .get(i)
            .ok_or_else(|| TensorError::Contract(format!("active index {i} out of range")))?;
        if m.len() != t {
            return Err(TensorError::Contract(format!("mask {i} has length {}, expected {t}", m.len())));
        }
        if !m.any() || m.all() {
            return Err(TensorError::Contract(format!(
                "mask {i} needs both positive and negative frames"
            )));
        }
        pos.extend_from_slice(m.bits());
    }
    let rows = tape.gather_rows(align, active)?;
    let logits = tape.scale(rows, 1.0 / tau)?;
    let all = vec![true; pos.len()];
    let lse_all = tape.masked_row_logsumexp(logits, &all)?;
    let lse_pos = tape.masked_row_logsumexp(logits, &pos)?;
    let diff = tape.sub(lse_all, lse_pos)?;
    tape.sum_all(diff)
}

/// Sum of softmax cross-entropies over `labeled` rows of `K x 2` logits,
/// multiplied by `scale`.
pub fn l_alignability_scaled(
    tape: &Tape,
    logits: Var,
    y_pseudo: &[bool],
    labeled: &[usize],
    scale: f64,
) -> Result<Var> {
    let (k, c) = tape.shape(logits);
    if c != 2 || y_pseudo.len() != k {
        return Err(TensorError::Contract(format!(
            "alignability logits {k}x{c} with {} labels",
            y_pseudo.len()
        )));
    }
    let mut idx = Vec::with_capacity(labeled.len());
    for &i in labeled {
        if i >= k {
            return Err(TensorError::Contract(format!("labeled index {i} out of range")));
        }
        idx.push((i, usize::from(y_pseudo[i])));
    }
    if idx.is_empty() {
        return Ok(tape.constant(Tensor2D::zeros(1, 1)));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.gather(logp, &idx)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -scale)
}

/// Mean softmax cross-entropy over the `labeled` sentences.
pub fn l_alignability(tape: &Tape, logits: Var, y_pseudo: &[bool], labeled: &[usize]) -> Result<Var> {
    if labeled.is_empty() {
        return Err(TensorError::Contract("alignability loss needs a labeled sentence".into()));
    }
    l_alignability_scaled(tape, logits, y_pseudo, labeled, 1.0 / labeled.len() as f64)
}

/// Unweighted sum of the two objectives.
pub fn l_total(tape: &Tape, tc: Var, align: Var) -> Result<Var> {
    tape.add(tc, align)
}

/// Soft-DTW over the cost `1 - A` of a `K x T` alignment matrix whose rows
/// follow the given action order.
pub fn soft_dtw_loss(tape: &Tape, align: Var, gamma: f64) -> Result<Var> {
    let (k, t) = tape.shape(align);
    if k == 0 {
        return Err(TensorError::Contract("soft-DTW needs at least one action".into()));
    }
    if t < k {
        return Err(TensorError::Contract(format!(
            "soft-DTW infeasible: {t} frames for {k} actions"
        )));
    }
    let cost = tape.affine(align, -1.0, 1.0)?;
    tape.soft_dtw(cost, gamma)
}
