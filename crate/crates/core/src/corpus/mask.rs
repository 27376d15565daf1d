use serde::{Deserialize, Serialize};

/// Binary timeline mask on the one-second grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentenceMask {
    bits: Vec<bool>,
}

impl SentenceMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    /// Ones on `floor(start)..ceil(end)`, clipped to `0..len`.
    pub fn from_interval(start: f64, end: f64, len: usize) -> Self {
        let lo = start.floor().max(0.0) as usize;
        let hi = (end.ceil().max(0.0) as usize).min(len);
        let mut bits = vec![false; len];
        for b in bits.iter_mut().take(hi).skip(lo) {
            *b = true;
        }
        Self { bits }
    }

    /// `len` consecutive ones starting at `start`.
    pub fn run(total: usize, start: usize, len: usize) -> Self {
        let mut bits = vec![false; total];
        for b in bits.iter_mut().skip(start).take(len) {
            *b = true;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, t: usize) -> bool {
        self.bits[t]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn first_one(&self) -> Option<usize> {
        self.bits.iter().position(|&b| b)
    }

    pub fn last_one(&self) -> Option<usize> {
        self.bits.iter().rposition(|&b| b)
    }

    /// True when the ones form a single run (an empty mask counts).
    pub fn is_contiguous(&self) -> bool {
        match (self.first_one(), self.last_one()) {
            (Some(a), Some(b)) => self.bits[a..=b].iter().all(|&x| x),
            _ => true,
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// Sub-range `start..start + len` as a new mask.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            bits: self.bits[start..start + len].to_vec(),
        }
    }
}
