//! Narrated-video data model, the JSON Lines corpus format, a synthetic
//! noisy-narration generator and training-window sampling.

mod generate;
mod mask;
mod window;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor2D;

pub use generate::{generate_corpus, CorpusDims, NoiseModelParams, Vocabulary};
pub use mask::SentenceMask;
pub use window::{window_sample, window_starts, WindowSample};

/// Longest token list a sentence may carry.
pub const MAX_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid video {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error("video {0} has no sentences to sample")]
    EmptySample(String),
    #[error("window of {window}s does not fit a {duration}s video")]
    WindowTooLong { window: usize, duration: usize },
}

/// Hidden ground truth attached by the generator (or an annotator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenGt {
    pub alignable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

impl HiddenGt {
    pub fn unalignable() -> Self {
        Self {
            alignable: false,
            start: None,
            end: None,
        }
    }

    pub fn aligned(start: f64, end: f64) -> Self {
        Self {
            alignable: true,
            start: Some(start),
            end: Some(end),
        }
    }

    /// Ground-truth interval for alignable sentences.
    pub fn interval(&self) -> Option<(f64, f64)> {
        match (self.alignable, self.start, self.end) {
            (true, Some(s), Some(e)) => Some((s, e)),
            _ => None,
        }
    }
}

/// One narration sentence with its ASR timing in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub tokens: Vec<u32>,
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<HiddenGt>,
}

impl SentenceRecord {
    /// ASR mask on a `duration`-second grid.
    pub fn asr_mask(&self, duration: usize) -> SentenceMask {
        SentenceMask::from_interval(self.start, self.end, duration)
    }
}

/// A video as a per-second feature sequence plus its narration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarratedVideo {
    pub id: String,
    #[serde(with = "crate::tensor::nested_rows")]
    pub features: Tensor2D,
    pub sentences: Vec<SentenceRecord>,
}

impl NarratedVideo {
    /// Duration in seconds; one feature row per second.
    pub fn duration(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        let duration = self.duration() as f64;
        if !self.features.is_finite() {
            return Err(bad("non-finite feature value".into()));
        }
        let mut prev_start = f64::NEG_INFINITY;
        for (k, s) in self.sentences.iter().enumerate() {
            if !(0.0 <= s.start && s.start < s.end && s.end <= duration) {
                return Err(bad(format!(
                    "sentence {k}: interval [{}, {}) outside [0, {duration}]",
                    s.start, s.end
                )));
            }
            if s.tokens.is_empty() || s.tokens.len() > MAX_TOKENS {
                return Err(bad(format!("sentence {k}: {} tokens", s.tokens.len())));
            }
            if s.start < prev_start {
                return Err(bad(format!("sentence {k} is out of start order")));
            }
            prev_start = s.start;
            if let Some((gs, ge)) = s.gt.as_ref().and_then(HiddenGt::interval) {
                if !(0.0 <= gs && gs < ge && ge <= duration) {
                    return Err(bad(format!("sentence {k}: ground truth outside the video")));
                }
            }
        }
        Ok(())
    }
}

pub fn save_jsonl(path: &Path, videos: &[NarratedVideo]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_jsonl(&mut w, videos).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_jsonl<W: Write>(w: &mut W, videos: &[NarratedVideo]) -> std::io::Result<()> {
    for v in videos {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<NarratedVideo>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_jsonl(BufReader::new(file))
}

/// Parses one video per non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<NarratedVideo>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let video: NarratedVideo = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        video.validate().map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(video);
    }
    Ok(out)
}
