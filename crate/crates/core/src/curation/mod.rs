//! Subtitle curation: language filtering, repair of lines repeated across
//! cue boundaries and restitching of cue fragments into timed sentences.

pub mod lang;
pub mod punct;
pub mod vtt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SentenceRecord, MAX_TOKENS};

pub use lang::{LanguageClassifier, TrigramClassifier};
pub use punct::{NoPunctuator, Punctuator, RulePunctuator, StreamWord};
pub use vtt::{format_timestamp, parse_timestamp, parse_vtt, serialize_vtt, Cue, SubtitleDoc};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid subtitle document: {0}")]
    Validation(String),
    #[error("language classifier: {0}")]
    Classifier(String),
    #[error("document has no cues")]
    Empty,
}

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.9;
const THRESHOLD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub video_id: String,
    pub kept: bool,
    pub avg_english_prob: f64,
    pub cues_deduped: usize,
    pub sentences_out: usize,
}

/// Mean English probability of up to `n_samples` cues drawn without
/// replacement.
pub fn average_english_prob<C, R>(doc: &SubtitleDoc, classifier: &C, n_samples: usize, rng: &mut R) -> Result<f64, CurationError>
where
    C: LanguageClassifier + ?Sized,
    R: Rng + ?Sized,
{
    if doc.cues.is_empty() {
        return Err(CurationError::Empty);
    }
    let n = n_samples.min(doc.cues.len()).max(1);
    let mut total = 0.0;
    for i in index::sample(rng, doc.cues.len(), n) {
        let text = doc.cues[i].lines().collect::<Vec<_>>().join(" ");
        total += classifier.english_prob(&text)?;
    }
    Ok(total / n as f64)
}

/// Whether an average English probability passes `threshold`. Averages
/// within 1e-12 below the threshold count as passing so that summation
/// rounding cannot flip an exact boundary value.
pub fn passes_threshold(avg: f64, threshold: f64) -> bool {
    avg >= threshold - THRESHOLD_TOL
}

/// Returns `(kept, average)`.
pub fn language_filter<C, R>(
    doc: &SubtitleDoc,
    classifier: &C,
    n_samples: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<(bool, f64), CurationError>
where
    C: LanguageClassifier + ?Sized,
    R: Rng + ?Sized,
{
    let avg = average_english_prob(doc, classifier, n_samples, rng)?;
    Ok((passes_threshold(avg, threshold), avg))
}

fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Removes leading lines of a cue that repeat the last line of the nearest
/// preceding cue with text. Blank lines in front of a removed repeat go
/// with it. Returns the repaired document and the number of cues changed.
pub fn dedup_linebreaks(doc: &SubtitleDoc) -> (SubtitleDoc, usize) {
    let mut out = doc.clone();
    let mut changed = 0;
    let mut last: Option<String> = None;
    for cue in &mut out.cues {
        let lines: Vec<&str> = cue.text.lines().collect();
        let mut skip = 0;
        if let Some(prev) = &last {
            loop {
                let Some(pos) = lines[skip..].iter().position(|l| !l.trim().is_empty()) else {
                    break;
                };
                if normalize(lines[skip + pos]) != *prev {
                    break;
                }
                skip += pos + 1;
            }
        }
        if skip > 0 {
            let removed_words: usize = lines[..skip].iter().map(|l| l.split_whitespace().count()).sum();
            let text = lines[skip..].join("\n");
            if let Some(times) = &mut cue.word_times {
                times.drain(..removed_words);
            }
            cue.text = text;
            changed += 1;
        }
        if let Some(l) = cue.text.lines().rev().find(|l| !l.trim().is_empty()) {
            last = Some(normalize(l));
        }
    }
    (out, changed)
}

/// Start and end time of every word of a cue. Without word timings the
/// cue span is divided in proportion to character counts.
fn word_spans(cue: &Cue) -> Vec<(String, f64, f64)> {
    let words: Vec<&str> = cue.text.split_whitespace().collect();
    let clamp = |t: f64| t.clamp(cue.start, cue.end);
    match &cue.word_times {
        Some(times) if times.len() == words.len() => words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let s = clamp(times[i]);
                let e = times.get(i + 1).map_or(cue.end, |&t| clamp(t)).max(s);
                (w.to_string(), s, e)
            })
            .collect(),
        _ => {
            let total: usize = words.iter().map(|w| w.chars().count()).sum();
            let dur = cue.end - cue.start;
            let at = |acc: usize| clamp(cue.start + dur * acc as f64 / total as f64);
            let mut acc = 0;
            words
                .iter()
                .map(|w| {
                    let s = at(acc);
                    acc += w.chars().count();
                    (w.to_string(), s, at(acc))
                })
                .collect()
        }
    }
}

/// Flattens the cues into one timed word stream.
pub fn word_stream(doc: &SubtitleDoc) -> Vec<StreamWord> {
    let mut out = Vec::new();
    for cue in &doc.cues {
        let spans = word_spans(cue);
        let n = spans.len();
        out.extend(spans.into_iter().enumerate().map(|(i, (text, start, end))| StreamWord {
            text,
            start,
            end,
            cue_final: i + 1 == n,
        }));
    }
    out
}

/// Hashes lowercased words, stripped of surrounding punctuation, into
/// `0..vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    pub vocab_size: u32,
}

impl HashTokenizer {
    pub fn token(&self, word: &str) -> u32 {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in w.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % u64::from(self.vocab_size.max(1))) as u32
    }

    /// Tokens of the first `MAX_TOKENS` words.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().take(MAX_TOKENS).map(|w| self.token(w)).collect()
    }
}

/// Joins the cue fragments into one stream, lets `punctuator` place the
/// sentence ends and times each sentence from its first and last word.
pub fn restitch_sentences<P>(doc: &SubtitleDoc, punctuator: &P, tokenizer: &HashTokenizer) -> Vec<SentenceRecord>
where
    P: Punctuator + ?Sized,
{
    let words = word_stream(doc);
    if words.is_empty() {
        return Vec::new();
    }
    let ends = punctuator.sentence_ends(&words);
    let mut out = Vec::new();
    let mut begin = 0;
    for i in 0..words.len() {
        if i + 1 == words.len() || ends.get(i).copied().unwrap_or(false) {
            let span = &words[begin..=i];
            let text = span.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
            let start = span.iter().map(|w| w.start).fold(f64::INFINITY, f64::min);
            let end = span.iter().map(|w| w.end).fold(f64::NEG_INFINITY, f64::max);
            out.push(SentenceRecord {
                tokens: tokenizer.encode(&text),
                text,
                start,
                end,
                gt: None,
            });
            begin = i + 1;
        }
    }
    out.sort_by(|a, b| a.start.total_cmp(&b.start));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurationConfig {
    pub n_samples: usize,
    pub threshold: f64,
    pub tokenizer: HashTokenizer,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            threshold: DEFAULT_THRESHOLD,
            tokenizer: HashTokenizer {
                vocab_size: crate::model::ModelConfig::default().vocab_size as u32,
            },
        }
    }
}

/// Language filter, then linebreak repair, then restitching. A discarded
/// document yields no sentences.
pub fn curate<C, P, R>(
    doc: &SubtitleDoc,
    classifier: &C,
    punctuator: &P,
    cfg: &CurationConfig,
    rng: &mut R,
) -> Result<(Vec<SentenceRecord>, CurationReport), CurationError>
where
    C: LanguageClassifier + ?Sized,
    P: Punctuator + ?Sized,
    R: Rng + ?Sized,
{
    doc.validate()?;
    let (kept, avg) = language_filter(doc, classifier, cfg.n_samples, cfg.threshold, rng)?;
    let mut report = CurationReport {
        video_id: doc.video_id.clone(),
        kept,
        avg_english_prob: avg,
        cues_deduped: 0,
        sentences_out: 0,
    };
    if !kept {
        return Ok((Vec::new(), report));
    }
    let (clean, changed) = dedup_linebreaks(doc);
    let sentences = restitch_sentences(&clean, punctuator, &cfg.tokenizer);
    report.cues_deduped = changed;
    report.sentences_out = sentences.len();
    Ok((sentences, report))
}
