//! A WebVTT subset: `WEBVTT` header, blank-line separated cue blocks with
//! an optional identifier, `[HH:]MM:SS.mmm --> [HH:]MM:SS.mmm` timing lines
//! (trailing cue settings ignored), verbatim multi-line payloads and inline
//! `<HH:MM:SS.mmm>` word-timing tags. Other inline tags such as `<c>` are
//! dropped. `NOTE` blocks are skipped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::CurationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub start: f64,
    pub end: f64,
    /// Payload with inline tags removed; linebreaks kept.
    pub text: String,
    /// Start time of every whitespace-separated word of `text`, present
    /// when the payload carried timing tags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_times: Option<Vec<f64>>,
}

impl Cue {
    pub fn new(start: f64, end: f64, text: &str) -> Self {
        Self {
            id: None,
            start,
            end,
            text: text.to_string(),
            word_times: None,
        }
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.text.lines()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleDoc {
    pub video_id: String,
    pub cues: Vec<Cue>,
}

impl SubtitleDoc {
    /// Cues must be ordered by start and each must have `start < end`.
    pub fn validate(&self) -> Result<(), CurationError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, c) in self.cues.iter().enumerate() {
            if !(c.start < c.end) {
                return Err(CurationError::Validation(format!(
                    "cue {i}: start {} is not before end {}",
                    c.start, c.end
                )));
            }
            if c.start < prev {
                return Err(CurationError::Validation(format!("cue {i} starts before cue {}", i - 1)));
            }
            prev = c.start;
            if let Some(w) = &c.word_times {
                if w.len() != c.text.split_whitespace().count() {
                    return Err(CurationError::Validation(format!("cue {i}: word timing count mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// Parses `[HH:]MM:SS.mmm` into seconds.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let (hms, ms) = s.split_once('.')?;
    if ms.len() != 3 || !ms.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let parts: Vec<&str> = hms.split(':').collect();
    let field = |p: &str, max: Option<u64>| -> Option<u64> {
        if p.len() < 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let v: u64 = p.parse().ok()?;
        match max {
            Some(m) if v > m || p.len() != 2 => None,
            _ => Some(v),
        }
    };
    let (h, m, sec) = match parts.as_slice() {
        [h, m, s] => (field(h, None)?, field(m, Some(59))?, field(s, Some(59))?),
        [m, s] => (0, field(m, Some(59))?, field(s, Some(59))?),
        _ => return None,
    };
    let millis = ((h * 60 + m) * 60 + sec) * 1000 + ms.parse::<u64>().ok()?;
    Some(millis as f64 / 1000.0)
}

pub fn format_timestamp(t: f64) -> String {
    let millis = (t * 1000.0).round().max(0.0) as u64;
    let (s, ms) = (millis / 1000, millis % 1000);
    format!("{:02}:{:02}:{:02}.{ms:03}", s / 3600, (s / 60) % 60, s % 60)
}

struct Line<'a> {
    offset: usize,
    text: &'a str,
}

fn split_lines(input: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in input.split_inclusive('\n') {
        let text = raw.strip_suffix('\n').unwrap_or(raw);
        let text = text.strip_suffix('\r').unwrap_or(text);
        out.push(Line { offset, text });
        offset += raw.len();
    }
    out
}

/// Strips inline tags from a payload, returning the plain text and, when
/// timing tags occur, each word's start time.
fn parse_payload(payload: &str, cue_start: f64, offset: usize) -> Result<(String, Option<Vec<f64>>), CurationError> {
    let mut text = String::with_capacity(payload.len());
    let mut times = Vec::new();
    let mut any_tag = false;
    let mut current = cue_start;
    let mut in_word = false;
    let mut rest = payload;
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            let close = rest.find('>').ok_or_else(|| CurationError::Parse {
                offset,
                message: "unterminated inline tag".into(),
            })?;
            let tag = &rest[1..close];
            if let Some(t) = parse_timestamp(tag) {
                any_tag = true;
                current = t;
            }
            rest = &rest[close + 1..];
            continue;
        }
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            times.push(current);
        }
        text.push(c);
        rest = &rest[c.len_utf8()..];
    }
    Ok((text, any_tag.then_some(times)))
}

fn parse_timing(line: &Line<'_>) -> Result<(f64, f64), CurationError> {
    let bad = |message: &str| CurationError::Parse {
        offset: line.offset,
        message: message.to_string(),
    };
    let (a, b) = line.text.split_once("-->").ok_or_else(|| bad("missing -->"))?;
    let start = parse_timestamp(a.trim()).ok_or_else(|| bad("malformed start timestamp"))?;
    let end_field = b.split_whitespace().next().ok_or_else(|| bad("missing end timestamp"))?;
    let end = parse_timestamp(end_field).ok_or_else(|| bad("malformed end timestamp"))?;
    Ok((start, end))
}

pub fn parse_vtt(bytes: &[u8], video_id: &str) -> Result<SubtitleDoc, CurationError> {
    let input = std::str::from_utf8(bytes).map_err(|e| CurationError::Parse {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let bom = if input.starts_with('\u{feff}') { 3 } else { 0 };
    let lines = split_lines(&input[bom..]);
    let header = lines.first().ok_or_else(|| CurationError::Parse {
        offset: 0,
        message: "empty file".into(),
    })?;
    let h = header.text;
    if !(h == "WEBVTT" || h.starts_with("WEBVTT ") || h.starts_with("WEBVTT\t")) {
        return Err(CurationError::Parse {
            offset: bom,
            message: "missing WEBVTT header".into(),
        });
    }
    // skip header block
    let mut i = 1;
    while i < lines.len() && !lines[i].text.is_empty() {
        i += 1;
    }
    let mut cues = Vec::new();
    while i < lines.len() {
        if lines[i].text.is_empty() {
            i += 1;
            continue;
        }
        let block_start = i;
        while i < lines.len() && !lines[i].text.is_empty() {
            i += 1;
        }
        let block = &lines[block_start..i];
        if block[0].text.starts_with("NOTE") && !block[0].text.contains("-->") {
            continue;
        }
        let (id, timing_idx) = if block[0].text.contains("-->") {
            (None, 0)
        } else {
            (Some(block[0].text.to_string()), 1)
        };
        let timing = block.get(timing_idx).ok_or_else(|| CurationError::Parse {
            offset: block[0].offset + bom,
            message: "cue identifier without timing line".into(),
        })?;
        let (start, end) = parse_timing(&Line {
            offset: timing.offset + bom,
            text: timing.text,
        })?;
        let payload: Vec<&str> = block[timing_idx + 1..].iter().map(|l| l.text).collect();
        let payload_offset = block.get(timing_idx + 1).map_or(timing.offset, |l| l.offset) + bom;
        let (text, word_times) = parse_payload(&payload.join("\n"), start, payload_offset)?;
        cues.push(Cue {
            id,
            start,
            end,
            text,
            word_times,
        });
    }
    let doc = SubtitleDoc {
        video_id: video_id.to_string(),
        cues,
    };
    doc.validate()?;
    Ok(doc)
}

/// Writes the document back in the accepted grammar. Word timings become
/// tags in front of each word (the first one only if it differs from the
/// cue start).
pub fn serialize_vtt(doc: &SubtitleDoc) -> String {
    let mut out = String::from("WEBVTT\n\n");
    for c in &doc.cues {
        if let Some(id) = &c.id {
            let _ = writeln!(out, "{id}");
        }
        let _ = writeln!(out, "{} --> {}", format_timestamp(c.start), format_timestamp(c.end));
        match &c.word_times {
            None => out.push_str(&c.text),
            Some(times) => {
                let mut w = 0;
                let mut in_word = false;
                for ch in c.text.chars() {
                    if ch.is_whitespace() {
                        in_word = false;
                    } else if !in_word {
                        in_word = true;
                        let t = times.get(w).copied().unwrap_or(c.start);
                        if w > 0 || t != c.start {
                            let _ = write!(out, "<{}>", format_timestamp(t));
                        }
                        w += 1;
                    }
                    out.push(ch);
                }
            }
        }
        out.push_str("\n\n");
    }
    out
}
