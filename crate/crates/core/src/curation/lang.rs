use std::collections::{BTreeMap, HashMap, HashSet};

use super::CurationError;

const SAMPLE: &str = include_str!("../../data/lang_sample.txt");

/// Maps text to a probability distribution over language codes.
pub trait LanguageClassifier {
    fn classify(&self, text: &str) -> Result<Vec<(String, f64)>, CurationError>;

    /// Probability of English (`"en"`), zero if the classifier lacks it.
    fn english_prob(&self, text: &str) -> Result<f64, CurationError> {
        Ok(self
            .classify(text)?
            .into_iter()
            .find(|(l, _)| l == "en")
            .map_or(0.0, |(_, p)| p))
    }
}

/// Naive Bayes over character trigrams with add-one smoothing and a
/// uniform prior.
#[derive(Debug, Clone)]
pub struct TrigramClassifier {
    counts: BTreeMap<String, HashMap<String, u32>>,
    totals: BTreeMap<String, u64>,
    vocab: usize,
}

fn trigrams(text: &str) -> Vec<String> {
    let norm: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphabetic() || c == '\'' { c } else { ' ' })
        .collect();
    let mut out = Vec::new();
    for word in norm.split_whitespace() {
        let chars: Vec<char> = std::iter::once(' ').chain(word.chars()).chain(std::iter::once(' ')).collect();
        for w in chars.windows(3) {
            out.push(w.iter().collect());
        }
    }
    out
}

impl TrigramClassifier {
    /// Trains on `(language, text)` pairs.
    pub fn train<'a>(samples: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut counts: BTreeMap<String, HashMap<String, u32>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (lang, text) in samples {
            let table = counts.entry(lang.to_string()).or_default();
            for g in trigrams(text) {
                seen.insert(g.clone());
                *table.entry(g).or_default() += 1;
            }
        }
        let totals = counts
            .iter()
            .map(|(l, t)| (l.clone(), t.values().map(|&c| u64::from(c)).sum()))
            .collect();
        Self {
            counts,
            totals,
            vocab: seen.len() + 1,
        }
    }

    /// The classifier trained on the bundled multilingual sample.
    pub fn bundled() -> Self {
        let mut samples = Vec::new();
        let mut lang = "";
        for line in SAMPLE.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(code) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                lang = code;
            } else {
                samples.push((lang, line));
            }
        }
        Self::train(samples)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }
}

impl LanguageClassifier for TrigramClassifier {
    fn classify(&self, text: &str) -> Result<Vec<(String, f64)>, CurationError> {
        if self.counts.is_empty() {
            return Err(CurationError::Classifier("no languages trained".into()));
        }
        let grams = trigrams(text);
        let scores: Vec<(String, f64)> = self
            .counts
            .iter()
            .map(|(lang, table)| {
                let denom = (self.totals[lang] + self.vocab as u64) as f64;
                let ll: f64 = grams
                    .iter()
                    .map(|g| ((f64::from(table.get(g).copied().unwrap_or(0)) + 1.0) / denom).ln())
                    .sum();
                (lang.clone(), ll)
            })
            .collect();
        let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
        Ok(scores.into_iter().map(|(l, s)| (l, (s - m).exp() / z)).collect())
    }
}
