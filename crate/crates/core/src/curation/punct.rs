/// One word of the restitched stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWord {
    pub text: String,
    pub start: f64,
    pub end: f64,
    /// Last word of its cue.
    pub cue_final: bool,
}

/// Restores sentence boundaries in an unpunctuated word stream.
pub trait Punctuator {
    /// `true` at position `i` if a sentence ends after word `i`.
    fn sentence_ends(&self, words: &[StreamWord]) -> Vec<bool>;
}

/// Ends a sentence after words carrying terminal punctuation and after
/// cue-final words followed by a capitalized word.
#[derive(Debug, Clone, Copy, Default)]
pub struct RulePunctuator;

impl Punctuator for RulePunctuator {
    fn sentence_ends(&self, words: &[StreamWord]) -> Vec<bool> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let terminal = w
                    .text
                    .trim_end_matches(['"', '\'', ')', ']'])
                    .ends_with(['.', '!', '?']);
                let capital_next = words
                    .get(i + 1)
                    .and_then(|n| n.text.chars().find(|c| c.is_alphanumeric()))
                    .is_some_and(char::is_uppercase);
                terminal || (w.cue_final && capital_next)
            })
            .collect()
    }
}

/// Never splits.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPunctuator;

impl Punctuator for NoPunctuator {
    fn sentence_ends(&self, words: &[StreamWord]) -> Vec<bool> {
        vec![false; words.len()]
    }
}
