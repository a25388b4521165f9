//! Sentence segmentation with a pluggable punctuator.

use std::ops::Range;

use crate::words::{ends_sentence, normalize_token};

/// Longest sentence the segmenter emits; longer runs are cut into chunks.
pub const MAX_SENTENCE_TOKENS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    /// Byte range in the transcript.
    pub source_span: Range<usize>,
}

/// Splits a transcript into sentence byte ranges.
pub trait Punctuator: Sync {
    fn split(&self, text: &str) -> Vec<Range<usize>>;
}

/// Boundary after a word ending in `.`, `?` or `!` unless the word is a known
/// abbreviation.
#[derive(Clone, Debug)]
pub struct RulePunctuator {
    pub abbreviations: Vec<String>,
}

impl Default for RulePunctuator {
    fn default() -> Self {
        let abbreviations = ["mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "vs.", "e.g.", "i.e.", "jr.", "sr."];
        RulePunctuator { abbreviations: abbreviations.iter().map(|s| s.to_string()).collect() }
    }
}

/// Whitespace-separated words with their byte ranges.
pub(crate) fn word_spans(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

impl Punctuator for RulePunctuator {
    fn split(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut first: Option<usize> = None;
        for w in word_spans(text) {
            let word = &text[w.clone()];
            let start = *first.get_or_insert(w.start);
            let lower = word.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if ends_sentence(word) && !self.abbreviations.contains(&lower) {
                out.push(start..w.end);
                first = None;
            }
        }
        if let Some(s) = first {
            out.push(s..word_spans(text).last().map_or(text.len(), |w| w.end));
        }
        out
    }
}

/// Sentences of normalized tokens. Spans with no word tokens are dropped and
/// long ones are cut every [`MAX_SENTENCE_TOKENS`] tokens.
pub fn segment_sentences(text: &str, punctuator: &dyn Punctuator) -> Vec<Sentence> {
    let mut out = Vec::new();
    for span in punctuator.split(text) {
        let words: Vec<(Range<usize>, String)> = word_spans(&text[span.clone()])
            .into_iter()
            .filter_map(|w| {
                let r = span.start + w.start..span.start + w.end;
                normalize_token(&text[r.clone()]).map(|t| (r, t))
            })
            .collect();
        for chunk in words.chunks(MAX_SENTENCE_TOKENS) {
            out.push(Sentence {
                tokens: chunk.iter().map(|(_, t)| t.clone()).collect(),
                source_span: chunk[0].0.start..chunk[chunk.len() - 1].0.end,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_words() {
        assert_eq!(word_spans("  ab c\td "), vec![2..4, 5..6, 7..8]);
        assert!(word_spans("").is_empty());
    }

    #[test]
    fn abbreviations_do_not_split() {
        let s = segment_sentences("Dr. Smith arrived. He sat.", &RulePunctuator::default());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].tokens, ["dr", "smith", "arrived"]);
    }
}
