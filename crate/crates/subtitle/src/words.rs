//! Word tokens with interpolated times.

use crate::cue::Cue;

#[derive(Clone, Debug, PartialEq)]
pub struct TimedWord {
    pub token: String,
    /// Seconds, interpolated within the cue.
    pub time: f64,
    /// Index of the source cue.
    pub cue: usize,
    pub cue_end: f64,
    /// The raw word carried sentence-final punctuation.
    pub ends_sentence: bool,
}

/// Lower-cases and strips leading/trailing punctuation; `None` when nothing
/// word-like is left.
pub fn normalize_token(raw: &str) -> Option<String> {
    let t = raw.trim_matches(|c: char| !c.is_alphanumeric());
    (!t.is_empty()).then(|| t.to_lowercase())
}

pub(crate) fn ends_sentence(raw: &str) -> bool {
    raw.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}'])
        .ends_with(['.', '?', '!'])
}

/// Word `j` of a cue's `m` words sits at `start + j/m * (end - start)`.
pub fn words_with_times(cues: &[Cue]) -> Vec<TimedWord> {
    let mut out = Vec::new();
    for (ci, cue) in cues.iter().enumerate() {
        let words: Vec<(String, bool)> = cue
            .text
            .split_whitespace()
            .filter_map(|w| normalize_token(w).map(|t| (t, ends_sentence(w))))
            .collect();
        let m = words.len() as f64;
        for (j, (token, end)) in words.into_iter().enumerate() {
            out.push(TimedWord {
                token,
                time: cue.start + (j as f64 / m) * (cue.end - cue.start),
                cue: ci,
                cue_end: cue.end,
                ends_sentence: end,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_folded_and_trimmed() {
        assert_eq!(normalize_token("Hello,"), Some("hello".into()));
        assert_eq!(normalize_token("\"don't\""), Some("don't".into()));
        assert_eq!(normalize_token("--"), None);
        assert!(ends_sentence("end.\""));
        assert!(!ends_sentence("mid,"));
    }
}
