//! Monotone alignment of transcript sentences to timed cue words.

use crate::error::{Error, Result};
use crate::sentences::Sentence;
use crate::words::TimedWord;

/// Minimal-cost monotone alignment: substitution costs 0 on case-folded
/// equality and 1 otherwise, insertion and deletion cost 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenAlignment {
    pub cost: usize,
    /// Diagonal steps `(i, j)`, increasing in both.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
enum Step {
    Diag,
    Up,
    Left,
}

/// Ties prefer the diagonal, then skipping a token of `a`.
pub fn align_tokens<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> TokenAlignment {
    let a: Vec<String> = a.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let b: Vec<String> = b.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let (n, m) = (a.len(), b.len());
    let mut steps = vec![Step::Diag; (n + 1) * (m + 1)];
    let mut prev: Vec<usize> = (0..=m).collect();
    for j in 1..=m {
        steps[j] = Step::Left;
    }
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        steps[i * (m + 1)] = Step::Up;
        for j in 1..=m {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            let diag = prev[j - 1] + sub;
            let up = prev[j] + 1;
            let left = cur[j - 1] + 1;
            let (c, s) = if diag <= up && diag <= left {
                (diag, Step::Diag)
            } else if up <= left {
                (up, Step::Up)
            } else {
                (left, Step::Left)
            };
            cur[j] = c;
            steps[i * (m + 1) + j] = s;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let cost = prev[m];
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match steps[i * (m + 1) + j] {
            Step::Diag => {
                pairs.push((i - 1, j - 1));
                i -= 1;
                j -= 1;
            }
            Step::Up => i -= 1,
            Step::Left => j -= 1,
        }
    }
    pairs.reverse();
    TokenAlignment { cost, pairs }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SentenceSpan {
    pub start: f64,
    pub end: f64,
    /// At least one cue word aligned to the sentence.
    pub aligned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceAlignment {
    pub cost: usize,
    pub spans: Vec<SentenceSpan>,
}

/// Aligns the concatenated sentence tokens to the cue words. A sentence starts
/// at its first aligned cue word and ends at the end of the cue holding its
/// last aligned word, cut back to where the next sentence starts if that is
/// earlier. Starts are clamped to be non-decreasing; a sentence with no
/// aligned word gets a zero-length span where the previous one ended.
pub fn dtw_align(sentences: &[Sentence], cue_words: &[TimedWord]) -> Result<SentenceAlignment> {
    let flat: Vec<&str> = sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
    if flat.is_empty() {
        return Err(Error::Empty("sentence token sequence"));
    }
    if cue_words.is_empty() {
        return Err(Error::Empty("cue word sequence"));
    }
    let owner: Vec<usize> = sentences.iter().enumerate().flat_map(|(k, s)| std::iter::repeat_n(k, s.tokens.len())).collect();
    let cue_tokens: Vec<&str> = cue_words.iter().map(|w| w.token.as_str()).collect();
    let al = align_tokens(&flat, &cue_tokens);

    let mut bounds: Vec<Option<(usize, usize)>> = vec![None; sentences.len()];
    for &(i, j) in &al.pairs {
        let b = &mut bounds[owner[i]];
        *b = Some(b.map_or((j, j), |(f, _)| (f, j)));
    }
    // Aligned sentences are strictly ordered in cue-word index, so capping
    // each at the next aligned start keeps spans disjoint and ordered.
    let mut spans = vec![SentenceSpan { start: 0.0, end: 0.0, aligned: false }; sentences.len()];
    let mut next_start: Option<f64> = None;
    for (k, b) in bounds.iter().enumerate().rev() {
        if let Some((f, l)) = *b {
            let start = cue_words[f].time;
            let end = next_start.map_or(cue_words[l].cue_end, |n| cue_words[l].cue_end.min(n));
            spans[k] = SentenceSpan { start, end: end.max(start), aligned: true };
            next_start = Some(start);
        }
    }
    let mut prev_start = cue_words[0].time;
    let mut prev_end = cue_words[0].time;
    for span in &mut spans {
        if span.aligned {
            span.start = span.start.max(prev_start);
            span.end = span.end.max(span.start);
        } else {
            span.start = prev_end.max(prev_start);
            span.end = span.start;
        }
        prev_start = span.start;
        prev_end = span.end;
    }
    Ok(SentenceAlignment { cost: al.cost, spans })
}
