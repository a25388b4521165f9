//! Clip emission from aligned sentences.

use crate::dtw::SentenceSpan;
use crate::sentences::Sentence;

/// Shorter clips are merged forward.
pub const MIN_CLIP_SECONDS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedClip {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub sentence: Sentence,
}

impl AlignedClip {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    fn absorb(&mut self, later: AlignedClip) {
        self.end = self.end.max(later.end);
        self.sentence.tokens.extend(later.sentence.tokens);
        self.sentence.source_span.end = self.sentence.source_span.end.max(later.sentence.source_span.end);
    }
}

/// One clip per sentence. A clip shorter than `min_seconds` is merged into the
/// following one; a short final clip joins the one before it. A lone clip is
/// kept only when it has positive length.
pub fn emit_clips(sentences: &[Sentence], spans: &[SentenceSpan], video_id: &str, min_seconds: f64) -> Vec<AlignedClip> {
    let mut out: Vec<AlignedClip> = Vec::new();
    let mut pending: Option<AlignedClip> = None;
    for (s, span) in sentences.iter().zip(spans) {
        let mut clip = AlignedClip {
            video_id: video_id.to_string(),
            start: span.start,
            end: span.end,
            sentence: s.clone(),
        };
        if let Some(mut p) = pending.take() {
            p.absorb(clip);
            clip = p;
        }
        if clip.duration() < min_seconds {
            pending = Some(clip);
        } else {
            out.push(clip);
        }
    }
    if let Some(p) = pending {
        match out.last_mut() {
            Some(last) => last.absorb(p),
            None if p.start < p.end => out.push(p),
            None => {}
        }
    }
    out
}
