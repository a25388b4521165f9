//! Subtitle file to clip records, end to end.

use std::str::FromStr;

use crate::clips::{emit_clips, MIN_CLIP_SECONDS};
use crate::cue::{parse_srt, parse_webvtt, Cue};
use crate::dtw::dtw_align;
use crate::error::{Error, Result};
use crate::record::ClipRecord;
use crate::sentences::{segment_sentences, Punctuator};
use crate::words::words_with_times;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Srt,
    Vtt,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srt" => Ok(Format::Srt),
            "vtt" | "webvtt" => Ok(Format::Vtt),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Srt => "srt",
            Format::Vtt => "vtt",
        }
    }

    pub fn parse(self, input: &str) -> Result<Vec<Cue>> {
        match self {
            Format::Srt => parse_srt(input),
            Format::Vtt => parse_webvtt(input),
        }
    }
}

/// Cue texts joined with single spaces.
pub fn transcript(cues: &[Cue]) -> String {
    cues.iter().map(|c| c.text.as_str()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Parse, segment, align and emit. A file without any words yields no clips.
pub fn process_subtitles(video_id: &str, input: &str, format: Format, punctuator: &dyn Punctuator) -> Result<Vec<ClipRecord>> {
    let cues = format.parse(input)?;
    let words = words_with_times(&cues);
    let text = transcript(&cues);
    let sentences = segment_sentences(&text, punctuator);
    if words.is_empty() || sentences.is_empty() {
        return Ok(Vec::new());
    }
    let alignment = dtw_align(&sentences, &words)?;
    Ok(emit_clips(&sentences, &alignment.spans, video_id, MIN_CLIP_SECONDS)
        .iter()
        .map(|c| ClipRecord::from_clip(c, &text))
        .collect())
}
