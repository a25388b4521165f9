//! JSONL clip records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clips::AlignedClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub text: String,
    pub n_words: usize,
}

impl ClipRecord {
    /// `text` is the transcript slice the clip's sentence came from.
    pub fn from_clip(clip: &AlignedClip, transcript: &str) -> Self {
        let text = transcript
            .get(clip.sentence.source_span.clone())
            .map_or_else(|| clip.sentence.tokens.join(" "), str::to_string);
        ClipRecord {
            video_id: clip.video_id.clone(),
            start: clip.start,
            end: clip.end,
            text,
            n_words: clip.sentence.tokens.len(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// One JSON object, times with exactly three decimals.
    pub fn to_json_line(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).expect("string serializes");
        format!(
            "{{\"video_id\":{},\"start\":{:.3},\"end\":{:.3},\"text\":{},\"n_words\":{}}}",
            q(&self.video_id),
            self.start,
            self.end,
            q(&self.text),
            self.n_words
        )
    }
}

pub fn write_jsonl(records: &[ClipRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.to_json_line());
    }
    out
}

pub fn read_jsonl(input: &str) -> Result<Vec<ClipRecord>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| Error::Record { line: i + 1, source }))
        .collect()
}
