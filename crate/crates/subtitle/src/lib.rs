//! Subtitle ingestion: cue parsing, sentence segmentation, word-level
//! alignment of sentences to cue timestamps, clip emission and statistics.

pub mod clips;
pub mod cue;
pub mod dtw;
pub mod error;
pub mod pipeline;
pub mod record;
pub mod sentences;
pub mod stats;
pub mod words;

pub use clips::{emit_clips, AlignedClip, MIN_CLIP_SECONDS};
pub use cue::{parse_srt, parse_webvtt, write_srt, write_webvtt, Cue};
pub use dtw::{align_tokens, dtw_align, SentenceAlignment, SentenceSpan, TokenAlignment};
pub use error::{Error, Result};
pub use pipeline::{process_subtitles, Format};
pub use record::{read_jsonl, write_jsonl, ClipRecord};
pub use sentences::{segment_sentences, Punctuator, RulePunctuator, Sentence, MAX_SENTENCE_TOKENS};
pub use stats::{corpus_stats, render_table, CorpusStats, StatsAccumulator, TableRow};
pub use words::{normalize_token, words_with_times, TimedWord};
