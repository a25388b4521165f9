use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: cue starting at {start:.3}s comes after one starting at {previous:.3}s")]
    OutOfOrder { line: usize, start: f64, previous: f64 },
    #[error("missing WEBVTT header")]
    MissingHeader,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("clip record on line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown subtitle format `{0}` (expected srt or vtt)")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
