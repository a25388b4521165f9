//! SRT and WebVTT cue parsing and serialization.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Cue {
    /// Seconds.
    pub start: f64,
    pub end: f64,
    pub text: String,
}

impl Cue {
    pub fn new(start: f64, end: f64, text: impl Into<String>) -> Self {
        Cue { start, end, text: text.into() }
    }
}

/// `[HH:]MM:SS<sep>mmm` to milliseconds. Hours are required unless
/// `hours_optional`.
fn parse_timestamp(s: &str, sep: char, hours_optional: bool) -> Option<u64> {
    let (clock, millis) = s.split_once(sep)?;
    if millis.len() != 3 || !millis.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let parts: Vec<&str> = clock.split(':').collect();
    let (h, m, sec) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] if hours_optional => ("0", *m, *s),
        _ => return None,
    };
    let digits = |x: &str, exact: Option<usize>| {
        !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit()) && exact.is_none_or(|n| x.len() == n)
    };
    if !digits(h, None) || !digits(m, Some(2)) || !digits(sec, Some(2)) {
        return None;
    }
    let (h, m, sec): (u64, u64, u64) = (h.parse().ok()?, m.parse().ok()?, sec.parse().ok()?);
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + sec) * 1000 + millis.parse::<u64>().ok()?)
}

fn format_timestamp(seconds: f64, sep: char) -> String {
    let ms = (seconds * 1000.0).round().max(0.0) as u64;
    let (h, rem) = (ms / 3_600_000, ms % 3_600_000);
    format!("{:02}:{:02}:{:02}{sep}{:03}", h, rem / 60_000, (rem / 1000) % 60, rem % 1000)
}

/// Drops `<...>` markup, decodes the common entities and collapses whitespace.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_tag = false;
    for c in raw.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            _ if !in_tag => out.push(c),
            _ => {}
        }
    }
    let out = out
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&");
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Block<'a> {
    /// 1-based line number of each line.
    lines: Vec<(usize, &'a str)>,
}

fn blocks(text: &str) -> Vec<Block<'_>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    let mut cur: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(Block { lines: std::mem::take(&mut cur) });
            }
        } else {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        out.push(Block { lines: cur });
    }
    out
}

/// Parses `start --> end[ settings]`.
fn parse_timing(line: &str, line_no: usize, sep: char, hours_optional: bool) -> Result<(f64, f64)> {
    let (a, b) = line
        .split_once("-->")
        .ok_or_else(|| Error::parse(line_no, "expected `start --> end` cue timing"))?;
    let end_field = b.split_whitespace().next().unwrap_or("");
    let ts = |s: &str| {
        parse_timestamp(s.trim(), sep, hours_optional)
            .ok_or_else(|| Error::parse(line_no, format!("malformed timestamp `{}`", s.trim())))
    };
    let (start, end) = (ts(a)?, ts(end_field)?);
    if start >= end {
        return Err(Error::parse(line_no, "cue ends before it starts"));
    }
    Ok((start as f64 / 1000.0, end as f64 / 1000.0))
}

/// Rejects cues that start before their predecessor. An overlapping cue cuts
/// the previous one short; a cue with the same start is merged into it.
fn normalize(parsed: Vec<(usize, Cue)>) -> Result<Vec<Cue>> {
    let mut out: Vec<Cue> = Vec::with_capacity(parsed.len());
    for (line, cue) in parsed {
        if let Some(prev) = out.last_mut() {
            if cue.start < prev.start {
                return Err(Error::OutOfOrder { line, start: cue.start, previous: prev.start });
            }
            if cue.start == prev.start {
                prev.end = prev.end.max(cue.end);
                if !cue.text.is_empty() {
                    if !prev.text.is_empty() {
                        prev.text.push(' ');
                    }
                    prev.text.push_str(&cue.text);
                }
                continue;
            }
            prev.end = prev.end.min(cue.start);
        }
        out.push(cue);
    }
    Ok(out)
}

fn join_text(lines: &[(usize, &str)]) -> String {
    clean_text(&lines.iter().map(|(_, l)| *l).collect::<Vec<_>>().join(" "))
}

pub fn parse_srt(input: &str) -> Result<Vec<Cue>> {
    let mut parsed = Vec::new();
    for block in blocks(input) {
        let l = &block.lines;
        let t = l
            .iter()
            .take(2)
            .position(|(_, s)| s.contains("-->"))
            .ok_or_else(|| Error::parse(l[0].0, "expected a cue index or `start --> end` timing"))?;
        if t == 1 && !l[0].1.trim().bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::parse(l[0].0, format!("expected a numeric cue index, got `{}`", l[0].1)));
        }
        let (line_no, timing) = l[t];
        let (start, end) = parse_timing(timing, line_no, ',', false)?;
        parsed.push((line_no, Cue::new(start, end, join_text(&l[t + 1..]))));
    }
    normalize(parsed)
}

pub fn parse_webvtt(input: &str) -> Result<Vec<Cue>> {
    let blocks = blocks(input);
    let header = blocks.first().ok_or(Error::MissingHeader)?;
    let first = header.lines[0].1;
    if first != "WEBVTT" && !first.starts_with("WEBVTT ") && !first.starts_with("WEBVTT\t") {
        return Err(Error::MissingHeader);
    }
    let mut parsed = Vec::new();
    for block in &blocks[1..] {
        let l = &block.lines;
        let head = l[0].1;
        if head == "NOTE" || head.starts_with("NOTE ") || head == "STYLE" || head == "REGION" {
            continue;
        }
        let t = l
            .iter()
            .take(2)
            .position(|(_, s)| s.contains("-->"))
            .ok_or_else(|| Error::parse(l[0].0, "expected `start --> end` cue timing"))?;
        let (line_no, timing) = l[t];
        let (start, end) = parse_timing(timing, line_no, '.', true)?;
        parsed.push((line_no, Cue::new(start, end, join_text(&l[t + 1..]))));
    }
    normalize(parsed)
}

pub fn write_srt(cues: &[Cue]) -> String {
    let mut out = String::new();
    for (i, c) in cues.iter().enumerate() {
        let _ = write!(
            out,
            "{}\n{} --> {}\n{}\n\n",
            i + 1,
            format_timestamp(c.start, ','),
            format_timestamp(c.end, ','),
            c.text
        );
    }
    out
}

pub fn write_webvtt(cues: &[Cue]) -> String {
    let mut out = String::from("WEBVTT\n\n");
    for c in cues {
        let _ = write!(
            out,
            "{} --> {}\n{}\n\n",
            format_timestamp(c.start, '.'),
            format_timestamp(c.end, '.'),
            c.text
        );
    }
    out
}
