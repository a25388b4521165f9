//! Corpus statistics and their table rendering.

use std::collections::BTreeMap;

use crate::record::ClipRecord;

/// Integer accumulator: merging is exact and order-independent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    pub clips: u64,
    pub total_ms: u64,
    pub total_words: u64,
    pub per_category: BTreeMap<String, u64>,
}

/// Clip duration in whole milliseconds, from the millisecond-rounded ends.
pub fn duration_ms(r: &ClipRecord) -> u64 {
    let ms = |t: f64| (t * 1000.0).round() as i64;
    (ms(r.end) - ms(r.start)).max(0) as u64
}

impl StatsAccumulator {
    pub fn add(&mut self, r: &ClipRecord, category: Option<&str>) {
        self.clips += 1;
        self.total_ms += duration_ms(r);
        self.total_words += r.n_words as u64;
        if let Some(c) = category {
            *self.per_category.entry(c.to_string()).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.clips += other.clips;
        self.total_ms += other.total_ms;
        self.total_words += other.total_words;
        for (k, v) in &other.per_category {
            *self.per_category.entry(k.clone()).or_default() += v;
        }
    }

    pub fn finish(&self) -> CorpusStats {
        let n = self.clips as f64;
        let (avg_clip_seconds, avg_sentence_words) = if self.clips == 0 {
            (0.0, 0.0)
        } else {
            (self.total_ms as f64 / 1000.0 / n, self.total_words as f64 / n)
        };
        CorpusStats {
            clip_count: self.clips,
            avg_clip_seconds,
            avg_sentence_words,
            total_hours: self.total_ms as f64 / 3_600_000.0,
            per_category: self.per_category.clone(),
            empty: self.clips == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub clip_count: u64,
    pub avg_clip_seconds: f64,
    pub avg_sentence_words: f64,
    pub total_hours: f64,
    pub per_category: BTreeMap<String, u64>,
    /// No clips: the averages are placeholders.
    pub empty: bool,
}

/// Statistics over clip records; `category` maps a video id to its category.
pub fn corpus_stats<'a>(
    records: impl IntoIterator<Item = &'a ClipRecord>,
    category: impl Fn(&str) -> Option<String>,
) -> CorpusStats {
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.add(r, category(&r.video_id).as_deref());
    }
    acc.finish()
}

/// `10K`, `2.5M`, `134.5K`: one decimal at most, trailing `.0` dropped.
pub fn abbreviate(x: f64) -> String {
    let (v, suffix) = if x >= 1e9 {
        (x / 1e9, "B")
    } else if x >= 1e6 {
        (x / 1e6, "M")
    } else if x >= 1e3 {
        (x / 1e3, "K")
    } else {
        (x, "")
    };
    let s = format!("{v:.1}");
    format!("{}{suffix}", s.strip_suffix(".0").unwrap_or(&s))
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "Dataset",
    "Domain",
    "#Video clips",
    "#Sentence",
    "Avg len(sec)",
    "Sent len",
    "Duration(h)",
    "Resolution",
];

#[derive(Clone, Debug)]
pub struct TableRow<'a> {
    pub dataset: &'a str,
    pub domain: &'a str,
    pub stats: &'a CorpusStats,
    pub resolution: &'a str,
}

impl TableRow<'_> {
    pub fn cells(&self) -> [String; 8] {
        let s = self.stats;
        [
            self.dataset.to_string(),
            self.domain.to_string(),
            abbreviate(s.clip_count as f64),
            // One sentence per clip.
            abbreviate(s.clip_count as f64),
            format!("{:.1}", s.avg_clip_seconds),
            format!("{:.1}", s.avg_sentence_words),
            abbreviate(s.total_hours),
            self.resolution.to_string(),
        ]
    }
}

/// Pipe-separated table with padded columns.
pub fn render_table(rows: &[TableRow<'_>]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(TableRow::cells).collect();
    let mut widths = TABLE_COLUMNS.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = line(TABLE_COLUMNS.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for r in body {
        out.push_str(&line(r.to_vec()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abbreviations() {
        assert_eq!(abbreviate(40.0), "40");
        assert_eq!(abbreviate(10_000.0), "10K");
        assert_eq!(abbreviate(134_500.0), "134.5K");
        assert_eq!(abbreviate(2_500_000.0), "2.5M");
        assert_eq!(abbreviate(0.25), "0.2");
    }
}
