//! The `hdvila` command line.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hdvila_subtitle::{self as subtitle, Format, RulePunctuator, TableRow};
use rayon::prelude::*;

use crate::ablation::{self, FRAME_MATRIX};
use crate::config::RunConfig;
use crate::data::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::frames::write_png;
use crate::gradcheck;
use crate::synth::generate_synthetic;

#[derive(Debug, Parser)]
#[command(name = "hdvila", version, about = "Hybrid-resolution video-language pre-training at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Subtitle files to aligned clip records (JSONL).
    Align {
        /// Directory of subtitle files; the video id is the file stem.
        #[arg(long = "in")]
        input: PathBuf,
        /// srt or vtt
        #[arg(long, default_value = "srt")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics of clip JSONL files as a table.
    Stats {
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// `video_id<TAB>category` lines.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long, default_value = "corpus")]
        dataset: String,
        #[arg(long, default_value = "open")]
        domain: String,
        #[arg(long, default_value = "-")]
        resolution: String,
    },
    /// Two-stage pre-training on the synthetic corpus.
    Train {
        /// Continue from a checkpoint written at an epoch boundary.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint on the eval corpus, as JSON.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and every model parameter.
    GradCheck {
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
    /// Writes a few synthetic clips as PNG frames with their captions.
    SynthPreview {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// HR/LR frame-count sweep report.
    NSweep {
        /// Train and evaluate every cell (slow).
        #[arg(long)]
        train: bool,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Align { input, format, out } => align(&input, &format, &out),
        Command::Stats {
            input,
            categories,
            dataset,
            domain,
            resolution,
        } => stats(&input, categories.as_deref(), &dataset, &domain, &resolution),
        Command::Train { resume } => {
            let cfg = load_config(&cli.global)?;
            let s = crate::train::train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps; last loss {}; checkpoint {}",
                s.steps,
                s.last_loss.map_or("-".into(), |l| format!("{l:.4}")),
                s.last_checkpoint.display()
            );
            Ok(())
        }
        Command::EvalRetrieval { checkpoint, out } => {
            let cfg = load_config(&cli.global)?;
            let report = crate::eval::eval_checkpoint(&cfg, &checkpoint)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                std::fs::write(&p, &json).map_err(|e| Error::io(&p, e))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::GradCheck { coords } => {
            let cfg = load_config(&cli.global)?;
            let report = gradcheck::grad_check(&cfg, coords.max(1))?;
            for e in &report.entries {
                let verdict = if e.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
                println!("{verdict:4} {:.3e}  {} [{} coords]", e.max_rel_error, e.name, e.coords);
            }
            if report.passed() {
                println!("all {} checks below {:e}", report.entries.len(), report.tolerance);
                Ok(())
            } else {
                let n = report.failures().count();
                Err(Error::GradCheck(format!(
                    "{n} entries at or above relative error {:e}",
                    report.tolerance
                )))
            }
        }
        Command::SynthPreview { out, count } => {
            let cfg = load_config(&cli.global)?;
            cfg.validate()?;
            synth_preview(&cfg, &out, count)
        }
        Command::NSweep { train } => {
            let cfg = load_config(&cli.global)?;
            let rows = ablation::n_sweep(&cfg, &FRAME_MATRIX, train)?;
            print!("{}", ablation::render_sweep(&rows));
            Ok(())
        }
    }
}

fn align(dir: &Path, format: &str, out: &Path) -> Result<()> {
    let format: Format = format.parse().map_err(|e: subtitle::Error| Error::config(e.to_string()))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(format.extension())))
        .collect();
    files.sort();
    let punctuator = RulePunctuator::default();
    let per_file = files
        .par_iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            subtitle::process_subtitles(&id, &text, format, &punctuator).map_err(|e| Error::Input {
                path: p.clone(),
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = per_file.into_iter().flatten().collect();
    std::fs::write(out, subtitle::write_jsonl(&records)).map_err(|e| Error::io(out, e))?;
    println!("{} clips from {} files -> {}", records.len(), files.len(), out.display());
    Ok(())
}

fn stats(inputs: &[PathBuf], categories: Option<&Path>, dataset: &str, domain: &str, resolution: &str) -> Result<()> {
    let mut records = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        records.extend(subtitle::read_jsonl(&text).map_err(|e| Error::Input {
            path: p.clone(),
            msg: e.to_string(),
        })?);
    }
    let map: HashMap<String, String> = match categories {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(v, c)| (v.trim().to_string(), c.trim().to_string()))
            .collect(),
        None => HashMap::new(),
    };
    let s = subtitle::corpus_stats(&records, |id| map.get(id).cloned());
    print!(
        "{}",
        subtitle::render_table(&[TableRow {
            dataset,
            domain,
            stats: &s,
            resolution,
        }])
    );
    for (c, n) in &s.per_category {
        println!("{c}\t{n}");
    }
    Ok(())
}

fn synth_preview(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut captions = String::new();
    for sample in generate_synthetic(&cfg.data, stream_rng(cfg.seed, Stream::TrainData)).take(count) {
        let dir = out.join(format!("sample-{:03}", sample.index));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in 0..sample.video.frames {
            let frame = hdvila_core::Tensor::<f32>::from_f64(
                &[3, sample.video.height, sample.video.width],
                &sample.video.render(t),
            )?;
            write_png(&frame, &dir.join(format!("frame-{t:03}.png")))?;
        }
        captions.push_str(&format!("sample-{:03}\t{}\n", sample.index, sample.caption));
    }
    let path = out.join("captions.tsv");
    std::fs::write(&path, captions).map_err(|e| Error::io(&path, e))?;
    println!("{count} clips -> {}", out.display());
    Ok(())
}
