//! Sweep over the number of high- and low-resolution frames per segment.
//! Each row records which frames the sampler actually fetched and the
//! feature shapes the encoder produced, optionally with the retrieval score
//! of a model trained in that setting.

use hdvila_core::model;
use hdvila_core::sampling::{self, CropMode, LoadOptions};
use hdvila_core::text::RESERVED;
use hdvila_core::{ParamStore, Tape};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::frames::RecordingSource;
use crate::synth::generate_synthetic;

/// `(HR frames, LR frames)` per segment, as in the resolution ablation.
pub const FRAME_MATRIX: [(usize, usize); 5] = [(1, 0), (0, 10), (1, 6), (1, 10), (1, 14)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub hr_frames: usize,
    pub lr_frames: usize,
    pub segments: usize,
    /// HR and LR images loaded for every segment.
    pub hr_loaded: usize,
    pub lr_loaded: usize,
    /// Frame fetches observed at the source over all segments.
    pub frame_requests: usize,
    pub grid: (usize, usize),
    /// Shape of one fused segment feature.
    pub feature_shape: Vec<usize>,
    pub video_params: usize,
    pub eval_r1: Option<f64>,
}

/// `base` with the segment layout of one matrix cell.
pub fn sweep_config(base: &RunConfig, hr: usize, lr: usize) -> Result<RunConfig> {
    if hr > 1 || !lr.is_multiple_of(2) || hr + lr == 0 {
        return Err(Error::config(format!(
            "sweep cell ({hr} HR, {lr} LR) needs at most one HR frame and an even, non-zero total"
        )));
    }
    let mut cfg = base.clone();
    cfg.sampling.use_hr = hr == 1;
    cfg.sampling.frames_per_segment = lr + 1;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads and encodes one synthetic clip under `cfg`, observing the source.
pub fn probe(cfg: &RunConfig) -> Result<SweepRow> {
    let vocab_size = RESERVED.len() + cfg.model.max_words;
    let model_cfg = cfg.model_config(vocab_size)?;
    let mut rng = stream_rng(cfg.seed, Stream::Train);
    let store: ParamStore<f32> = model::init_stage1(&model_cfg, &mut rng)?;
    let sample = generate_synthetic(&cfg.data, stream_rng(cfg.seed, Stream::EvalData))
        .next()
        .expect("endless stream");
    let source = RecordingSource::new(sample.video);
    let s = &cfg.sampling;
    let plan = sampling::plan_segments(cfg.data.frames, s.segment_count, s.frames_per_segment, s.lr_rate)?;
    let opts = LoadOptions {
        crop: (s.crop_height, s.crop_width),
        mode: CropMode::Center,
        include_hr: s.use_hr,
    };
    let segs = sampling::load_frames(&plan, &source, &opts, &mut rng)?;
    let count = |f: &dyn Fn(&sampling::HybridSequence<f32>) -> usize| -> Result<usize> {
        let first = f(&segs[0]);
        if segs.iter().any(|q| f(q) != first) {
            return Err(Error::config("segments loaded different frame counts".to_string()));
        }
        Ok(first)
    };
    let hr_loaded = count(&|q| usize::from(q.hr_image.is_some()))?;
    let lr_loaded = count(&|q| q.lr_images.len())?;
    let mut tape = Tape::new();
    let fwd = model::video_forward(&mut tape, &store, &model_cfg, &segs)?;
    let feature_shape = tape.shape(fwd.segments[0].v).to_vec();
    let video_params = store
        .iter()
        .filter(|(n, _)| n.starts_with("video."))
        .map(|(_, t)| t.numel())
        .sum();
    Ok(SweepRow {
        hr_frames: usize::from(s.use_hr),
        lr_frames: s.frames_per_segment - 1,
        segments: segs.len(),
        hr_loaded,
        lr_loaded,
        frame_requests: source.requests().len(),
        grid: fwd.segments[0].grid,
        feature_shape,
        video_params,
        eval_r1: None,
    })
}

/// Structural probe of every cell. With `train`, each cell is also trained
/// into `base.paths.out_dir/hr{H}_lr{L}` and evaluated (video-to-text R@1).
pub fn n_sweep(base: &RunConfig, matrix: &[(usize, usize)], train: bool) -> Result<Vec<SweepRow>> {
    matrix
        .iter()
        .map(|&(hr, lr)| {
            let mut cfg = sweep_config(base, hr, lr)?;
            let mut row = probe(&cfg)?;
            if train {
                cfg.paths.out_dir = base.paths.out_dir.join(format!("hr{hr}_lr{lr}"));
                let summary = crate::train::train(&cfg, None)?;
                let data = crate::data::build_datasets(&cfg);
                let videos: Vec<_> = data.eval.samples.iter().map(|s| s.video.clone()).collect();
                let report = crate::eval::evaluate(&summary.store, &summary.model, &cfg, &videos, &data.eval.tokens)?;
                row.eval_r1 = report.v2t.recall_at(1);
            }
            Ok(row)
        })
        .collect()
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let header = ["HR", "LR", "segments", "HR loaded", "LR loaded", "fetches", "grid", "feature", "video params", "R@1"];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.hr_frames.to_string(),
                r.lr_frames.to_string(),
                r.segments.to_string(),
                r.hr_loaded.to_string(),
                r.lr_loaded.to_string(),
                r.frame_requests.to_string(),
                format!("{}x{}", r.grid.0, r.grid.1),
                format!("{:?}", r.feature_shape),
                r.video_params.to_string(),
                r.eval_r1.map_or("-".into(), |v| format!("{v:.1}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|_| "").collect()).replace(' ', "-"));
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}
