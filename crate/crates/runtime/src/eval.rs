//! Zero-shot text-video retrieval on the held-out synthetic corpus.

use std::collections::BTreeMap;
use std::path::Path;

use hdvila_core::metrics::{retrieval_metrics, RetrievalMetrics};
use hdvila_core::model::{self, ModelConfig};
use hdvila_core::sampling::{self, CropMode, FrameSource, LoadOptions};
use hdvila_core::text::TokenSequence;
use hdvila_core::{ParamStore, Tape, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{build_datasets, stream_rng, Stream};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionReport {
    /// `"R@K"` -> percentage.
    pub recall: BTreeMap<String, f64>,
    pub median_rank: f64,
}

impl DirectionReport {
    fn from_metrics(m: &RetrievalMetrics) -> Self {
        DirectionReport {
            recall: m.recall.iter().map(|&(k, r)| (format!("R@{k}"), r)).collect(),
            median_rank: m.median_rank,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("R@{k}")).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub segments: usize,
    /// Video queries against the caption gallery.
    pub v2t: DirectionReport,
    /// Caption queries against the video gallery.
    pub t2v: DirectionReport,
}

/// Unit-norm video embeddings `[N, e]` from `segments` center-cropped hybrid
/// sequences per clip. Frames are loaded in clip order; forwards run in
/// parallel.
pub fn embed_videos<S: FrameSource<f32> + Sync>(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &RunConfig,
    videos: &[S],
    segments: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let s = &cfg.sampling;
    let opts = LoadOptions {
        crop: (s.crop_height, s.crop_width),
        mode: CropMode::Center,
        include_hr: s.use_hr,
    };
    let loaded = videos
        .iter()
        .map(|v| {
            let plan = sampling::plan_segments(v.frame_count(), segments, s.frames_per_segment, s.lr_rate)?;
            Ok(sampling::load_frames(&plan, v, &opts, rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = loaded
        .par_iter()
        .map(|segs| {
            let mut tape = Tape::new();
            let f = model::video_forward(&mut tape, store, model, segs)?;
            Ok(tape.value(f.embedding).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    stack(rows, model.embed_dim())
}

pub fn embed_texts(store: &ParamStore<f32>, model: &ModelConfig, tokens: &[TokenSequence]) -> Result<Tensor<f32>> {
    let rows = tokens
        .par_iter()
        .map(|t| {
            let mut tape = Tape::new();
            let f = model::text_forward(&mut tape, store, model, t)?;
            Ok(tape.value(f.embedding).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    stack(rows, model.embed_dim())
}

fn stack(rows: Vec<Vec<f32>>, e: usize) -> Result<Tensor<f32>> {
    let n = rows.len();
    Ok(Tensor::new(vec![n, e], rows.concat())?)
}

/// `[Na, Nb]` dot products of the rows of `a` and `b`.
pub fn similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    Tensor::from_fn(&[na, nb], |i| {
        let (r, c) = (i / nb, i % nb);
        a.row(r).iter().zip(b.row(c)).map(|(x, y)| x * y).sum()
    })
}

fn transpose(m: &Tensor<f32>) -> Tensor<f32> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(&[c, r], |i| m.data()[(i % r) * c + i / r])
}

/// Both retrieval directions for a square score matrix whose diagonal holds
/// the matched pairs.
pub fn retrieval_report(scores: &Tensor<f32>, ks: &[usize], segments: usize) -> Result<EvalReport> {
    let n = scores.shape()[0];
    let gt: Vec<usize> = (0..n).collect();
    let v2t = retrieval_metrics(scores, &gt, ks)?;
    let t2v = retrieval_metrics(&transpose(scores), &gt, ks)?;
    Ok(EvalReport {
        samples: n,
        segments,
        v2t: DirectionReport::from_metrics(&v2t),
        t2v: DirectionReport::from_metrics(&t2v),
    })
}

/// Embeds clips with [`RunConfig::eval_segments`] segments each, then ranks.
pub fn evaluate<S: FrameSource<f32> + Sync>(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &RunConfig,
    videos: &[S],
    tokens: &[TokenSequence],
) -> Result<EvalReport> {
    let segments = cfg.eval_segments();
    let mut rng = stream_rng(cfg.seed, Stream::Eval);
    let v = embed_videos(store, model, cfg, videos, segments, &mut rng)?;
    let t = embed_texts(store, model, tokens)?;
    retrieval_report(&similarity(&v, &t), &cfg.eval.recall_ks, segments)
}

/// Every stage-1 parameter the configuration implies must be present in
/// `store` with the same shape.
pub fn check_compatible(store: &ParamStore<f32>, model: &ModelConfig) -> Result<()> {
    let reference: ParamStore<f32> = model::init_stage1(model, &mut stream_rng(0, Stream::Train))?;
    for (name, t) in reference.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::config(format!("checkpoint lacks parameter `{name}` the config implies")))?;
        if got.shape() != t.shape() {
            return Err(Error::config(format!(
                "dimension mismatch vs checkpoint: `{name}` is {:?} in the checkpoint, the config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Loads a checkpoint and evaluates it on the configured eval corpus.
pub fn eval_checkpoint(cfg: &RunConfig, path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = build_datasets(cfg);
    let model = cfg.model_config(data.vocab.len())?;
    let store = Checkpoint::load(path)?.params();
    check_compatible(&store, &model)?;
    let videos: Vec<_> = data.eval.samples.iter().map(|s| s.video.clone()).collect();
    evaluate(&store, &model, cfg, &videos, &data.eval.tokens)
}
