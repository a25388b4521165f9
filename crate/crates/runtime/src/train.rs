//! Two-stage pre-training: contrastive video-text matching, then masked
//! language modeling through the joint Transformer.
//!
//! Samples of a batch are forwarded on separate tapes in parallel. The batch
//! loss is formed on a small tape over the stacked embeddings, its gradient
//! is pushed back into each sample tape, and parameter gradients are summed
//! in sample order so results do not depend on thread scheduling.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hdvila_core::model::{self, ModelConfig, LOGIT_SCALE};
use hdvila_core::multimodal::{self, MlmBatch, MLM_PREFIX};
use hdvila_core::objectives::{self, VIDEO_PROJ};
use hdvila_core::sampling::{self, CropMode, HybridSequence, LoadOptions, SegmentPlan};
use hdvila_core::text::TokenSequence;
use hdvila_core::{lr_schedule, AdamW, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{build_datasets, epoch_order, stream_rng, Datasets, Stream};
use crate::error::{Error, Result};

pub const TEXT_PROJ: &str = "text.proj";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    /// Global optimizer step, 0-based.
    pub step: u64,
    pub stage: u8,
    /// Global epoch, 0-based.
    pub epoch: u64,
    pub loss: f32,
    pub lr: f64,
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunPaths { out_dir: out_dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.out_dir.join("vocab.tsv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn init_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("init.hdvk")
    }

    /// Checkpoint written after `epochs` completed epochs (1-based).
    pub fn epoch_checkpoint(&self, epochs: u64) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epochs:04}.hdvk"))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f32>,
    pub last_checkpoint: PathBuf,
    pub store: ParamStore<f32>,
    pub model: ModelConfig,
}

/// Steps and warmup of each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

impl Schedule {
    pub fn new(cfg: &RunConfig) -> Self {
        let spe = cfg.steps_per_epoch();
        Schedule {
            steps_per_epoch: spe,
            stage1_steps: spe * cfg.train.stage1_epochs as u64,
            stage2_steps: spe * cfg.train.stage2_epochs as u64,
        }
    }

    pub fn stage(&self, step: u64) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }

    pub fn lr(&self, cfg: &RunConfig, step: u64) -> f64 {
        let (local, total) = match self.stage(step) {
            1 => (step, self.stage1_steps),
            _ => (step - self.stage1_steps, self.stage2_steps),
        };
        let warmup = (cfg.train.warmup_fraction * total as f64).round() as u64;
        lr_schedule(local, total, warmup, cfg.train.lr)
    }

    /// Optimizer steps already taken within the stage of `step`.
    fn local_step(&self, step: u64) -> u64 {
        if step <= self.stage1_steps {
            step
        } else {
            step - self.stage1_steps
        }
    }
}

/// Per-sample inputs, prepared sequentially so random draws happen in a
/// fixed order.
struct Prepared {
    segments: Vec<HybridSequence<f32>>,
    tokens: TokenSequence,
    mlm: Option<MlmBatch>,
}

struct SampleTape {
    tape: Tape<f32>,
    /// `[2, e]`: video embedding over text embedding.
    pair: Option<Var>,
    mlm: Option<Var>,
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: Datasets,
    model: ModelConfig,
    paths: RunPaths,
    schedule: Schedule,
    plan: SegmentPlan,
    store: ParamStore<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    step: u64,
    last_checkpoint: PathBuf,
    metrics: BufWriter<File>,
}

/// Drops log lines at or after `step`, so resuming inside an existing run
/// directory rewrites the tail instead of duplicating it.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: String = read_metrics(path)?
        .into_iter()
        .filter(|m| m.step < step)
        .map(|m| serde_json::to_string(&m).map(|l| l + "\n"))
        .collect::<serde_json::Result<_>>()?;
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training as configured, writing the metrics log,
/// vocabulary and checkpoints under `cfg.paths.out_dir`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    Trainer::new(cfg, resume)?.run()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, resume: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let data = build_datasets(cfg);
        let model = cfg.model_config(data.vocab.len())?;
        let paths = RunPaths::new(&cfg.paths.out_dir);
        std::fs::create_dir_all(paths.checkpoints()).map_err(|e| Error::io(paths.checkpoints(), e))?;
        std::fs::write(paths.vocab(), data.vocab.to_tsv()).map_err(|e| Error::io(paths.vocab(), e))?;
        let schedule = Schedule::new(cfg);
        let s = &cfg.sampling;
        let plan = sampling::plan_segments(cfg.data.frames, s.segment_count, s.frames_per_segment, s.lr_rate)?;
        let metrics_file = |append: bool| -> Result<BufWriter<File>> {
            let path = paths.metrics();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(f))
        };
        let mut trainer = match resume {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.step % schedule.steps_per_epoch != 0 {
                    return Err(Error::config(format!(
                        "checkpoint step {} is not at an epoch boundary of {} steps",
                        ck.step, schedule.steps_per_epoch
                    )));
                }
                let store = ck.params();
                crate::eval::check_compatible(&store, &model)?;
                truncate_metrics(&paths.metrics(), ck.step)?;
                let opt = AdamW::from_state(cfg.train.adamw(), schedule.local_step(ck.step), ck.moments());
                Trainer {
                    cfg,
                    data,
                    model,
                    schedule,
                    plan,
                    store,
                    opt,
                    rng: ck.rng.restore(),
                    step: ck.step,
                    last_checkpoint: path.to_path_buf(),
                    metrics: metrics_file(true)?,
                    paths,
                }
            }
            None => {
                let mut rng = stream_rng(cfg.seed, Stream::Train);
                let mut store = model::init_stage1(&model, &mut rng)?;
                if cfg.train.learn_temperature {
                    store.insert(LOGIT_SCALE, Tensor::from_f64(&[1], &[(1.0 / cfg.train.temperature).ln()])?);
                }
                let init = paths.init_checkpoint();
                Checkpoint::new(&store, None, 0, &rng).save(&init)?;
                Trainer {
                    cfg,
                    data,
                    model,
                    schedule,
                    plan,
                    store,
                    opt: AdamW::new(cfg.train.adamw()),
                    rng,
                    step: 0,
                    last_checkpoint: init,
                    metrics: metrics_file(false)?,
                    paths,
                }
            }
        };
        trainer.apply_freezing();
        Ok(trainer)
    }

    fn in_stage2(&self) -> bool {
        self.store.names().any(|n| n.starts_with(multimodal::PREFIX) || n.starts_with(MLM_PREFIX))
    }

    fn apply_freezing(&mut self) {
        self.store.unfreeze_all();
        if self.in_stage2() && self.cfg.train.freeze_contrastive_stage2 {
            for p in [VIDEO_PROJ, TEXT_PROJ, LOGIT_SCALE] {
                self.store.freeze_prefix(p);
            }
        }
    }

    /// Reloads the stage-1 checkpoint, adds the joint Transformer and MLM
    /// head, and starts a fresh optimizer.
    fn begin_stage2(&mut self) -> Result<()> {
        let stage1 = Checkpoint::load(&self.last_checkpoint)?.params();
        let mut store = stage1.clone();
        model::init_stage2(&mut store, &self.model, &mut self.rng)?;
        let dropped = stage1.missing_in(&store);
        let added = store.missing_in(&stage1);
        if !dropped.is_empty()
            || added.is_empty()
            || added.iter().any(|n| !n.starts_with(multimodal::PREFIX) && !n.starts_with(MLM_PREFIX))
        {
            return Err(Error::config(format!(
                "stage-2 parameters must extend stage 1 with the joint model only: dropped {dropped:?}, added {added:?}"
            )));
        }
        self.store = store;
        self.opt = AdamW::new(self.cfg.train.adamw());
        self.apply_freezing();
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainSummary> {
        let spe = self.schedule.steps_per_epoch;
        let total_epochs = (self.cfg.train.stage1_epochs + self.cfg.train.stage2_epochs) as u64;
        let class_ids: Vec<usize> = self.data.train.samples.iter().map(|s| s.class_id).collect();
        let b = self.cfg.train.batch_size;
        let mut last_loss = None;
        for epoch in self.step / spe..total_epochs {
            let stage = self.schedule.stage(self.step);
            if stage == 2 && !self.in_stage2() {
                self.begin_stage2()?;
            }
            let order = epoch_order(self.cfg.train.batch_sampler, &class_ids, &mut self.rng);
            for batch in order.chunks_exact(b).take(spe as usize) {
                let lr = self.schedule.lr(self.cfg, self.step);
                let loss = self.train_step(batch, stage)?;
                if !loss.is_finite() {
                    self.metrics.flush().map_err(|e| Error::io(self.paths.metrics(), e))?;
                    return Err(Error::NonFiniteLoss { step: self.step, loss });
                }
                self.opt.step(&mut self.store, lr)?;
                let line = StepMetrics {
                    step: self.step,
                    stage,
                    epoch,
                    loss,
                    lr,
                };
                writeln!(self.metrics, "{}", serde_json::to_string(&line)?)
                    .map_err(|e| Error::io(self.paths.metrics(), e))?;
                self.step += 1;
                last_loss = Some(loss);
            }
            self.metrics.flush().map_err(|e| Error::io(self.paths.metrics(), e))?;
            let path = self.paths.epoch_checkpoint(epoch + 1);
            Checkpoint::new(&self.store, Some(self.opt.state()), self.step, &self.rng).save(&path)?;
            self.last_checkpoint = path;
        }
        Ok(TrainSummary {
            steps: self.step,
            last_loss,
            last_checkpoint: self.last_checkpoint,
            store: self.store,
            model: self.model,
        })
    }

    fn prepare(&mut self, batch: &[usize], stage: u8) -> Result<Vec<Prepared>> {
        let opts = LoadOptions {
            crop: (self.cfg.sampling.crop_height, self.cfg.sampling.crop_width),
            mode: CropMode::Random,
            include_hr: self.cfg.sampling.use_hr,
        };
        batch
            .iter()
            .map(|&i| {
                let sample = &self.data.train.samples[i];
                let segments = sampling::load_frames(&self.plan, &sample.video, &opts, &mut self.rng)?;
                let tokens = self.data.train.tokens[i].clone();
                let mlm = (stage == 2).then(|| self.draw_mask(&tokens));
                Ok(Prepared { segments, tokens, mlm })
            })
            .collect()
    }

    /// Masks until at least one position is selected; a caption with no
    /// selection contributes no MLM signal.
    fn draw_mask(&mut self, tokens: &TokenSequence) -> MlmBatch {
        loop {
            let m = multimodal::mask_tokens(tokens, &self.data.vocab, &mut self.rng, self.cfg.train.mask_prob);
            if !m.positions.is_empty() {
                return m;
            }
        }
    }

    /// Forward and backward for one batch; leaves summed gradients in the
    /// store and returns the batch loss.
    fn train_step(&mut self, batch: &[usize], stage: u8) -> Result<f32> {
        let prepared = self.prepare(batch, stage)?;
        let contrastive = stage == 1 || self.cfg.train.joint_loss_stage2;
        let (store, model) = (&self.store, &self.model);
        let mut tapes = prepared
            .par_iter()
            .map(|p| forward_sample(store, model, p, contrastive))
            .collect::<Result<Vec<_>>>()?;
        let n = tapes.len();
        let mut loss = 0.0f32;
        let mut loss_tape = None;
        let mut pair_grads = Vec::new();
        if contrastive {
            let (value, lt, grads) = self.batch_contrastive(&tapes)?;
            loss += value;
            loss_tape = Some(lt);
            pair_grads = grads;
        }
        if stage == 2 {
            let mlm: f32 = tapes.iter().map(|t| t.tape.value(t.mlm.expect("stage-2 tape")).item()).sum();
            loss += mlm / n as f32;
        }
        let inv_n = 1.0 / n as f32;
        tapes.par_iter_mut().enumerate().try_for_each(|(i, s)| -> Result<()> {
            if let Some(m) = s.mlm {
                let shape = s.tape.shape(m).to_vec();
                s.tape.backward_with(m, &Tensor::full(&shape, inv_n))?;
            }
            if let Some(p) = s.pair {
                s.tape.backward_with(p, &pair_grads[i])?;
            }
            Ok(())
        })?;
        self.store.zero_grad();
        for s in &tapes {
            self.store.accumulate_from(&s.tape)?;
        }
        if let Some(lt) = &loss_tape {
            self.store.accumulate_from(lt)?;
        }
        Ok(loss)
    }

    /// Symmetric InfoNCE over the batch. Returns the loss, its tape, and the
    /// upstream gradient `[2, e]` for each sample's embedding pair.
    fn batch_contrastive(&self, tapes: &[SampleTape]) -> Result<(f32, Tape<f32>, Vec<Tensor<f32>>)> {
        let e = self.model.embed_dim();
        let n = tapes.len();
        let (mut v, mut t) = (Vec::with_capacity(n * e), Vec::with_capacity(n * e));
        for s in tapes {
            let d = s.tape.value(s.pair.expect("contrastive tape")).data();
            v.extend_from_slice(&d[..e]);
            t.extend_from_slice(&d[e..]);
        }
        let mut lt = Tape::new();
        let vv = lt.leaf(Tensor::new(vec![n, e], v)?.with_requires_grad());
        let tv = lt.leaf(Tensor::new(vec![n, e], t)?.with_requires_grad());
        let losses = if self.cfg.train.learn_temperature {
            let scale = lt.param(&self.store, LOGIT_SCALE)?;
            objectives::contrastive_loss_learned(&mut lt, vv, tv, scale)?
        } else {
            objectives::contrastive_loss(&mut lt, vv, tv, self.cfg.train.temperature as f32)?
        };
        let value = lt.value(losses.total).item();
        lt.backward(losses.total)?;
        let zeros = vec![0.0; n * e];
        let gv = lt.grad(vv).unwrap_or(&zeros);
        let gt = lt.grad(tv).unwrap_or(&zeros);
        let grads = (0..n)
            .map(|i| {
                let mut seed = gv[i * e..(i + 1) * e].to_vec();
                seed.extend_from_slice(&gt[i * e..(i + 1) * e]);
                Tensor::new(vec![2, e], seed)
            })
            .collect::<hdvila_core::Result<Vec<_>>>()?;
        Ok((value, lt, grads))
    }
}

fn forward_sample(store: &ParamStore<f32>, cfg: &ModelConfig, p: &Prepared, contrastive: bool) -> Result<SampleTape> {
    let mut tape = Tape::new();
    let video = model::video_forward(&mut tape, store, cfg, &p.segments)?;
    let pair = if contrastive {
        let text = model::text_forward(&mut tape, store, cfg, &p.tokens)?;
        Some(tape.concat_rows(&[video.embedding, text.embedding])?)
    } else {
        None
    };
    let mlm = match &p.mlm {
        Some(m) => {
            let corrupted = m.corrupted_sequence(&p.tokens.attention_mask);
            let logits = model::mlm_forward(&mut tape, store, cfg, &corrupted, &video.segments, &m.positions)?;
            Some(objectives::mlm_loss(&mut tape, logits, &m.targets())?)
        }
        None => None,
    };
    Ok(SampleTape { tape, pair, mlm })
}
