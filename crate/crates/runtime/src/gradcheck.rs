//! Gradient verification for the `grad-check` command.
//!
//! Every differentiable tape op and the full model down to each loss are
//! checked. The analytic gradient comes from the f32 tape; the reference is
//! a central difference of the f64 instance of the same function at the same
//! point, since f32 differences carry rounding noise near the tolerance.

use std::sync::Arc;

use hdvila_core::model::{self, ModelConfig, LOGIT_SCALE};
use hdvila_core::numerics::AttentionLayout;
use hdvila_core::objectives;
use hdvila_core::sampling::{self, CropMode, HybridSequence, LoadOptions};
use hdvila_core::text::{self, TokenSequence};
use hdvila_core::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{build_datasets, stream_rng, Stream};
use crate::error::Result;

pub const TOLERANCE: f64 = 1e-2;
const OP_EPS: f64 = 1e-3;
/// Smaller step for full forwards: a larger one can flip max-pool winners
/// in the HR adapter and straddle a kink.
const MODEL_EPS: f64 = 1e-4;
/// Largest f64 tape gradient still treated as identically zero.
const ZERO_GRAD: f64 = 1e-12;
/// Bound on both the f32 gradient and the difference quotient of such a
/// parameter.
const ZERO_GRAD_ABS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !(e.max_rel_error < self.tolerance))
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap_or(std::cmp::Ordering::Greater))
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Values drawn at f32 so both precisions evaluate the same point.
fn rt<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(f64::from(r.gen_range(-1.0f32..1.0))))
}

fn weighted_sum<T: Scalar>(t: &mut Tape<T>, y: Var, seed: u64) -> hdvila_core::Result<Var> {
    let w = t.constant(rt(t.shape(y), seed ^ 0x5eed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn<T> = Box<dyn Fn(&mut Tape<T>, Var) -> hdvila_core::Result<Var>>;

struct OpCase {
    name: &'static str,
    x: Tensor<f32>,
    f32: OpFn<f32>,
    f64: OpFn<f64>,
}

/// One op case; `S` is the scalar type inside the body.
macro_rules! case {
    ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            x: $x,
            f32: Box::new(|$t: &mut Tape<f32>, $v: Var| {
                #[allow(dead_code)]
                type S = f32;
                $body
            }),
            f64: Box::new(|$t: &mut Tape<f64>, $v: Var| {
                #[allow(dead_code)]
                type S = f64;
                $body
            }),
        }
    };
}

/// Distinct, well-separated values so a finite step never flips an argmax.
fn separated(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - n as f32 * 0.05).collect();
    vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

fn masked_layout() -> Arc<AttentionLayout> {
    Arc::new(AttentionLayout::full(4, 2, Some(vec![true, false, true, true])))
}

fn grouped_layout() -> Arc<AttentionLayout> {
    Arc::new(AttentionLayout {
        heads: 2,
        groups: vec![vec![0, 2, 4], vec![1, 3, 5]],
        key_mask: None,
    })
}

fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul (left)", rt(&[2, 3], 1), |t, x| {
            let b = t.constant(rt::<S>(&[3, 4], 2));
            let y = t.matmul(x, b)?;
            weighted_sum(t, y, 1)
        }),
        case!("matmul (right)", rt(&[3, 4], 3), |t, x| {
            let a = t.constant(rt::<S>(&[2, 3], 4));
            let y = t.matmul(a, x)?;
            weighted_sum(t, y, 2)
        }),
        case!("transpose", rt(&[2, 5], 5), |t, x| {
            let y = t.transpose(x)?;
            weighted_sum(t, y, 3)
        }),
        case!("reshape", rt(&[2, 6], 6), |t, x| {
            let y = t.reshape(x, &[3, 4])?;
            weighted_sum(t, y, 4)
        }),
        case!("linear (weight)", rt(&[3, 2], 7), |t, w| {
            let x = t.constant(rt::<S>(&[2, 2, 3], 8));
            let b = t.constant(rt::<S>(&[2], 9));
            let y = t.linear(x, w, Some(b))?;
            weighted_sum(t, y, 5)
        }),
        case!("add / sub / mul", rt(&[3, 3], 10), |t, x| {
            let c = t.constant(rt::<S>(&[3, 3], 11));
            let a = t.add(x, c)?;
            let s = t.sub(a, x)?;
            let s = t.add(s, x)?;
            let y = t.mul(s, x)?;
            weighted_sum(t, y, 6)
        }),
        case!("scale / add_scalar", rt(&[4], 12), |t, x| {
            let y = t.scale(x, S::lit(-1.5));
            let y = t.add_scalar(y, S::lit(0.25));
            weighted_sum(t, y, 7)
        }),
        case!("add_row", rt(&[3], 13), |t, b| {
            let x = t.constant(rt::<S>(&[2, 3], 14));
            let y = t.add_row(x, b)?;
            weighted_sum(t, y, 8)
        }),
        case!("add_channel", rt(&[2], 15), |t, b| {
            let x = t.constant(rt::<S>(&[2, 2, 3], 16));
            let y = t.add_channel(x, b)?;
            weighted_sum(t, y, 9)
        }),
        case!("gelu", rt(&[2, 4], 17), |t, x| {
            let y = t.gelu(x);
            weighted_sum(t, y, 10)
        }),
        case!("exp", rt(&[5], 18), |t, x| {
            let y = t.exp(x);
            weighted_sum(t, y, 11)
        }),
        case!("softmax", rt(&[2, 4], 19), |t, x| {
            let y = t.softmax(x, 1)?;
            weighted_sum(t, y, 12)
        }),
        case!("log_softmax", rt(&[3, 4], 20), |t, x| {
            let y = t.log_softmax(x, 1)?;
            weighted_sum(t, y, 13)
        }),
        case!("layer_norm (input)", rt(&[2, 5], 21), |t, x| {
            let g = t.constant(rt::<S>(&[5], 22));
            let b = t.constant(rt::<S>(&[5], 23));
            let y = t.layer_norm(x, g, b, S::lit(1e-5))?;
            weighted_sum(t, y, 14)
        }),
        case!("layer_norm (gain)", rt(&[4], 24), |t, g| {
            let x = t.constant(rt::<S>(&[3, 4], 25));
            let b = t.constant(rt::<S>(&[4], 26));
            let y = t.layer_norm(x, g, b, S::lit(1e-5))?;
            weighted_sum(t, y, 15)
        }),
        case!("l2_normalize_rows", rt(&[3, 4], 27), |t, x| {
            let y = t.l2_normalize_rows(x);
            weighted_sum(t, y, 16)
        }),
        case!("conv2d (input, stride 2)", rt(&[2, 5, 5], 28), |t, x| {
            let k = t.constant(rt::<S>(&[3, 2, 3, 3], 29));
            let y = t.conv2d(x, k, 2, 1)?;
            weighted_sum(t, y, 17)
        }),
        case!("conv2d (kernel)", rt(&[2, 2, 3, 3], 30), |t, k| {
            let x = t.constant(rt::<S>(&[2, 4, 4], 31));
            let y = t.conv2d(x, k, 1, 1)?;
            weighted_sum(t, y, 18)
        }),
        case!("max_pool2d", separated(&[2, 4, 6], 32), |t, x| {
            let y = t.max_pool2d(x)?;
            weighted_sum(t, y, 19)
        }),
        case!("interpolate_bilinear", rt(&[2, 3, 5], 33), |t, x| {
            let y = t.interpolate_bilinear(x, 6, 4)?;
            weighted_sum(t, y, 20)
        }),
        case!("embedding", rt(&[5, 3], 34), |t, table| {
            let y = t.embedding(table, &[4, 0, 4, 2])?;
            weighted_sum(t, y, 21)
        }),
        case!("select_rows / slice_rows", rt(&[4, 3], 35), |t, x| {
            let a = t.select_rows(x, &[3, 1, 3])?;
            let b = t.slice_rows(x, 1, 2)?;
            let y = t.concat_rows(&[a, b])?;
            weighted_sum(t, y, 22)
        }),
        case!("pick", rt(&[3, 4], 36), |t, x| {
            let y = t.pick(x, &[0, 3, 1])?;
            weighted_sum(t, y, 23)
        }),
        case!("concat_cols", rt(&[2, 3], 37), |t, x| {
            let c = t.constant(rt::<S>(&[2, 2], 38));
            let y = t.concat_cols(&[c, x, x])?;
            weighted_sum(t, y, 24)
        }),
        case!("sum / mean / mean_rows", rt(&[3, 2], 39), |t, x| {
            let m = t.mean_rows(x)?;
            let w = weighted_sum(t, m, 25)?;
            let s = t.sum(x);
            let mu = t.mean(x);
            let a = t.add(w, s)?;
            let a = t.mul(a, mu)?;
            Ok(a)
        }),
        case!("attention (query, masked)", rt(&[4, 4], 40), |t, q| {
            let k = t.constant(rt::<S>(&[4, 4], 41));
            let v = t.constant(rt::<S>(&[4, 4], 42));
            let y = t.attention(q, k, v, masked_layout())?;
            weighted_sum(t, y, 26)
        }),
        case!("attention (key, masked)", rt(&[4, 4], 43), |t, k| {
            let q = t.constant(rt::<S>(&[4, 4], 44));
            let v = t.constant(rt::<S>(&[4, 4], 45));
            let y = t.attention(q, k, v, masked_layout())?;
            weighted_sum(t, y, 27)
        }),
        case!("attention (self, grouped)", rt(&[6, 4], 46), |t, x| {
            let y = t.attention(x, x, x, grouped_layout())?;
            weighted_sum(t, y, 28)
        }),
    ]
}

fn check_op(case: &OpCase) -> Result<CheckEntry> {
    let mut tape = Tape::new();
    let xv = tape.leaf(case.x.clone().with_requires_grad());
    let out = (case.f32)(&mut tape, xv)?;
    tape.backward(out)?;
    let n = case.x.numel();
    let analytic: Vec<f64> = tape
        .grad(xv)
        .map(|g| g.iter().map(|&v| f64::from(v)).collect())
        .unwrap_or_else(|| vec![0.0; n]);
    let value = |p: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let out = (case.f64)(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut probe = case.x.cast::<f64>();
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + OP_EPS;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - OP_EPS;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * OP_EPS);
        let e = rel_error(analytic[i], numeric);
        if e > worst || e.is_nan() {
            worst = e;
        }
    }
    Ok(CheckEntry {
        name: format!("op {}", case.name),
        coords: n,
        max_rel_error: worst,
    })
}

/// Fixed model inputs at both precisions.
struct ModelInputs {
    cfg: ModelConfig,
    temperature: f64,
    segments32: Vec<Vec<HybridSequence<f32>>>,
    segments64: Vec<Vec<HybridSequence<f64>>>,
    tokens: Vec<TokenSequence>,
    corrupted: TokenSequence,
    positions: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Loss {
    Contrastive,
    LearnedTemperature,
    Mlm,
}

impl Loss {
    fn name(self) -> &'static str {
        match self {
            Loss::Contrastive => "contrastive",
            Loss::LearnedTemperature => "contrastive, learned temperature",
            Loss::Mlm => "mlm",
        }
    }
}

fn model_loss<T: Scalar>(
    inp: &ModelInputs,
    segments: &[Vec<HybridSequence<T>>],
    loss: Loss,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
) -> hdvila_core::Result<Var> {
    match loss {
        Loss::Contrastive | Loss::LearnedTemperature => {
            let mut vs = Vec::new();
            let mut ts = Vec::new();
            for (segs, tok) in segments.iter().zip(&inp.tokens) {
                vs.push(model::video_forward(tape, store, &inp.cfg, segs)?.embedding);
                ts.push(model::text_forward(tape, store, &inp.cfg, tok)?.embedding);
            }
            let v = tape.concat_rows(&vs)?;
            let t = tape.concat_rows(&ts)?;
            let l = if loss == Loss::Contrastive {
                objectives::contrastive_loss(tape, v, t, T::lit(inp.temperature))?
            } else {
                let s = tape.param(store, LOGIT_SCALE)?;
                objectives::contrastive_loss_learned(tape, v, t, s)?
            };
            Ok(l.total)
        }
        Loss::Mlm => {
            let video = model::video_forward(tape, store, &inp.cfg, &segments[0])?;
            let logits = model::mlm_forward(tape, store, &inp.cfg, &inp.corrupted, &video.segments, &inp.positions)?;
            objectives::mlm_loss(tape, logits, &inp.labels)
        }
    }
}

/// Largest-gradient coordinates first, then random ones among those with a
/// non-negligible gradient; coordinates with no gradient carry no signal for
/// a relative check.
fn pick_coords(grad: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if max == 0.0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-3 * max).collect();
    idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    let mut out = vec![idx[0]];
    let mut rest = idx[1..].to_vec();
    rest.shuffle(rng);
    out.extend(rest.into_iter().take(count.saturating_sub(1)));
    out
}

/// Checks every parameter that a loss reaches, `coords_per_param`
/// coordinates each.
fn check_model(inp: &ModelInputs, store: &ParamStore<f32>, coords_per_param: usize, rng: &mut impl Rng) -> Result<Vec<CheckEntry>> {
    let store64: ParamStore<f64> = store.cast();
    let mut entries = Vec::new();
    let mut covered = std::collections::BTreeSet::new();
    for loss in [Loss::Contrastive, Loss::LearnedTemperature, Loss::Mlm] {
        let mut tape = Tape::new();
        let out = model_loss(inp, &inp.segments32, loss, &mut tape, store)?;
        tape.backward(out)?;
        let mut t64 = Tape::new();
        let out64 = model_loss(inp, &inp.segments64, loss, &mut t64, &store64)?;
        t64.backward(out64)?;
        for (name, var) in tape.params().to_vec() {
            let n = store.get(&name)?.numel();
            let g32: Vec<f64> = tape
                .grad(var)
                .map(|g| g.iter().map(|&v| f64::from(v)).collect())
                .unwrap_or_else(|| vec![0.0; n]);
            let var64 = t64.params().iter().find(|(n, _)| *n == name).expect("same params").1;
            let g64: Vec<f64> = t64.grad(var64).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let max64 = g64.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            // A gradient that vanishes identically (a key bias under softmax,
            // attention over a single token) has no relative scale; there the
            // f32 value and the difference quotient must both be ~0.
            let structural_zero = max64 < ZERO_GRAD;
            let coords = if structural_zero {
                vec![0, g64.len() - 1]
            } else {
                pick_coords(&g64, coords_per_param, rng)
            };
            let mut probe = store64.clone();
            let mut worst = 0.0f64;
            for &i in &coords {
                let orig = probe.get(&name)?.data()[i];
                let mut eval = |v: f64| -> Result<f64> {
                    probe.get_mut(&name)?.data_mut()[i] = v;
                    let mut t = Tape::new();
                    let out = model_loss(inp, &inp.segments64, loss, &mut t, &probe)?;
                    Ok(t.value(out).item())
                };
                let plus = eval(orig + MODEL_EPS)?;
                let minus = eval(orig - MODEL_EPS)?;
                eval(orig)?;
                let numeric = (plus - minus) / (2.0 * MODEL_EPS);
                let e = if structural_zero {
                    if g32[i].abs().max(numeric.abs()) < ZERO_GRAD_ABS {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    rel_error(g32[i], numeric)
                };
                if e > worst || e.is_nan() {
                    worst = e;
                }
            }
            covered.insert(name.clone());
            let kind = if structural_zero { ", zero gradient" } else { "" };
            entries.push(CheckEntry {
                name: format!("{name} ({}{kind})", loss.name()),
                coords: coords.len(),
                max_rel_error: worst,
            });
        }
    }
    for name in store.names().filter(|n| !covered.contains(*n)) {
        entries.push(CheckEntry {
            name: format!("{name} (no loss reaches it)"),
            coords: 0,
            max_rel_error: f64::INFINITY,
        });
    }
    Ok(entries)
}

fn widen(q: &HybridSequence<f32>) -> HybridSequence<f64> {
    HybridSequence {
        indices: q.indices.clone(),
        hr_image: q.hr_image.as_ref().map(Tensor::cast),
        lr_images: q.lr_images.iter().map(Tensor::cast).collect(),
        crop_origin: q.crop_origin,
    }
}

/// Builds the full stage-2 model for `cfg` (plus a learned temperature) on
/// two synthetic clips and checks every op and every parameter.
pub fn grad_check(cfg: &RunConfig, coords_per_param: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let data = build_datasets(cfg);
    let model_cfg = cfg.model_config(data.vocab.len())?;
    let mut rng = stream_rng(cfg.seed, Stream::Train);
    let mut store: ParamStore<f32> = model::init_stage1(&model_cfg, &mut rng)?;
    model::init_stage2(&mut store, &model_cfg, &mut rng)?;
    store.insert(LOGIT_SCALE, Tensor::from_f64(&[1], &[(1.0 / cfg.train.temperature).ln()])?);
    let s = &cfg.sampling;
    let plan = sampling::plan_segments(cfg.data.frames, s.segment_count, s.frames_per_segment, s.lr_rate)?;
    let opts = LoadOptions {
        crop: (s.crop_height, s.crop_width),
        mode: CropMode::Random,
        include_hr: s.use_hr,
    };
    let samples = &data.train.samples[..2.min(data.train.len())];
    let mut segments32 = Vec::new();
    let mut segments64 = Vec::new();
    for sm in samples {
        let segs: Vec<HybridSequence<f32>> = sampling::load_frames(&plan, &sm.video, &opts, &mut rng)?;
        segments64.push(segs.iter().map(widen).collect());
        segments32.push(segs);
    }
    let tokens: Vec<TokenSequence> = data.train.tokens[..samples.len()].to_vec();
    let mut corrupted = tokens[0].clone();
    let positions: Vec<usize> = (1..corrupted.ids.len()).step_by(2).collect();
    let labels = positions.iter().map(|&p| corrupted.ids[p]).collect();
    for &p in &positions {
        corrupted.ids[p] = text::MASK;
    }
    let inp = ModelInputs {
        cfg: model_cfg,
        temperature: cfg.train.temperature,
        segments32,
        segments64,
        tokens,
        corrupted,
        positions,
        labels,
    };
    let mut entries = op_cases().iter().map(check_op).collect::<Result<Vec<_>>>()?;
    entries.extend(check_model(&inp, &store, coords_per_param, &mut rng)?);
    Ok(GradCheckReport {
        tolerance: TOLERANCE,
        entries,
    })
}
