#![allow(dead_code)]
pub mod reference;

use hdvila_core::model::ModelConfig;
use hdvila_core::numerics::{check_with, GradCheckReport, Tape, Tensor, Var};
use hdvila_core::params::ParamStore;
use hdvila_core::text::TextStackConfig;
use hdvila_core::video::{HybridTransformerConfig, StagedEncoderConfig, VideoEncoderConfig};
use hdvila_core::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0f32..1.0))
}

pub fn rand_tensor64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0f64..1.0))
}

/// f32 random values at any precision, so both precisions see one point.
pub fn rt<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    rand_tensor(shape, seed).cast()
}

/// Random weighted sum of `y`; a scalar whose gradient reaches every element.
pub fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, y: Var, seed: u64) -> Result<Var> {
    let w = rt::<S>(tape.shape(y), seed ^ 0x5eed);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Builds one scalar function at f32 and at f64; `S` names the scalar type
/// inside the body.
#[macro_export]
macro_rules! dual {
    (|$t:ident, $x:ident| $body:expr) => {
        (
            |$t: &mut Tape<f32>, $x: Var| -> Result<Var> {
                #[allow(dead_code)]
                type S = f32;
                $body
            },
            |$t: &mut Tape<f64>, $x: Var| -> Result<Var> {
                #[allow(dead_code)]
                type S = f64;
                $body
            },
        )
    };
}

/// Central differences of the f64 instance at `eps` against the f32 tape
/// gradient at the same point. The relative error formula is the one used by
/// `finite_diff_check`.
pub fn dual_check<F32, F64>(x: &Tensor<f32>, f32: F32, f64: F64, eps: f64, coords: &[usize]) -> GradCheckReport<f64>
where
    F32: Fn(&mut Tape<f32>, Var) -> Result<Var>,
    F64: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let value = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(p.clone());
        let out = f64(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };
    let value_and_grad = |p: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(p.cast::<f32>().with_requires_grad());
        let out = f32(&mut tape, xv)?;
        tape.backward(out)?;
        let g = tape.grad(xv).map(|g| g.iter().map(|&v| v as f64).collect()).unwrap_or_else(|| vec![0.0; p.numel()]);
        Ok((value(p)?, g))
    };
    check_with(value_and_grad, value, &x.cast(), eps, coords).unwrap()
}

/// [`dual_check`] w.r.t. coordinates of one named parameter of an f32 store.
pub fn dual_param_check<F32, F64>(
    store: &ParamStore<f32>,
    name: &str,
    coords: &[usize],
    eps: f64,
    f32: F32,
    f64: F64,
) -> GradCheckReport<f64>
where
    F32: Fn(&mut Tape<f32>, &ParamStore<f32>) -> Result<Var>,
    F64: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let store64 = store.cast::<f64>();
    let value = |p: &Tensor<f64>| -> Result<f64> {
        let mut s = store64.clone();
        *s.get_mut(name).unwrap() = p.clone();
        let mut tape = Tape::new();
        let out = f64(&mut tape, &s)?;
        Ok(tape.value(out).item())
    };
    let value_and_grad = |p: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
        let mut s = store.clone();
        *s.get_mut(name).unwrap() = p.cast();
        let mut tape = Tape::new();
        let out = f32(&mut tape, &s)?;
        tape.backward(out)?;
        let var = tape.params().iter().find(|(n, _)| n == name).map(|(_, v)| *v);
        let g = var
            .and_then(|v| tape.grad(v).map(|g| g.iter().map(|&x| x as f64).collect()))
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        Ok((value(p)?, g))
    };
    check_with(value_and_grad, value, &store64.get(name).unwrap().clone(), eps, coords).unwrap()
}

/// Toy model: 128x128 HR crops (2x2 grid), hidden 8.
pub fn toy_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        video: VideoEncoderConfig {
            hr: StagedEncoderConfig { channels: vec![4, 4, 6, 6] },
            lr: StagedEncoderConfig { channels: vec![4, 4, 6] },
            hybrid: HybridTransformerConfig {
                layers: 1,
                heads: 2,
                hidden: 8,
                mlp_ratio: 2,
            },
            crop: (128, 128),
            lr_per_side: 1,
            use_hr: true,
        },
        text: TextStackConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            max_len: 8,
            mlp_ratio: 2,
            vocab_size,
            embed_dim: 6,
        },
        joint_layers: 1,
        joint_heads: 2,
    }
}

/// A spread of flat coordinates: first, last and a few seeded picks.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut c = vec![0, n - 1];
    c.extend((0..k).map(|_| r.gen_range(0..n)));
    c.sort_unstable();
    c.dedup();
    c
}
