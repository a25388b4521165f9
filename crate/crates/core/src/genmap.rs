//! Mapping video/text embeddings into a generator's extended latent space.
//!
//! The generator and the image losses are external models; they enter through
//! the [`Generator`] and [`ImageLoss`] traits and are never trained here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{kernels, Tape, Tensor, Var};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const PREFIX: &str = "mapper";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapperConfig {
    /// Layer widths from the input embedding to the flattened latent.
    pub dims: Vec<usize>,
    /// `(layers, width)` of the extended latent code.
    pub latent: (usize, usize),
}

impl MapperConfig {
    pub fn full_scale() -> Self {
        MapperConfig {
            dims: vec![1024, 512, 512, 18 * 512],
            latent: (18, 512),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::invalid("mapper needs at least one non-empty layer"));
        }
        let last = *self.dims.last().expect("len >= 2");
        if last != self.latent.0 * self.latent.1 {
            return Err(Error::invalid(format!(
                "mapper output {last} does not fill a {}x{} latent",
                self.latent.0, self.latent.1
            )));
        }
        Ok(())
    }
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &MapperConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    for (i, w) in cfg.dims.windows(2).enumerate() {
        nn::init_linear(store, &format!("{PREFIX}.fc{i}"), w[0], w[1], rng);
    }
    Ok(())
}

/// MLP with GELU between layers, reshaped to the latent grid.
pub fn map_embedding<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &MapperConfig, e: Var) -> Result<Var> {
    let n = tape.value(e).numel();
    if n != cfg.dims[0] {
        return Err(Error::shape("map_embedding", cfg.dims[0], n));
    }
    let mut x = tape.reshape(e, &[1, n])?;
    let layers = cfg.dims.len() - 1;
    for i in 0..layers {
        x = nn::linear(tape, store, &format!("{PREFIX}.fc{i}"), x)?;
        if i + 1 < layers {
            x = tape.gelu(x);
        }
    }
    tape.reshape(x, &[cfg.latent.0, cfg.latent.1])
}

/// Text-guided edit code `w_v + w_t`.
pub fn combine_latents<T: Scalar>(tape: &mut Tape<T>, w_v: Var, w_t: Var) -> Result<Var> {
    tape.add(w_v, w_t)
}

/// Frozen image generator with a vector-Jacobian product.
pub trait Generator<T>: Sync {
    fn name(&self) -> &str;
    fn generate(&self, latent: &Tensor<T>) -> Result<Tensor<T>>;
    /// Gradient w.r.t. `latent` given the gradient w.r.t. the generated image.
    fn backprop(&self, latent: &Tensor<T>, d_image: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Frozen image-space loss against a target image.
pub trait ImageLoss<T>: Sync {
    fn name(&self) -> &str;
    fn loss(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<T>;
    fn grad(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l2: f64,
    pub id: f64,
    pub lpips: f64,
    /// Optional text-image matching term; off by default.
    pub matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l2: 0.1,
            id: 1.0,
            lpips: 0.8,
            matching: 0.0,
        }
    }
}

pub struct Backends<'a, T> {
    pub generator: &'a dyn Generator<T>,
    pub identity: &'a dyn ImageLoss<T>,
    pub perceptual: &'a dyn ImageLoss<T>,
    pub matching: Option<&'a dyn ImageLoss<T>>,
}

#[derive(Clone, Debug)]
pub struct CompositeLoss<T> {
    pub total: T,
    pub l2: T,
    pub id: T,
    pub lpips: T,
    pub matching: T,
    /// Gradient of `total` w.r.t. the output image.
    pub d_image: Tensor<T>,
}

/// Attaches the backend name to a failure, keeping errors that already name one.
fn tagged<V>(name: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        e @ Error::Backend { .. } => e,
        e => Error::Backend {
            name: name.to_string(),
            reason: e.to_string(),
        },
    })
}

pub fn mse<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_same(output, target)?;
    let s: T = output.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::from_usize_lossy(output.numel()))
}

pub fn mse_grad<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(output, target)?;
    let k = T::lit(2.0) / T::from_usize_lossy(output.numel());
    let data = output.data().iter().zip(target.data()).map(|(&a, &b)| k * (a - b)).collect();
    Tensor::new(output.shape().to_vec(), data)
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("image loss", format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(())
}

/// `λ1·L2 + λ2·ID + λ3·LPIPS (+ λ4·match)` and its image gradient.
pub fn composite_loss<T: Scalar>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    backends: &Backends<'_, T>,
) -> Result<CompositeLoss<T>> {
    let l2 = mse(output, target)?;
    let id = tagged(backends.identity.name(), backends.identity.loss(output, target))?;
    let lpips = tagged(backends.perceptual.name(), backends.perceptual.loss(output, target))?;
    let mut d = mse_grad(output, target)?.map(|g| g * T::lit(weights.l2));
    let mut add = |g: Tensor<T>, w: f64| -> Result<()> {
        check_same(&g, output)?;
        for (a, &b) in d.data_mut().iter_mut().zip(g.data()) {
            *a += T::lit(w) * b;
        }
        Ok(())
    };
    add(tagged(backends.identity.name(), backends.identity.grad(output, target))?, weights.id)?;
    add(tagged(backends.perceptual.name(), backends.perceptual.grad(output, target))?, weights.lpips)?;
    let mut matching = T::zero();
    if let Some(m) = backends.matching.filter(|_| weights.matching != 0.0) {
        matching = tagged(m.name(), m.loss(output, target))?;
        add(tagged(m.name(), m.grad(output, target))?, weights.matching)?;
    }
    let total = T::lit(weights.l2) * l2 + T::lit(weights.id) * id + T::lit(weights.lpips) * lpips + T::lit(weights.matching) * matching;
    if !total.is_finite() {
        return Err(Error::NonFinite("composite generation loss".into()));
    }
    Ok(CompositeLoss {
        total,
        l2,
        id,
        lpips,
        matching,
        d_image: d,
    })
}

/// Forward pass for one embedding: latent code, generated image and loss, with
/// the mapper gradients accumulated on `tape`.
pub fn reconstruction_pass<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &MapperConfig,
    embedding: Var,
    target: &Tensor<T>,
    weights: &LossWeights,
    backends: &Backends<'_, T>,
) -> Result<CompositeLoss<T>> {
    let w = map_embedding(tape, store, cfg, embedding)?;
    let latent = tape.value(w).clone();
    let g = backends.generator;
    let image = tagged(g.name(), g.generate(&latent))?;
    let loss = composite_loss(&image, target, weights, backends)?;
    let d_latent = tagged(g.name(), g.backprop(&latent, &loss.d_image))?;
    tape.backward_with(w, &d_latent)?;
    Ok(loss)
}

/// One optimizer step on the mapper over a batch of `(embedding, target)`
/// pairs; returns the mean composite loss. Only `mapper.*` parameters move.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &MapperConfig,
    batch: &[(Tensor<T>, Tensor<T>)],
    weights: &LossWeights,
    backends: &Backends<'_, T>,
    opt: &mut AdamW<T>,
    lr: f64,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty generation batch"));
    }
    store.zero_grad();
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut total = T::zero();
    for (e, target) in batch {
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let loss = reconstruction_pass(&mut tape, store, cfg, ev, target, weights, backends)?;
        total += loss.total * inv;
        for (name, var) in tape.params() {
            if let Some(g) = tape.grad(*var) {
                let scaled: Vec<T> = g.iter().map(|&x| x * inv).collect();
                store.get_mut(name)?.accumulate_grad(&scaled);
            }
        }
    }
    opt.step(store, lr)?;
    Ok(total)
}

/// Linear generator `image = reshape(latent · W)`; a deterministic stand-in
/// for a frozen pretrained network.
#[derive(Clone, Debug)]
pub struct LinearGenerator<T> {
    /// `[latent_numel, image_numel]`
    pub weight: Tensor<T>,
    pub image_shape: Vec<usize>,
}

impl<T: Scalar> LinearGenerator<T> {
    pub fn random(latent_numel: usize, image_shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = image_shape.iter().product();
        let bound = 1.0 / (latent_numel as f64).sqrt();
        LinearGenerator {
            weight: crate::params::uniform(&[latent_numel, n], bound, rng),
            image_shape: image_shape.to_vec(),
        }
    }
}

impl<T: Scalar> Generator<T> for LinearGenerator<T> {
    fn name(&self) -> &str {
        "linear-generator"
    }

    fn generate(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        if latent.numel() != k {
            return Err(Error::shape("generator", k, latent.numel()));
        }
        let out = kernels::matmul(latent.data(), self.weight.data(), 1, k, n);
        Tensor::new(self.image_shape.clone(), out)
    }

    fn backprop(&self, latent: &Tensor<T>, d_image: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        if d_image.numel() != n {
            return Err(Error::shape("generator backprop", n, d_image.numel()));
        }
        let out = kernels::matmul_bt(d_image.data(), self.weight.data(), 1, n, k);
        Tensor::new(latent.shape().to_vec(), out)
    }
}

/// Plain MSE exposed as an [`ImageLoss`]; stands in for the identity and
/// perceptual networks in tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct MseLoss;

impl<T: Scalar> ImageLoss<T> for MseLoss {
    fn name(&self) -> &str {
        "mse"
    }

    fn loss(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        mse(output, target)
    }

    fn grad(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        mse_grad(output, target)
    }
}

/// Mean-intensity loss `(mean(out) - mean(target))^2`; a cheap perceptual
/// stand-in with a non-trivial gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanIntensityLoss;

impl<T: Scalar> ImageLoss<T> for MeanIntensityLoss {
    fn name(&self) -> &str {
        "mean-intensity"
    }

    fn loss(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        check_same(output, target)?;
        let n = T::from_usize_lossy(output.numel());
        let d = output.data().iter().copied().sum::<T>() / n - target.data().iter().copied().sum::<T>() / n;
        Ok(d * d)
    }

    fn grad(&self, output: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        check_same(output, target)?;
        let n = T::from_usize_lossy(output.numel());
        let d = output.data().iter().copied().sum::<T>() / n - target.data().iter().copied().sum::<T>() / n;
        Ok(Tensor::full(output.shape(), T::lit(2.0) * d / n))
    }
}
