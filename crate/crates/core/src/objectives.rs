//! Video-level pooling, the bidirectional contrastive loss and the MLM loss.

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Tape, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const VIDEO_PROJ: &str = "video.proj";

/// Default contrastive temperature.
pub const TEMPERATURE: f64 = 0.05;

/// Video embedding `[1, e]`: token mean per segment, projection, mean over
/// segments, then L2 normalization.
pub fn video_embedding<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, segments: &[Var]) -> Result<Var> {
    if segments.is_empty() {
        return Err(Error::invalid("video embedding needs at least one segment"));
    }
    let mut acc: Option<Var> = None;
    for &v in segments {
        let pooled = tape.mean_rows(v)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        let e = nn::linear(tape, store, VIDEO_PROJ, pooled)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    let mean = tape.scale(acc.expect("non-empty"), T::one() / T::from_usize_lossy(segments.len()));
    Ok(tape.l2_normalize_rows(mean))
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLosses {
    pub v2t: Var,
    pub t2v: Var,
    /// `(v2t + t2v) / 2`
    pub total: Var,
}

/// Symmetric InfoNCE over a `[B, B]` logit matrix whose diagonal holds the
/// matched pairs.
pub fn contrastive_from_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<ContrastiveLosses> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("contrastive_loss", "square [B, B] logits", format!("{s:?}")));
    }
    let diag: Vec<usize> = (0..s[0]).collect();
    let rows = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(rows, &diag)?;
    let mean = tape.mean(picked);
    let v2t = tape.scale(mean, -T::one());
    let lt = tape.transpose(logits)?;
    let cols = tape.log_softmax(lt, 1)?;
    let picked = tape.pick(cols, &diag)?;
    let mean = tape.mean(picked);
    let t2v = tape.scale(mean, -T::one());
    let sum = tape.add(v2t, t2v)?;
    let total = tape.scale(sum, T::lit(0.5));
    Ok(ContrastiveLosses { v2t, t2v, total })
}

fn check_unit_rows<T: Scalar>(tape: &Tape<T>, x: Var, what: &str) -> Result<()> {
    let v = tape.value(x);
    let d = *v.shape().last().expect("rank >= 1");
    let tol = T::lit(1e-4);
    for r in 0..v.numel() / d {
        let n = v.data()[r * d..(r + 1) * d].iter().map(|&a| a * a).sum::<T>().sqrt();
        if (n - T::one()).abs() > tol {
            return Err(Error::invalid(format!("{what} row {r} is not unit-norm (norm {n})")));
        }
    }
    Ok(())
}

/// Contrastive loss for unit-norm `v, t: [B, e]` at fixed temperature `tau`.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, v: Var, t: Var, tau: T) -> Result<ContrastiveLosses> {
    if !(tau > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(tape, v, "video embedding")?;
    check_unit_rows(tape, t, "text embedding")?;
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(v, tt)?;
    let logits = tape.scale(sim, T::one() / tau);
    contrastive_from_logits(tape, logits)
}

/// Contrastive loss with a learnable log inverse temperature `[1]`.
pub fn contrastive_loss_learned<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    log_inv_tau: Var,
) -> Result<ContrastiveLosses> {
    check_unit_rows(tape, v, "video embedding")?;
    check_unit_rows(tape, t, "text embedding")?;
    let b = tape.shape(v)[0];
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(v, tt)?;
    let inv_tau = tape.exp(log_inv_tau);
    let ones = tape.constant(crate::numerics::Tensor::ones(&[b * b, 1]));
    let inv_tau = tape.reshape(inv_tau, &[1, 1])?;
    let scale = tape.matmul(ones, inv_tau)?;
    let scale = tape.reshape(scale, &[b, b])?;
    let logits = tape.mul(sim, scale)?;
    contrastive_from_logits(tape, logits)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn mlm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::invalid("MLM loss needs at least one labeled position"));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lsm, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}
