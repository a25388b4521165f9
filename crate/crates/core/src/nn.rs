//! Parameter-path helpers for the layers shared by every Transformer stack.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{AttentionLayout, Tape, Tensor, Var};
use crate::params::{glorot, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

pub fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    store.insert(join(prefix, "weight"), glorot(&[fan_in, fan_out], fan_in, fan_out, rng));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[fan_out]));
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &join(prefix, "weight"))?;
    let b = tape.param(store, &join(prefix, "bias"))?;
    tape.linear(x, w, Some(b))
}

pub fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(join(prefix, "gain"), Tensor::ones(&[d]));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[d]));
}

pub fn norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &join(prefix, "gain"))?;
    let b = tape.param(store, &join(prefix, "bias"))?;
    tape.layer_norm(x, g, b, T::lit(LN_EPS))
}

pub fn init_attention<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &join(prefix, proj), d, d, rng);
    }
}

/// Multi-head self-attention with output projection.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    layout: Arc<AttentionLayout>,
) -> Result<Var> {
    let q = linear(tape, store, &join(prefix, "q"), x)?;
    let k = linear(tape, store, &join(prefix, "k"), x)?;
    let v = linear(tape, store, &join(prefix, "v"), x)?;
    let o = tape.attention(q, k, v, layout)?;
    linear(tape, store, &join(prefix, "o"), o)
}

pub fn init_mlp<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) {
    init_linear(store, &join(prefix, "fc1"), d, hidden, rng);
    init_linear(store, &join(prefix, "fc2"), hidden, d, rng);
}

pub fn mlp<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &join(prefix, "fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &join(prefix, "fc2"), h)
}

/// Parameters of one pre-norm self-attention block.
pub fn init_encoder_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
    rng: &mut impl Rng,
) {
    init_norm(store, &join(prefix, "attn_norm"), d);
    init_attention(store, &join(prefix, "attn"), d, rng);
    init_norm(store, &join(prefix, "mlp_norm"), d);
    init_mlp(store, &join(prefix, "mlp"), d, mlp_hidden, rng);
}

/// `x + attn(norm(x))`, then `x + mlp(norm(x))`.
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    layout: Arc<AttentionLayout>,
) -> Result<Var> {
    let h = norm(tape, store, &join(prefix, "attn_norm"), x)?;
    let h = attention(tape, store, &join(prefix, "attn"), h, layout)?;
    let x = tape.add(x, h)?;
    let h = norm(tape, store, &join(prefix, "mlp_norm"), x)?;
    let h = mlp(tape, store, &join(prefix, "mlp"), h)?;
    tape.add(x, h)
}
