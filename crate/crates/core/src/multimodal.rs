//! Joint text-video Transformer, BERT-style token masking, the MLM head and
//! cross-segment consensus.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, join};
use crate::numerics::{AttentionLayout, Tape, Var};
use crate::params::{uniform, ParamStore};
use crate::scalar::Scalar;
use crate::text::{TextOutput, TokenSequence, Vocab, CLS, MASK};

pub const PREFIX: &str = "mm";
pub const MLM_PREFIX: &str = "mlm";

/// Default probability of selecting a token for prediction.
pub const MASK_PROB: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    /// Video token grid `(h, w)`.
    pub grid: (usize, usize),
    pub vocab_size: usize,
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "joint hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Joint stack, 2D video position table and MLM head parameters.
pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &JointConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden;
    store.insert(join(PREFIX, "pos2d"), uniform(&[cfg.grid.0 * cfg.grid.1, d], 0.02, rng));
    for l in 0..cfg.layers {
        nn::init_encoder_block(store, &format!("{PREFIX}.layer{l}"), d, d * cfg.mlp_ratio, rng);
    }
    nn::init_norm(store, &join(PREFIX, "final_norm"), d);
    nn::init_linear(store, &join(MLM_PREFIX, "fc1"), d, d, rng);
    nn::init_linear(store, &join(MLM_PREFIX, "fc2"), d, cfg.vocab_size, rng);
    Ok(())
}

/// Full bidirectional attention over `[text_states; video_tokens + pos2d]`.
/// Padding text slots are masked out as keys.
pub fn joint_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &JointConfig,
    text: &TextOutput,
    video_tokens: Var,
) -> Result<Var> {
    let ts = tape.shape(text.states).to_vec();
    let vs = tape.shape(video_tokens).to_vec();
    let hw = cfg.grid.0 * cfg.grid.1;
    if ts.len() != 2 || vs.len() != 2 || ts[1] != cfg.hidden || vs[1] != cfg.hidden {
        return Err(Error::shape(
            "joint_forward",
            format!("hidden {}", cfg.hidden),
            format!("text {ts:?}, video {vs:?}"),
        ));
    }
    if vs[0] != hw || text.mask.len() != ts[0] {
        return Err(Error::shape("joint_forward", format!("{hw} video tokens"), vs[0]));
    }
    let pos = tape.param(store, &join(PREFIX, "pos2d"))?;
    let video = tape.add(video_tokens, pos)?;
    let mut x = tape.concat_rows(&[text.states, video])?;
    let mut mask = text.mask.clone();
    mask.extend(std::iter::repeat_n(true, hw));
    let layout = Arc::new(AttentionLayout::full(ts[0] + hw, cfg.heads, Some(mask)));
    for l in 0..cfg.layers {
        x = nn::encoder_block(tape, store, &format!("{PREFIX}.layer{l}"), x, layout.clone())?;
    }
    nn::norm(tape, store, &join(PREFIX, "final_norm"), x)
}

/// Corruption of one token sequence for masked language modeling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmBatch {
    pub original: Vec<usize>,
    pub corrupted: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Option<usize>>,
}

impl MlmBatch {
    /// Label ids in `positions` order.
    pub fn targets(&self) -> Vec<usize> {
        self.positions.iter().map(|&p| self.labels[p].expect("label at masked position")).collect()
    }

    pub fn corrupted_sequence(&self, mask: &[u8]) -> TokenSequence {
        TokenSequence {
            ids: self.corrupted.clone(),
            attention_mask: mask.to_vec(),
        }
    }
}

/// Selects each real non-`[CLS]` token with probability `mask_prob`; of the
/// selected, 80% become `[MASK]`, 10% a uniformly random word and 10% stay.
pub fn mask_tokens(seq: &TokenSequence, vocab: &Vocab, rng: &mut impl Rng, mask_prob: f64) -> MlmBatch {
    let words = vocab.word_ids();
    let mut corrupted = seq.ids.clone();
    let mut positions = Vec::new();
    let mut labels = vec![None; seq.ids.len()];
    for (i, (&id, &m)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
        if m != 1 || id == CLS {
            continue;
        }
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        positions.push(i);
        labels[i] = Some(id);
        let r: f64 = rng.gen();
        if r < 0.8 {
            corrupted[i] = MASK;
        } else if r < 0.9 && !words.is_empty() {
            corrupted[i] = rng.gen_range(words.clone());
        }
    }
    MlmBatch {
        original: seq.ids.clone(),
        corrupted,
        positions,
        labels,
    }
}

/// Two-layer MLP head over the joint states at `positions`.
pub fn mlm_logits<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    joint_states: Var,
    positions: &[usize],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::invalid("MLM head needs at least one masked position"));
    }
    let x = tape.select_rows(joint_states, positions)?;
    let h = nn::linear(tape, store, &join(MLM_PREFIX, "fc1"), x)?;
    let h = tape.gelu(h);
    nn::linear(tape, store, &join(MLM_PREFIX, "fc2"), h)
}

/// Consensus of per-segment logits: their arithmetic mean. The sum is a
/// pairwise tree, so `k` identical inputs average back exactly when `k` is a
/// power of two.
pub fn aggregate_segments<T: Scalar>(tape: &mut Tape<T>, logits: &[Var]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::invalid("consensus over zero segments"));
    }
    let mut level = logits.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            next.push(match pair {
                [a, b] => tape.add(*a, *b)?,
                [a] => *a,
                _ => unreachable!(),
            });
        }
        level = next;
    }
    if logits.len() == 1 {
        return Ok(level[0]);
    }
    Ok(tape.scale(level[0], T::one() / T::from_usize_lossy(logits.len())))
}
