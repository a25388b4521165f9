//! Whole-word vocabulary, tokenizer and the language-only Transformer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, join};
use crate::numerics::{AttentionLayout, Tape, Var};
use crate::params::{uniform, ParamStore};
use crate::scalar::Scalar;

pub const PREFIX: &str = "text";

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Paper-scale sequence length.
pub const MAX_LEN: usize = 50;

/// Lower-cases a word and trims leading/trailing punctuation.
pub fn normalize_word(word: &str) -> Option<String> {
    let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
    (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved tokens followed by the `max_words` most frequent words;
    /// frequency ties break lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in text.split_whitespace().filter_map(normalize_word) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().take(max_words).map(|(w, _)| w))
            .collect();
        Vocab::from_tokens(tokens).expect("unique words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of ordinary (non-reserved) words.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        RESERVED.len()..self.tokens.len()
    }

    /// `token<TAB>id` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::invalid(format!("vocab line {}: missing tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("vocab line {}: bad id", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::invalid(format!("vocab line {}: ids must be dense and sorted", line_no + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocab must start with the reserved tokens"));
        }
        Vocab::from_tokens(tokens)
    }
}

/// Token ids starting with `[CLS]`; `attention_mask` marks real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `[PAD]` to `len` slots.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut out = self.clone();
        out.ids.truncate(len);
        out.attention_mask.truncate(len);
        out.ids.resize(len, PAD);
        out.attention_mask.resize(len, 0);
        out
    }
}

/// `[CLS]` followed by word ids (`[UNK]` when out of vocabulary), truncated to
/// `max_len` slots in total.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let ids: Vec<usize> = std::iter::once(CLS)
        .chain(
            text.split_whitespace()
                .filter_map(normalize_word)
                .map(|w| vocab.id(&w).unwrap_or(UNK)),
        )
        .take(max_len.max(1))
        .collect();
    let attention_mask = vec![1; ids.len()];
    TokenSequence { ids, attention_mask }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextStackConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Width of the contrastive projection.
    pub embed_dim: usize,
}

impl TextStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "text hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len == 0 || self.vocab_size <= UNK {
            return Err(Error::invalid("text stack needs max_len >= 1 and a vocabulary beyond the reserved ids"));
        }
        Ok(())
    }
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &TextStackConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden;
    store.insert(join(PREFIX, "token_embed"), uniform(&[cfg.vocab_size, d], 0.1, rng));
    store.insert(join(PREFIX, "pos"), uniform(&[cfg.max_len, d], 0.02, rng));
    for l in 0..cfg.layers {
        nn::init_encoder_block(store, &format!("{PREFIX}.layer{l}"), d, d * cfg.mlp_ratio, rng);
    }
    nn::init_norm(store, &join(PREFIX, "final_norm"), d);
    nn::init_linear(store, &join(PREFIX, "proj"), d, cfg.embed_dim, rng);
    Ok(())
}

/// Output of the language-only stack.
#[derive(Clone, Debug)]
pub struct TextOutput {
    /// `[max_len, hidden]`
    pub states: Var,
    /// Real-token mask over the `max_len` slots.
    pub mask: Vec<bool>,
}

/// Token + learned 1D position embeddings, then pre-norm self-attention
/// blocks. Padding keys receive zero attention weight.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &TextStackConfig,
    seq: &TokenSequence,
) -> Result<TextOutput> {
    let seq = seq.padded(cfg.max_len);
    if seq.ids.first() != Some(&CLS) || seq.attention_mask[0] != 1 {
        return Err(Error::invalid("token sequence must start with a real [CLS]"));
    }
    let table = tape.param(store, &join(PREFIX, "token_embed"))?;
    let pos = tape.param(store, &join(PREFIX, "pos"))?;
    let tok = tape.embedding(table, &seq.ids)?;
    let positions: Vec<usize> = (0..cfg.max_len).collect();
    let p = tape.embedding(pos, &positions)?;
    let mut x = tape.add(tok, p)?;
    let mask: Vec<bool> = seq.attention_mask.iter().map(|&m| m == 1).collect();
    let layout = Arc::new(AttentionLayout::full(cfg.max_len, cfg.heads, Some(mask.clone())));
    for l in 0..cfg.layers {
        x = nn::encoder_block(tape, store, &format!("{PREFIX}.layer{l}"), x, layout.clone())?;
    }
    let states = nn::norm(tape, store, &join(PREFIX, "final_norm"), x)?;
    Ok(TextOutput { states, mask })
}

/// Sentence embedding: the `[CLS]` state, projected and L2-normalized to `[1, e]`.
pub fn text_embedding<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, states: Var) -> Result<Var> {
    let cls = tape.slice_rows(states, 0, 1)?;
    let e = nn::linear(tape, store, &join(PREFIX, "proj"), cls)?;
    Ok(tape.l2_normalize_rows(e))
}
