//! Train/eval corpora and the seeded random streams of a run.

use hdvila_core::text::{self, TokenSequence, Vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BatchSampler, RunConfig};
use crate::synth::{generate_synthetic, SyntheticSample};

/// Independent streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Initialization, batch order, frame sampling and masking.
    Train = 0,
    TrainData = 1,
    EvalData = 2,
    /// HR frame choice during evaluation.
    Eval = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub struct Corpus {
    pub samples: Vec<SyntheticSample>,
    pub tokens: Vec<TokenSequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub struct Datasets {
    pub vocab: Vocab,
    pub train: Corpus,
    pub eval: Corpus,
}

/// Both corpora, with the vocabulary built from training captions only.
pub fn build_datasets(cfg: &RunConfig) -> Datasets {
    let train: Vec<SyntheticSample> = generate_synthetic(&cfg.data, stream_rng(cfg.seed, Stream::TrainData))
        .take(cfg.data.train_samples)
        .collect();
    let eval: Vec<SyntheticSample> = generate_synthetic(&cfg.data, stream_rng(cfg.seed, Stream::EvalData))
        .take(cfg.data.eval_samples)
        .collect();
    let vocab = Vocab::build(train.iter().map(|s| s.caption.as_str()), cfg.model.max_words);
    let corpus = |samples: Vec<SyntheticSample>| {
        let tokens = samples
            .iter()
            .map(|s| text::tokenize(&s.caption, &vocab, cfg.model.max_len))
            .collect();
        Corpus { samples, tokens }
    };
    Datasets {
        train: corpus(train),
        eval: corpus(eval),
        vocab,
    }
}

/// Sample order for one epoch.
pub fn epoch_order(sampler: BatchSampler, class_ids: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    match sampler {
        BatchSampler::Shuffle => {
            let mut order: Vec<usize> = (0..class_ids.len()).collect();
            order.shuffle(rng);
            order
        }
        BatchSampler::ClassInterleaved => {
            let classes = class_ids.iter().max().map_or(0, |&c| c + 1);
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &c) in class_ids.iter().enumerate() {
                groups[c].push(i);
            }
            for g in &mut groups {
                g.shuffle(rng);
            }
            let mut class_order: Vec<usize> = (0..classes).collect();
            let mut order = Vec::with_capacity(class_ids.len());
            while order.len() < class_ids.len() {
                class_order.shuffle(rng);
                for &c in &class_order {
                    if let Some(i) = groups[c].pop() {
                        order.push(i);
                    }
                }
            }
            order
        }
    }
}
