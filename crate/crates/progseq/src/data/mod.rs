//! Synthetic corpus generation and the data-side training transforms.
//!
//! Each vocabulary symbol owns a seeded per-joint sinusoid template;
//! a sentence's target trajectory concatenates its token templates in
//! reversed order (source and target orderings deliberately disagree)
//! with short linear transitions in between.

mod augment;
mod pose;
mod poseq;

pub use augment::{
    future_targets, gaussian_noise_augment, just_counter_inputs, FutureTargets, NoiseStats,
};
pub use pose::{normalize_skeleton, NormalizeReport, PoseSequence};
pub use poseq::{load_corpus, read_poseq, save_corpus, write_poseq};

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("pose sequence must have at least one frame")]
    EmptySequence,
    #[error("pose frames must be finite")]
    NonFiniteFrame,
    #[error("frame buffer of {len} values is not a whole number of {dim}-wide rows")]
    BadFrameData { len: usize, dim: usize },
    #[error("joint {joint} out of range for skeleton with {joints} joints")]
    JointOutOfRange { joint: usize, joints: usize },
    #[error("future window needs f_f < f_t, got ({f_f}, {f_t})")]
    BadFutureWindow { f_f: usize, f_t: usize },
    #[error("corpus generation needs at least 3 sentences to split, got {0}")]
    TooFewSentences(usize),
    #[error("corpus generation needs vocab_size >= 2 and joints >= 1, got ({vocab}, {joints})")]
    BadCorpusParams { vocab: usize, joints: usize },
    #[error("could not draw {requested} distinct sentences from a vocabulary of {vocab} symbols")]
    SentenceSpaceExhausted { requested: usize, vocab: usize },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("{path}:{line}: {msg}")]
    PoseqParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus manifest: {0}")]
    Manifest(String),
}

/// Symbol inventory with reserved padding and begin-of-sequence ids.
/// Embedding ids are dense: `PAD = 0`, `BOS = 1`, content tokens from
/// 2 upward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    const RESERVED: usize = 2;

    pub fn new(tokens: Vec<String>) -> Self {
        Vocabulary { tokens }
    }

    /// `w00, w01, ...` zero-padded to a uniform width.
    pub fn generate(content_size: usize) -> Self {
        let width = content_size.saturating_sub(1).to_string().len().max(2);
        Vocabulary {
            tokens: (0..content_size)
                .map(|i| format!("w{i:0width$}"))
                .collect(),
        }
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len()
    }

    /// Total id space including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + Self::RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Embedding id for a content token index.
    pub fn embed_id(content_index: usize) -> usize {
        content_index + Self::RESERVED
    }

    pub fn lookup(&self, token: &str) -> Result<usize, DataError> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, content_index: usize) -> &str {
        &self.tokens[content_index]
    }
}

/// Seeded motion template for one symbol: a per-joint sinusoid of
/// 8..=16 frames with symbol-specific frequency, phase, and amplitude,
/// all values inside `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTemplate {
    pub token_index: usize,
    /// `len × 3J` row-major trajectory.
    pub frames: Vec<f64>,
    pub len: usize,
}

/// One parallel sentence/pose pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    /// Content token indices, source order.
    pub tokens: Vec<usize>,
    pub pose: PoseSequence,
}

impl SentencePair {
    pub fn token_strings(&self, vocab: &Vocabulary) -> Vec<String> {
        self.tokens
            .iter()
            .map(|&t| vocab.token(t).to_string())
            .collect()
    }
}

/// Deterministic synthetic corpus: disjoint train/dev/test sentence
/// splits plus the template bank they were rendered from.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub joint_count: usize,
    pub vocab: Vocabulary,
    pub templates: Vec<SymbolTemplate>,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[SentencePair]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

const TEMPLATE_MIN_LEN: usize = 8;
const TEMPLATE_MAX_LEN: usize = 16;
const SENTENCE_MIN_TOKENS: usize = 2;
const SENTENCE_MAX_TOKENS: usize = 6;
/// Frames inserted between consecutive templates in a target.
pub const TRANSITION_FRAMES: usize = 3;

/// Generates the full synthetic corpus for a seed. Sentences are 2..=6
/// distinct random token sequences; each target is the concatenation
/// of the token templates in reversed order with 3-frame linear
/// transitions, counter-encoded. Splits are roughly 80/10/10 and
/// disjoint by sentence.
pub fn generate_corpus(
    seed: u64,
    vocab_size: usize,
    sentence_count: usize,
    joint_count: usize,
) -> Result<Corpus, DataError> {
    if vocab_size < 2 || joint_count < 1 {
        return Err(DataError::BadCorpusParams {
            vocab: vocab_size,
            joints: joint_count,
        });
    }
    if sentence_count < 3 {
        return Err(DataError::TooFewSentences(sentence_count));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let vocab = Vocabulary::generate(vocab_size);
    let dim = 3 * joint_count;

    let templates: Vec<SymbolTemplate> = (0..vocab_size)
        .map(|token_index| {
            let len = rng.gen_range(TEMPLATE_MIN_LEN..=TEMPLATE_MAX_LEN);
            let mut params = Vec::with_capacity(dim);
            for _ in 0..dim {
                let amplitude = rng.gen_range(0.45..0.95);
                // under one cycle per template keeps targets smooth
                // enough that approximate phase is rewarded, not
                // punished, by the squared error
                let frequency = rng.gen_range(0.25..0.9);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                params.push((amplitude, frequency, phase));
            }
            let mut frames = Vec::with_capacity(len * dim);
            for f in 0..len {
                let s = f as f64 / len as f64;
                for &(a, fr, ph) in &params {
                    frames.push(a * (std::f64::consts::TAU * fr * s + ph).sin());
                }
            }
            SymbolTemplate {
                token_index,
                frames,
                len,
            }
        })
        .collect();

    let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(sentence_count);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut attempts = 0usize;
    let attempt_cap = sentence_count.saturating_mul(1000).max(10_000);
    while sentences.len() < sentence_count {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(DataError::SentenceSpaceExhausted {
                requested: sentence_count,
                vocab: vocab_size,
            });
        }
        let len = rng.gen_range(SENTENCE_MIN_TOKENS..=SENTENCE_MAX_TOKENS);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
        if seen.insert(tokens.clone()) {
            sentences.push(tokens);
        }
    }

    let pairs: Vec<SentencePair> = sentences
        .into_iter()
        .map(|tokens| {
            let pose = render_target(&tokens, &templates, joint_count);
            SentencePair { tokens, pose }
        })
        .collect();

    let n = pairs.len();
    let dev_len = (n / 10).max(1);
    let test_len = (n / 10).max(1);
    let train_len = n - dev_len - test_len;
    let mut iter = pairs.into_iter();
    let train: Vec<_> = iter.by_ref().take(train_len).collect();
    let dev: Vec<_> = iter.by_ref().take(dev_len).collect();
    let test: Vec<_> = iter.collect();

    Ok(Corpus {
        seed,
        joint_count,
        vocab,
        templates,
        train,
        dev,
        test,
    })
}

/// Renders a sentence's target trajectory: templates in reversed token
/// order joined by 3-frame linear interpolations, counter-encoded.
pub fn render_target(
    tokens: &[usize],
    templates: &[SymbolTemplate],
    joint_count: usize,
) -> PoseSequence {
    let dim = 3 * joint_count;
    let mut frames: Vec<f64> = Vec::new();
    for (pos, &token) in tokens.iter().rev().enumerate() {
        let template = &templates[token];
        if pos > 0 {
            let prev_last = frames[frames.len() - dim..].to_vec();
            let next_first = &template.frames[..dim];
            for step in 1..=TRANSITION_FRAMES {
                let t = step as f64 / (TRANSITION_FRAMES + 1) as f64;
                for j in 0..dim {
                    frames.push(prev_last[j] + t * (next_first[j] - prev_last[j]));
                }
            }
        }
        frames.extend_from_slice(&template.frames);
    }
    PoseSequence::counter_encode(frames, joint_count).expect("non-empty sentence target")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_regenerates_bit_identical_corpora() {
        let a = generate_corpus(7, 5, 12, 2).unwrap();
        let b = generate_corpus(7, 5, 12, 2).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        assert_eq!(a.templates, b.templates);
        let c = generate_corpus(8, 5, 12, 2).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn single_token_target_is_exactly_the_template() {
        let corpus = generate_corpus(3, 4, 10, 2).unwrap();
        let template = &corpus.templates[1];
        let target = render_target(&[1], &corpus.templates, 2);
        assert_eq!(target.len(), template.len);
        assert_eq!(target.frames(), template.frames.as_slice());
    }

    #[test]
    fn two_token_target_is_reversed_with_transition() {
        let corpus = generate_corpus(3, 4, 10, 2).unwrap();
        let (a, b) = (0usize, 2usize);
        let target = render_target(&[a, b], &corpus.templates, 2);
        let ta = &corpus.templates[a];
        let tb = &corpus.templates[b];
        let dim = 6;
        assert_eq!(target.len(), ta.len + tb.len + TRANSITION_FRAMES);
        // target starts with template(b) and ends with template(a)
        assert_eq!(&target.frames()[..tb.len * dim], tb.frames.as_slice());
        let tail = &target.frames()[(tb.len + TRANSITION_FRAMES) * dim..];
        assert_eq!(tail, ta.frames.as_slice());
    }

    #[test]
    fn target_length_matches_template_sum_plus_transitions() {
        let corpus = generate_corpus(11, 6, 30, 1).unwrap();
        for pair in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            let expect: usize = pair
                .tokens
                .iter()
                .map(|&t| corpus.templates[t].len)
                .sum::<usize>()
                + TRANSITION_FRAMES * (pair.tokens.len() - 1);
            assert_eq!(pair.pose.len(), expect);
        }
    }

    #[test]
    fn template_values_stay_bounded() {
        let corpus = generate_corpus(5, 8, 10, 3).unwrap();
        for t in &corpus.templates {
            assert!((TEMPLATE_MIN_LEN..=TEMPLATE_MAX_LEN).contains(&t.len));
            assert!(t.frames.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn splits_are_disjoint_by_sentence() {
        let corpus = generate_corpus(13, 6, 40, 1).unwrap();
        let train: BTreeSet<_> = corpus.train.iter().map(|p| p.tokens.clone()).collect();
        for p in corpus.dev.iter().chain(&corpus.test) {
            assert!(!train.contains(&p.tokens));
        }
        assert_eq!(corpus.train.len() + corpus.dev.len() + corpus.test.len(), 40);
    }

    #[test]
    fn tiny_and_invalid_requests_error() {
        assert!(matches!(
            generate_corpus(1, 5, 2, 1),
            Err(DataError::TooFewSentences(2))
        ));
        assert!(generate_corpus(1, 1, 10, 1).is_err());
        assert!(generate_corpus(1, 5, 10, 0).is_err());
        // 2-symbol vocab cannot provide thousands of distinct short sentences
        assert!(matches!(
            generate_corpus(1, 2, 5000, 1),
            Err(DataError::SentenceSpaceExhausted { .. })
        ));
    }
}
