//! Alignment, translation metrics, and corpus-level model scoring via
//! back-translation.

mod backtranslate;
mod dtw;
mod metrics;

pub use backtranslate::{back_translate, DEFAULT_SPAN_MAX, DEFAULT_SPAN_MIN};
pub use dtw::{dtw, dtw_cost, euclidean, AlignmentPath};
pub use metrics::{bleu_n, corpus_bleu, modified_precision_counts, rouge_l};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Vocabulary};
use crate::model::{generate, FramePredictor, GenerationMode, ModelError};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("cannot align an empty sequence")]
    EmptyAlignment,
    #[error("bleu order must be in 1..=4, got {0}")]
    BadOrder(usize),
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("sequence of {got} frames is shorter than the minimum span {min}")]
    TooShortToSegment { got: usize, min: usize },
    #[error("no segmentation of {frames} frames with spans {min}..={max}")]
    NoSegmentation {
        frames: usize,
        min: usize,
        max: usize,
    },
    #[error("unknown split `{0}` (expected train, dev, or test)")]
    UnknownSplit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Evaluation scores; serialized with this exact key order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub dtw_mean: f64,
    pub truncated_count: usize,
    /// Back-translated token sequences, one per evaluated sentence.
    #[serde(skip)]
    pub decoded: Vec<Vec<String>>,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// How sequences are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Counter-terminated feedback generation.
    Feedback,
    /// Linear timing with the reference length.
    TeacherTiming,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub u_max: usize,
    pub epsilon: f64,
    pub span_min: usize,
    pub span_max: usize,
    /// Worker threads for sentence-parallel evaluation; results merge
    /// in sentence order regardless.
    pub jobs: usize,
}

impl EvalOptions {
    pub fn new(u_max: usize, epsilon: f64) -> Self {
        EvalOptions {
            mode: EvalMode::Feedback,
            u_max,
            epsilon,
            span_min: DEFAULT_SPAN_MIN,
            span_max: DEFAULT_SPAN_MAX,
            jobs: 1,
        }
    }
}

struct SentenceOutcome {
    decoded: Vec<usize>,
    reference: Vec<usize>,
    dtw: f64,
    truncated: bool,
}

/// Generates every sentence of a corpus split, back-translates the
/// productions against the template bank, and reports corpus BLEU,
/// mean ROUGE-L, mean motion DTW cost, and the truncation count.
/// Truncated generations are scored like any other.
pub fn evaluate_model<P>(
    predictor: &P,
    corpus: &Corpus,
    split: &str,
    options: &EvalOptions,
) -> Result<ScoreReport, EvalError>
where
    P: FramePredictor + Sync,
{
    let pairs = corpus
        .split(split)
        .ok_or_else(|| EvalError::UnknownSplit(split.to_string()))?;

    let evaluate_one = |index: usize| -> Result<SentenceOutcome, EvalError> {
        let pair = &pairs[index];
        let tokens: Vec<usize> = pair.tokens.iter().map(|&t| Vocabulary::embed_id(t)).collect();
        let mode = match options.mode {
            EvalMode::Feedback => GenerationMode::Feedback,
            EvalMode::TeacherTiming => GenerationMode::TeacherTiming {
                u_ref: pair.pose.len(),
            },
        };
        let generated = generate(predictor, &tokens, mode, options.u_max, options.epsilon)?;
        let decoded = match back_translate(
            &generated.pose,
            &corpus.templates,
            options.span_min,
            options.span_max,
        ) {
            Ok(tokens) => tokens,
            // productions too short to segment decode to nothing
            Err(EvalError::TooShortToSegment { .. }) => Vec::new(),
            Err(e) => return Err(e),
        };
        let dtw = dtw_cost(&generated.pose.frame_rows(), &pair.pose.frame_rows())?;
        Ok(SentenceOutcome {
            decoded,
            reference: pair.tokens.clone(),
            dtw,
            truncated: generated.truncated,
        })
    };

    let outcomes: Vec<SentenceOutcome> = if options.jobs <= 1 {
        (0..pairs.len())
            .map(evaluate_one)
            .collect::<Result<_, _>>()?
    } else {
        let jobs = options.jobs.min(pairs.len().max(1));
        let chunk = pairs.len().div_ceil(jobs);
        let results: Vec<Vec<Result<SentenceOutcome, EvalError>>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..jobs {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(pairs.len());
                    let eval_ref = &evaluate_one;
                    handles.push(scope.spawn(move || (lo..hi).map(eval_ref).collect()));
                }
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
        let mut flat = Vec::with_capacity(pairs.len());
        for chunk_results in results {
            for r in chunk_results {
                flat.push(r?);
            }
        }
        flat
    };

    let bleu_pairs: Vec<(Vec<String>, Vec<String>)> = outcomes
        .iter()
        .map(|o| {
            (
                o.decoded.iter().map(|&t| corpus.vocab.token(t).to_string()).collect(),
                o.reference
                    .iter()
                    .map(|&t| corpus.vocab.token(t).to_string())
                    .collect(),
            )
        })
        .collect();

    let rouge_mean = if bleu_pairs.is_empty() {
        0.0
    } else {
        bleu_pairs
            .iter()
            .map(|(c, r)| rouge_l(c, r))
            .sum::<f64>()
            / bleu_pairs.len() as f64
    };
    let dtw_mean = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.dtw).sum::<f64>() / outcomes.len() as f64
    };

    Ok(ScoreReport {
        bleu1: corpus_bleu(&bleu_pairs, 1)?,
        bleu2: corpus_bleu(&bleu_pairs, 2)?,
        bleu3: corpus_bleu(&bleu_pairs, 3)?,
        bleu4: corpus_bleu(&bleu_pairs, 4)?,
        rouge_l: rouge_mean,
        dtw_mean,
        truncated_count: outcomes.iter().filter(|o| o.truncated).count(),
        decoded: bleu_pairs.into_iter().map(|(c, _)| c).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, PoseSequence};
    use crate::model::FramePredictor;
    use std::collections::HashMap;

    /// Replays ground-truth sequences keyed by token sentence.
    struct PerfectStub {
        joints: usize,
        by_tokens: HashMap<Vec<usize>, PoseSequence>,
    }

    impl FramePredictor for PerfectStub {
        fn joint_count(&self) -> usize {
            self.joints
        }
        fn predict_next(
            &self,
            tokens: &[usize],
            _input_rows: &[f64],
            rows: usize,
        ) -> Result<(Vec<f64>, f64), crate::model::ModelError> {
            let seq = &self.by_tokens[tokens];
            let u = (rows - 1).min(seq.len() - 1);
            Ok((seq.frame(u).to_vec(), seq.counters()[u]))
        }
    }

    #[test]
    fn perfect_generator_round_trips_to_full_bleu() {
        let corpus = generate_corpus(44, 5, 12, 2).unwrap();
        let by_tokens = corpus
            .test
            .iter()
            .chain(&corpus.dev)
            .chain(&corpus.train)
            .map(|p| {
                (
                    p.tokens
                        .iter()
                        .map(|&t| Vocabulary::embed_id(t))
                        .collect::<Vec<_>>(),
                    p.pose.clone(),
                )
            })
            .collect();
        let stub = PerfectStub { joints: 2, by_tokens };
        let options = EvalOptions::new(300, 0.02);
        let report = evaluate_model(&stub, &corpus, "test", &options).unwrap();
        assert!((report.bleu4 - 100.0).abs() < 1e-9, "bleu4 {}", report.bleu4);
        assert!((report.bleu1 - 100.0).abs() < 1e-9);
        assert!((report.rouge_l - 100.0).abs() < 1e-9);
        assert_eq!(report.truncated_count, 0);
        // long references stop a frame or two early (counter hits
        // 1 - epsilon), so the motion cost is small but not zero
        assert!(report.dtw_mean < 1.0, "dtw_mean {}", report.dtw_mean);
    }

    #[test]
    fn parallel_evaluation_matches_serial_bytes() {
        let corpus = generate_corpus(44, 5, 12, 2).unwrap();
        let by_tokens = corpus
            .test
            .iter()
            .chain(&corpus.dev)
            .chain(&corpus.train)
            .map(|p| {
                (
                    p.tokens
                        .iter()
                        .map(|&t| Vocabulary::embed_id(t))
                        .collect::<Vec<_>>(),
                    p.pose.clone(),
                )
            })
            .collect();
        let stub = PerfectStub { joints: 2, by_tokens };
        let serial = evaluate_model(&stub, &corpus, "test", &EvalOptions::new(300, 0.02)).unwrap();
        let mut par_options = EvalOptions::new(300, 0.02);
        par_options.jobs = 3;
        let parallel = evaluate_model(&stub, &corpus, "test", &par_options).unwrap();
        assert_eq!(serial.to_json(), parallel.to_json());
    }

    #[test]
    fn unknown_split_errors() {
        let corpus = generate_corpus(44, 5, 12, 2).unwrap();
        let stub = PerfectStub {
            joints: 2,
            by_tokens: HashMap::new(),
        };
        assert!(matches!(
            evaluate_model(&stub, &corpus, "validation", &EvalOptions::new(300, 0.02)),
            Err(EvalError::UnknownSplit(_))
        ));
    }

    #[test]
    fn report_serializes_with_fixed_key_order() {
        let report = ScoreReport {
            bleu1: 1.0,
            bleu2: 2.0,
            bleu3: 3.0,
            bleu4: 4.0,
            rouge_l: 5.0,
            dtw_mean: 6.0,
            truncated_count: 7,
            decoded: vec![vec!["w".to_string()]],
        };
        let json = report.to_json();
        let keys: Vec<usize> = [
            "\"bleu1\"",
            "\"bleu2\"",
            "\"bleu3\"",
            "\"bleu4\"",
            "\"rougeL\"",
            "\"dtw_mean\"",
            "\"truncated_count\"",
        ]
        .iter()
        .map(|k| json.find(k).unwrap_or_else(|| panic!("missing {k}")))
        .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted, "keys out of order: {json}");
        assert!(!json.contains("decoded"));
    }
}
