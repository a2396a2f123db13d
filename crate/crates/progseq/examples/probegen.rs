// temp probe: train small model, inspect feedback generation quality
use progseq::data::{generate_corpus, Vocabulary};
use progseq::eval::{back_translate, DEFAULT_SPAN_MAX, DEFAULT_SPAN_MIN};
use progseq::model::{generate, GenerationMode, ProgressiveModelConfig};
use progseq::train::{train, Regime, TrainConfig};
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(12);
    let dim: usize = std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(64);
    let corpus = generate_corpus(1, 12, 750, 8).unwrap();
    let mut mc = ProgressiveModelConfig::regression_preset(corpus.vocab.len(), 8);
    mc.embed_dim = dim;
    mc.ff_dim = 2 * dim;
    let mut config = TrainConfig::new(Regime::Regression, mc, 1);
    config.epochs = epochs;
    if let Some(bs) = std::env::args().nth(4).and_then(|v| v.parse().ok()) {
        config.batch_size = bs;
    }
    let t0 = Instant::now();
    let outcome = train::<f32>(&config, &corpus).unwrap();
    println!(
        "trained d={dim} for {epochs} epochs in {:.0}s; dev loss trace: {:?}",
        t0.elapsed().as_secs_f64(),
        outcome
            .log
            .epochs
            .iter()
            .map(|e| (e.dev_loss * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!(
        "train loss trace: {:?}",
        outcome
            .log
            .epochs
            .iter()
            .map(|e| (e.train_loss * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    let model = outcome.model;
    let mut token_hits = 0usize;
    let mut token_total = 0usize;
    let mut exact = 0usize;
    let n_probe = 12;
    let t0 = Instant::now();
    for pair in corpus.test.iter().take(n_probe) {
        let tokens: Vec<usize> = pair.tokens.iter().map(|&t| Vocabulary::embed_id(t)).collect();
        let mode = if std::env::args().nth(3).as_deref() == Some("teacher") {
            GenerationMode::TeacherTiming { u_ref: pair.pose.len() }
        } else {
            GenerationMode::Feedback
        };
        let gen = generate(&model, &tokens, mode, 300, 0.02).unwrap();
        let decoded = back_translate(&gen.pose, &corpus.templates, DEFAULT_SPAN_MIN, DEFAULT_SPAN_MAX)
            .unwrap_or_default();
        let hits = decoded.iter().zip(&pair.tokens).filter(|(a, b)| a == b).count();
        token_hits += hits;
        token_total += pair.tokens.len();
        if decoded == pair.tokens {
            exact += 1;
        }
        println!(
            "ref {:?} len {} -> gen len {}{} decoded {:?}",
            pair.tokens,
            pair.pose.len(),
            gen.pose.len(),
            if gen.truncated { " TRUNC" } else { "" },
            decoded
        );
    }
    println!(
        "token acc {}/{} ; exact {}/{} ; probe eval {:.1}s",
        token_hits, token_total, exact, n_probe,
        t0.elapsed().as_secs_f64()
    );
}
