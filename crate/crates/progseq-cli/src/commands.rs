use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use progseq::data::{generate_corpus, load_corpus, read_poseq, save_corpus, Vocabulary};
use progseq::eval::{evaluate_model, EvalMode, EvalOptions};
use progseq::model::{
    generate as generate_sequence, AugmentationMode, GenerationMode, OutputHead,
    ProgressiveModelConfig,
};
use progseq::train::{
    load_checkpoint, save_checkpoint, train as run_training, Regime, SchedulerConfig, TrainConfig,
};
use progseq::verify::run_full_gradcheck;

use crate::{EvaluateArgs, GenerateArgs, MakeDataArgs, RenderArgs, TrainArgs};

/// PROGSEQ_SEED overrides any configured seed.
fn apply_seed_override(seed: u64) -> Result<u64> {
    match std::env::var("PROGSEQ_SEED") {
        Ok(v) => v
            .parse()
            .with_context(|| format!("PROGSEQ_SEED `{v}` is not a valid seed")),
        Err(_) => Ok(seed),
    }
}

fn write_run_config(dir: &Path, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join("run-config.json");
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn make_data(args: MakeDataArgs) -> Result<ExitCode> {
    let seed = apply_seed_override(args.seed)?;
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !args.force {
            bail!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            );
        }
    }
    let corpus = generate_corpus(seed, args.vocab, args.sentences, args.joints)?;
    save_corpus(&corpus, &args.out)?;
    write_run_config(
        &args.out,
        &json!({
            "command": "make-data",
            "seed": seed,
            "vocab": args.vocab,
            "sentences": args.sentences,
            "joints": args.joints,
        }),
    )?;
    println!(
        "wrote corpus: {} train / {} dev / {} test sentences, vocab {}, {} joints",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.vocab.content_len(),
        corpus.joint_count
    );
    Ok(ExitCode::SUCCESS)
}

/// Optional JSON file fields; command-line flags take precedence.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    regime: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    lambda_reg: Option<f64>,
    lambda_gan: Option<f64>,
    lambda_mdn: Option<f64>,
    patience: Option<usize>,
    decay: Option<f64>,
    min_lr: Option<f64>,
    dev_backtranslate_every: Option<usize>,
    model: ModelFileConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelFileConfig {
    layers: Option<usize>,
    heads: Option<usize>,
    embed_dim: Option<usize>,
    ff_dim: Option<usize>,
    future_window: Option<[usize; 2]>,
    /// `none`, `noise`, or `just_counter`.
    augmentation: Option<String>,
    noise_rate: Option<f64>,
    mdn_components: Option<usize>,
    u_max: Option<usize>,
    termination_epsilon: Option<f64>,
}

fn build_train_config(args: &TrainArgs, vocab_size: usize, joints: usize) -> Result<TrainConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let regime = match (&args.regime, &file.regime) {
        (Some(r), _) => *r,
        (None, Some(name)) => name.parse().map_err(|e: String| anyhow!(e))?,
        (None, None) => Regime::Regression,
    };

    let mut model = match regime {
        Regime::Regression => ProgressiveModelConfig::regression_preset(vocab_size, joints),
        Regime::Mdn => ProgressiveModelConfig::mdn_preset(vocab_size, joints),
        Regime::Adversarial | Regime::MdnAdversarial => {
            ProgressiveModelConfig::adversarial_preset(vocab_size, joints)
        }
    };
    if matches!(regime, Regime::MdnAdversarial) {
        model.head = OutputHead::Mdn { components: 4 };
    }
    let m = &file.model;
    if let Some(v) = m.layers {
        model.layers = v;
    }
    if let Some(v) = m.heads {
        model.heads = v;
    }
    if let Some(v) = m.embed_dim {
        model.embed_dim = v;
        model.ff_dim = 2 * v;
    }
    if let Some(v) = m.ff_dim {
        model.ff_dim = v;
    }
    if let Some([f_f, f_t]) = m.future_window {
        model.future_window = (f_f, f_t);
    }
    if let Some(mode) = &m.augmentation {
        model.augmentation = match mode.as_str() {
            "none" => AugmentationMode::None,
            "noise" => AugmentationMode::Noise {
                rate: m.noise_rate.unwrap_or(5.0),
            },
            "just_counter" => AugmentationMode::JustCounter,
            other => bail!("unknown augmentation `{other}` (none, noise, just_counter)"),
        };
    } else if let Some(rate) = m.noise_rate {
        model.augmentation = AugmentationMode::Noise { rate };
    }
    if let Some(components) = m.mdn_components {
        if !matches!(model.head, OutputHead::Mdn { .. }) {
            bail!("mdn_components requires an mdn regime");
        }
        model.head = OutputHead::Mdn { components };
    }
    if let Some(v) = m.u_max {
        model.u_max = v;
    }
    if let Some(v) = m.termination_epsilon {
        model.termination_epsilon = v;
    }

    let seed = apply_seed_override(args.seed.or(file.seed).unwrap_or(1))?;
    let mut config = TrainConfig::new(regime, model, seed);
    if let Some(v) = args.epochs.or(file.epochs) {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate.or(file.learning_rate) {
        config.learning_rate = v;
    }
    if let Some(v) = file.lambda_reg {
        config.lambda_reg = v;
    }
    if let Some(v) = file.lambda_gan {
        config.lambda_gan = v;
    }
    if let Some(v) = file.lambda_mdn {
        config.lambda_mdn = v;
    }
    config.scheduler = SchedulerConfig {
        patience: file.patience.unwrap_or(config.scheduler.patience),
        decay: file.decay.unwrap_or(config.scheduler.decay),
        min_lr: file.min_lr.unwrap_or(config.scheduler.min_lr),
    };
    if let Some(v) = args.dev_backtranslate_every.or(file.dev_backtranslate_every) {
        config.dev_backtranslate_every = Some(v);
    }
    Ok(config)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&args.data)?;
    let config = build_train_config(&args, corpus.vocab.len(), corpus.joint_count)?;
    fs::create_dir_all(&args.out)?;
    write_run_config(
        &args.out,
        &json!({
            "command": "train",
            "data": args.data.display().to_string(),
            "train": config,
        }),
    )?;

    let started = Instant::now();
    let outcome = run_training::<f32>(&config, &corpus)?;
    let ckpt_dir = args.out.join("checkpoint");
    save_checkpoint(&ckpt_dir, &outcome.model, outcome.discriminator.as_ref())?;
    fs::write(args.out.join("train-log.jsonl"), outcome.log.to_jsonl())?;
    println!(
        "trained {:?} for {} epochs in {:.1}s; best dev loss {:.6} (epoch {}); checkpoint at {}",
        config.regime,
        config.epochs,
        started.elapsed().as_secs_f64(),
        outcome.best_dev_loss,
        outcome.best_epoch,
        ckpt_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_tokens(input: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for token in input.split_whitespace() {
        let content = vocab
            .lookup(token)
            .map_err(|_| anyhow!("unknown token `{token}`"))?;
        ids.push(Vocabulary::embed_id(content));
    }
    if ids.is_empty() {
        bail!("input sentence is empty");
    }
    Ok(ids)
}

pub fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&args.data)?;
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    if model.config().joint_count != corpus.joint_count {
        bail!(
            "checkpoint joint count {} does not match corpus {}",
            model.config().joint_count,
            corpus.joint_count
        );
    }
    let tokens = parse_tokens(&args.input, &corpus.vocab)?;
    let mode = parse_generation_mode(&args.mode)?;
    let generated = generate_sequence(
        &model,
        &tokens,
        mode,
        model.config().u_max,
        model.config().termination_epsilon,
    )?;
    progseq::data::write_poseq(&generated.pose, &args.out)?;
    let sidecar = args.out.with_extension("run.json");
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&json!({
            "command": "generate",
            "checkpoint": args.checkpoint.display().to_string(),
            "input": args.input,
            "mode": args.mode,
            "truncated": generated.truncated,
        }))? + "\n",
    )?;
    println!(
        "generated {} frames{} -> {}",
        generated.pose.len(),
        if generated.truncated {
            " (truncated at u_max)"
        } else {
            ""
        },
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_generation_mode(mode: &str) -> Result<GenerationMode> {
    if mode == "feedback" {
        return Ok(GenerationMode::Feedback);
    }
    if let Some(frames) = mode.strip_prefix("teacher:") {
        let u_ref: usize = frames
            .parse()
            .with_context(|| format!("bad frame count in mode `{mode}`"))?;
        return Ok(GenerationMode::TeacherTiming { u_ref });
    }
    bail!("unknown mode `{mode}` (expected `feedback` or `teacher:<frames>`)")
}

pub fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&args.data)?;
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    if model.config().joint_count != corpus.joint_count {
        bail!(
            "checkpoint joint count {} does not match corpus {}",
            model.config().joint_count,
            corpus.joint_count
        );
    }
    if model.config().vocab_size != corpus.vocab.len() {
        bail!(
            "checkpoint vocab size {} does not match corpus {}",
            model.config().vocab_size,
            corpus.vocab.len()
        );
    }
    let mut options = EvalOptions::new(
        model.config().u_max,
        model.config().termination_epsilon,
    );
    options.jobs = args.jobs.max(1);
    options.mode = match args.mode.as_str() {
        "feedback" => EvalMode::Feedback,
        "teacher" => EvalMode::TeacherTiming,
        other => bail!("unknown mode `{other}` (expected `feedback` or `teacher`)"),
    };
    let report = evaluate_model(&model, &corpus, &args.split, &options)?;
    let rendered = report.to_json();
    println!("{rendered}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), rendered + "\n")?;
        write_run_config(
            out,
            &json!({
                "command": "evaluate",
                "checkpoint": args.checkpoint.display().to_string(),
                "data": args.data.display().to_string(),
                "split": args.split,
                "mode": args.mode,
                "jobs": options.jobs,
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck() -> Result<ExitCode> {
    let started = Instant::now();
    let report = run_full_gradcheck()?;
    print!("{}", report.render_table());
    println!("completed in {:.2}s", started.elapsed().as_secs_f64());
    if report.all_passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow!("gradient check failed"))
    }
}

pub fn render(args: RenderArgs) -> Result<ExitCode> {
    let pose = read_poseq(&args.pose)?;
    fs::create_dir_all(&args.out)?;

    // global 2-d bounds across frames (depth axis dropped)
    let joints = pose.joint_count();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for u in 0..pose.len() {
        let frame = pose.frame(u);
        for j in 0..joints {
            min_x = min_x.min(frame[3 * j]);
            max_x = max_x.max(frame[3 * j]);
            min_y = min_y.min(frame[3 * j + 1]);
            max_y = max_y.max(frame[3 * j + 1]);
        }
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);

    let mut csv = String::new();
    for j in 0..joints {
        csv.push_str(&format!("x{j},y{j},z{j},"));
    }
    csv.push_str("counter\n");

    for u in 0..pose.len() {
        let frame = pose.frame(u);
        let mut svg = String::new();
        svg.push_str(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" viewBox=\"0 0 400 400\">\n",
        );
        let map = |x: f64, y: f64| {
            (
                20.0 + 360.0 * (x - min_x) / span_x,
                380.0 - 360.0 * (y - min_y) / span_y,
            )
        };
        // joints joined in index order as a simple chain
        let mut points = String::new();
        for j in 0..joints {
            let (px, py) = map(frame[3 * j], frame[3 * j + 1]);
            points.push_str(&format!("{px:.3},{py:.3} "));
        }
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#888\" stroke-width=\"1.5\"/>\n",
            points.trim_end()
        ));
        for j in 0..joints {
            let (px, py) = map(frame[3 * j], frame[3 * j + 1]);
            svg.push_str(&format!(
                "  <circle cx=\"{px:.3}\" cy=\"{py:.3}\" r=\"4\" fill=\"#1a1a1a\"/>\n"
            ));
        }
        svg.push_str("</svg>\n");
        fs::write(args.out.join(format!("frame-{u:04}.svg")), svg)?;

        for j in 0..joints {
            csv.push_str(&format!(
                "{},{},{},",
                frame[3 * j],
                frame[3 * j + 1],
                frame[3 * j + 2]
            ));
        }
        csv.push_str(&pose.counters()[u].to_string());
        csv.push('\n');
    }
    fs::write(args.out.join("pose.csv"), csv)?;
    write_run_config(
        &args.out,
        &json!({
            "command": "render",
            "pose": args.pose.display().to_string(),
            "frames": pose.len(),
        }),
    )?;
    println!("rendered {} frames -> {}", pose.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
