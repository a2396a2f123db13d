//! Training loops for the four regimes, epoch-level noise-statistic
//! collection, plateau scheduling, and best-checkpoint retention.

mod checkpoint;
mod scheduler;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use scheduler::{PlateauScheduler, SchedulerConfig};

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{
    gan_losses, generator_adv_loss, generator_total_loss, AdversarialError, Discriminator,
    DiscriminatorConfig,
};
use crate::autodiff::{AdamState, AutodiffError, Binding, Graph, Var};
use crate::data::{
    future_targets, gaussian_noise_augment, just_counter_inputs, Corpus, DataError, FutureTargets,
    NoiseStats, SentencePair, Vocabulary,
};
use crate::eval::{evaluate_model, EvalError, EvalOptions, ScoreReport};
use crate::mdn::{mdn_nll_rows, MdnError};
use crate::model::{
    decoder_input_rows, mse_loss, AugmentationMode, HeadVars, ModelError, OutputHead,
    ProgressiveModel, ProgressiveModelConfig,
};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversarial(#[from] AdversarialError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mdn(#[from] MdnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Regression,
    Adversarial,
    Mdn,
    MdnAdversarial,
}

impl Regime {
    pub const ALL: [&'static str; 4] = ["regression", "adversarial", "mdn", "mdn_adv"];

    fn is_adversarial(self) -> bool {
        matches!(self, Regime::Adversarial | Regime::MdnAdversarial)
    }

    fn is_mdn(self) -> bool {
        matches!(self, Regime::Mdn | Regime::MdnAdversarial)
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(Regime::Regression),
            "adversarial" => Ok(Regime::Adversarial),
            "mdn" => Ok(Regime::Mdn),
            "mdn_adv" => Ok(Regime::MdnAdversarial),
            other => Err(format!(
                "unknown regime `{other}` (expected one of {})",
                Regime::ALL.join(", ")
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: SchedulerConfig,
    /// Weight on the regression term (adversarial regimes).
    pub lambda_reg: f64,
    /// Weight on the adversarial generator term.
    pub lambda_gan: f64,
    /// Weight on the mixture likelihood term.
    pub lambda_mdn: f64,
    pub seed: u64,
    pub model: ProgressiveModelConfig,
    /// Discriminator sizing; a preset derived from the corpus is used
    /// when absent and the regime needs one.
    pub discriminator: Option<DiscriminatorConfig>,
    /// Back-translate the dev split every this many epochs (scores are
    /// reported, never used for scheduling).
    pub dev_backtranslate_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(regime: Regime, model: ProgressiveModelConfig, seed: u64) -> Self {
        let lambda_reg = if regime.is_adversarial() { 100.0 } else { 1.0 };
        TrainConfig {
            regime,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            scheduler: SchedulerConfig::default(),
            lambda_reg,
            lambda_gan: if regime.is_adversarial() { 0.001 } else { 0.0 },
            lambda_mdn: 100.0,
            seed,
            model,
            discriminator: None,
            dev_backtranslate_every: None,
        }
    }

    fn validate(&self, corpus: &Corpus) -> Result<(), TrainError> {
        self.model.validate()?;
        self.scheduler
            .validate()
            .map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.lambda_reg < 0.0 || self.lambda_gan < 0.0 || self.lambda_mdn < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if corpus.train.is_empty() || corpus.dev.is_empty() || corpus.test.is_empty() {
            return Err(TrainError::Config("corpus splits must be non-empty".into()));
        }
        if self.model.vocab_size != corpus.vocab.len() {
            return Err(TrainError::Config(format!(
                "model vocab_size {} does not match corpus {}",
                self.model.vocab_size,
                corpus.vocab.len()
            )));
        }
        if self.model.joint_count != corpus.joint_count {
            return Err(TrainError::Config(format!(
                "model joint_count {} does not match corpus {}",
                self.model.joint_count, corpus.joint_count
            )));
        }
        if self.regime.is_mdn() && !matches!(self.model.head, OutputHead::Mdn { .. }) {
            return Err(TrainError::Config(
                "mixture regimes need the mixture output head".into(),
            ));
        }
        if !self.regime.is_mdn() && !matches!(self.model.head, OutputHead::Regression) {
            return Err(TrainError::Config(
                "regression regimes need the regression output head".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
    pub wall_clock_s: f64,
    pub dev_scores: Option<ScoreReport>,
}

/// Per-epoch training records, serializable as JSON lines.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome<S> {
    /// Best-dev-loss parameters (the retained checkpoint).
    pub model: ProgressiveModel<S>,
    pub discriminator: Option<Discriminator<S>>,
    pub log: TrainLog,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
}

pub struct ItemData {
    pub(crate) tokens: Vec<usize>,
    pub(crate) input_rows: Vec<f64>,
    pub(crate) targets: FutureTargets,
    /// Counter-stripped reference frames for realism scoring.
    pub(crate) real_frames: Vec<f64>,
    pub(crate) real_len: usize,
}

pub(crate) fn prepare_item(
    pair: &SentencePair,
    config: &ProgressiveModelConfig,
    stats: &NoiseStats,
    noise_seed: u64,
) -> Result<ItemData, TrainError> {
    let (f_f, f_t) = config.future_window;
    let targets = future_targets(&pair.pose, f_f, f_t)?;
    let input_seq = match config.augmentation {
        AugmentationMode::None => pair.pose.clone(),
        AugmentationMode::Noise { rate } => {
            gaussian_noise_augment(&pair.pose, stats, rate, noise_seed)
        }
        AugmentationMode::JustCounter => just_counter_inputs(&pair.pose),
    };
    Ok(ItemData {
        tokens: pair
            .tokens
            .iter()
            .map(|&t| Vocabulary::embed_id(t))
            .collect(),
        input_rows: decoder_input_rows(&input_seq),
        targets,
        real_frames: pair.pose.frames().to_vec(),
        real_len: pair.pose.len(),
    })
}

/// Builds the regime's base reconstruction loss (mean squared error,
/// or the mixture NLL normalized per unmasked frame and output
/// dimension so its single-component unit-sigma case coincides with
/// the squared-error objective up to an additive constant).
pub(crate) fn base_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &ProgressiveModel<S>,
    bound: &Binding,
    item: &ItemData,
) -> Result<(Var, HeadVars), TrainError> {
    let (_, head) = model.teacher_forced(g, bound, &item.tokens, &item.input_rows)?;
    let dim = model.config().out_dim();
    let window = model.config().window();
    let loss = match &head {
        HeadVars::Regression { out } => mse_loss(g, *out, &item.targets)?,
        HeadVars::Mdn {
            logits,
            means,
            log_sigmas,
        } => {
            let m = match model.config().head {
                OutputHead::Mdn { components } => components,
                OutputHead::Regression => unreachable!("mdn head vars imply mdn config"),
            };
            let rows = item.input_rows.len() / dim;
            let mut total: Option<Var> = None;
            for w in 0..window {
                let (lg, mu, ls) = if window == 1 {
                    (*logits, *means, *log_sigmas)
                } else {
                    (
                        g.slice_cols(*logits, w * m, (w + 1) * m)?,
                        g.slice_cols(*means, w * m * dim, (w + 1) * m * dim)?,
                        g.slice_cols(*log_sigmas, w * m, (w + 1) * m)?,
                    )
                };
                let mut slot_targets = Vec::with_capacity(rows * dim);
                let mut slot_mask = Vec::with_capacity(rows);
                for u in 0..rows {
                    let r = u * window + w;
                    slot_targets.extend(
                        item.targets.targets[r * dim..(r + 1) * dim]
                            .iter()
                            .map(|&v| S::of_f64(v)),
                    );
                    slot_mask.push(item.targets.mask[r]);
                }
                let rows_nll = mdn_nll_rows(
                    g,
                    lg,
                    mu,
                    ls,
                    Arc::new(slot_targets),
                    Arc::new(slot_mask),
                    dim,
                )?;
                let s = g.sum_all(rows_nll);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            let total = total.expect("window >= 1");
            let valid = item.targets.valid_rows().max(1);
            g.scale(total, S::of_f64(2.0 / (valid * dim) as f64))
        }
    };
    Ok((loss, head))
}

/// Window slot 0 of the head output as counter-stripped pose rows.
pub(crate) fn fake_pose_rows<S: Scalar>(
    g: &mut Graph<S>,
    model: &ProgressiveModel<S>,
    head: &HeadVars,
) -> Result<Var, TrainError> {
    let dim = model.config().out_dim();
    let window = model.config().window();
    match head {
        HeadVars::Regression { out } => {
            let slot = if window == 1 {
                *out
            } else {
                g.slice_cols(*out, 0, dim)?
            };
            Ok(g.slice_cols(slot, 0, dim - 1)?)
        }
        HeadVars::Mdn { logits, means, .. } => {
            let m = match model.config().head {
                OutputHead::Mdn { components } => components,
                OutputHead::Regression => unreachable!(),
            };
            let (lg, mu) = if window == 1 {
                (*logits, *means)
            } else {
                (
                    g.slice_cols(*logits, 0, m)?,
                    g.slice_cols(*means, 0, m * dim)?,
                )
            };
            let selected = g.mdn_select(lg, mu, dim)?;
            Ok(g.slice_cols(selected, 0, dim - 1)?)
        }
    }
}

fn ensure_finite(value: f64, epoch: usize, batch: usize) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { epoch, batch })
    }
}

/// Runs the configured regime over the corpus. Per epoch: refresh
/// noise statistics for the next epoch's augmentation, measure the
/// teacher-forced dev loss, drive the plateau scheduler with it, and
/// retain the best-dev parameters.
pub fn train<S: Scalar>(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome<S>, TrainError> {
    config.validate(corpus)?;
    let mut model = ProgressiveModel::<S>::new(config.model.clone(), config.seed)?;
    let mut discriminator = if config.regime.is_adversarial() {
        let d_config = config.discriminator.clone().unwrap_or_else(|| {
            let u_max = corpus
                .train
                .iter()
                .chain(&corpus.dev)
                .chain(&corpus.test)
                .map(|p| p.pose.len())
                .max()
                .unwrap_or(1);
            let t_max = corpus
                .train
                .iter()
                .chain(&corpus.dev)
                .chain(&corpus.test)
                .map(|p| p.tokens.len())
                .max()
                .unwrap_or(1);
            DiscriminatorConfig::preset(corpus.vocab.len(), corpus.joint_count, u_max, t_max)
        });
        Some(Discriminator::<S>::new(
            d_config,
            config.seed.wrapping_add(0xD15C),
        )?)
    } else {
        None
    };

    let lr = S::of_f64(config.learning_rate);
    let mut adam_g = AdamState::new(model.params(), lr);
    let mut adam_d = discriminator
        .as_ref()
        .map(|d| AdamState::new(d.params(), lr));
    let mut lr_schedule = PlateauScheduler::new(config.scheduler, config.learning_rate);

    let mut stats = NoiseStats::collect(corpus.train.iter().map(|p| &p.pose))
        .unwrap_or_else(|| NoiseStats::zeros(3 * corpus.joint_count));
    let mut order_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x0DDE));

    let mut log = TrainLog::default();
    let mut best_dev_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let mut best_disc = discriminator.clone();

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<ItemData> = batch
                .iter()
                .map(|&idx| {
                    let noise_seed = config
                        .seed
                        .wrapping_add(0x4E01)
                        .wrapping_add((epoch as u64).wrapping_mul(1_000_003))
                        .wrapping_add(idx as u64);
                    prepare_item(&corpus.train[idx], model.config(), &stats, noise_seed)
                })
                .collect::<Result<_, _>>()?;
            let inv_batch = S::of_f64(1.0 / items.len() as f64);

            if let (Some(disc), Some(adam_d)) = (discriminator.as_mut(), adam_d.as_mut()) {
                // Realism phase: one discriminator update on the real
                // sequences and the detached productions.
                let fakes: Vec<Vec<f64>> = items
                    .iter()
                    .map(|item| {
                        let mut g = Graph::<S>::new();
                        let bound = model.bind(&mut g, false);
                        let (_, head) =
                            model.teacher_forced(&mut g, &bound, &item.tokens, &item.input_rows)?;
                        let rows = fake_pose_rows(&mut g, &model, &head)?;
                        Ok(g.value(rows).iter().map(|&v| v.as_f64()).collect())
                    })
                    .collect::<Result<_, TrainError>>()?;

                disc.params_mut().zero_grads();
                for (item, fake) in items.iter().zip(&fakes) {
                    let mut g = Graph::<S>::new();
                    let binding = disc.bind(&mut g, true);
                    let pose_dim = 3 * model.config().joint_count;
                    let real = g.constant(
                        vec![item.real_len, pose_dim],
                        item.real_frames.iter().map(|&v| S::of_f64(v)).collect(),
                    );
                    let fake_rows = fake.len() / pose_dim;
                    let fake_var = g.constant(
                        vec![fake_rows, pose_dim],
                        fake.iter().map(|&v| S::of_f64(v)).collect(),
                    );
                    let d_real = disc.score(&mut g, &binding, real, &item.tokens)?;
                    let d_fake = disc.score(&mut g, &binding, fake_var, &item.tokens)?;
                    let (loss_d, _) = gan_losses(&mut g, d_real, d_fake)?;
                    ensure_finite(g.scalar_value(loss_d).as_f64(), epoch, batch_index)?;
                    let scaled = g.scale(loss_d, inv_batch);
                    g.backward(scaled)?;
                    g.scatter_grads(disc.params_mut());
                }
                adam_d.step(disc.params_mut())?;
            }

            // Production phase: one generator update.
            model.params_mut().zero_grads();
            for item in &items {
                let mut g = Graph::<S>::new();
                let bound = model.bind(&mut g, true);
                let (base, head) = base_loss(&mut g, &model, &bound, item)?;
                let base_value = g.scalar_value(base).as_f64();
                ensure_finite(base_value, epoch, batch_index)?;
                loss_sum += base_value;
                loss_count += 1;

                let lambda_base = if config.regime.is_mdn() {
                    config.lambda_mdn
                } else {
                    config.lambda_reg
                };
                let total = match (&discriminator, config.lambda_gan > 0.0) {
                    (Some(disc), true) => {
                        let fake = fake_pose_rows(&mut g, &model, &head)?;
                        let frozen = disc.bind(&mut g, false);
                        let d_fake = disc.score(&mut g, &frozen, fake, &item.tokens)?;
                        let adv = generator_adv_loss(&mut g, d_fake)?;
                        generator_total_loss(&mut g, base, adv, lambda_base, config.lambda_gan)?
                    }
                    _ => g.scale(base, S::of_f64(lambda_base)),
                };
                let scaled = g.scale(total, inv_batch);
                g.backward(scaled)?;
                g.scatter_grads(model.params_mut());
            }
            adam_g.step(model.params_mut())?;
        }

        // Statistics feed the next epoch's noise augmentation.
        stats = NoiseStats::collect(corpus.train.iter().map(|p| &p.pose))
            .unwrap_or_else(|| NoiseStats::zeros(3 * corpus.joint_count));

        let dev_loss = dev_loss::<S>(&model, &corpus.dev, &stats)?;
        let new_lr = lr_schedule.observe(dev_loss);
        adam_g.set_learning_rate(S::of_f64(new_lr));
        if let Some(adam_d) = adam_d.as_mut() {
            adam_d.set_learning_rate(S::of_f64(new_lr));
        }

        if dev_loss < best_dev_loss {
            best_dev_loss = dev_loss;
            best_epoch = epoch;
            best_model = model.clone();
            best_disc = discriminator.clone();
        }

        let dev_scores = match config.dev_backtranslate_every {
            Some(every) if every > 0 && (epoch + 1) % every == 0 => {
                let options =
                    EvalOptions::new(model.config().u_max, model.config().termination_epsilon);
                Some(evaluate_model(&model, corpus, "dev", &options)?)
            }
            _ => None,
        };

        log.epochs.push(EpochLog {
            epoch,
            train_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                0.0
            },
            dev_loss,
            learning_rate: new_lr,
            wall_clock_s: epoch_start.elapsed().as_secs_f64(),
            dev_scores,
        });
    }

    Ok(TrainOutcome {
        model: best_model,
        discriminator: best_disc,
        log,
        best_dev_loss,
        best_epoch,
    })
}

/// Mean teacher-forced base loss over a split, with augmentation
/// disabled (clean inputs).
pub fn dev_loss<S: Scalar>(
    model: &ProgressiveModel<S>,
    pairs: &[SentencePair],
    stats: &NoiseStats,
) -> Result<f64, TrainError> {
    let mut clean_config = model.config().clone();
    clean_config.augmentation = AugmentationMode::None;
    let mut sum = 0.0;
    for pair in pairs {
        let item = prepare_item(pair, &clean_config, stats, 0)?;
        let mut g = Graph::<S>::new();
        let bound = model.bind(&mut g, false);
        let (loss, _) = base_loss(&mut g, model, &bound, &item)?;
        sum += g.scalar_value(loss).as_f64();
    }
    Ok(sum / pairs.len().max(1) as f64)
}



#[doc(hidden)]
pub fn prepare_item_for_probe(
    pair: &SentencePair,
    config: &ProgressiveModelConfig,
    stats: &NoiseStats,
    seed: u64,
) -> ItemData {
    prepare_item(pair, config, stats, seed).unwrap()
}

#[doc(hidden)]
pub fn base_loss_for_probe<S: Scalar>(
    g: &mut Graph<S>,
    model: &ProgressiveModel<S>,
    bound: &Binding,
    item: &ItemData,
) -> Var {
    base_loss(g, model, bound, item).unwrap().0
}
