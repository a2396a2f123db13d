//! Conditional convolutional realism scoring and the adversarial
//! objectives.
//!
//! The discriminator strips the counter channel, zero-pads pose
//! sequences to a fixed `U_max`, embeds and zero-pads the source
//! tokens to `T_max`, mean-pools the source representation, and
//! appends it to every frame's channel vector. Stacked 1-D
//! convolutions over the time axis (leaky-ReLU after each) feed a
//! global mean pool, a linear layer, and a sigmoid producing the
//! realism scalar in `(0, 1)`.

use thiserror::Error;

use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_init, AutodiffError, Binding, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum AdversarialError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("discriminator config: {0}")]
    Config(String),
    #[error("sequence of {got} rows exceeds the padded maximum {max}")]
    TooLong { got: usize, max: usize },
    #[error("pose rows must be {expected} wide, got buffer of {got} values")]
    BadPoseWidth { expected: usize, got: usize },
}

/// Scores are clamped into `[CLAMP, 1 - CLAMP]` before logs.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Leaky-ReLU negative slope used throughout the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Stacked 1-D convolution count `N`.
    pub conv_layers: usize,
    pub hidden_channels: usize,
    /// Odd kernel width.
    pub kernel_size: usize,
    pub u_max: usize,
    pub t_max: usize,
    pub source_embed_dim: usize,
    pub joint_count: usize,
    pub vocab_size: usize,
}

impl DiscriminatorConfig {
    /// Six convolution layers of 128 channels with kernel 3.
    pub fn preset(vocab_size: usize, joint_count: usize, u_max: usize, t_max: usize) -> Self {
        DiscriminatorConfig {
            conv_layers: 6,
            hidden_channels: 128,
            kernel_size: 3,
            u_max,
            t_max,
            source_embed_dim: 64,
            joint_count,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        if self.conv_layers == 0 {
            return Err(AdversarialError::Config(
                "at least one convolution layer required".into(),
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(AdversarialError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden_channels == 0 || self.source_embed_dim == 0 {
            return Err(AdversarialError::Config(
                "channel widths must be positive".into(),
            ));
        }
        if self.u_max == 0 || self.t_max == 0 {
            return Err(AdversarialError::Config(
                "padded maxima must be positive".into(),
            ));
        }
        Ok(())
    }

    fn pose_dim(&self) -> usize {
        3 * self.joint_count
    }
}

/// Conditional discriminator network.
#[derive(Clone)]
pub struct Discriminator<S> {
    config: DiscriminatorConfig,
    params: ParamStore<S>,
    src_table: ParamId,
    src_bias: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

impl<S: Scalar> Discriminator<S> {
    /// Xavier-initialised discriminator; parameter names live under
    /// the `discriminator.` namespace.
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self, AdversarialError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut counter = 0u64;
        let mut next_seed = || {
            counter += 1;
            seed.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        };
        let d_src = config.source_embed_dim;
        let src_table = params.add(
            "discriminator.src_embed.table",
            xavier_init(&[config.vocab_size, d_src], next_seed())?,
        );
        let src_bias = params.add("discriminator.src_embed.bias", Tensor::zeros(vec![1, d_src]));
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut in_ch = config.pose_dim() + d_src;
        for i in 0..config.conv_layers {
            let w = params.add(
                format!("discriminator.conv.{i}.weight"),
                xavier_init(
                    &[config.hidden_channels, in_ch, config.kernel_size],
                    next_seed(),
                )?,
            );
            let b = params.add(
                format!("discriminator.conv.{i}.bias"),
                Tensor::zeros(vec![1, config.hidden_channels]),
            );
            convs.push((w, b));
            in_ch = config.hidden_channels;
        }
        let out_w = params.add(
            "discriminator.out.weight",
            xavier_init(&[config.hidden_channels, 1], next_seed())?,
        );
        let out_b = params.add("discriminator.out.bias", Tensor::zeros(vec![1, 1]));
        Ok(Discriminator {
            config,
            params,
            src_table,
            src_bias,
            convs,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        g.bind_store(&self.params, trainable)
    }

    /// Embeds source tokens and zero-pads the rows to `T_max`.
    pub fn embed_and_pad_source(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        tokens: &[usize],
    ) -> Result<Var, AdversarialError> {
        if tokens.len() > self.config.t_max {
            return Err(AdversarialError::TooLong {
                got: tokens.len(),
                max: self.config.t_max,
            });
        }
        let rows = g.embed_lookup(binding.var(self.src_table), tokens)?;
        let rows = g.add_row(rows, binding.var(self.src_bias))?;
        pad_rows(g, rows, self.config.t_max)
    }

    /// Scores padded, counter-stripped pose rows (`U×3J` graph node)
    /// conditioned on the source sentence. Returns the pre-clamp
    /// sigmoid scalar.
    pub fn score(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        pose_rows: Var,
        tokens: &[usize],
    ) -> Result<Var, AdversarialError> {
        let dim = self.config.pose_dim();
        let got = g.shape(pose_rows).to_vec();
        if got.len() != 2 || got[1] != dim {
            return Err(AdversarialError::BadPoseWidth {
                expected: dim,
                got: got.iter().product(),
            });
        }
        let padded = pad_rows(g, pose_rows, self.config.u_max)?;
        let source = self.embed_and_pad_source(g, binding, tokens)?;
        let pooled = g.mean_rows(source)?;
        let conditioning = g.broadcast_row(pooled, self.config.u_max)?;
        let mut x = g.concat_cols(&[padded, conditioning])?;
        for (w, b) in &self.convs {
            let conv = g.conv1d_same(x, binding.var(*w), binding.var(*b))?;
            x = g.leaky_relu(conv, S::of_f64(LEAKY_SLOPE));
        }
        let pooled = g.mean_rows(x)?;
        let out = g.matmul(pooled, binding.var(self.out_w))?;
        let out = g.add_row(out, binding.var(self.out_b))?;
        Ok(g.sigmoid(out))
    }

    /// Host-level realism score for counter-stripped pose frames.
    pub fn discriminate(
        &self,
        pose_frames: &[f64],
        tokens: &[usize],
    ) -> Result<f64, AdversarialError> {
        let dim = self.config.pose_dim();
        if dim == 0 || pose_frames.len() % dim != 0 {
            return Err(AdversarialError::BadPoseWidth {
                expected: dim,
                got: pose_frames.len(),
            });
        }
        let rows = pose_frames.len() / dim;
        if rows > self.config.u_max {
            return Err(AdversarialError::TooLong {
                got: rows,
                max: self.config.u_max,
            });
        }
        let mut g = Graph::new();
        let binding = self.bind(&mut g, false);
        let pose = g.constant(
            vec![rows, dim],
            pose_frames.iter().map(|&v| S::of_f64(v)).collect(),
        );
        let score = self.score(&mut g, &binding, pose, tokens)?;
        Ok(g.scalar_value(score).as_f64())
    }
}

/// Appends all-zero rows up to `target_rows` (identity when already
/// at the target).
pub fn pad_rows<S: Scalar>(
    g: &mut Graph<S>,
    rows: Var,
    target_rows: usize,
) -> Result<Var, AdversarialError> {
    let shape = g.shape(rows).to_vec();
    let have = shape[0];
    if have > target_rows {
        return Err(AdversarialError::TooLong {
            got: have,
            max: target_rows,
        });
    }
    if have == target_rows {
        return Ok(rows);
    }
    let zeros = g.constant(
        vec![target_rows - have, shape[1]],
        vec![S::zero(); (target_rows - have) * shape[1]],
    );
    Ok(g.concat_rows(&[rows, zeros])?)
}

/// Host-side zero padding of counter-stripped frames to `u_max` rows.
pub fn pad_target(frames: &[f64], dim: usize, u_max: usize) -> Result<Vec<f64>, AdversarialError> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(AdversarialError::BadPoseWidth {
            expected: dim,
            got: frames.len(),
        });
    }
    let rows = frames.len() / dim;
    if rows > u_max {
        return Err(AdversarialError::TooLong {
            got: rows,
            max: u_max,
        });
    }
    let mut out = frames.to_vec();
    out.resize(u_max * dim, 0.0);
    Ok(out)
}

/// Discriminator and generator adversarial objectives from two realism
/// scores, with scores clamped into `[1e-7, 1-1e-7]` before logs:
/// `L_D = -(log d_real + log(1 - d_fake))`, and the non-saturating
/// generator term `L_G = -log d_fake`.
pub fn gan_losses<S: Scalar>(
    g: &mut Graph<S>,
    d_real: Var,
    d_fake: Var,
) -> Result<(Var, Var), AdversarialError> {
    let lo = S::of_f64(SCORE_CLAMP);
    let hi = S::of_f64(1.0 - SCORE_CLAMP);
    let real = g.clamp(d_real, lo, hi);
    let fake = g.clamp(d_fake, lo, hi);

    let log_real = g.log(real);
    let one = g.scalar(S::one());
    let neg_fake = g.scale(fake, -S::one());
    let one_minus_fake = g.add(one, neg_fake)?;
    let log_one_minus_fake = g.log(one_minus_fake);
    let sum = g.add(log_real, log_one_minus_fake)?;
    let loss_d = g.scale(sum, -S::one());

    let log_fake = g.log(fake);
    let loss_g = g.scale(log_fake, -S::one());
    Ok((loss_d, loss_g))
}

/// Non-saturating generator term `-log d_fake` alone, for the
/// generator phase where no real score exists in the graph.
pub fn generator_adv_loss<S: Scalar>(
    g: &mut Graph<S>,
    d_fake: Var,
) -> Result<Var, AdversarialError> {
    let lo = S::of_f64(SCORE_CLAMP);
    let hi = S::of_f64(1.0 - SCORE_CLAMP);
    let fake = g.clamp(d_fake, lo, hi);
    let log_fake = g.log(fake);
    Ok(g.scale(log_fake, -S::one()))
}

/// Scalar evaluation of [`gan_losses`] for reporting and tests.
pub fn gan_losses_scalar(d_real: f64, d_fake: f64) -> (f64, f64) {
    let mut g: Graph<f64> = Graph::new();
    let real = g.scalar(d_real);
    let fake = g.scalar(d_fake);
    let (ld, lg) = gan_losses(&mut g, real, fake).expect("scalar shapes");
    (g.scalar_value(ld), g.scalar_value(lg))
}

/// Weighted generator objective `λ_reg · L_reg + λ_gan · L_adv`.
pub fn generator_total_loss<S: Scalar>(
    g: &mut Graph<S>,
    l_reg: Var,
    l_adv: Var,
    lambda_reg: f64,
    lambda_gan: f64,
) -> Result<Var, AdversarialError> {
    let reg = g.scale(l_reg, S::of_f64(lambda_reg));
    let adv = g.scale(l_adv, S::of_f64(lambda_gan));
    Ok(g.add(reg, adv)?)
}
