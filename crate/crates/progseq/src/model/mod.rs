//! Encoder-decoder model over continuous pose targets.
//!
//! The encoder is a standard post-norm transformer over source token
//! embeddings with sinusoidal positional encoding. The decoder embeds
//! counter-carrying joint rows (no positional encoding: the counter
//! channel is the timing signal), applies causally-masked self
//! attention, attends over encoder output, and projects to one or more
//! future-frame slots of `3J+1` outputs (pose plus counter), or to
//! mixture parameters when the mixture head is selected.

mod generate;

pub use generate::{generate, FramePredictor, Generated, GenerationMode};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    xavier_init, AutodiffError, Binding, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::data::{FutureTargets, PoseSequence};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("model config: {0}")]
    Config(String),
    #[error("encoder input must be non-empty")]
    EmptySource,
    #[error("decoder input rows must be {expected} wide, got buffer of {got} values")]
    BadInputWidth { expected: usize, got: usize },
    #[error("generation produced an invalid sequence: {0}")]
    Generation(String),
}

/// Anti-drift input augmentation selected for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AugmentationMode {
    None,
    /// Gaussian input noise scaled by `rate` times the per-coordinate
    /// delta statistics of the previous epoch.
    Noise { rate: f64 },
    /// Counter-only decoder inputs.
    JustCounter,
}

/// Output head: plain regression or an isotropic Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum OutputHead {
    Regression,
    Mdn { components: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressiveModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub joint_count: usize,
    /// Total id space of the source vocabulary (reserved ids included).
    pub vocab_size: usize,
    /// Future-prediction window `(f_f, f_t)`; `(0, 1)` is plain
    /// next-frame training.
    pub future_window: (usize, usize),
    pub augmentation: AugmentationMode,
    pub head: OutputHead,
    /// Hard cap on generated sequence length.
    pub u_max: usize,
    /// Feedback generation stops once the predicted counter reaches
    /// `1 - termination_epsilon`.
    pub termination_epsilon: f64,
}

impl ProgressiveModelConfig {
    /// 2 layers, 4 heads, embedding 512: the regression/mixture
    /// default.
    pub fn regression_preset(vocab_size: usize, joint_count: usize) -> Self {
        ProgressiveModelConfig {
            layers: 2,
            heads: 4,
            embed_dim: 512,
            ff_dim: 1024,
            joint_count,
            vocab_size,
            future_window: (0, 1),
            augmentation: AugmentationMode::Noise { rate: 5.0 },
            head: OutputHead::Regression,
            u_max: 300,
            termination_epsilon: 0.02,
        }
    }

    /// 2 layers, 2 heads, embedding 256: the generator sizing used for
    /// adversarial training.
    pub fn adversarial_preset(vocab_size: usize, joint_count: usize) -> Self {
        ProgressiveModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 256,
            ff_dim: 512,
            ..Self::regression_preset(vocab_size, joint_count)
        }
    }

    /// Regression sizing with a 4-component mixture head.
    pub fn mdn_preset(vocab_size: usize, joint_count: usize) -> Self {
        ProgressiveModelConfig {
            head: OutputHead::Mdn { components: 4 },
            ..Self::regression_preset(vocab_size, joint_count)
        }
    }

    /// Pose-plus-counter output width `3J + 1`.
    pub fn out_dim(&self) -> usize {
        3 * self.joint_count + 1
    }

    /// Future-window slot count `f_t - f_f`.
    pub fn window(&self) -> usize {
        self.future_window.1 - self.future_window.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ff_dim == 0 {
            return Err(ModelError::Config(
                "layers, heads, embed_dim and ff_dim must be positive".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.joint_count == 0 {
            return Err(ModelError::Config("joint_count must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(ModelError::Config(
                "vocab_size must cover reserved ids plus content".into(),
            ));
        }
        if self.future_window.1 <= self.future_window.0 {
            return Err(ModelError::Config(format!(
                "future window ({}, {}) needs f_f < f_t",
                self.future_window.0, self.future_window.1
            )));
        }
        if self.u_max == 0 {
            return Err(ModelError::Config("u_max must be at least 1".into()));
        }
        if !(self.termination_epsilon > 0.0 && self.termination_epsilon < 0.5) {
            return Err(ModelError::Config(format!(
                "termination_epsilon {} outside (0, 0.5)",
                self.termination_epsilon
            )));
        }
        if let OutputHead::Mdn { components } = self.head {
            if components == 0 {
                return Err(ModelError::Config(
                    "mixture head needs at least one component".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone)]
struct EncoderLayerIds {
    norm1: LnIds,
    self_attn: AttnIds,
    norm2: LnIds,
    ff: FfIds,
}

#[derive(Clone)]
struct DecoderLayerIds {
    norm1: LnIds,
    self_attn: AttnIds,
    norm2: LnIds,
    cross_attn: AttnIds,
    norm3: LnIds,
    ff: FfIds,
}

#[derive(Clone)]
enum HeadIds {
    Regression {
        w: ParamId,
        b: ParamId,
    },
    Mdn {
        w_alpha: ParamId,
        b_alpha: ParamId,
        w_mu: ParamId,
        b_mu: ParamId,
        w_sigma: ParamId,
        b_sigma: ParamId,
    },
}

/// All learnable parameters plus the hyperparameters that shape them.
#[derive(Clone)]
pub struct ProgressiveModel<S> {
    config: ProgressiveModelConfig,
    params: ParamStore<S>,
    src_table: ParamId,
    src_bias: ParamId,
    tgt_weight: ParamId,
    tgt_bias: ParamId,
    encoder: Vec<EncoderLayerIds>,
    encoder_norm: LnIds,
    decoder: Vec<DecoderLayerIds>,
    decoder_norm: LnIds,
    head: HeadIds,
}

/// Head projections of a teacher-forced pass, before slot slicing.
pub enum HeadVars {
    /// `U × (W·(3J+1))`.
    Regression { out: Var },
    /// `logits: U×(W·M)`, `means: U×(W·M·(3J+1))`,
    /// `log_sigmas: U×(W·M)`.
    Mdn {
        logits: Var,
        means: Var,
        log_sigmas: Var,
    },
}

struct ParamBuilder<S> {
    store: ParamStore<S>,
    seed: u64,
    counter: u64,
}

impl<S: Scalar> ParamBuilder<S> {
    fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            seed,
            counter: 0,
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        self.seed
            .wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let seed = self.next_seed();
        let t = xavier_init(shape, seed).expect("valid weight shape");
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, len: usize) -> ParamId {
        self.store
            .add(name, Tensor::new(vec![1, len], vec![S::one(); len]))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{prefix}.wq"), &[d, d]),
            bq: self.zeros(format!("{prefix}.bq"), vec![1, d]),
            wk: self.weight(format!("{prefix}.wk"), &[d, d]),
            bk: self.zeros(format!("{prefix}.bk"), vec![1, d]),
            wv: self.weight(format!("{prefix}.wv"), &[d, d]),
            bv: self.zeros(format!("{prefix}.bv"), vec![1, d]),
            wo: self.weight(format!("{prefix}.wo"), &[d, d]),
            bo: self.zeros(format!("{prefix}.bo"), vec![1, d]),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gain: self.ones(format!("{prefix}.gain"), d),
            bias: self.zeros(format!("{prefix}.bias"), vec![1, d]),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, ff: usize) -> FfIds {
        FfIds {
            w1: self.weight(format!("{prefix}.w1"), &[d, ff]),
            b1: self.zeros(format!("{prefix}.b1"), vec![1, ff]),
            w2: self.weight(format!("{prefix}.w2"), &[ff, d]),
            b2: self.zeros(format!("{prefix}.b2"), vec![1, d]),
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> ProgressiveModel<S> {
    /// Builds a model with Xavier-initialised weights, zero biases,
    /// and unit layer-norm gains, reproducible from the seed.
    pub fn new(config: ProgressiveModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let in_dim = config.out_dim();
        let mut b = ParamBuilder::<S>::new(seed);

        // embedding biases are Xavier-initialised too: the zero start
        // row embeds to exactly this bias, and a zero bias would park
        // the first layer norm on its degenerate zero-variance point
        let src_table = b.weight("src_embed.table".into(), &[config.vocab_size, d]);
        let src_bias = b.weight("src_embed.bias".into(), &[1, d]);
        let tgt_weight = b.weight("tgt_embed.weight".into(), &[in_dim, d]);
        let tgt_bias = b.weight("tgt_embed.bias".into(), &[1, d]);

        let encoder = (0..config.layers)
            .map(|i| EncoderLayerIds {
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                self_attn: b.attn(&format!("encoder.{i}.self_attn"), d),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
                ff: b.ff(&format!("encoder.{i}.ff"), d, config.ff_dim),
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm_out", d);
        let decoder = (0..config.layers)
            .map(|i| DecoderLayerIds {
                norm1: b.norm(&format!("decoder.{i}.norm1"), d),
                self_attn: b.attn(&format!("decoder.{i}.self_attn"), d),
                norm2: b.norm(&format!("decoder.{i}.norm2"), d),
                cross_attn: b.attn(&format!("decoder.{i}.cross_attn"), d),
                norm3: b.norm(&format!("decoder.{i}.norm3"), d),
                ff: b.ff(&format!("decoder.{i}.ff"), d, config.ff_dim),
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm_out", d);

        let window = config.window();
        let head = match config.head {
            OutputHead::Regression => HeadIds::Regression {
                w: b.weight("head.weight".into(), &[d, window * in_dim]),
                b: b.zeros("head.bias".into(), vec![1, window * in_dim]),
            },
            OutputHead::Mdn { components } => HeadIds::Mdn {
                w_alpha: b.weight("head.alpha.weight".into(), &[d, window * components]),
                b_alpha: b.zeros("head.alpha.bias".into(), vec![1, window * components]),
                w_mu: b.weight(
                    "head.mu.weight".into(),
                    &[d, window * components * in_dim],
                ),
                b_mu: b.zeros(
                    "head.mu.bias".into(),
                    vec![1, window * components * in_dim],
                ),
                w_sigma: b.weight("head.sigma.weight".into(), &[d, window * components]),
                b_sigma: b.zeros("head.sigma.bias".into(), vec![1, window * components]),
            },
        };

        Ok(ProgressiveModel {
            config,
            params: b.store,
            src_table,
            src_bias,
            tgt_weight,
            tgt_bias,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
        })
    }

    pub fn config(&self) -> &ProgressiveModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Binds every parameter into the graph; `trainable: false` binds
    /// frozen leaves that block gradient flow.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        g.bind_store(&self.params, trainable)
    }

    /// Source embedding rows before positional encoding: one row per
    /// token, `w_t = table[x_t] + bias`.
    pub fn embed_source(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        tokens: &[usize],
    ) -> Result<Var, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySource);
        }
        let rows = g.embed_lookup(bound.var(self.src_table), tokens)?;
        Ok(g.add_row(rows, bound.var(self.src_bias))?)
    }

    /// Target joint-row embedding `W^y · j + b^y` for `U×(3J+1)` rows.
    pub fn embed_joints(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        rows: Var,
    ) -> Result<Var, ModelError> {
        let proj = g.matmul(rows, bound.var(self.tgt_weight))?;
        Ok(g.add_row(proj, bound.var(self.tgt_bias))?)
    }

    fn multi_head_attention(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        ids: &AttnIds,
        q_in: Var,
        kv_in: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var, ModelError> {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dk = d / h;
        let scale = S::of_f64(1.0 / (dk as f64).sqrt());

        let q = g.matmul(q_in, bound.var(ids.wq))?;
        let q = g.add_row(q, bound.var(ids.bq))?;
        let k = g.matmul(kv_in, bound.var(ids.wk))?;
        let k = g.add_row(k, bound.var(ids.bk))?;
        let v = g.matmul(kv_in, bound.var(ids.wv))?;
        let v = g.add_row(v, bound.var(ids.bv))?;

        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_cols(q, i * dk, (i + 1) * dk)?;
            let kh = g.slice_cols(k, i * dk, (i + 1) * dk)?;
            let vh = g.slice_cols(v, i * dk, (i + 1) * dk)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let scaled = g.scale(logits, scale);
            let attn = g.softmax_rows(scaled, mask.clone())?;
            heads.push(g.matmul(attn, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        let out = g.matmul(concat, bound.var(ids.wo))?;
        Ok(g.add_row(out, bound.var(ids.bo))?)
    }

    fn feed_forward(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        ids: &FfIds,
        x: Var,
    ) -> Result<Var, ModelError> {
        let h = g.matmul(x, bound.var(ids.w1))?;
        let h = g.add_row(h, bound.var(ids.b1))?;
        let h = g.relu(h);
        let out = g.matmul(h, bound.var(ids.w2))?;
        Ok(g.add_row(out, bound.var(ids.b2))?)
    }

    fn norm(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        ids: &LnIds,
        x: Var,
    ) -> Result<Var, ModelError> {
        Ok(g.layer_norm(
            x,
            bound.var(ids.gain),
            bound.var(ids.bias),
            S::of_f64(LAYER_NORM_EPS),
        )?)
    }

    /// Encodes a token sequence to contextual representations `T×d`.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        tokens: &[usize],
    ) -> Result<Var, ModelError> {
        let embedded = self.embed_source(g, bound, tokens)?;
        let pe = g.constant(
            vec![tokens.len(), self.config.embed_dim],
            positional_encoding_matrix(tokens.len(), self.config.embed_dim)
                .into_iter()
                .map(S::of_f64)
                .collect(),
        );
        // pre-norm sub-layers: x + sublayer(norm(x)), with a final
        // normalization after the stack
        let mut x = g.add(embedded, pe)?;
        for layer in &self.encoder {
            let normed = self.norm(g, bound, &layer.norm1, x)?;
            let attn = self.multi_head_attention(g, bound, &layer.self_attn, normed, normed, None)?;
            x = g.add(x, attn)?;
            let normed = self.norm(g, bound, &layer.norm2, x)?;
            let ff = self.feed_forward(g, bound, &layer.ff, normed)?;
            x = g.add(x, ff)?;
        }
        self.norm(g, bound, &self.encoder_norm, x)
    }

    /// Decodes embedded joint rows under a causal mask, attending over
    /// encoder output; returns `U×d` features.
    pub fn decode(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        input_rows: Var,
        encoder_out: Var,
    ) -> Result<Var, ModelError> {
        let rows = g.shape(input_rows)[0];
        let mask = Arc::new(causal_mask(rows));
        let mut x = self.embed_joints(g, bound, input_rows)?;
        for layer in &self.decoder {
            let normed = self.norm(g, bound, &layer.norm1, x)?;
            let sa = self.multi_head_attention(
                g,
                bound,
                &layer.self_attn,
                normed,
                normed,
                Some(mask.clone()),
            )?;
            x = g.add(x, sa)?;
            let normed = self.norm(g, bound, &layer.norm2, x)?;
            let ca =
                self.multi_head_attention(g, bound, &layer.cross_attn, normed, encoder_out, None)?;
            x = g.add(x, ca)?;
            let normed = self.norm(g, bound, &layer.norm3, x)?;
            let ff = self.feed_forward(g, bound, &layer.ff, normed)?;
            x = g.add(x, ff)?;
        }
        self.norm(g, bound, &self.decoder_norm, x)
    }

    /// Projects decoder features through the configured output head.
    pub fn apply_head(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        features: Var,
    ) -> Result<HeadVars, ModelError> {
        match &self.head {
            HeadIds::Regression { w, b } => {
                let out = g.matmul(features, bound.var(*w))?;
                let out = g.add_row(out, bound.var(*b))?;
                Ok(HeadVars::Regression { out })
            }
            HeadIds::Mdn {
                w_alpha,
                b_alpha,
                w_mu,
                b_mu,
                w_sigma,
                b_sigma,
            } => {
                let logits = g.matmul(features, bound.var(*w_alpha))?;
                let logits = g.add_row(logits, bound.var(*b_alpha))?;
                let means = g.matmul(features, bound.var(*w_mu))?;
                let means = g.add_row(means, bound.var(*b_mu))?;
                let log_sigmas = g.matmul(features, bound.var(*w_sigma))?;
                let log_sigmas = g.add_row(log_sigmas, bound.var(*b_sigma))?;
                Ok(HeadVars::Mdn {
                    logits,
                    means,
                    log_sigmas,
                })
            }
        }
    }

    /// Full teacher-forced pass: encode, decode the given input rows
    /// (`U×(3J+1)`, start row included), and apply the head.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<S>,
        bound: &Binding,
        tokens: &[usize],
        input_rows: &[f64],
    ) -> Result<(Var, HeadVars), ModelError> {
        let width = self.config.out_dim();
        if input_rows.is_empty() || input_rows.len() % width != 0 {
            return Err(ModelError::BadInputWidth {
                expected: width,
                got: input_rows.len(),
            });
        }
        let rows = input_rows.len() / width;
        let enc = self.encode(g, bound, tokens)?;
        let input = g.constant(
            vec![rows, width],
            input_rows.iter().map(|&v| S::of_f64(v)).collect(),
        );
        let features = self.decode(g, bound, input, enc)?;
        let head = self.apply_head(g, bound, features)?;
        Ok((features, head))
    }
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V` with optional
/// position mask. Output rows are convex combinations of `v` rows.
pub fn attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var, ModelError> {
    let dk = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, S::of_f64(1.0 / (dk as f64).sqrt()));
    let weights = g.softmax_rows(scaled, mask)?;
    Ok(g.matmul(weights, v)?)
}

/// Strictly causal-inclusive mask: query `q` may attend keys `k <= q`.
pub fn causal_mask(rows: usize) -> Vec<bool> {
    let mut mask = vec![false; rows * rows];
    for q in 0..rows {
        for k in 0..=q {
            mask[q * rows + k] = true;
        }
    }
    mask
}

/// Sinusoidal positional encoding: dimension `2i` carries
/// `sin(t / 10000^(2i/d))`, dimension `2i+1` the matching cosine.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; d];
    for i in 0..d / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        pe[2 * i] = (t as f64 * rate).sin();
        if 2 * i + 1 < d {
            pe[2 * i + 1] = (t as f64 * rate).cos();
        }
    }
    pe
}

fn positional_encoding_matrix(rows: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for t in 0..rows {
        out.extend_from_slice(&positional_encoding(t, d));
    }
    out
}

/// Decoder input rows for teacher forcing: a zero start row at counter
/// zero, then the sequence's rows shifted right by one.
pub fn decoder_input_rows(seq: &PoseSequence) -> Vec<f64> {
    let width = seq.dim() + 1;
    let rows = seq.rows_with_counters();
    let mut out = vec![0.0; width];
    out.extend_from_slice(&rows[..(seq.len() - 1) * width]);
    out
}

/// Masked mean-squared error over prediction slots.
///
/// `preds` must be the regression head output `U×(W·D)`; targets and
/// mask come from [`future_targets`](crate::data::future_targets).
/// The result is the mean over unmasked rows and all `D` coordinate
/// dimensions (counter channel included).
pub fn mse_loss<S: Scalar>(
    g: &mut Graph<S>,
    preds: Var,
    targets: &FutureTargets,
) -> Result<Var, ModelError> {
    let dim = targets.dim;
    let window = targets.window;
    let rows = g.shape(preds)[0];
    let valid = targets.valid_rows().max(1);
    let mut total: Option<Var> = None;
    for w in 0..window {
        let pred_w = if window == 1 {
            preds
        } else {
            g.slice_cols(preds, w * dim, (w + 1) * dim)?
        };
        let mut tgt = Vec::with_capacity(rows * dim);
        let mut mask_expanded = Vec::with_capacity(rows * dim);
        for u in 0..rows {
            let r = u * window + w;
            tgt.extend(
                targets.targets[r * dim..(r + 1) * dim]
                    .iter()
                    .map(|&v| S::of_f64(v)),
            );
            let m = if targets.mask[r] { S::one() } else { S::zero() };
            mask_expanded.extend(std::iter::repeat(m).take(dim));
        }
        let tgt = g.constant(vec![rows, dim], tgt);
        let mask = g.constant(vec![rows, dim], mask_expanded);
        let diff = g.sub(pred_w, tgt)?;
        let sq = g.mul(diff, diff)?;
        let masked = g.mul(sq, mask)?;
        let sum = g.sum_all(masked);
        total = Some(match total {
            Some(t) => g.add(t, sum)?,
            None => sum,
        });
    }
    let total = total.expect("window >= 1");
    Ok(g.scale(total, S::one() / S::of_usize(valid * dim)))
}

#[cfg(test)]
mod tests;
