//! Full finite-difference verification: every graph primitive and
//! every composed training loss, checked against central differences
//! in double precision over seeded random inputs, plus whole-model
//! parameter checks on small configurations.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::adversarial::{
    gan_losses, generator_adv_loss, Discriminator, DiscriminatorConfig,
};
use crate::autodiff::{finite_diff_check, AutodiffError, GradCheckRow, Graph, Tensor, Var};
use crate::model::{AugmentationMode, OutputHead, ProgressiveModel, ProgressiveModelConfig};
use crate::train::{base_loss, fake_pose_rows, prepare_item};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const SEEDS: u64 = 20;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed())
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>14} {:>10} {:>6}\n",
            "check", "max rel err", "tolerance", "state"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>14.3e} {:>10.1e} {:>6}\n",
                row.name,
                row.max_rel_err,
                row.tolerance,
                if row.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

/// Random values kept away from zero so kinked activations see no
/// finite-difference crossing.
fn rand_away_from_zero(rng: &mut ChaCha12Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(margin..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

fn weighted_scalar(
    g: &mut Graph<f64>,
    out: Var,
    seed: u64,
) -> Result<Var, AutodiffError> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xBEEF);
    let weights = g.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let prod = g.mul(out, weights)?;
    Ok(g.sum_all(prod))
}

/// Runs one named check over all seeds and keeps the worst error.
fn seeded_check<F>(
    rows: &mut Vec<GradCheckRow>,
    name: &str,
    mut build_case: F,
) -> Result<(), AutodiffError>
where
    F: FnMut(
        &mut ChaCha12Rng,
        u64,
    ) -> Result<
        (
            Vec<Tensor<f64>>,
            Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>,
        ),
        AutodiffError,
    >,
{
    let mut worst = GradCheckRow {
        name: name.to_string(),
        max_rel_err: 0.0,
        tolerance: GRADCHECK_TOLERANCE,
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x5DEECE66D).wrapping_add(11));
        let (inputs, builder) = build_case(&mut rng, seed)?;
        let row = finite_diff_check(name, &inputs, GRADCHECK_STEP, GRADCHECK_TOLERANCE, |g, vs| {
            builder(g, vs)
        })?;
        if row.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = row.max_rel_err;
        }
    }
    rows.push(worst);
    Ok(())
}

fn op_checks(rows: &mut Vec<GradCheckRow>) -> Result<(), AutodiffError> {
    seeded_check(rows, "matmul", |rng, seed| {
        let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
        let b = rand_tensor(rng, &[4, 2], -1.5, 1.5);
        Ok((
            vec![a, b],
            Box::new(move |g, vs| {
                let o = g.matmul(vs[0], vs[1])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "transpose", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.transpose(vs[0])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "add", |rng, seed| {
        let a = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        let b = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |g, vs| {
                let o = g.add(vs[0], vs[1])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "sub", |rng, seed| {
        let a = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        let b = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |g, vs| {
                let o = g.sub(vs[0], vs[1])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "mul", |rng, seed| {
        let a = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        let b = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(move |g, vs| {
                let o = g.mul(vs[0], vs[1])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "add_row", |rng, seed| {
        let m = rand_tensor(rng, &[4, 5], -2.0, 2.0);
        let row = rand_tensor(rng, &[1, 5], -2.0, 2.0);
        Ok((
            vec![m, row],
            Box::new(move |g, vs| {
                let o = g.add_row(vs[0], vs[1])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "concat_slice", |rng, seed| {
        let x = rand_tensor(rng, &[4, 6], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let top = g.slice_rows(vs[0], 0, 2)?;
                let bottom = g.slice_rows(vs[0], 1, 4)?;
                let rows = g.concat_rows(&[top, bottom])?;
                let left = g.slice_cols(rows, 0, 3)?;
                let right = g.slice_cols(rows, 2, 6)?;
                let cols = g.concat_cols(&[right, left])?;
                weighted_scalar(g, cols, seed)
            }),
        ))
    })?;
    seeded_check(rows, "softmax_rows", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -3.0, 3.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.softmax_rows(vs[0], None)?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "softmax_masked", |rng, seed| {
        let x = rand_tensor(rng, &[4, 4], -3.0, 3.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let mask = Arc::new(crate::model::causal_mask(4));
                let o = g.softmax_rows(vs[0], Some(mask))?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "layer_norm", |rng, seed| {
        let x = rand_tensor(rng, &[3, 6], -2.0, 2.0);
        let gain = rand_tensor(rng, &[1, 6], 0.5, 1.5);
        let bias = rand_tensor(rng, &[1, 6], -0.5, 0.5);
        Ok((
            vec![x, gain, bias],
            Box::new(move |g, vs| {
                let o = g.layer_norm(vs[0], vs[1], vs[2], 1e-5)?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "relu", |rng, seed| {
        let x = rand_away_from_zero(rng, &[3, 5], 1e-2);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.relu(vs[0]);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "leaky_relu", |rng, seed| {
        let x = rand_away_from_zero(rng, &[3, 5], 1e-2);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.leaky_relu(vs[0], 0.2);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "sigmoid", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -3.0, 3.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.sigmoid(vs[0]);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "exp", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.exp(vs[0]);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "log", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], 0.2, 3.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.log(vs[0]);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "clamp", |rng, seed| {
        // values away from the clamp bounds so FD never crosses them
        let x = rand_away_from_zero(rng, &[3, 5], 0.05);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let o = g.clamp(vs[0], -2.5, 2.5);
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "reductions", |rng, _seed| {
        let x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        Ok((
            vec![x],
            Box::new(move |g, vs| {
                let m = g.mean_rows(vs[0])?;
                let sq = g.mul(m, m)?;
                let s = g.sum_all(sq);
                let m_all = g.mean_all(vs[0]);
                Ok(g.add(s, m_all)?)
            }),
        ))
    })?;
    seeded_check(rows, "broadcast_row", |rng, seed| {
        let row = rand_tensor(rng, &[1, 5], -2.0, 2.0);
        Ok((
            vec![row],
            Box::new(move |g, vs| {
                let b = g.broadcast_row(vs[0], 6)?;
                weighted_scalar(g, b, seed)
            }),
        ))
    })?;
    seeded_check(rows, "embed_lookup", |rng, seed| {
        let table = rand_tensor(rng, &[5, 4], -1.5, 1.5);
        Ok((
            vec![table],
            Box::new(move |g, vs| {
                let o = g.embed_lookup(vs[0], &[1, 3, 1, 0])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "conv1d", |rng, seed| {
        let x = rand_tensor(rng, &[6, 3], -1.5, 1.5);
        let w = rand_tensor(rng, &[4, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[1, 4], -0.5, 0.5);
        Ok((
            vec![x, w, b],
            Box::new(move |g, vs| {
                let o = g.conv1d_same(vs[0], vs[1], vs[2])?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "mdn_select", |rng, seed| {
        // logits held constant: the selection is not differentiable
        let means = rand_tensor(rng, &[3, 8], -1.5, 1.5);
        let logit_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok((
            vec![means],
            Box::new(move |g, vs| {
                let logits = g.constant(vec![3, 2], logit_vals.clone());
                let o = g.mdn_select(logits, vs[0], 4)?;
                weighted_scalar(g, o, seed)
            }),
        ))
    })?;
    seeded_check(rows, "mdn_nll", |rng, _seed| {
        let logits = rand_tensor(rng, &[3, 3], -1.0, 1.0);
        let means = rand_tensor(rng, &[3, 6], -1.5, 1.5);
        let sigmas = rand_tensor(rng, &[3, 3], -0.5, 0.5);
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Ok((
            vec![logits, means, sigmas],
            Box::new(move |g, vs| {
                let nll = g.mdn_nll(
                    vs[0],
                    vs[1],
                    vs[2],
                    Arc::new(targets.clone()),
                    Arc::new(vec![true, true, false]),
                    2,
                    1e-4,
                )?;
                Ok(g.sum_all(nll))
            }),
        ))
    })?;
    Ok(())
}

fn composed_loss_checks(rows: &mut Vec<GradCheckRow>) -> Result<(), AutodiffError> {
    seeded_check(rows, "loss_mse_masked", |rng, _seed| {
        let pred = rand_tensor(rng, &[5, 8], -1.5, 1.5);
        let target_vals: Vec<f64> = (0..5 * 2 * 4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Ok((
            vec![pred],
            Box::new(move |g, vs| {
                let targets = crate::data::FutureTargets {
                    window: 2,
                    targets: target_vals.clone(),
                    mask: vec![
                        true, true, true, false, true, true, false, false, true, true,
                    ],
                    dim: 4,
                };
                crate::model::mse_loss(g, vs[0], &targets).map_err(|e| match e {
                    crate::model::ModelError::Autodiff(a) => a,
                    other => AutodiffError::Invalid {
                        op: "mse",
                        msg: other.to_string(),
                    },
                })
            }),
        ))
    })?;

    let disc_cfg = DiscriminatorConfig {
        conv_layers: 2,
        hidden_channels: 6,
        kernel_size: 3,
        u_max: 8,
        t_max: 3,
        source_embed_dim: 4,
        joint_count: 1,
        vocab_size: 6,
    };
    let map_err = |e: crate::adversarial::AdversarialError| match e {
        crate::adversarial::AdversarialError::Autodiff(a) => a,
        other => AutodiffError::Invalid {
            op: "adversarial",
            msg: other.to_string(),
        },
    };
    seeded_check(rows, "loss_gan_discriminator", |rng, seed| {
        let disc = Discriminator::<f64>::new(disc_cfg.clone(), seed ^ 0xAD)
            .expect("config is valid");
        let real = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        let fake = rand_tensor(rng, &[6, 3], -1.0, 1.0);
        Ok((
            vec![real, fake],
            Box::new(move |g, vs| {
                let binding = disc.bind(g, false);
                let d_real = disc.score(g, &binding, vs[0], &[2, 3]).map_err(map_err)?;
                let d_fake = disc.score(g, &binding, vs[1], &[2, 3]).map_err(map_err)?;
                let (loss_d, _) = gan_losses(g, d_real, d_fake).map_err(map_err)?;
                Ok(loss_d)
            }),
        ))
    })?;
    seeded_check(rows, "loss_gan_generator", |rng, seed| {
        let disc = Discriminator::<f64>::new(disc_cfg.clone(), seed ^ 0xAE)
            .expect("config is valid");
        let fake = rand_tensor(rng, &[6, 3], -1.0, 1.0);
        Ok((
            vec![fake],
            Box::new(move |g, vs| {
                let binding = disc.bind(g, false);
                let d_fake = disc.score(g, &binding, vs[0], &[4]).map_err(map_err)?;
                generator_adv_loss(g, d_fake).map_err(map_err)
            }),
        ))
    })?;
    Ok(())
}

/// Finite differences over every model parameter against the actual
/// training loss path.
fn model_param_check(
    name: &str,
    config: ProgressiveModelConfig,
    regime_adversarial: bool,
    step: f64,
) -> Result<GradCheckRow, AutodiffError> {
    // tiny scale: three source tokens, four target frames
    let mut rng = ChaCha12Rng::seed_from_u64(91);
    let frames: Vec<f64> = (0..4 * 3 * config.joint_count)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let pose = crate::data::PoseSequence::counter_encode(frames, config.joint_count)
        .expect("non-empty frames");
    let pair = crate::data::SentencePair {
        tokens: vec![0, 1, 2],
        pose,
    };
    let mut model =
        ProgressiveModel::<f64>::new(config, 17).expect("config validated by caller");
    let disc = if regime_adversarial {
        Some(
            Discriminator::<f64>::new(
                DiscriminatorConfig {
                    conv_layers: 2,
                    hidden_channels: 6,
                    kernel_size: 3,
                    u_max: 160,
                    t_max: 8,
                    joint_count: model.config().joint_count,
                    vocab_size: model.config().vocab_size,
                    source_embed_dim: 4,
                },
                23,
            )
            .expect("config is valid"),
        )
    } else {
        None
    };
    let stats = crate::data::NoiseStats::zeros(3 * model.config().joint_count);
    let item = prepare_item(&pair, model.config(), &stats, 0)
        .expect("item preparation is infallible here");

    let eval_loss = |model: &ProgressiveModel<f64>| -> f64 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let (base, head) = base_loss(&mut g, model, &bound, &item).expect("loss builds");
        let total = match &disc {
            Some(d) => {
                let fake = fake_pose_rows(&mut g, model, &head).expect("fake rows");
                let frozen = d.bind(&mut g, false);
                let d_fake = d.score(&mut g, &frozen, fake, &item.tokens).expect("score");
                let adv = generator_adv_loss(&mut g, d_fake).expect("adv loss");
                crate::adversarial::generator_total_loss(&mut g, base, adv, 100.0, 0.05)
                    .expect("total loss")
            }
            None => base,
        };
        g.scalar_value(total)
    };

    // analytic pass
    model.params_mut().zero_grads();
    {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let (base, head) = base_loss(&mut g, &model, &bound, &item).expect("loss builds");
        let total = match &disc {
            Some(d) => {
                let fake = fake_pose_rows(&mut g, &model, &head).expect("fake rows");
                let frozen = d.bind(&mut g, false);
                let d_fake = d
                    .score(&mut g, &frozen, fake, &item.tokens)
                    .expect("score");
                let adv = generator_adv_loss(&mut g, d_fake).expect("adv loss");
                crate::adversarial::generator_total_loss(&mut g, base, adv, 100.0, 0.05)
                    .expect("total loss")
            }
            None => base,
        };
        g.backward(total)?;
        g.scatter_grads(model.params_mut());
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, _, t)| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let ids: Vec<_> = model.params().ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for e in 0..model.params().get(*id).numel() {
            let base_v = model.params().get(*id).values()[e];
            model.params_mut().get_mut(*id).values_mut()[e] = base_v + step;
            let plus = eval_loss(&model);
            model.params_mut().get_mut(*id).values_mut()[e] = base_v - step;
            let minus = eval_loss(&model);
            model.params_mut().get_mut(*id).values_mut()[e] = base_v;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_err,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn tiny_model_config(heads: usize, head: OutputHead) -> ProgressiveModelConfig {
    ProgressiveModelConfig {
        layers: 1,
        heads,
        embed_dim: 8,
        ff_dim: 12,
        joint_count: 2,
        vocab_size: 6,
        future_window: (0, 2),
        augmentation: AugmentationMode::None,
        head,
        u_max: 160,
        termination_epsilon: 0.02,
    }
}

/// The complete verification table.
pub fn run_full_gradcheck() -> Result<GradCheckReport, AutodiffError> {
    let mut rows = Vec::new();
    op_checks(&mut rows)?;
    composed_loss_checks(&mut rows)?;
    rows.push(model_param_check(
        "model_regression_h1",
        ProgressiveModelConfig {
            heads: 1,
            ..tiny_model_config(1, OutputHead::Regression)
        },
        false,
        GRADCHECK_STEP,
    )?);
    rows.push(model_param_check(
        "model_regression_h2",
        tiny_model_config(2, OutputHead::Regression),
        false,
        GRADCHECK_STEP,
    )?);
    // The mixture surface at random init has third derivatives large
    // enough that an h=1e-5 stencil is truncation-dominated; a denser
    // stencil keeps the comparison meaningful in f64.
    rows.push(model_param_check(
        "model_mdn_m2",
        tiny_model_config(2, OutputHead::Mdn { components: 2 }),
        false,
        1e-6,
    )?);
    rows.push(model_param_check(
        "model_adversarial_total",
        tiny_model_config(2, OutputHead::Regression),
        true,
        GRADCHECK_STEP,
    )?);
    Ok(GradCheckReport { rows })
}
