use std::sync::Arc;

use super::*;
use crate::autodiff::Graph;
use crate::data::{future_targets, PoseSequence};

fn tiny_config() -> ProgressiveModelConfig {
    ProgressiveModelConfig {
        layers: 1,
        heads: 2,
        embed_dim: 8,
        ff_dim: 16,
        joint_count: 2,
        vocab_size: 6,
        future_window: (0, 1),
        augmentation: AugmentationMode::None,
        head: OutputHead::Regression,
        u_max: 50,
        termination_epsilon: 0.02,
    }
}

fn seq(u: usize, joints: usize, scale: f64) -> PoseSequence {
    let dim = 3 * joints;
    let frames = (0..u * dim).map(|i| (i as f64 * 0.31).sin() * scale).collect();
    PoseSequence::counter_encode(frames, joints).unwrap()
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let mut c = tiny_config();
    c.heads = 3; // 8 % 3 != 0
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.termination_epsilon = 0.5;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.u_max = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.head = OutputHead::Mdn { components: 0 };
    assert!(c.validate().is_err());
}

#[test]
fn source_embedding_rows_follow_tokens() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 1).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let out = model.embed_source(&mut g, &bound, &[3, 5, 3]).unwrap();
    assert_eq!(g.shape(out), &[3, 8]);
    let v = g.value(out);
    // identical tokens embed identically before positional encoding
    assert_eq!(&v[0..8], &v[16..24]);
    // row equals table row plus bias
    let table = model.params().get(model.params().find("src_embed.table").unwrap());
    let bias = model.params().get(model.params().find("src_embed.bias").unwrap());
    for j in 0..8 {
        let expect = table.values()[3 * 8 + j] + bias.values()[j];
        assert!((v[j] - expect).abs() < 1e-15);
    }
}

#[test]
fn positional_encoding_closed_forms() {
    let pe0 = positional_encoding(0, 8);
    for i in 0..4 {
        assert_eq!(pe0[2 * i], 0.0);
        assert_eq!(pe0[2 * i + 1], 1.0);
    }
    let pe1 = positional_encoding(1, 8);
    assert!((pe1[0] - 1f64.sin()).abs() < 1e-12);
    assert_eq!(positional_encoding(7, 16), positional_encoding(7, 16));
}

#[test]
fn attention_with_equal_logits_averages_values() {
    let mut g: Graph<f64> = Graph::new();
    let q = g.constant(vec![2, 2], vec![0.0; 4]);
    let k = g.constant(vec![3, 2], vec![0.0; 6]);
    let v = g.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = attention(&mut g, q, k, v, None).unwrap();
    // mean of V rows = [3, 4]
    assert!((g.value(out)[0] - 3.0).abs() < 1e-12);
    assert!((g.value(out)[1] - 4.0).abs() < 1e-12);
}

#[test]
fn causal_first_row_sees_only_first_key() {
    let run = |v_tail: f64| {
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(vec![2, 2], vec![0.3, -0.4, 0.9, 0.2]);
        let k = g.constant(vec![2, 2], vec![0.5, 0.1, -0.7, 0.8]);
        let v = g.constant(vec![2, 2], vec![1.0, 2.0, v_tail, v_tail]);
        let mask = Arc::new(causal_mask(2));
        let out = attention(&mut g, q, k, v, Some(mask)).unwrap();
        g.value(out)[..2].to_vec()
    };
    assert_eq!(run(5.0), run(-9.0));
}

#[test]
fn attention_scaling_is_identity_at_dk_one() {
    let mut g: Graph<f64> = Graph::new();
    let q = g.constant(vec![2, 1], vec![0.7, -1.3]);
    let k = g.constant(vec![2, 1], vec![0.2, 0.9]);
    let v = g.constant(vec![2, 1], vec![1.5, -0.5]);
    let scaled = attention(&mut g, q, k, v, None).unwrap();
    // unscaled path: logits = q k^T directly
    let kt = g.transpose(k).unwrap();
    let logits = g.matmul(q, kt).unwrap();
    let w = g.softmax_rows(logits, None).unwrap();
    let unscaled = g.matmul(w, v).unwrap();
    assert_eq!(g.value(scaled), g.value(unscaled));
}

#[test]
fn single_head_with_identity_projections_reduces_to_attention() {
    let mut config = tiny_config();
    config.heads = 1;
    let mut model: ProgressiveModel<f64> = ProgressiveModel::new(config, 2).unwrap();
    let d = 8;
    // overwrite every projection with the identity and zero biases
    let identity: Vec<f64> = (0..d * d)
        .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
        .collect();
    for name in ["wq", "wk", "wv", "wo"] {
        let id = model
            .params()
            .find(&format!("encoder.0.self_attn.{name}"))
            .unwrap();
        *model.params_mut().get_mut(id).values_mut() = identity.clone();
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(vec![3, d], (0..3 * d).map(|i| (i as f64 * 0.17).cos()).collect());
    let mha = model
        .multi_head_attention(&mut g, &bound, &model.encoder[0].self_attn, x, x, None)
        .unwrap();
    let plain = attention(&mut g, x, x, x, None).unwrap();
    for (a, b) in g.value(mha).iter().zip(g.value(plain)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn encode_shape_determinism_and_order_sensitivity() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 3).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let a = model.encode(&mut g, &bound, &[2, 3, 4]).unwrap();
    assert_eq!(g.shape(a), &[3, 8]);
    let b = model.encode(&mut g, &bound, &[2, 3, 4]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let permuted = model.encode(&mut g, &bound, &[4, 3, 2]).unwrap();
    assert_ne!(g.value(a), g.value(permuted));
}

#[test]
fn encode_rejects_empty_source() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 3).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    assert!(matches!(
        model.encode(&mut g, &bound, &[]),
        Err(ModelError::EmptySource)
    ));
}

#[test]
fn joint_embedding_is_affine() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 4).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let width = model.config().out_dim();
    let a: Vec<f64> = (0..width).map(|i| 0.1 * i as f64).collect();
    let b: Vec<f64> = (0..width).map(|i| -0.07 * i as f64 + 0.3).collect();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();

    let va = g.constant(vec![1, width], a);
    let vb = g.constant(vec![1, width], b);
    let vsum = g.constant(vec![1, width], sum);
    let zero = g.constant(vec![1, width], vec![0.0; width]);

    let ea = model.embed_joints(&mut g, &bound, va).unwrap();
    let eb = model.embed_joints(&mut g, &bound, vb).unwrap();
    let esum = model.embed_joints(&mut g, &bound, vsum).unwrap();
    let ezero = model.embed_joints(&mut g, &bound, zero).unwrap();
    assert_eq!(g.shape(ea), &[1, 8]);

    // affine: embed(a+b) = embed(a) + embed(b) - bias, and embed(0) = bias
    let bias = model.params().get(model.params().find("tgt_embed.bias").unwrap());
    for j in 0..8 {
        assert!((g.value(ezero)[j] - bias.values()[j]).abs() < 1e-15);
        let lhs = g.value(esum)[j];
        let rhs = g.value(ea)[j] + g.value(eb)[j] - bias.values()[j];
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn decoder_output_is_causal() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 5).unwrap();
    let s = seq(6, 2, 0.8);
    let base_rows = decoder_input_rows(&s);
    let width = model.config().out_dim();

    let run = |rows: &[f64]| {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let (features, _) = model
            .teacher_forced(&mut g, &bound, &[2, 3], rows)
            .unwrap();
        g.value(features).to_vec()
    };
    let base = run(&base_rows);
    // perturb input rows strictly after position 2
    let mut poked = base_rows.clone();
    for v in poked[3 * width..].iter_mut() {
        *v += 10.0;
    }
    let out = run(&poked);
    let d = model.config().embed_dim;
    assert_eq!(base[..3 * d], out[..3 * d], "outputs at <= u changed");
    assert_ne!(base[3 * d..], out[3 * d..], "future outputs must change");
}

#[test]
fn decoder_output_count_matches_input_count() {
    let model: ProgressiveModel<f64> = ProgressiveModel::new(tiny_config(), 6).unwrap();
    let s = seq(5, 2, 0.5);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let (features, head) = model
        .teacher_forced(&mut g, &bound, &[1], &decoder_input_rows(&s))
        .unwrap();
    assert_eq!(g.shape(features), &[5, 8]);
    match head {
        HeadVars::Regression { out } => assert_eq!(g.shape(out), &[5, 7]),
        HeadVars::Mdn { .. } => panic!("regression head expected"),
    }
}

#[test]
fn mse_loss_examples() {
    let s = seq(4, 1, 0.6);
    let targets = future_targets(&s, 0, 1).unwrap();
    let rows = s.rows_with_counters();
    let dim = targets.dim;

    // exact prediction: zero loss
    let mut g: Graph<f64> = Graph::new();
    let pred = g.constant(vec![4, dim], rows.clone());
    let loss = mse_loss(&mut g, pred, &targets).unwrap();
    assert!(g.scalar_value(loss).abs() < 1e-15);

    // constant offset delta on every coordinate: loss = delta^2
    let delta = 0.37;
    let mut g: Graph<f64> = Graph::new();
    let shifted: Vec<f64> = rows.iter().map(|v| v + delta).collect();
    let pred = g.constant(vec![4, dim], shifted);
    let loss = mse_loss(&mut g, pred, &targets).unwrap();
    assert!((g.scalar_value(loss) - delta * delta).abs() < 1e-12);

    // masking everything except one frame equals that frame's error
    let mut only_frame = future_targets(&s, 0, 1).unwrap();
    for (i, m) in only_frame.mask.iter_mut().enumerate() {
        *m = i == 2;
    }
    let mut g: Graph<f64> = Graph::new();
    let mut noisy = rows.clone();
    for (i, v) in noisy.iter_mut().enumerate() {
        if i / dim == 2 {
            *v += 0.5;
        } else {
            *v -= 123.0; // wildly wrong but masked out
        }
    }
    let pred = g.constant(vec![4, dim], noisy);
    let loss = mse_loss(&mut g, pred, &only_frame).unwrap();
    assert!((g.scalar_value(loss) - 0.25).abs() < 1e-12);
}

#[test]
fn teacher_forced_loss_is_finite_and_backprops_to_params() {
    let corpus = crate::data::generate_corpus(9, 4, 6, 2).unwrap();
    let pair = &corpus.train[0];
    let mut model: ProgressiveModel<f64> = ProgressiveModel::new(
        ProgressiveModelConfig {
            joint_count: 2,
            vocab_size: corpus.vocab.len(),
            ..tiny_config()
        },
        7,
    )
    .unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let tokens: Vec<usize> = pair
        .tokens
        .iter()
        .map(|&t| crate::data::Vocabulary::embed_id(t))
        .collect();
    let (_, head) = model
        .teacher_forced(&mut g, &bound, &tokens, &decoder_input_rows(&pair.pose))
        .unwrap();
    let targets = future_targets(&pair.pose, 0, 1).unwrap();
    let out = match head {
        HeadVars::Regression { out } => out,
        _ => unreachable!(),
    };
    let loss = mse_loss(&mut g, out, &targets).unwrap();
    assert!(g.scalar_value(loss).is_finite());
    g.backward(loss).unwrap();
    g.scatter_grads(model.params_mut());
    // every parameter participates in the teacher-forced loss
    for (_, name, tensor) in model.params().iter() {
        let grad = tensor.grad.as_ref().unwrap_or_else(|| panic!("{name} missing grad"));
        assert!(grad.iter().all(|v| v.is_finite()), "{name} grad not finite");
    }
}
