// temp probe: per-parameter FD on tiny pre-norm regression model
use progseq::autodiff::Graph;
use progseq::data::{NoiseStats, PoseSequence, SentencePair};
use progseq::model::{AugmentationMode, OutputHead, ProgressiveModel, ProgressiveModelConfig};
use progseq::train::{base_loss_for_probe, prepare_item_for_probe};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let config = ProgressiveModelConfig {
        layers: 1, heads: 1, embed_dim: 8, ff_dim: 12, joint_count: 2,
        vocab_size: 6, future_window: (0, 2), augmentation: AugmentationMode::None,
        head: OutputHead::Regression, u_max: 160, termination_epsilon: 0.02,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(91);
    let frames: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pose = PoseSequence::counter_encode(frames, 2).unwrap();
    let pair = SentencePair { tokens: vec![0, 1, 2], pose };
    let mut model = ProgressiveModel::<f64>::new(config, 17).unwrap();
    let stats = NoiseStats::zeros(6);
    let item = prepare_item_for_probe(&pair, model.config(), &stats, 0);

    let eval = |m: &ProgressiveModel<f64>| -> f64 {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let loss = base_loss_for_probe(&mut g, m, &bound, &item);
        g.scalar_value(loss)
    };
    model.params_mut().zero_grads();
    {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = base_loss_for_probe(&mut g, &model, &bound, &item);
        g.backward(loss).unwrap();
        g.scatter_grads(model.params_mut());
    }
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|(_, _, t)| t.grad.clone().unwrap_or_default()).collect();
    let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
    let h = 1e-5;
    let ids: Vec<_> = model.params().ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let mut worst = (0.0f64, 0usize, 0.0, 0.0);
        for e in 0..model.params().get(*id).numel() {
            let base = model.params().get(*id).values()[e];
            model.params_mut().get_mut(*id).values_mut()[e] = base + h;
            let plus = eval(&model);
            model.params_mut().get_mut(*id).values_mut()[e] = base - h;
            let minus = eval(&model);
            model.params_mut().get_mut(*id).values_mut()[e] = base;
            let n = (plus - minus) / (2.0 * h);
            let a = analytic[pi].get(e).copied().unwrap_or(0.0);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            if rel > worst.0 { worst = (rel, e, a, n); }
        }
        if worst.0 > 1e-6 {
            println!("{}: rel {:.3e} at [{}] analytic {:.6} numeric {:.6}", names[pi], worst.0, worst.1, worst.2, worst.3);
        }
    }
    println!("done");
}
