//! Anti-drift training augmentations: Gaussian input noise, future
//! prediction target windows, and counter-only decoder inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::pose::PoseSequence;
use super::DataError;

/// Per-coordinate standard deviation of frame-to-frame deltas,
/// collected over a set of sequences (one training epoch's data).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStats {
    per_dim_std: Vec<f64>,
}

impl NoiseStats {
    /// Population standard deviation of `y[u+1] - y[u]` per coordinate
    /// dimension across every sequence.
    pub fn collect<'a>(seqs: impl IntoIterator<Item = &'a PoseSequence>) -> Option<NoiseStats> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for seq in seqs {
            let d = seq.dim();
            let dim = *dim.get_or_insert(d);
            if sum.is_empty() {
                sum = vec![0.0; dim];
                sum_sq = vec![0.0; dim];
            }
            for u in 0..seq.len().saturating_sub(1) {
                let a = seq.frame(u);
                let b = seq.frame(u + 1);
                for j in 0..dim {
                    let delta = b[j] - a[j];
                    sum[j] += delta;
                    sum_sq[j] += delta * delta;
                }
                count += 1;
            }
        }
        let dim = dim?;
        let per_dim_std = if count == 0 {
            vec![0.0; dim]
        } else {
            (0..dim)
                .map(|j| {
                    let mean = sum[j] / count as f64;
                    (sum_sq[j] / count as f64 - mean * mean).max(0.0).sqrt()
                })
                .collect()
        };
        Some(NoiseStats { per_dim_std })
    }

    pub fn per_dim_std(&self) -> &[f64] {
        &self.per_dim_std
    }

    pub fn zeros(dim: usize) -> NoiseStats {
        NoiseStats {
            per_dim_std: vec![0.0; dim],
        }
    }
}

/// Adds seeded Gaussian noise `N(0, (r_n · std_d)^2)` to each joint
/// coordinate. Counters are untouched. This is applied to decoder
/// inputs only, never to regression targets.
pub fn gaussian_noise_augment(
    seq: &PoseSequence,
    stats: &NoiseStats,
    noise_rate: f64,
    seed: u64,
) -> PoseSequence {
    if noise_rate == 0.0 {
        return seq.clone();
    }
    let dim = seq.dim();
    debug_assert_eq!(stats.per_dim_std.len(), dim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut frames = seq.frames().to_vec();
    for u in 0..seq.len() {
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            frames[u * dim + j] += z * noise_rate * stats.per_dim_std[j];
        }
    }
    PoseSequence::with_counters(frames, seq.counters().to_vec(), seq.joint_count())
        .expect("noised frames keep the source shape")
}

/// Zeroes every joint channel of the decoder input, keeping counters
/// bit-exact, so decoding is driven by progress alone.
pub fn just_counter_inputs(seq: &PoseSequence) -> PoseSequence {
    PoseSequence::with_counters(
        vec![0.0; seq.len() * seq.dim()],
        seq.counters().to_vec(),
        seq.joint_count(),
    )
    .expect("shape preserved")
}

/// Per-input-position future target windows.
///
/// Row `i` of the decoder input aligns with window slot `w` targeting
/// data row `i + f_f + w`; slots past the end of the sequence are
/// masked out of the loss. Rows carry the counter channel, so each
/// target row has `3J + 1` entries.
#[derive(Debug, Clone)]
pub struct FutureTargets {
    /// Window width `F_t - F_f`.
    pub window: usize,
    /// `(U*window) × (3J+1)` rows, slot-major within each position.
    pub targets: Vec<f64>,
    /// One entry per target row.
    pub mask: Vec<bool>,
    /// Row dimension `3J + 1`.
    pub dim: usize,
}

impl FutureTargets {
    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Builds the masked target windows for future prediction with frame
/// offsets `f_f` (inclusive, from the next frame) to `f_t` (exclusive
/// window end): input position `u` is trained against frames
/// `u+1+f_f ..= u+f_t`. `(0, 1)` is plain next-frame training.
pub fn future_targets(
    seq: &PoseSequence,
    f_f: usize,
    f_t: usize,
) -> Result<FutureTargets, DataError> {
    if f_t <= f_f {
        return Err(DataError::BadFutureWindow { f_f, f_t });
    }
    let window = f_t - f_f;
    let u_len = seq.len();
    let dim = seq.dim() + 1;
    let rows = seq.rows_with_counters();
    let mut targets = vec![0.0; u_len * window * dim];
    let mut mask = vec![false; u_len * window];
    for i in 0..u_len {
        for w in 0..window {
            let j = i + f_f + w;
            if j < u_len {
                let r = i * window + w;
                targets[r * dim..(r + 1) * dim].copy_from_slice(&rows[j * dim..(j + 1) * dim]);
                mask[r] = true;
            }
        }
    }
    Ok(FutureTargets {
        window,
        targets,
        mask,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(u: usize, joints: usize) -> PoseSequence {
        let dim = 3 * joints;
        let frames = (0..u * dim).map(|i| (i as f64 * 0.37).sin()).collect();
        PoseSequence::counter_encode(frames, joints).unwrap()
    }

    #[test]
    fn zero_rate_noise_is_identity() {
        let s = seq(5, 2);
        let stats = NoiseStats::collect([&s]).unwrap();
        let out = gaussian_noise_augment(&s, &stats, 0.0, 9);
        assert_eq!(out, s);
    }

    #[test]
    fn constant_sequence_has_zero_stats_and_no_noise() {
        let frames = vec![0.5; 4 * 6];
        let s = PoseSequence::counter_encode(frames, 2).unwrap();
        let stats = NoiseStats::collect([&s]).unwrap();
        assert!(stats.per_dim_std().iter().all(|&v| v == 0.0));
        let out = gaussian_noise_augment(&s, &stats, 5.0, 3);
        assert_eq!(out.frames(), s.frames());
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let s = seq(6, 2);
        let stats = NoiseStats::collect([&s]).unwrap();
        let a = gaussian_noise_augment(&s, &stats, 5.0, 17);
        let b = gaussian_noise_augment(&s, &stats, 5.0, 17);
        let c = gaussian_noise_augment(&s, &stats, 5.0, 18);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_leaves_counters_untouched() {
        let s = seq(6, 2);
        let stats = NoiseStats::collect([&s]).unwrap();
        let out = gaussian_noise_augment(&s, &stats, 5.0, 17);
        assert_eq!(out.counters(), s.counters());
    }

    #[test]
    fn empirical_noise_std_tracks_requested_scale() {
        // one long flat-delta sequence: dim stds are known
        let joints = 1;
        let dim = 3;
        let u = 400;
        let mut frames = vec![0.0; u * dim];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for i in dim..u * dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            frames[i] = frames[i - dim] + z * 0.2;
        }
        let s = PoseSequence::counter_encode(frames, joints).unwrap();
        let stats = NoiseStats::collect([&s]).unwrap();
        let r_n = 5.0;
        // pool noise samples over many seeds
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for seed in 0..25 {
            let out = gaussian_noise_augment(&s, &stats, r_n, seed);
            for i in 0..u * dim {
                samples[i % dim].push(out.frames()[i] - s.frames()[i]);
            }
        }
        for d in 0..dim {
            let n = samples[d].len() as f64;
            assert!(n >= 10_000.0);
            let mean: f64 = samples[d].iter().sum::<f64>() / n;
            let var: f64 = samples[d].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let want = r_n * stats.per_dim_std()[d];
            let got = var.sqrt();
            assert!(
                (got - want).abs() <= 0.1 * want,
                "dim {d}: std {got} vs {want}"
            );
        }
    }

    #[test]
    fn just_counter_zeroes_joints_and_keeps_counters() {
        let s = seq(7, 3);
        let jc = just_counter_inputs(&s);
        assert!(jc.frames().iter().all(|&v| v == 0.0));
        assert_eq!(jc.counters(), s.counters());
    }

    #[test]
    fn base_window_is_next_frame_training() {
        let s = seq(5, 1);
        let ft = future_targets(&s, 0, 1).unwrap();
        assert_eq!(ft.window, 1);
        assert!(ft.mask.iter().all(|&m| m));
        let rows = s.rows_with_counters();
        assert_eq!(ft.targets, rows);
    }

    #[test]
    fn window_five_has_five_slots_and_masked_boundary() {
        let s = seq(10, 1);
        let ft = future_targets(&s, 0, 5).unwrap();
        assert_eq!(ft.window, 5);
        // final input position: one valid slot, four masked
        let last = &ft.mask[(10 - 1) * 5..];
        assert_eq!(last, &[true, false, false, false, false]);
    }

    #[test]
    fn inverted_window_is_rejected() {
        let s = seq(4, 1);
        assert!(future_targets(&s, 3, 3).is_err());
        assert!(future_targets(&s, 5, 2).is_err());
    }
}
