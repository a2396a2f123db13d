//! Pose sequences, counter encoding, and skeleton normalization.

use super::DataError;

/// `U` frames of `3J` joint coordinates plus a per-frame progress
/// counter in `[0, 1]`. Counter-encoded sequences produced by
/// [`PoseSequence::counter_encode`] have counters `u/U` with the final
/// frame at exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<f64>,
    counters: Vec<f64>,
    joint_count: usize,
}

impl PoseSequence {
    /// Counter-encodes raw frames: counter `u/U` for frame `u` in
    /// `1..=U`, so the final counter is exactly 1.
    pub fn counter_encode(frames: Vec<f64>, joint_count: usize) -> Result<Self, DataError> {
        let dim = 3 * joint_count;
        if dim == 0 || frames.len() % dim != 0 {
            return Err(DataError::BadFrameData {
                len: frames.len(),
                dim,
            });
        }
        let u = frames.len() / dim;
        if u == 0 {
            return Err(DataError::EmptySequence);
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteFrame);
        }
        let counters = (1..=u).map(|i| i as f64 / u as f64).collect();
        Ok(PoseSequence {
            frames,
            counters,
            joint_count,
        })
    }

    /// Assembles a sequence from frames and explicit counters, e.g.
    /// model output where counters are predictions.
    pub fn with_counters(
        frames: Vec<f64>,
        counters: Vec<f64>,
        joint_count: usize,
    ) -> Result<Self, DataError> {
        let dim = 3 * joint_count;
        if dim == 0 || frames.len() % dim != 0 || frames.len() / dim != counters.len() {
            return Err(DataError::BadFrameData {
                len: frames.len(),
                dim,
            });
        }
        if counters.is_empty() {
            return Err(DataError::EmptySequence);
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteFrame);
        }
        Ok(PoseSequence {
            frames,
            counters,
            joint_count,
        })
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    /// Coordinate dimension `3J`.
    pub fn dim(&self) -> usize {
        3 * self.joint_count
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, u: usize) -> &[f64] {
        let d = self.dim();
        &self.frames[u * d..(u + 1) * d]
    }

    pub fn counters(&self) -> &[f64] {
        &self.counters
    }

    /// `U×(3J+1)` rows `[y_u, c_u]`, the decoder's joint-and-counter
    /// layout.
    pub fn rows_with_counters(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.len() * (d + 1));
        for u in 0..self.len() {
            out.extend_from_slice(self.frame(u));
            out.push(self.counters[u]);
        }
        out
    }

    /// Frame rows without the counter channel (used where the counter
    /// must be stripped, e.g. realism scoring and motion metrics).
    pub fn frame_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|u| self.frame(u).to_vec()).collect()
    }
}

/// Outcome of [`normalize_skeleton`]; `degenerate_scale_group` flags
/// a zero-extent group where scaling fell back to identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeReport {
    pub scale_factor: f64,
    pub degenerate_scale_group: bool,
}

/// Centers the reference joint at the origin in every frame, then
/// rescales the coordinates of the `scale_group` joints by one global
/// factor so their root-mean-square extent equals `target_scale`.
pub fn normalize_skeleton(
    frames: &[f64],
    joint_count: usize,
    reference_joint: usize,
    scale_group: &[usize],
    target_scale: f64,
) -> Result<(Vec<f64>, NormalizeReport), DataError> {
    let dim = 3 * joint_count;
    if reference_joint >= joint_count {
        return Err(DataError::JointOutOfRange {
            joint: reference_joint,
            joints: joint_count,
        });
    }
    for &j in scale_group {
        if j >= joint_count {
            return Err(DataError::JointOutOfRange {
                joint: j,
                joints: joint_count,
            });
        }
    }
    if dim == 0 || frames.len() % dim != 0 {
        return Err(DataError::BadFrameData {
            len: frames.len(),
            dim,
        });
    }
    let u = frames.len() / dim;
    let mut out = frames.to_vec();
    for f in 0..u {
        let base = f * dim + 3 * reference_joint;
        let (rx, ry, rz) = (out[base], out[base + 1], out[base + 2]);
        for j in 0..joint_count {
            let o = f * dim + 3 * j;
            out[o] -= rx;
            out[o + 1] -= ry;
            out[o + 2] -= rz;
        }
    }
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for f in 0..u {
        for &j in scale_group {
            let o = f * dim + 3 * j;
            for c in 0..3 {
                sq_sum += out[o + c] * out[o + c];
                count += 1;
            }
        }
    }
    let rms = if count > 0 {
        (sq_sum / count as f64).sqrt()
    } else {
        0.0
    };
    let degenerate = rms < 1e-12;
    let factor = if degenerate { 1.0 } else { target_scale / rms };
    if !degenerate {
        for f in 0..u {
            for &j in scale_group {
                let o = f * dim + 3 * j;
                for c in 0..3 {
                    out[o + c] *= factor;
                }
            }
        }
    }
    Ok((
        out,
        NormalizeReport {
            scale_factor: factor,
            degenerate_scale_group: degenerate,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_encode_u4() {
        let seq = PoseSequence::counter_encode(vec![0.0; 4 * 3], 1).unwrap();
        assert_eq!(seq.counters(), &[0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn counter_encode_u1_and_u2() {
        let one = PoseSequence::counter_encode(vec![0.0; 3], 1).unwrap();
        assert_eq!(one.counters(), &[1.0]);
        let two = PoseSequence::counter_encode(vec![0.0; 6], 1).unwrap();
        assert_eq!(two.counters(), &[0.5, 1.0]);
    }

    #[test]
    fn counter_encode_rejects_empty() {
        assert!(matches!(
            PoseSequence::counter_encode(vec![], 1),
            Err(DataError::EmptySequence)
        ));
    }

    #[test]
    fn strip_then_reencode_is_identity_on_frames() {
        let frames: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let seq = PoseSequence::counter_encode(frames.clone(), 2).unwrap();
        let again = PoseSequence::counter_encode(seq.frames().to_vec(), 2).unwrap();
        assert_eq!(again.frames(), frames.as_slice());
        assert_eq!(again.counters(), seq.counters());
    }

    #[test]
    fn normalize_centers_reference_joint() {
        // two joints, two frames
        let frames = vec![
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
            -1.0, 0.5, 2.0, 3.0, 3.0, 3.0,
        ];
        let (out, _) = normalize_skeleton(&frames, 2, 0, &[1], 1.0).unwrap();
        for f in 0..2 {
            assert_eq!(&out[f * 6..f * 6 + 3], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let frames = vec![
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
            -1.0, 0.5, 2.0, 3.0, 3.0, 3.0,
        ];
        let (once, r1) = normalize_skeleton(&frames, 2, 0, &[1], 0.7).unwrap();
        let (twice, r2) = normalize_skeleton(&once, 2, 0, &[1], 0.7).unwrap();
        assert!(!r1.degenerate_scale_group);
        assert!((r2.scale_factor - 1.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_pose_stays_constant() {
        let frame = vec![0.3, 0.6, -0.2, 1.5, 0.9, 0.1];
        let frames = [frame.clone(), frame].concat();
        let (out, _) = normalize_skeleton(&frames, 2, 0, &[1], 1.0).unwrap();
        assert_eq!(&out[0..6], &out[6..12]);
    }

    #[test]
    fn normalize_degenerate_group_keeps_identity_scale() {
        // scale group sits exactly at the reference joint position
        let frames = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let (out, report) = normalize_skeleton(&frames, 2, 0, &[1], 5.0).unwrap();
        assert!(report.degenerate_scale_group);
        assert_eq!(report.scale_factor, 1.0);
        assert_eq!(&out[3..6], &[0.0, 0.0, 0.0]);
    }
}
