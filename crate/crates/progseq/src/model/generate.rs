//! Auto-regressive generation with counter-based termination.

use crate::data::PoseSequence;
use crate::scalar::Scalar;

use super::{HeadVars, ModelError, OutputHead, ProgressiveModel};

/// One step of next-frame prediction: everything generation needs
/// from a model. `input_rows` is the flat `rows×(3J+1)` prefix,
/// starting with the zero start row.
pub trait FramePredictor {
    fn joint_count(&self) -> usize;

    /// Returns the predicted next pose (`3J` values) and counter.
    fn predict_next(
        &self,
        tokens: &[usize],
        input_rows: &[f64],
        rows: usize,
    ) -> Result<(Vec<f64>, f64), ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerationMode {
    /// Predicted pose and counter feed back as the next input; the
    /// loop stops once the counter reaches `1 - epsilon`, or at
    /// `u_max` with the truncation flag set.
    Feedback,
    /// Predicted poses feed back but the input counter channel is
    /// overridden with linear timing `u / u_ref`; runs exactly `u_ref`
    /// steps.
    TeacherTiming { u_ref: usize },
}

/// A generated sequence; counters are the model's predictions.
#[derive(Debug, Clone)]
pub struct Generated {
    pub pose: PoseSequence,
    pub truncated: bool,
}

/// Runs the auto-regressive loop, seeded with a zero pose at counter
/// zero. Always terminates within `u_max` steps in feedback mode.
pub fn generate<P: FramePredictor>(
    predictor: &P,
    tokens: &[usize],
    mode: GenerationMode,
    u_max: usize,
    epsilon: f64,
) -> Result<Generated, ModelError> {
    let dim = 3 * predictor.joint_count();
    let width = dim + 1;
    let mut input_rows = vec![0.0; width];
    let mut frames: Vec<f64> = Vec::new();
    let mut counters: Vec<f64> = Vec::new();

    match mode {
        GenerationMode::Feedback => {
            let stop = 1.0 - epsilon;
            let mut truncated = true;
            for step in 1..=u_max {
                let (pose, counter) =
                    predictor.predict_next(tokens, &input_rows, step)?;
                frames.extend_from_slice(&pose);
                counters.push(counter);
                if counter >= stop {
                    truncated = false;
                    break;
                }
                input_rows.extend_from_slice(&pose);
                input_rows.push(counter);
            }
            let pose = PoseSequence::with_counters(frames, counters, predictor.joint_count())
                .map_err(|e| ModelError::Generation(e.to_string()))?;
            Ok(Generated { pose, truncated })
        }
        GenerationMode::TeacherTiming { u_ref } => {
            if u_ref == 0 {
                return Err(ModelError::Config(
                    "teacher timing needs a positive reference length".into(),
                ));
            }
            for step in 1..=u_ref {
                let (pose, counter) =
                    predictor.predict_next(tokens, &input_rows, step)?;
                frames.extend_from_slice(&pose);
                counters.push(counter);
                input_rows.extend_from_slice(&pose);
                input_rows.push(step as f64 / u_ref as f64);
            }
            let pose = PoseSequence::with_counters(frames, counters, predictor.joint_count())
                .map_err(|e| ModelError::Generation(e.to_string()))?;
            Ok(Generated {
                pose,
                truncated: false,
            })
        }
    }
}

impl<S: Scalar> FramePredictor for ProgressiveModel<S> {
    fn joint_count(&self) -> usize {
        self.config.joint_count
    }

    fn predict_next(
        &self,
        tokens: &[usize],
        input_rows: &[f64],
        _rows: usize,
    ) -> Result<(Vec<f64>, f64), ModelError> {
        let mut g = crate::autodiff::Graph::new();
        let bound = self.bind(&mut g, false);
        let (_, head) = self.teacher_forced(&mut g, &bound, tokens, input_rows)?;
        let width = self.config.out_dim();
        let rows = input_rows.len() / width;
        // Only window slot 0 (the earliest predicted frame) is used at
        // inference.
        let last_row: Vec<f64> = match head {
            HeadVars::Regression { out } => {
                let v = g.value(out);
                let cols = g.shape(out)[1];
                v[(rows - 1) * cols..(rows - 1) * cols + width]
                    .iter()
                    .map(|&x| x.as_f64())
                    .collect()
            }
            HeadVars::Mdn {
                logits,
                means,
                log_sigmas: _,
            } => {
                let m = match self.config.head {
                    OutputHead::Mdn { components } => components,
                    OutputHead::Regression => unreachable!("mdn head vars from mdn config"),
                };
                let slot_logits = g.slice_cols(logits, 0, m)?;
                let slot_means = g.slice_cols(means, 0, m * width)?;
                let selected = g.mdn_select(slot_logits, slot_means, width)?;
                let v = g.value(selected);
                v[(rows - 1) * width..rows * width]
                    .iter()
                    .map(|&x| x.as_f64())
                    .collect()
            }
        };
        let pose = last_row[..width - 1].to_vec();
        let counter = last_row[width - 1];
        Ok((pose, counter))
    }
}
