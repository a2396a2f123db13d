//! Template-matching back-translation: pose sequence to token
//! sequence via minimum-cost segmentation.

use crate::data::{PoseSequence, SymbolTemplate};

use super::dtw::{dtw, euclidean};
use super::EvalError;

/// Default segmentation span bounds, bracketing the template lengths
/// plus transition frames.
pub const DEFAULT_SPAN_MIN: usize = 6;
pub const DEFAULT_SPAN_MAX: usize = 20;

/// Segments the sequence into contiguous spans of `l_min..=l_max`
/// frames, labels each span with the template minimizing the
/// length-normalized DTW cost, takes the minimum-total-cost
/// segmentation, and un-reverses the labels back to source token
/// order. Counters are excluded from the distance.
pub fn back_translate(
    pose: &PoseSequence,
    templates: &[SymbolTemplate],
    l_min: usize,
    l_max: usize,
) -> Result<Vec<usize>, EvalError> {
    let frames = pose.frame_rows();
    let u = frames.len();
    if u < l_min {
        return Err(EvalError::TooShortToSegment { got: u, min: l_min });
    }
    let template_rows: Vec<Vec<Vec<f64>>> = templates
        .iter()
        .map(|t| {
            let dim = pose.dim();
            (0..t.len)
                .map(|f| t.frames[f * dim..(f + 1) * dim].to_vec())
                .collect()
        })
        .collect();

    // best[i]: minimum cost of segmenting frames[..i], with the span
    // and label that achieved it.
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; u + 1];
    best[0] = Some((0.0, 0, usize::MAX));
    for i in 1..=u {
        for span in l_min..=l_max.min(i) {
            let Some((prev_cost, _, _)) = best[i - span] else {
                continue;
            };
            let slice = &frames[i - span..i];
            let mut span_best: Option<(f64, usize)> = None;
            for (k, t_rows) in template_rows.iter().enumerate() {
                let cost = dtw(slice, t_rows, euclidean)?.cost / span as f64;
                if span_best.map_or(true, |(c, _)| cost < c) {
                    span_best = Some((cost, k));
                }
            }
            if let Some((cost, label)) = span_best {
                let total = prev_cost + cost;
                if best[i].map_or(true, |(c, _, _)| total < c) {
                    best[i] = Some((total, span, label));
                }
            }
        }
    }

    let mut labels = Vec::new();
    let mut i = u;
    while i > 0 {
        let (_, span, label) = best[i].ok_or(EvalError::NoSegmentation {
            frames: u,
            min: l_min,
            max: l_max,
        })?;
        labels.push(label);
        i -= span;
    }
    // labels were collected back-to-front over a reversed-order
    // rendering, so they are already in source order
    Ok(labels)
}
