//! Dynamic time warping over frame sequences.

use super::EvalError;

/// Monotone minimum-cost alignment between two sequences: starts at
/// `(0, 0)`, ends at `(len_a-1, len_b-1)`, each step advancing one or
/// both indices by one.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Euclidean distance between coordinate rows.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Full dynamic-programming alignment; cost is the sum of the frame
/// distance along the recovered path.
pub fn dtw<D>(a: &[Vec<f64>], b: &[Vec<f64>], dist: D) -> Result<AlignmentPath, EvalError>
where
    D: Fn(&[f64], &[f64]) -> f64,
{
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyAlignment);
    }
    let (la, lb) = (a.len(), b.len());
    let mut cost = vec![f64::INFINITY; la * lb];
    // 0 = start, 1 = from (i-1, j), 2 = from (i, j-1), 3 = diagonal
    let mut from = vec![0u8; la * lb];
    for i in 0..la {
        for j in 0..lb {
            let d = dist(&a[i], &b[j]);
            let (best, tag) = match (i, j) {
                (0, 0) => (0.0, 0),
                (_, 0) => (cost[(i - 1) * lb], 1),
                (0, _) => (cost[j - 1], 2),
                _ => {
                    let up = cost[(i - 1) * lb + j];
                    let left = cost[i * lb + j - 1];
                    let diag = cost[(i - 1) * lb + j - 1];
                    if diag <= up && diag <= left {
                        (diag, 3)
                    } else if up <= left {
                        (up, 1)
                    } else {
                        (left, 2)
                    }
                }
            };
            cost[i * lb + j] = best + d;
            from[i * lb + j] = tag;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (la - 1, lb - 1);
    loop {
        pairs.push((i, j));
        match from[i * lb + j] {
            0 => break,
            1 => i -= 1,
            2 => j -= 1,
            _ => {
                i -= 1;
                j -= 1;
            }
        }
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        cost: cost[la * lb - 1],
    })
}

/// DTW cost between two pose frame lists using Euclidean distance over
/// joint coordinates only (callers strip counters first).
pub fn dtw_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    Ok(dtw(a, b, euclidean)?.cost)
}
