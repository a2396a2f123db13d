//! Corpus-level BLEU and ROUGE-L.

use std::collections::HashMap;

use super::EvalError;

/// Corpus BLEU-n in percent: modified n-gram precision accumulated
/// over all pairs, geometric mean over orders `1..=n`, standard
/// brevity penalty, and a zero floor (any order without matches scores
/// zero; no other smoothing).
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> Result<f64, EvalError> {
    if n == 0 || n > 4 {
        return Err(EvalError::BadOrder(n));
    }
    if pairs.iter().any(|(_, r)| r.is_empty()) {
        return Err(EvalError::EmptyReference);
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in pairs {
        cand_len += cand.len();
        ref_len += reference.len();
        for k in 1..=n {
            let (m, t) = modified_precision_counts(cand, reference, k);
            matches[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if totals[k] == 0 || matches[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[k] as f64 / totals[k] as f64).ln();
    }
    let geo_mean = (log_sum / n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * geo_mean)
}

/// BLEU-n for a single candidate/reference pair.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64, EvalError> {
    corpus_bleu(&[(candidate.to_vec(), reference.to_vec())], n)
}

/// Clipped n-gram match count and candidate n-gram total for one pair.
pub fn modified_precision_counts(
    candidate: &[String],
    reference: &[String],
    n: usize,
) -> (usize, usize) {
    if candidate.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let total = candidate.len() - n + 1;
    let mut matched = 0usize;
    for gram in candidate.windows(n) {
        if let Some(budget) = ref_counts.get_mut(gram) {
            if *budget > 0 {
                *budget -= 1;
                matched += 1;
            }
        }
    }
    (matched, total)
}

/// ROUGE-L F1 in percent: longest-common-subsequence precision and
/// recall combined with β = 1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
