//! Temperature-scaled softmax primitives.
//!
//! Everything here runs in double precision with max-subtraction so that
//! log-probabilities far below zero (the margin analyses go near -160)
//! stay finite.

/// log(sum(exp(x_i))) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// softmax(logits / tau). Caller guarantees tau > 0.
pub fn softmax_t(logits: &[f64], tau: f64) -> Vec<f64> {
    masked_softmax_t(logits, tau, None)
}

/// log softmax(logits / tau). Caller guarantees tau > 0.
pub fn log_softmax_t(logits: &[f64], tau: f64) -> Vec<f64> {
    masked_log_softmax_t(logits, tau, None)
}

/// softmax(logits / tau) with one index forced to probability zero.
///
/// The masked index behaves as if its logit were -inf: it carries no mass
/// and the remaining entries renormalize over the legal set.
pub fn masked_softmax_t(logits: &[f64], tau: f64, masked: Option<usize>) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    let m = legal_max(logits, masked);
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if Some(i) == masked {
            continue;
        }
        let e = ((z - m) / tau).exp();
        out[i] = e;
        denom += e;
    }
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// log softmax(logits / tau) with one index masked out (its entry is -inf).
pub fn masked_log_softmax_t(logits: &[f64], tau: f64, masked: Option<usize>) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    let m = legal_max(logits, masked);
    let mut denom = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if Some(i) == masked {
            continue;
        }
        denom += ((z - m) / tau).exp();
    }
    let lse = m / tau + denom.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if Some(i) == masked {
                f64::NEG_INFINITY
            } else {
                z / tau - lse
            }
        })
        .collect()
}

fn legal_max(logits: &[f64], masked: Option<usize>) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != masked)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry, ties broken by lowest index. Skips `masked`.
pub fn argmax_tiebreak_lowest(values: &[f64], masked: Option<usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if Some(i) == masked {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
