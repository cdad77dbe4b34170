//! Training objectives: cross-entropy for classification and the negative
//! Cox partial log-likelihood for survival.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Cross-entropy over rank-1 logits for a class label. Requires at least
/// two classes.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.value(logits).numel();
    if c < 2 {
        return Err(Error::Config(format!("cross_entropy needs >= 2 classes, got {c}")));
    }
    tape.cross_entropy(logits, label)
}

/// Negative Cox partial log-likelihood over a batch of risk scores,
/// recorded on the tape.
pub fn coxph(tape: &mut Tape, risks: Var, times: &[f64], events: &[bool]) -> Result<Var> {
    tape.coxph(risks, times, events)
}

/// Negative Cox partial log-likelihood and its gradient, computed directly
/// on slices. Used both by the tape op and by the trainer when batch risks
/// live on separate tapes.
///
/// ```text
///   L = -(1/E) * sum_{i: event_i} [ r_i - log sum_{j: t_j >= t_i} exp(r_j) ]
/// ```
///
/// Ties in time share a risk set (Breslow convention).
pub fn coxph_loss_grad(risks: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = risks.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("coxph needs >= 2 samples, got {n}")));
    }
    if times.len() != n || events.len() != n {
        return Err(Error::shape("coxph", format!("risks {n}, times {}, events {}", times.len(), events.len())));
    }
    let n_events = events.iter().filter(|e| **e).count();
    if n_events == 0 {
        return Err(Error::DegenerateBatch("coxph batch has no observed events".into()));
    }

    // Sort by time descending so the risk set {j : t_j >= t_i} is a prefix.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).unwrap().then(a.cmp(&b)));

    // Stabilized running sum of exp(r_j) over the growing risk set.
    let max_risk = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    let mut running = 0.0; // sum of exp(r - max_risk) over current risk set
    let mut risk_set_sums = vec![0.0; n]; // per sample: S_i at its own event time
    let mut idx = 0;
    while idx < order.len() {
        // Add the whole tie group before evaluating any of its members.
        let t_here = times[order[idx]];
        let group_start = idx;
        while idx < order.len() && times[order[idx]] == t_here {
            running += (risks[order[idx]] - max_risk).exp();
            idx += 1;
        }
        for &i in &order[group_start..idx] {
            risk_set_sums[i] = running;
        }
    }
    let inv_e = 1.0 / n_events as f64;
    for i in 0..n {
        if events[i] {
            let log_sum = max_risk + risk_set_sums[i].ln();
            loss -= (risks[i] - log_sum) * inv_e;
            grad[i] -= inv_e;
        }
    }
    // grad_k += (1/E) * exp(r_k) * sum over events i with t_i <= t_k of 1/S_i.
    // Walk ascending in time, accumulating 1/S_i for event samples passed.
    let mut inv_sum = 0.0;
    let mut pos = order.len();
    while pos > 0 {
        let t_here = times[order[pos - 1]];
        let group_end = pos;
        while pos > 0 && times[order[pos - 1]] == t_here {
            pos -= 1;
        }
        // Events in this tie group enter the accumulator before the group's
        // own members are charged (each event's risk set includes itself).
        for &i in &order[pos..group_end] {
            if events[i] {
                inv_sum += 1.0 / risk_set_sums[i];
            }
        }
        for &i in &order[pos..group_end] {
            grad[i] += inv_e * (risks[i] - max_risk).exp() * inv_sum;
        }
    }
    Ok((loss, grad))
}
