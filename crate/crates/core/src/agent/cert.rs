//! The certified elimination subroutine run at a single state.
//!
//! Phases `l = 1, 2, ...` each carry a weight vector and an inverse
//! covariance. At each phase the surviving actions are scored, and the
//! subroutine stops when the phase cap is reached (condition 1), when some
//! surviving action is still too uncertain (condition 2, explore it), or when
//! the phase-`l` interval `[V_l - 3 2^-l, V_l + 3 2^-l]` misses the running
//! optimistic/pessimistic sandwich (condition 3, the certification failure).
//! Otherwise the sandwich is tightened and actions more than `4 2^-l` below
//! the greedy value are dropped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::dot;

/// Parameters of one phase as seen by the subroutine.
#[derive(Debug, Clone, Copy)]
pub struct PhaseParams<'a> {
    pub weights: &'a DVector<f64>,
    pub cov_inv: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    PhaseCap,
    Exploration,
    CertificationFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub v_hat: f64,
    pub action: usize,
    pub stop_phase: u32,
    pub certified: bool,
    pub reason: StopReason,
}

/// What happened inside one phase; only recorded when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub phase: u32,
    pub active: Vec<usize>,
    /// Aligned with `active`.
    pub q: Vec<f64>,
    pub greedy: usize,
    pub value: f64,
    /// `max ||phi||_{Sigma}` over `active`; `None` past the phase cap.
    pub max_width: Option<f64>,
    /// Sandwich after this phase, if the phase passed every stopping test.
    pub v_hat: Option<f64>,
    pub v_check: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CertSettings {
    pub horizon: f64,
    pub use_certification: bool,
    /// `gammas[l - 1] = gamma_l`; must cover phases `1..=L`.
    pub gammas: Vec<f64>,
}

/// `sqrt(x^T M x)`, with tiny negative forms (possible after quantization)
/// read as zero.
#[inline]
pub fn weighted_norm(x: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let data = m.as_slice();
    let mut acc = 0.0;
    for j in 0..d {
        let col = &data[j * d..(j + 1) * d];
        acc += x[j] * dot(col, x);
    }
    acc.max(0.0).sqrt()
}

/// Runs the subroutine for one state whose per-action features are
/// `features[a]`. `params` must hold phases `1..=max_phase + 1`.
pub fn cert_linucb(
    features: &[&[f64]],
    params: &[PhaseParams<'_>],
    max_phase: u32,
    settings: &CertSettings,
) -> PlanOutcome {
    run(features, params, max_phase, settings, None)
}

/// [`cert_linucb`] that also records every phase it visited.
pub fn cert_linucb_traced(
    features: &[&[f64]],
    params: &[PhaseParams<'_>],
    max_phase: u32,
    settings: &CertSettings,
) -> (PlanOutcome, Vec<PhaseTrace>) {
    let mut trace = Vec::new();
    let out = run(features, params, max_phase, settings, Some(&mut trace));
    (out, trace)
}

fn run(
    features: &[&[f64]],
    params: &[PhaseParams<'_>],
    max_phase: u32,
    settings: &CertSettings,
    mut trace: Option<&mut Vec<PhaseTrace>>,
) -> PlanOutcome {
    assert!(!features.is_empty(), "action set must be nonempty");
    assert!(params.len() > max_phase as usize, "missing phase parameters");

    let mut active: Vec<usize> = (0..features.len()).collect();
    let mut v_hat_prev = settings.horizon;
    let mut v_check_prev = 0.0;
    let mut pi_prev = 0usize;
    let mut q = Vec::with_capacity(features.len());

    for l in 1..=max_phase + 1 {
        let p = params[l as usize - 1];
        q.clear();
        q.extend(active.iter().map(|&a| dot(features[a], p.weights.as_slice())));
        // Lowest index wins ties: `active` is sorted and only a strict
        // improvement replaces the incumbent.
        let mut best = 0;
        for i in 1..q.len() {
            if q[i] > q[best] {
                best = i;
            }
        }
        let greedy = active[best];
        let value = q[best];
        if l == 1 {
            // The phase-0 policy falls back to the phase-1 greedy action.
            pi_prev = greedy;
        }
        let mut record = trace.as_ref().map(|_| PhaseTrace {
            phase: l,
            active: active.clone(),
            q: q.clone(),
            greedy,
            value,
            max_width: None,
            v_hat: None,
            v_check: None,
        });
        let push = |trace: &mut Option<&mut Vec<PhaseTrace>>, record: Option<PhaseTrace>| {
            if let (Some(t), Some(r)) = (trace.as_mut(), record) {
                t.push(r);
            }
        };

        if l > max_phase {
            push(&mut trace, record);
            return PlanOutcome {
                v_hat: v_hat_prev,
                action: pi_prev,
                stop_phase: l,
                certified: true,
                reason: StopReason::PhaseCap,
            };
        }

        let mut widest = active[0];
        let mut max_width = f64::NEG_INFINITY;
        for &a in &active {
            let w = weighted_norm(features[a], p.cov_inv);
            if w > max_width {
                max_width = w;
                widest = a;
            }
        }
        if let Some(r) = record.as_mut() {
            r.max_width = Some(max_width);
        }
        let radius = (-(l as f64)).exp2();
        if settings.gammas[l as usize - 1] * max_width >= radius {
            push(&mut trace, record);
            return PlanOutcome {
                v_hat: v_hat_prev,
                action: widest,
                stop_phase: l,
                certified: true,
                reason: StopReason::Exploration,
            };
        }

        let upper = (value + 3.0 * radius).min(v_hat_prev);
        let lower = (value - 3.0 * radius).max(v_check_prev);
        if settings.use_certification && lower > upper {
            push(&mut trace, record);
            return PlanOutcome {
                v_hat: v_hat_prev,
                action: pi_prev,
                stop_phase: l,
                certified: false,
                reason: StopReason::CertificationFailed,
            };
        }

        v_hat_prev = upper;
        v_check_prev = lower;
        if let Some(r) = record.as_mut() {
            r.v_hat = Some(upper);
            r.v_check = Some(lower);
        }
        push(&mut trace, record);

        let cutoff = value - 4.0 * radius;
        let mut idx = 0;
        active.retain(|_| {
            let keep = q[idx] >= cutoff;
            idx += 1;
            keep
        });
        pi_prev = greedy;
    }
    unreachable!("the phase cap always stops the loop")
}
