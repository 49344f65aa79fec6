//! Exact finite-horizon dynamic programming on a [`TabularMdp`].
//!
//! Stages are 0-based here (`h = 0` is the first step); the terminal value
//! `V_{H} = 0` is implicit.

use serde::{Deserialize, Serialize};

use crate::env::TabularMdp;
use crate::error::{Error, Result};

/// Gaps at or below this are treated as ties.
pub const GAP_TOLERANCE: f64 = 1e-9;

/// Deterministic Markov policy, `policy[h][s]`.
pub type Policy = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    /// `q_star[h][s * actions + a]`.
    pub q_star: Vec<Vec<f64>>,
    pub v_star: Vec<Vec<f64>>,
    pub pi_star: Policy,
    /// Smallest gap above [`GAP_TOLERANCE`]; `+inf` if there is none.
    #[serde(with = "infinite_as_null")]
    pub min_gap: f64,
    pub actions: usize,
}

impl OptimalSolution {
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q_star[h][s * self.actions + a]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub v_pi: Vec<Vec<f64>>,
}

/// `r_h(s, a) + sum_{s'} P_h(s'|s, a) next[s']`.
#[inline]
pub fn bellman_backup(mdp: &TabularMdp, h: usize, s: usize, a: usize, next: &[f64]) -> f64 {
    let expected: f64 = mdp.transition_row(h, s, a).iter().zip(next).map(|(p, v)| p * v).sum();
    mdp.reward(h, s, a) + expected
}

/// Backward induction. Ties in the argmax go to the lowest action index.
pub fn solve_optimal(mdp: &TabularMdp) -> OptimalSolution {
    let (horizon, states, actions) = (mdp.horizon, mdp.states, mdp.actions);
    let mut q_star = vec![vec![0.0; states * actions]; horizon];
    let mut v_star = vec![vec![0.0; states]; horizon];
    let mut pi_star = vec![vec![0usize; states]; horizon];
    let terminal = vec![0.0; states];

    for h in (0..horizon).rev() {
        let next = if h + 1 < horizon {
            v_star[h + 1].clone()
        } else {
            terminal.clone()
        };
        for s in 0..states {
            let mut best = 0;
            for a in 0..actions {
                let q = bellman_backup(mdp, h, s, a, &next);
                q_star[h][s * actions + a] = q;
                if q > q_star[h][s * actions + best] {
                    best = a;
                }
            }
            pi_star[h][s] = best;
            v_star[h][s] = q_star[h][s * actions + best];
        }
    }

    let mut sol = OptimalSolution {
        q_star,
        v_star,
        pi_star,
        min_gap: f64::INFINITY,
        actions,
    };
    sol.min_gap = min_gap(&sol);
    sol
}

/// Smallest suboptimality gap `V*_h(s) - Q*_h(s, a)` exceeding
/// [`GAP_TOLERANCE`], or `+inf` when every gap is a tie.
pub fn min_gap(sol: &OptimalSolution) -> f64 {
    let mut best = f64::INFINITY;
    for (h, q_row) in sol.q_star.iter().enumerate() {
        for (idx, &q) in q_row.iter().enumerate() {
            let gap = sol.v_star[h][idx / sol.actions] - q;
            if gap > GAP_TOLERANCE && gap < best {
                best = gap;
            }
        }
    }
    best
}

pub fn evaluate_policy(mdp: &TabularMdp, pi: &Policy) -> Result<PolicyValue> {
    if pi.len() != mdp.horizon || pi.iter().any(|row| row.len() != mdp.states) {
        return Err(Error::MismatchedInstance(format!(
            "policy shape does not match H={} S={}",
            mdp.horizon, mdp.states
        )));
    }
    if pi.iter().flatten().any(|&a| a >= mdp.actions) {
        return Err(Error::InvalidArgument("policy selects an invalid action".into()));
    }
    let mut v_pi = vec![vec![0.0; mdp.states]; mdp.horizon];
    let terminal = vec![0.0; mdp.states];
    for h in (0..mdp.horizon).rev() {
        let next = if h + 1 < mdp.horizon {
            v_pi[h + 1].clone()
        } else {
            terminal.clone()
        };
        for s in 0..mdp.states {
            v_pi[h][s] = bellman_backup(mdp, h, s, pi[h][s], &next);
        }
    }
    Ok(PolicyValue { v_pi })
}

/// `V*_1(s1) - V^pi_1(s1)`, with rounding-level negatives clamped to zero.
pub fn episode_regret(sol: &OptimalSolution, value: &PolicyValue, s1: usize) -> Result<f64> {
    let shape = |t: &Vec<Vec<f64>>| (t.len(), t.first().map_or(0, Vec::len));
    if shape(&sol.v_star) != shape(&value.v_pi) {
        return Err(Error::MismatchedInstance(format!(
            "optimal table {:?} vs policy table {:?}",
            shape(&sol.v_star),
            shape(&value.v_pi)
        )));
    }
    if s1 >= sol.v_star[0].len() {
        return Err(Error::InvalidArgument(format!("initial state {s1} out of range")));
    }
    let gap = sol.v_star[0][s1] - value.v_pi[0][s1];
    debug_assert!(gap >= -1e-9, "policy value exceeds optimum by {}", -gap);
    Ok(gap.max(0.0))
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            ser.serialize_some(x)
        } else {
            ser.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(de)?.unwrap_or(f64::INFINITY))
    }
}
