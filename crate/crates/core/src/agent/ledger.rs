//! Per-(stage, phase) ridge regressions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::quantize::quantize_value;
use super::schedule::gamma;
use crate::env::LinearMdpSpec;

/// Full re-inversion of the covariance after this many rank-one updates.
pub const REFRESH_INTERVAL: usize = 256;

/// One observed step of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSample {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `history[k - 1][h]` is the stage-`h` sample of episode `k`.
pub type History = Vec<Vec<StageSample>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRegression {
    pub phase: u32,
    /// Episode indices (1-based), in insertion order.
    pub index_set: Vec<usize>,
    /// `lambda I + sum phi phi^T` over the index set.
    pub cov: DMatrix<f64>,
    pub cov_inv: DMatrix<f64>,
    pub inserts_since_refresh: usize,
    pub weights: DVector<f64>,
    pub weights_q: DVector<f64>,
    pub cov_inv_q: DMatrix<f64>,
}

impl PhaseRegression {
    pub fn new(phase: u32, d: usize, lambda: f64) -> Self {
        assert!(lambda > 0.0, "ridge parameter must be positive");
        let cov = DMatrix::identity(d, d) * lambda;
        let cov_inv = DMatrix::identity(d, d) / lambda;
        Self {
            phase,
            index_set: Vec::new(),
            cov_inv_q: cov_inv.clone(),
            cov,
            cov_inv,
            inserts_since_refresh: 0,
            weights: DVector::zeros(d),
            weights_q: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// Adds episode `episode` with feature `phi` to the index set and
    /// updates the covariance and its inverse (Sherman-Morrison).
    pub fn insert(&mut self, episode: usize, phi: &[f64]) {
        let d = self.dim();
        let x = DVector::from_column_slice(phi);
        self.index_set.push(episode);
        self.cov.ger(1.0, &x, &x, 1.0);

        self.inserts_since_refresh += 1;
        if self.inserts_since_refresh >= REFRESH_INTERVAL {
            self.refresh_inverse();
            return;
        }
        let u = &self.cov_inv * &x;
        let denom = 1.0 + x.dot(&u);
        for j in 0..d {
            for i in 0..d {
                self.cov_inv[(i, j)] -= u[i] * u[j] / denom;
            }
        }
    }

    /// Recomputes the inverse from a Cholesky factorisation of the covariance.
    pub fn refresh_inverse(&mut self) {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .expect("ridge covariance is positive definite");
        let inv = chol.inverse();
        self.cov_inv = (&inv + inv.transpose()) * 0.5;
        self.inserts_since_refresh = 0;
    }

    /// Refits the ridge weights against `target(tau)` for every `tau` in the
    /// index set, then quantizes weights and inverse covariance to `kappa`.
    ///
    /// `target(tau)` must return `r^tau_h + V_{h+1}(s^tau_{h+1})`.
    pub fn refit<F>(&mut self, stage: usize, history: &History, spec: &LinearMdpSpec, target: F, kappa: f64)
    where
        F: Fn(usize) -> f64,
    {
        let d = self.dim();
        let mut rhs = DVector::zeros(d);
        for &tau in &self.index_set {
            let sample = &history[tau - 1][stage];
            let phi = spec.phi(sample.state, sample.action);
            let y = target(tau);
            for i in 0..d {
                rhs[i] += phi[i] * y;
            }
        }
        let chol = self
            .cov
            .clone()
            .cholesky()
            .expect("ridge covariance is positive definite");
        self.weights = chol.solve(&rhs);
        self.weights_q = self.weights.map(|x| quantize_value(x, kappa));
        self.cov_inv_q = self.cov_inv.map(|x| quantize_value(x, kappa));
    }

    /// `lambda I + sum phi phi^T` rebuilt from scratch.
    pub fn rebuild_cov(&self, stage: usize, history: &History, spec: &LinearMdpSpec, lambda: f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut cov = DMatrix::identity(d, d) * lambda;
        for &tau in &self.index_set {
            let s = &history[tau - 1][stage];
            let x = DVector::from_column_slice(spec.phi(s.state, s.action));
            cov.ger(1.0, &x, &x, 1.0);
        }
        cov
    }
}

/// `16 l 4^l gamma_l^2 d`.
pub fn index_set_bound(l: u32, d: usize, horizon: usize, delta: f64, gamma_scale: f64) -> f64 {
    let g = gamma(l, d, horizon, delta, gamma_scale);
    16.0 * l as f64 * 4f64.powi(l as i32) * g * g * d as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub d: usize,
    pub lambda: f64,
    /// `stages[h][l - 1]`.
    pub stages: Vec<Vec<PhaseRegression>>,
}

impl Ledger {
    pub fn new(horizon: usize, d: usize, lambda: f64) -> Self {
        Self {
            d,
            lambda,
            stages: vec![Vec::new(); horizon],
        }
    }

    /// Makes sure phases `1..=upto` exist at stage `h`.
    pub fn ensure_phases(&mut self, h: usize, upto: u32) {
        let row = &mut self.stages[h];
        while (row.len() as u32) < upto {
            let phase = row.len() as u32 + 1;
            row.push(PhaseRegression::new(phase, self.d, self.lambda));
        }
    }

    pub fn phase(&self, h: usize, l: u32) -> Option<&PhaseRegression> {
        self.stages[h].get(l as usize - 1)
    }

    pub fn phase_mut(&mut self, h: usize, l: u32) -> &mut PhaseRegression {
        self.ensure_phases(h, l);
        &mut self.stages[h][l as usize - 1]
    }

    /// `|C_{h,l}|` for every stage, indexed `[h][l - 1]`.
    pub fn index_set_sizes(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|row| row.iter().map(|p| p.index_set.len()).collect())
            .collect()
    }
}
