use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::env::EnvDims;
use crate::error::{Error, Result};

pub const WORKERS_ENV_VAR: &str = "CERTLSVI_WORKERS";

/// Certified estimator on/off crossed with quantization on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    CertQuant,
    CertNoquant,
    NocertQuant,
    NocertNoquant,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::CertQuant,
        Ablation::CertNoquant,
        Ablation::NocertQuant,
        Ablation::NocertNoquant,
    ];

    pub fn certification(self) -> bool {
        matches!(self, Ablation::CertQuant | Ablation::CertNoquant)
    }

    pub fn quantization(self) -> bool {
        matches!(self, Ablation::CertQuant | Ablation::NocertQuant)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::CertQuant => "cert-quant",
            Ablation::CertNoquant => "cert-noquant",
            Ablation::NocertQuant => "nocert-quant",
            Ablation::NocertNoquant => "nocert-noquant",
        }
    }

    pub fn from_flags(certification: bool, quantization: bool) -> Self {
        match (certification, quantization) {
            (true, true) => Ablation::CertQuant,
            (true, false) => Ablation::CertNoquant,
            (false, true) => Ablation::NocertQuant,
            (false, false) => Ablation::NocertNoquant,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::Schema(format!("unknown ablation {s:?}")))
    }
}

/// `0.00, 0.01, ..., 0.14, 0.15, 0.20, 0.25, 0.30`.
pub fn default_zeta_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=14).map(|i| i as f64 / 100.0).collect();
    grid.extend([0.15, 0.20, 0.25, 0.30]);
    grid
}

/// Candidate gamma scales tried at `zeta = 0`.
pub fn default_calibration_grid() -> Vec<f64> {
    vec![1.0, 1e-1, 1e-2, 1e-3, 1e-4]
}

/// Mean final regret the calibration aims for (certified + quantized, `zeta = 0`).
pub const CALIBRATION_TARGET: f64 = 196.31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub zeta_grid: Vec<f64>,
    pub seeds: usize,
    pub episodes: usize,
    pub ablations: Vec<Ablation>,
    pub base_seed: u64,
    /// Fixed gamma scale; `None` calibrates one at `zeta = 0`.
    pub gamma_scale: Option<f64>,
    pub calibration_grid: Vec<f64>,
    pub calibration_target: f64,
    pub delta: f64,
    pub dims: EnvDims,
    pub out_dir: PathBuf,
    /// Falls back to `CERTLSVI_WORKERS`, then to the number of CPUs.
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            zeta_grid: default_zeta_grid(),
            seeds: 16,
            episodes: 2000,
            ablations: Ablation::ALL.to_vec(),
            base_seed: 0,
            gamma_scale: None,
            calibration_grid: default_calibration_grid(),
            calibration_target: CALIBRATION_TARGET,
            delta: 0.05,
            dims: EnvDims::SIMULATION,
            out_dir: PathBuf::from("results"),
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.zeta_grid.is_empty() {
            return invalid("zeta grid is empty");
        }
        if self
            .zeta_grid
            .iter()
            .any(|z| !(z.is_finite() && (0.0..=1.0).contains(z)))
        {
            return invalid("zeta values must lie in [0, 1]");
        }
        if self.zeta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("zeta grid must be strictly increasing");
        }
        if self.episodes == 0 || self.seeds == 0 {
            return invalid("episodes and seeds must be >= 1");
        }
        if self.ablations.is_empty() {
            return invalid("no ablations selected");
        }
        let mut sorted = self.ablations.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.ablations.len() {
            return invalid("duplicate ablations");
        }
        match self.gamma_scale {
            Some(g) if !(g > 0.0 && g.is_finite()) => return invalid("gamma_scale must be positive"),
            None if self.calibration_grid.is_empty() => return invalid("calibration grid is empty"),
            None if self.calibration_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) => {
                return invalid("calibration grid values must be positive")
            }
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 0.25) {
            return invalid("delta must lie in (0, 1/4)");
        }
        if self.workers == Some(0) {
            return invalid("workers must be >= 1");
        }
        Ok(())
    }

    /// Ablations in canonical order.
    pub fn sorted_ablations(&self) -> Vec<Ablation> {
        let mut a = self.ablations.clone();
        a.sort();
        a
    }

    pub fn resolved_workers(&self) -> usize {
        self.workers
            .or_else(|| {
                std::env::var(WORKERS_ENV_VAR)
                    .ok()
                    .and_then(|v| v.trim().parse().ok())
                    .filter(|&n: &usize| n > 0)
            })
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn agent_config(&self, ablation: Ablation, gamma_scale: f64) -> AgentConfig {
        let mut cfg = AgentConfig::new(self.dims.d, self.dims.horizon, self.dims.actions);
        cfg.delta = self.delta;
        cfg.gamma_scale = gamma_scale;
        cfg.use_certification = ablation.certification();
        cfg.use_quantization = ablation.quantization();
        cfg
    }
}
