//! One `(zeta, ablation, seed)` run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, ExperimentConfig};
use crate::agent::{CertLsviAgent, EpisodePlan, EpisodeRecord};
use crate::env::{build_environment, TabularMdp};
use crate::error::Result;
use crate::oracle::{episode_regret, evaluate_policy, solve_optimal, OptimalSolution};
use crate::seeding::{derive_seed, labeled_rng};

/// Environment seed for a seed index; independent of `zeta` and ablation.
pub fn env_seed(base_seed: u64, seed_index: usize) -> u64 {
    derive_seed("env", &[base_seed, seed_index as u64])
}

/// Trajectory stream seed; independent of `zeta` and ablation.
pub fn trajectory_seed(base_seed: u64, seed_index: usize) -> u64 {
    derive_seed("traj", &[base_seed, seed_index as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CellKey {
    pub zeta: f64,
    pub ablation: Ablation,
    pub seed: usize,
}

/// Per-episode results in compact column form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellRows {
    pub instant_regret: Vec<f64>,
    pub cum_regret: Vec<f64>,
    /// `stop_phases[(k - 1) * H + h]`.
    pub stop_phases: Vec<u32>,
    pub certified: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub horizon: usize,
    pub rows: CellRows,
    pub env_json: String,
    pub env_hash: String,
    pub max_phi_norm: f64,
    pub min_gap: f64,
    pub wall_s: f64,
}

impl CellResult {
    pub fn final_regret(&self) -> f64 {
        self.rows.cum_regret.last().copied().unwrap_or(0.0)
    }
}

/// Everything an observer can see after one episode.
pub struct EpisodeView<'a> {
    pub record: &'a EpisodeRecord,
    pub plan: &'a EpisodePlan,
    pub agent: &'a CertLsviAgent,
    pub env: &'a TabularMdp,
    pub solution: &'a OptimalSolution,
}

pub fn run_cell(
    zeta: f64,
    ablation: Ablation,
    seed: usize,
    cfg: &ExperimentConfig,
    gamma_scale: f64,
) -> Result<CellResult> {
    run_cell_observed(zeta, ablation, seed, cfg, gamma_scale, |_| {})
}

/// [`run_cell`] with a callback after every scored episode.
pub fn run_cell_observed<F>(
    zeta: f64,
    ablation: Ablation,
    seed: usize,
    cfg: &ExperimentConfig,
    gamma_scale: f64,
    mut observe: F,
) -> Result<CellResult>
where
    F: FnMut(EpisodeView<'_>),
{
    let started = Instant::now();
    let env = build_environment(cfg.dims, zeta, env_seed(cfg.base_seed, seed))?;
    let solution = solve_optimal(&env);
    let mut agent = CertLsviAgent::new(cfg.agent_config(ablation, gamma_scale), env.spec.clone())?;
    let mut rng = labeled_rng("traj", &[cfg.base_seed, seed as u64]);

    let horizon = env.horizon;
    let mut rows = CellRows::default();
    let mut cum = 0.0;
    for _ in 0..cfg.episodes {
        let plan = agent.plan_episode();
        let mut record = agent.act_episode(&plan, &env, &mut rng);
        let value = evaluate_policy(&env, &plan.greedy_policy())?;
        record.regret = episode_regret(&solution, &value, record.trajectory[0].state)?;
        cum += record.regret;
        rows.instant_regret.push(record.regret);
        rows.cum_regret.push(cum);
        rows.stop_phases.extend(&record.stop_phases);
        rows.certified.extend(&record.certified);
        observe(EpisodeView {
            record: &record,
            plan: &plan,
            agent: &agent,
            env: &env,
            solution: &solution,
        });
    }

    let env_json = env.to_json()?;
    Ok(CellResult {
        key: CellKey { zeta, ablation, seed },
        horizon,
        rows,
        env_hash: crate::seeding::sha256_hex(env_json.as_bytes()),
        env_json,
        max_phi_norm: env.spec.max_phi_norm(),
        min_gap: solution.min_gap,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            episodes: 150,
            seeds: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cell_is_deterministic() {
        let cfg = small_cfg();
        let a = run_cell(0.05, Ablation::CertQuant, 0, &cfg, 1e-3).unwrap();
        let b = run_cell(0.05, Ablation::CertQuant, 0, &cfg, 1e-3).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.env_hash, b.env_hash);
    }

    #[test]
    fn ablations_share_the_environment() {
        let cfg = small_cfg();
        let hashes: Vec<String> = Ablation::ALL
            .iter()
            .map(|&ab| run_cell(0.1, ab, 2, &cfg, 1e-3).unwrap().env_hash)
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cumulative_regret_is_nondecreasing() {
        let cfg = small_cfg();
        let cell = run_cell(0.2, Ablation::NocertQuant, 1, &cfg, 1e-2).unwrap();
        assert!(cell.rows.instant_regret.iter().all(|&r| r >= 0.0));
        assert!(cell.rows.cum_regret.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(cell.rows.stop_phases.len(), 150 * 2);
    }
}
