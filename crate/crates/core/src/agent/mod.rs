//! The Cert-LSVI-UCB learner.
//!
//! Every episode the agent refits, for each stage `h` from the last to the
//! first, one ridge regression per phase `l = 1..=L_k + 1` against the
//! optimistic values it just computed for stage `h + 1`. The certified
//! subroutine ([`cert::cert_linucb`]) then produces the stage-`h` optimistic
//! values and the acting policy. While acting, an episode's feature at stage
//! `h` joins the index set of the phase where the subroutine stopped, unless
//! certification failed there.

pub mod cert;
pub mod ledger;
pub mod quantize;
pub mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_initial_state, step, LinearMdpSpec, TabularMdp};
use crate::error::{Error, Result};
use crate::oracle::Policy;

pub use cert::{cert_linucb, cert_linucb_traced, CertSettings, PhaseParams, PhaseTrace, PlanOutcome, StopReason};
pub use ledger::{index_set_bound, History, Ledger, PhaseRegression, StageSample};
pub use quantize::quantize;
pub use schedule::{gamma, kappa, max_phase};

pub const AGENT_SNAPSHOT_VERSION: &str = "agent_v1";

/// How stage-`h` regression targets are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TargetMode {
    /// One subroutine call per state, reused for every past episode that
    /// visited it.
    #[default]
    PerState,
    /// One subroutine call per past episode. Same output, `O(k)` cost;
    /// kept for differential testing.
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub lambda: f64,
    pub delta: f64,
    pub gamma_scale: f64,
    pub use_certification: bool,
    pub use_quantization: bool,
    pub d: usize,
    pub horizon: usize,
    pub actions: usize,
    #[serde(default)]
    pub target_mode: TargetMode,
    /// Record per-episode regression targets in each [`EpisodePlan`].
    #[serde(default)]
    pub instrument: bool,
}

impl AgentConfig {
    pub fn new(d: usize, horizon: usize, actions: usize) -> Self {
        Self {
            lambda: 16.0,
            delta: 0.05,
            gamma_scale: 1.0,
            use_certification: true,
            use_quantization: true,
            d,
            horizon,
            actions,
            target_mode: TargetMode::PerState,
            instrument: false,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.delta > 0.0 && self.delta < 0.25) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1/4), got {}",
                self.delta
            )));
        }
        if !(self.gamma_scale > 0.0 && self.gamma_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma_scale must be positive, got {}",
                self.gamma_scale
            )));
        }
        if self.d == 0 || self.horizon == 0 || self.actions == 0 {
            return Err(Error::InvalidArgument("d, horizon and actions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn gamma(&self, l: u32) -> f64 {
        gamma(l, self.d, self.horizon, self.delta, self.gamma_scale)
    }
}

/// Output of planning for episode `k`.
#[derive(Debug, Clone)]
pub struct EpisodePlan {
    pub episode: usize,
    pub max_phase: u32,
    /// `policy[h][s]`.
    pub policy: Vec<Vec<PlanOutcome>>,
    /// Optimistic values `V^_h(s)`, `values[h][s]`.
    pub values: Vec<Vec<f64>>,
    /// With `instrument`: `targets[h][tau - 1] = V^_{h+1}(s^tau_{h+1})` as
    /// used by the stage-`h` regressions.
    pub targets: Option<Vec<Vec<f64>>>,
}

impl EpisodePlan {
    pub fn greedy_policy(&self) -> Policy {
        self.policy
            .iter()
            .map(|row| row.iter().map(|o| o.action).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub trajectory: Vec<StageSample>,
    pub stop_phases: Vec<u32>,
    pub certified: Vec<bool>,
    /// Exact instantaneous regret; filled in by the harness.
    pub regret: f64,
    /// `|C_{h,l}|` after the episode, `[h][l - 1]`.
    pub index_set_sizes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub schema_version: String,
    pub config: AgentConfig,
    pub ledger: Ledger,
    pub history: History,
}

#[derive(Debug, Clone)]
pub struct CertLsviAgent {
    cfg: AgentConfig,
    spec: LinearMdpSpec,
    ledger: Ledger,
    history: History,
}

impl CertLsviAgent {
    pub fn new(cfg: AgentConfig, spec: LinearMdpSpec) -> Result<Self> {
        cfg.validate()?;
        if (cfg.d, cfg.horizon, cfg.actions) != (spec.d, spec.horizon, spec.actions) {
            return Err(Error::MismatchedInstance(
                "agent dimensions differ from the feature map".into(),
            ));
        }
        let ledger = Ledger::new(cfg.horizon, cfg.d, cfg.lambda);
        Ok(Self {
            cfg,
            spec,
            ledger,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn spec(&self) -> &LinearMdpSpec {
        &self.spec
    }

    pub fn episodes_played(&self) -> usize {
        self.history.len()
    }

    fn settings(&self, max_phase: u32) -> CertSettings {
        CertSettings {
            horizon: self.cfg.horizon as f64,
            use_certification: self.cfg.use_certification,
            gammas: (1..=max_phase).map(|l| self.cfg.gamma(l)).collect(),
        }
    }

    fn phase_params(&self, h: usize, max_phase: u32) -> Vec<PhaseParams<'_>> {
        self.ledger.stages[h][..=max_phase as usize]
            .iter()
            .map(|reg| {
                if self.cfg.use_quantization {
                    PhaseParams {
                        weights: &reg.weights_q,
                        cov_inv: &reg.cov_inv_q,
                    }
                } else {
                    PhaseParams {
                        weights: &reg.weights,
                        cov_inv: &reg.cov_inv,
                    }
                }
            })
            .collect()
    }

    fn features(&self, s: usize) -> Vec<&[f64]> {
        (0..self.spec.actions).map(|a| self.spec.phi(s, a)).collect()
    }

    /// Backward pass for the next episode: refits every phase regression and
    /// evaluates the subroutine at every state.
    pub fn plan_episode(&mut self) -> EpisodePlan {
        let k = self.history.len() + 1;
        let horizon = self.cfg.horizon;
        let states = self.spec.states;
        let cap = max_phase(k as u64, self.cfg.d as u64);
        let settings = self.settings(cap);
        let per_episode = self.cfg.target_mode == TargetMode::PerEpisode;

        let mut policy = vec![Vec::new(); horizon];
        let mut values = vec![Vec::new(); horizon];
        let mut targets = self.cfg.instrument.then(|| vec![Vec::new(); horizon]);
        let mut next_state_values = vec![0.0; states];
        let mut next_episode_values = vec![0.0; k - 1];

        for h in (0..horizon).rev() {
            self.ledger.ensure_phases(h, cap + 1);
            {
                let Self {
                    ledger, history, spec, ..
                } = self;
                let next_value = |tau: usize| {
                    if per_episode {
                        next_episode_values[tau - 1]
                    } else {
                        next_state_values[history[tau - 1][h].next_state]
                    }
                };
                if let Some(t) = targets.as_mut() {
                    t[h] = (1..k).map(next_value).collect();
                }
                for l in 1..=cap + 1 {
                    let step = kappa(l, spec.d);
                    ledger.stages[h][l as usize - 1].refit(
                        h,
                        history,
                        spec,
                        |tau| history[tau - 1][h].reward + next_value(tau),
                        step,
                    );
                }
            }

            let params = self.phase_params(h, cap);
            let outcomes: Vec<PlanOutcome> = (0..states)
                .map(|s| cert_linucb(&self.features(s), &params, cap, &settings))
                .collect();
            if per_episode {
                next_episode_values = self
                    .history
                    .iter()
                    .map(|ep| cert_linucb(&self.features(ep[h].state), &params, cap, &settings).v_hat)
                    .collect();
            }
            next_state_values = outcomes.iter().map(|o| o.v_hat).collect();
            values[h] = next_state_values.clone();
            policy[h] = outcomes;
        }

        EpisodePlan {
            episode: k,
            max_phase: cap,
            policy,
            values,
            targets,
        }
    }

    /// Rolls out one episode with `plan` and admits certified samples.
    pub fn act_episode<R: Rng + ?Sized>(&mut self, plan: &EpisodePlan, env: &TabularMdp, rng: &mut R) -> EpisodeRecord {
        let k = self.history.len() + 1;
        assert_eq!(plan.episode, k, "plan is for a different episode");
        let horizon = self.cfg.horizon;
        let mut trajectory = Vec::with_capacity(horizon);
        let mut stop_phases = Vec::with_capacity(horizon);
        let mut certified = Vec::with_capacity(horizon);

        let mut s = sample_initial_state(env, rng);
        for h in 0..horizon {
            let out = plan.policy[h][s];
            if out.certified {
                let phi = self.spec.phi(s, out.action);
                self.ledger.phase_mut(h, out.stop_phase).insert(k, phi);
            }
            let (reward, next_state) = step(env, h, s, out.action, rng);
            trajectory.push(StageSample {
                state: s,
                action: out.action,
                reward,
                next_state,
            });
            stop_phases.push(out.stop_phase);
            certified.push(out.certified);
            s = next_state;
        }
        self.history.push(trajectory.clone());

        EpisodeRecord {
            episode: k,
            trajectory,
            stop_phases,
            certified,
            regret: 0.0,
            index_set_sizes: self.ledger.index_set_sizes(),
        }
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            schema_version: AGENT_SNAPSHOT_VERSION.to_string(),
            config: self.cfg.clone(),
            ledger: self.ledger.clone(),
            history: self.history.clone(),
        }
    }

    pub fn from_snapshot(snapshot: AgentSnapshot, spec: LinearMdpSpec) -> Result<Self> {
        if snapshot.schema_version != AGENT_SNAPSHOT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported agent snapshot {:?}",
                snapshot.schema_version
            )));
        }
        let mut agent = Self::new(snapshot.config, spec)?;
        if snapshot.ledger.stages.len() != agent.cfg.horizon || snapshot.ledger.d != agent.cfg.d {
            return Err(Error::Schema("ledger shape does not match config".into()));
        }
        agent.ledger = snapshot.ledger;
        agent.history = snapshot.history;
        Ok(agent)
    }

    /// Checks the ledger invariants against the recorded history. Returns a
    /// description of the first violation.
    pub fn verify_ledger(&self) -> std::result::Result<(), String> {
        let d = self.cfg.d;
        let ident = nalgebra::DMatrix::<f64>::identity(d, d);
        let mut admitted = vec![0usize; self.cfg.horizon];
        for (h, row) in self.ledger.stages.iter().enumerate() {
            for reg in row {
                let l = reg.phase;
                let rebuilt = reg.rebuild_cov(h, &self.history, &self.spec, self.cfg.lambda);
                let drift = (&rebuilt - &reg.cov).amax();
                if drift > 1e-10 {
                    return Err(format!("({h},{l}): covariance drift {drift}"));
                }
                if reg.cov != reg.cov.transpose() {
                    return Err(format!("({h},{l}): covariance not symmetric"));
                }
                let inv_err = (&reg.cov * &reg.cov_inv - &ident).amax();
                if inv_err > 1e-8 {
                    return Err(format!("({h},{l}): ||U U^-1 - I|| = {inv_err}"));
                }
                let step = kappa(l, d);
                for x in reg.weights_q.iter().chain(reg.cov_inv_q.iter()) {
                    let m = x / step;
                    if (m - m.round()).abs() > 1e-15 * m.abs().max(1.0) {
                        return Err(format!("({h},{l}): {x} is not on the kappa grid"));
                    }
                }
                if reg.cov_inv_q != reg.cov_inv_q.transpose() {
                    return Err(format!("({h},{l}): quantized inverse not symmetric"));
                }
                let bound = index_set_bound(l, d, self.cfg.horizon, self.cfg.delta, self.cfg.gamma_scale);
                if reg.index_set.len() as f64 > bound {
                    return Err(format!("({h},{l}): |C| = {} exceeds {bound}", reg.index_set.len()));
                }
                if reg.index_set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(format!("({h},{l}): index set not strictly increasing"));
                }
                admitted[h] += reg.index_set.len();
            }
            if admitted[h] > self.history.len() {
                return Err(format!(
                    "stage {h}: {} admissions for {} episodes",
                    admitted[h],
                    self.history.len()
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_environment, EnvDims};
    use crate::seeding::rng_from_seed;

    fn agent(env: &TabularMdp, gamma_scale: f64) -> CertLsviAgent {
        let mut cfg = AgentConfig::new(8, 2, 5);
        cfg.gamma_scale = gamma_scale;
        CertLsviAgent::new(cfg, env.spec.clone()).unwrap()
    }

    #[test]
    fn first_episode_falls_back_to_phase_cap() {
        let env = build_environment(EnvDims::SIMULATION, 0.0, 1).unwrap();
        let mut a = agent(&env, 1.0);
        let plan = a.plan_episode();
        assert_eq!(plan.max_phase, 0);
        for h in 0..2 {
            for out in &plan.policy[h] {
                assert_eq!(out.reason, StopReason::PhaseCap);
                assert_eq!(out.v_hat, 2.0);
                assert_eq!(out.stop_phase, 1);
                assert!(out.certified);
            }
            assert_eq!(plan.values[h], vec![2.0; 4]);
        }
    }

    #[test]
    fn uncertified_stage_leaves_index_sets_untouched() {
        let env = build_environment(EnvDims::SIMULATION, 0.2, 3).unwrap();
        let mut a = agent(&env, 1e-3);
        a.cfg.instrument = true;
        let mut rng = rng_from_seed(17);
        for _ in 0..300 {
            let before = a.ledger().index_set_sizes();
            let plan = a.plan_episode();
            let record = a.act_episode(&plan, &env, &mut rng);
            for (h, was) in before.iter().enumerate() {
                let grew: usize = record.index_set_sizes[h].iter().sum::<usize>() - was.iter().sum::<usize>();
                assert_eq!(grew, usize::from(record.certified[h]));
            }
        }
        a.verify_ledger().unwrap();
    }

    #[test]
    fn targets_follow_next_stage_values() {
        let env = build_environment(EnvDims::SIMULATION, 0.05, 5).unwrap();
        let mut a = agent(&env, 1e-3);
        a.cfg.instrument = true;
        let mut rng = rng_from_seed(2);
        for _ in 0..120 {
            let plan = a.plan_episode();
            let targets = plan.targets.as_ref().unwrap();
            for (tau, ep) in a.history().iter().enumerate() {
                assert_eq!(targets[1][tau], 0.0);
                assert_eq!(targets[0][tau], plan.values[1][ep[0].next_state]);
            }
            a.act_episode(&plan, &env, &mut rng);
        }
    }

    #[test]
    fn snapshot_round_trip_resumes_identically() {
        let env = build_environment(EnvDims::SIMULATION, 0.1, 8).unwrap();
        let mut a = agent(&env, 1e-3);
        let mut rng = rng_from_seed(4);
        for _ in 0..60 {
            let plan = a.plan_episode();
            a.act_episode(&plan, &env, &mut rng);
        }
        let text = serde_json::to_string(&a.snapshot()).unwrap();
        let snap: AgentSnapshot = serde_json::from_str(&text).unwrap();
        let mut b = CertLsviAgent::from_snapshot(snap, env.spec.clone()).unwrap();
        let mut rng_b = rng.clone();
        for _ in 0..40 {
            let pa = a.plan_episode();
            let pb = b.plan_episode();
            assert_eq!(pa.policy, pb.policy);
            let ra = a.act_episode(&pa, &env, &mut rng);
            let rb = b.act_episode(&pb, &env, &mut rng_b);
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let env = build_environment(EnvDims::SIMULATION, 0.0, 1).unwrap();
        let mut cfg = AgentConfig::new(8, 2, 5);
        cfg.gamma_scale = 0.0;
        assert!(CertLsviAgent::new(cfg.clone(), env.spec.clone()).is_err());
        cfg.gamma_scale = 1.0;
        cfg.delta = 0.3;
        assert!(CertLsviAgent::new(cfg.clone(), env.spec.clone()).is_err());
        cfg.delta = 0.05;
        cfg.d = 7;
        assert!(matches!(
            CertLsviAgent::new(cfg, env.spec.clone()),
            Err(Error::MismatchedInstance(_))
        ));
    }
}
