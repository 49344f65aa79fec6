//! Synthetic linear MDPs with controlled misspecification.
//!
//! The well-specified part draws every raw entry of `phi` and `mu` from
//! `U(0, 1)` and rescales each `phi(s, a)` so that `phi(s, a)^T mu(s')`
//! sums to one over `s'`. Rewards are `phi^T theta_h` with `theta_h ~ N(0, I)`.
//!
//! Misspecification moves the transition rows by a fixed amount toward a
//! random half of the state space (`s_plus`) and adds `U(-zeta, zeta)` noise
//! to every reward. The transition shift has L1 size exactly `zeta` per row.
//! Note that this is the *L1* distance; the total-variation distance under the
//! half-L1 convention is `zeta / 2`.
//!
//! Rewards are not clipped to `[0, 1]` and `||phi||_2 <= 1` is not enforced;
//! [`LinearMdpSpec::max_phi_norm`] reports the realized norm instead.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from_seed, sha256_hex};

pub const ENV_SCHEMA_VERSION: &str = "env_v1";

/// Maximum number of redraws (of `s_plus`, and separately of the base
/// environment) before a misspecification level is declared infeasible.
pub const MAX_RESAMPLES: usize = 64;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDims {
    pub d: usize,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
}

impl EnvDims {
    /// The simulation setting: `S = 4, A = 5, H = 2, d = 8`.
    pub const SIMULATION: EnvDims = EnvDims {
        d: 8,
        states: 4,
        actions: 5,
        horizon: 2,
    };

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.states == 0 || self.actions == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(format!(
                "all dimensions must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Well-specified linear structure. `phi` is shared across stages while
/// `mu` and `theta` are stored per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpSpec {
    pub d: usize,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// Row-major `(s * actions + a) * d + i`.
    pub phi: Vec<f64>,
    /// Per stage, `d x states` row-major; column `s'` is `mu_h(s')`.
    pub mu: Vec<Vec<f64>>,
    /// Per stage, length `d`.
    pub theta: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LinearMdpSpec {
    pub fn dims(&self) -> EnvDims {
        EnvDims {
            d: self.d,
            states: self.states,
            actions: self.actions,
            horizon: self.horizon,
        }
    }

    #[inline]
    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.actions + a) * self.d;
        &self.phi[start..start + self.d]
    }

    /// `phi(s, a)^T mu_h(s')`.
    pub fn linear_transition(&self, h: usize, s: usize, a: usize, next: usize) -> f64 {
        let phi = self.phi(s, a);
        let mu = &self.mu[h];
        (0..self.d).map(|i| phi[i] * mu[i * self.states + next]).sum()
    }

    /// `phi(s, a)^T theta_h`.
    pub fn linear_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        dot(self.phi(s, a), &self.theta[h])
    }

    pub fn max_phi_norm(&self) -> f64 {
        self.phi
            .chunks(self.d)
            .map(|row| dot(row, row).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |msg: String| Err(Error::Schema(msg));
        if self.phi.len() != self.states * self.actions * self.d {
            return bad(format!("phi has {} entries", self.phi.len()));
        }
        if self.mu.len() != self.horizon || self.theta.len() != self.horizon {
            return bad("mu/theta must have one entry per stage".into());
        }
        for h in 0..self.horizon {
            if self.mu[h].len() != self.d * self.states || self.theta[h].len() != self.d {
                return bad(format!("stage {h}: mu/theta shape mismatch"));
            }
            for s in 0..self.states {
                for a in 0..self.actions {
                    let mut total = 0.0;
                    for next in 0..self.states {
                        let p = self.linear_transition(h, s, a, next);
                        if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
                            return bad(format!("P_{h}({next}|{s},{a}) = {p} outside [0, 1]"));
                        }
                        total += p;
                    }
                    if (total - 1.0).abs() > PROB_TOL {
                        return bad(format!("row ({h},{s},{a}) sums to {total}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Draws a well-specified linear MDP. Deterministic in `seed`.
pub fn generate_base_env(dims: EnvDims, seed: u64) -> Result<LinearMdpSpec> {
    dims.validate()?;
    let EnvDims {
        d,
        states,
        actions,
        horizon,
    } = dims;
    let mut rng = rng_from_seed(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");

    let mut phi: Vec<f64> = (0..states * actions * d).map(|_| unit.sample(&mut rng)).collect();
    let mu: Vec<f64> = (0..d * states).map(|_| unit.sample(&mut rng)).collect();

    for row in phi.chunks_mut(d) {
        let mass: f64 = (0..states)
            .map(|next| (0..d).map(|i| row[i] * mu[i * states + next]).sum::<f64>())
            .sum();
        for x in row.iter_mut() {
            *x /= mass;
        }
    }

    let theta = (0..horizon)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    Ok(LinearMdpSpec {
        d,
        states,
        actions,
        horizon,
        phi,
        mu: vec![mu; horizon],
        theta,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecConfig {
    pub zeta: f64,
    /// Fixed `s_plus`; when `None` it is drawn from `transition_seed`.
    pub s_plus: Option<Vec<usize>>,
    pub reward_noise_seed: u64,
    pub transition_seed: u64,
}

impl MisspecConfig {
    pub fn new(zeta: f64, reward_noise_seed: u64, transition_seed: u64) -> Self {
        Self {
            zeta,
            s_plus: None,
            reward_noise_seed,
            transition_seed,
        }
    }
}

/// Ground-truth environment the agent interacts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
    /// `((h * states + s) * actions + a) * states + s'`.
    pub p: Vec<f64>,
    /// `(h * states + s) * actions + a`.
    pub r: Vec<f64>,
    pub init_dist: Vec<f64>,
    pub zeta: f64,
    pub s_plus: Vec<usize>,
    pub reward_noise_seed: u64,
    pub transition_seed: u64,
    pub spec: LinearMdpSpec,
}

impl TabularMdp {
    /// An environment that is exactly the linear model, without noise.
    pub fn from_spec(spec: LinearMdpSpec) -> Self {
        let EnvDims {
            states,
            actions,
            horizon,
            ..
        } = spec.dims();
        let mut p = Vec::with_capacity(horizon * states * actions * states);
        let mut r = Vec::with_capacity(horizon * states * actions);
        for h in 0..horizon {
            for s in 0..states {
                for a in 0..actions {
                    r.push(spec.linear_reward(h, s, a));
                    p.extend((0..states).map(|next| spec.linear_transition(h, s, a, next)));
                }
            }
        }
        Self {
            horizon,
            states,
            actions,
            p,
            r,
            init_dist: vec![1.0 / states as f64; states],
            zeta: 0.0,
            s_plus: Vec::new(),
            reward_noise_seed: 0,
            transition_seed: 0,
            spec,
        }
    }

    /// Wraps explicit tables in a tabular linear MDP with one-hot features
    /// (`d = states * actions`), so the instance is exactly linear.
    pub fn from_tables(horizon: usize, states: usize, actions: usize, p: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        let d = states * actions;
        if p.len() != horizon * d * states || r.len() != horizon * d {
            return Err(Error::InvalidArgument("table shapes do not match dimensions".into()));
        }
        let mut phi = vec![0.0; d * d];
        for i in 0..d {
            phi[i * d + i] = 1.0;
        }
        let mu = (0..horizon)
            .map(|h| p[h * d * states..(h + 1) * d * states].to_vec())
            .collect();
        let theta = (0..horizon).map(|h| r[h * d..(h + 1) * d].to_vec()).collect();
        let spec = LinearMdpSpec {
            d,
            states,
            actions,
            horizon,
            phi,
            mu,
            theta,
            seed: 0,
        };
        let mdp = Self::from_spec(spec);
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn dims(&self) -> EnvDims {
        self.spec.dims()
    }

    #[inline]
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.states + s) * self.actions + a) * self.states;
        &self.p[start..start + self.states]
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.r[(h * self.states + s) * self.actions + a]
    }

    pub fn with_init_dist(mut self, init_dist: Vec<f64>) -> Result<Self> {
        check_distribution(&init_dist, self.states, "initial distribution")?;
        self.init_dist = init_dist;
        Ok(self)
    }

    /// Checks every structural invariant, including the exact L1 shift and
    /// the reward corruption bound.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = self.dims();
        if (dims.states, dims.actions, dims.horizon) != (self.states, self.actions, self.horizon) {
            return Err(Error::Schema("dimensions disagree with spec".into()));
        }
        if self.p.len() != self.horizon * self.states * self.actions * self.states
            || self.r.len() != self.horizon * self.states * self.actions
        {
            return Err(Error::Schema("p/r table shape mismatch".into()));
        }
        check_distribution(&self.init_dist, self.states, "initial distribution")?;
        for h in 0..self.horizon {
            for s in 0..self.states {
                for a in 0..self.actions {
                    let row = self.transition_row(h, s, a);
                    check_distribution(row, self.states, &format!("P_{h}(.|{s},{a})"))?;
                    let shift = self.l1_shift(h, s, a);
                    if (shift - self.zeta).abs() > PROB_TOL {
                        return Err(Error::Schema(format!(
                            "row ({h},{s},{a}) has L1 shift {shift}, expected {}",
                            self.zeta
                        )));
                    }
                    let dev = (self.reward(h, s, a) - self.spec.linear_reward(h, s, a)).abs();
                    if dev > self.zeta + PROB_TOL {
                        return Err(Error::Schema(format!("reward ({h},{s},{a}) deviates by {dev} > zeta")));
                    }
                }
            }
        }
        Ok(())
    }

    /// `sum_{s'} |P'_h(s'|s,a) - phi(s,a)^T mu_h(s')|`.
    pub fn l1_shift(&self, h: usize, s: usize, a: usize) -> f64 {
        self.transition_row(h, s, a)
            .iter()
            .enumerate()
            .map(|(next, p)| (p - self.spec.linear_transition(h, s, a, next)).abs())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = EnvDocument {
            schema_version: ENV_SCHEMA_VERSION.to_string(),
            mdp: self.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnvDocument = serde_json::from_str(text)?;
        if doc.schema_version != ENV_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported env schema {:?}, expected {ENV_SCHEMA_VERSION:?}",
                doc.schema_version
            )));
        }
        doc.mdp.validate()?;
        Ok(doc.mdp)
    }

    /// SHA-256 of the canonical JSON document.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct EnvDocument {
    schema_version: String,
    #[serde(flatten)]
    mdp: TabularMdp,
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::Schema(format!(
            "{what}: expected {len} entries, got {}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(-PROB_TOL..=1.0 + PROB_TOL).contains(&x)) {
        return Err(Error::Schema(format!("{what}: entry outside [0, 1]")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::Schema(format!("{what}: sums to {total}")));
    }
    Ok(())
}

/// Per-entry transition offsets for a given `s_plus`: `+zeta / (2 |S+|)` on
/// `s_plus` and `-zeta / (2 |S-|)` elsewhere. For even `S` both equal `zeta / S`.
fn transition_offsets(states: usize, s_plus: &[usize], zeta: f64) -> Vec<f64> {
    if zeta == 0.0 {
        return vec![0.0; states];
    }
    let n_plus = s_plus.len() as f64;
    let n_minus = (states - s_plus.len()) as f64;
    let mut offsets = vec![-zeta / (2.0 * n_minus); states];
    for &s in s_plus {
        offsets[s] = zeta / (2.0 * n_plus);
    }
    offsets
}

/// Applies reward noise and the transition shift to `spec`.
///
/// `s_plus` is redrawn up to [`MAX_RESAMPLES`] times if the shifted kernel
/// would leave `[0, 1]`; entries are never clipped.
pub fn inject_misspecification(spec: &LinearMdpSpec, cfg: &MisspecConfig) -> Result<TabularMdp> {
    spec.validate()?;
    let zeta = cfg.zeta;
    if !(zeta.is_finite() && (0.0..=1.0).contains(&zeta)) {
        return Err(Error::InvalidArgument(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    let states = spec.states;
    let half = states / 2;
    if zeta > 0.0 && half == 0 {
        return Err(Error::InfeasibleMisspecification {
            zeta,
            attempts: 0,
            reason: "a shift needs at least two states".into(),
        });
    }

    let mut base = TabularMdp::from_spec(spec.clone());
    base.zeta = zeta;
    base.reward_noise_seed = cfg.reward_noise_seed;
    base.transition_seed = cfg.transition_seed;

    // Reward noise Z = zeta * U(-1, 1) so that the same draws are reused across
    // misspecification levels.
    let mut reward_rng = rng_from_seed(cfg.reward_noise_seed);
    let noise = Uniform::new(-1.0, 1.0).expect("valid range");
    for r in base.r.iter_mut() {
        let u: f64 = noise.sample(&mut reward_rng);
        *r += zeta * u;
    }

    let mut transition_rng = rng_from_seed(cfg.transition_seed);
    let attempts = if cfg.s_plus.is_some() { 1 } else { MAX_RESAMPLES };
    for _ in 0..attempts {
        let s_plus = match &cfg.s_plus {
            Some(fixed) => {
                if fixed.len() != half || fixed.iter().any(|&s| s >= states) {
                    return Err(Error::InvalidArgument(format!(
                        "s_plus must hold {half} distinct valid states, got {fixed:?}"
                    )));
                }
                let mut v = fixed.clone();
                v.sort_unstable();
                v.dedup();
                if v.len() != half {
                    return Err(Error::InvalidArgument("s_plus has duplicates".into()));
                }
                v
            }
            None => {
                let mut v = index::sample(&mut transition_rng, states, half).into_vec();
                v.sort_unstable();
                v
            }
        };
        let offsets = transition_offsets(states, &s_plus, zeta);
        let shifted: Vec<f64> = base
            .p
            .chunks(states)
            .flat_map(|row| row.iter().zip(&offsets).map(|(p, o)| p + o))
            .collect();
        if shifted.iter().all(|&p| (0.0..=1.0).contains(&p)) {
            base.p = shifted;
            base.s_plus = s_plus;
            return Ok(base);
        }
    }
    Err(Error::InfeasibleMisspecification {
        zeta,
        attempts,
        reason: "shifted transition kernel leaves [0, 1] for every s_plus drawn".into(),
    })
}

/// Builds the environment for one `(zeta, env_seed)` pair, redrawing the
/// base environment up to [`MAX_RESAMPLES`] times when the shift is
/// infeasible. Reward noise draws depend only on `env_seed`.
pub fn build_environment(dims: EnvDims, zeta: f64, env_seed: u64) -> Result<TabularMdp> {
    let reward_seed = derive_seed("env-reward-noise", &[env_seed]);
    let mut last_err = None;
    for attempt in 0..MAX_RESAMPLES as u64 {
        let spec = generate_base_env(dims, derive_seed("env-base", &[env_seed, attempt]))?;
        let cfg = MisspecConfig::new(zeta, reward_seed, derive_seed("env-splus", &[env_seed, attempt]));
        match inject_misspecification(&spec, &cfg) {
            Ok(mdp) => return Ok(mdp),
            Err(err @ Error::InfeasibleMisspecification { .. }) => last_err = Some(err),
            Err(err) => return Err(err),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Inverse-CDF draw on a single uniform.
fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below one.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// One environment transition: deterministic reward, sampled next state.
pub fn step<R: Rng + ?Sized>(mdp: &TabularMdp, h: usize, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
    let reward = mdp.reward(h, s, a);
    let next = sample_index(mdp.transition_row(h, s, a), rng);
    (reward, next)
}

pub fn sample_initial_state<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R) -> usize {
    sample_index(&mdp.init_dist, rng)
}
