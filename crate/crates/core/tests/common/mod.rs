//! Checks shared by the integration suites: an exhaustive policy oracle, a
//! per-episode invariant checker for the agent, and small statistics helpers.

#![allow(dead_code, clippy::needless_range_loop)]

use cert_lsvi::agent::cert::weighted_norm;
use cert_lsvi::agent::index_set_bound;
use cert_lsvi::agent::{cert_linucb_traced, kappa, CertLsviAgent, CertSettings, EpisodePlan, PhaseParams, StopReason};
use cert_lsvi::env::{build_environment, EnvDims, TabularMdp};
use cert_lsvi::harness::cell::env_seed;
use cert_lsvi::harness::{Ablation, ExperimentConfig};
use cert_lsvi::oracle::{bellman_backup, evaluate_policy, solve_optimal, Policy};
use cert_lsvi::seeding::labeled_rng;
use rand::Rng;

pub const EXACT_TOL: f64 = 1e-12;

/// Random tabular instance with explicit tables.
pub fn random_tiny_mdp<R: Rng>(rng: &mut R, horizon: usize, states: usize, actions: usize) -> TabularMdp {
    let mut p = Vec::with_capacity(horizon * states * actions * states);
    for _ in 0..horizon * states * actions {
        let raw: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // Make the row sum to one exactly in floating point.
        let head: f64 = row[..states - 1].iter().sum();
        row[states - 1] = 1.0 - head;
        p.extend(row);
    }
    let r: Vec<f64> = (0..horizon * states * actions).map(|_| rng.random::<f64>()).collect();
    TabularMdp::from_tables(horizon, states, actions, p, r).expect("valid tables")
}

/// Decodes policy number `code` in base `actions` into `pi[h][s]`.
fn decode_policy(mut code: usize, horizon: usize, states: usize, actions: usize) -> Policy {
    let mut pi = vec![vec![0; states]; horizon];
    for row in pi.iter_mut() {
        for a in row.iter_mut() {
            *a = code % actions;
            code /= actions;
        }
    }
    pi
}

/// `max_pi V^pi_h(s)` over every deterministic Markov policy.
pub fn enumerate_optimal_values(mdp: &TabularMdp) -> Vec<Vec<f64>> {
    let (horizon, states, actions) = (mdp.horizon, mdp.states, mdp.actions);
    let count = actions.pow((horizon * states) as u32);
    let mut best = vec![vec![f64::NEG_INFINITY; states]; horizon];
    for code in 0..count {
        let pi = decode_policy(code, horizon, states, actions);
        let value = evaluate_policy(mdp, &pi).expect("policy fits instance");
        for h in 0..horizon {
            for s in 0..states {
                best[h][s] = best[h][s].max(value.v_pi[h][s]);
            }
        }
    }
    best
}

/// Largest discrepancy between the backward-induction solution and
/// exhaustive enumeration, including the value of the returned policy.
pub fn oracle_discrepancy(mdp: &TabularMdp) -> f64 {
    let sol = solve_optimal(mdp);
    let brute = enumerate_optimal_values(mdp);
    let own = evaluate_policy(mdp, &sol.pi_star).expect("optimal policy fits instance");
    let mut worst: f64 = 0.0;
    for h in 0..mdp.horizon {
        for s in 0..mdp.states {
            worst = worst.max((sol.v_star[h][s] - brute[h][s]).abs());
            worst = worst.max((own.v_pi[h][s] - brute[h][s]).abs());
        }
    }
    worst
}

/// Twenty instances with `S, A <= 3` and `H <= 2`; returns the worst gap.
pub fn oracle_cross_check(instances: usize) -> f64 {
    let mut rng = labeled_rng("oracle-cross-check", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let horizon = rng.random_range(1..=2);
        let states = rng.random_range(1..=3);
        let actions = rng.random_range(1..=3);
        let mdp = random_tiny_mdp(&mut rng, horizon, states, actions);
        worst = worst.max(oracle_discrepancy(&mdp));
    }
    worst
}

/// Max Bellman residual of the optimal solution.
pub fn bellman_residual(mdp: &TabularMdp) -> f64 {
    let sol = solve_optimal(mdp);
    let terminal = vec![0.0; mdp.states];
    let mut worst: f64 = 0.0;
    for h in 0..mdp.horizon {
        let next = if h + 1 < mdp.horizon {
            &sol.v_star[h + 1]
        } else {
            &terminal
        };
        for s in 0..mdp.states {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.actions {
                let q = bellman_backup(mdp, h, s, a, next);
                worst = worst.max((q - sol.q(h, s, a)).abs());
                best = best.max(q);
            }
            worst = worst.max((best - sol.v_star[h][s]).abs());
        }
    }
    worst
}

/// Coverage counters, so a run that never reaches deep phases is visible.
#[derive(Debug, Default, Clone, Copy)]
pub struct InvariantStats {
    pub episodes: usize,
    pub phases_passed: usize,
    pub explorations: usize,
    pub cert_failures: usize,
    pub cap_stops: usize,
    pub max_phase_seen: u32,
}

impl InvariantStats {
    pub fn merge(&mut self, other: InvariantStats) {
        self.episodes += other.episodes;
        self.phases_passed += other.phases_passed;
        self.explorations += other.explorations;
        self.cert_failures += other.cert_failures;
        self.cap_stops += other.cap_stops;
        self.max_phase_seen = self.max_phase_seen.max(other.max_phase_seen);
    }
}

fn fail<T>(msg: String) -> Result<T, String> {
    Err(msg)
}

/// Rounding bounds for every phase regression used by `plan`, tested on the
/// unit-normalised features of every state-action pair and on the basis
/// vectors.
fn check_quantization(agent: &CertLsviAgent, plan: &EpisodePlan) -> Result<(), String> {
    let spec = agent.spec();
    let d = spec.d;
    let mut probes: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for s in 0..spec.states {
        for a in 0..spec.actions {
            let phi = spec.phi(s, a);
            let n = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
            probes.push(phi.iter().map(|x| x / n).collect());
        }
    }
    for h in 0..agent.config().horizon {
        for l in 1..=plan.max_phase + 1 {
            let reg = agent
                .ledger()
                .phase(h, l)
                .ok_or(format!("missing phase {l} at stage {h}"))?;
            let q_bound = 0.01 * (-4.0 * l as f64).exp2();
            let norm_bound = 0.1 * (-2.0 * l as f64).exp2();
            let step = kappa(l, d);
            for x in &probes {
                let dq: f64 = x
                    .iter()
                    .zip(reg.weights.iter().zip(reg.weights_q.iter()))
                    .map(|(xi, (w, wq))| xi * (w - wq))
                    .sum();
                if dq.abs() > q_bound {
                    return fail(format!("h={h} l={l}: |phi^T(w - w~)| = {dq:e} > {q_bound:e}"));
                }
                let gap = (weighted_norm(x, &reg.cov_inv) - weighted_norm(x, &reg.cov_inv_q)).abs();
                if gap > norm_bound {
                    return fail(format!("h={h} l={l}: norm gap {gap:e} > {norm_bound:e}"));
                }
            }
            let residue = (&reg.weights - &reg.weights_q)
                .amax()
                .max((&reg.cov_inv - &reg.cov_inv_q).amax());
            if residue > step / 2.0 * (1.0 + 1e-9) {
                return fail(format!("h={h} l={l}: rounding residue {residue:e} > kappa/2"));
            }
        }
    }
    Ok(())
}

/// Replays the subroutine with tracing at every state and checks the trace
/// against the plan: sandwich ordering and monotonicity, nested nonempty
/// elimination sets, stopping rules and flag semantics.
fn check_traces(agent: &CertLsviAgent, plan: &EpisodePlan, stats: &mut InvariantStats) -> Result<(), String> {
    let cfg = agent.config();
    let spec = agent.spec();
    let horizon = cfg.horizon as f64;
    let cap = plan.max_phase;
    let settings = CertSettings {
        horizon,
        use_certification: cfg.use_certification,
        gammas: (1..=cap).map(|l| cfg.gamma(l)).collect(),
    };
    for h in 0..cfg.horizon {
        let regs = &agent.ledger().stages[h][..=cap as usize];
        let params: Vec<PhaseParams<'_>> = regs
            .iter()
            .map(|r| {
                if cfg.use_quantization {
                    PhaseParams {
                        weights: &r.weights_q,
                        cov_inv: &r.cov_inv_q,
                    }
                } else {
                    PhaseParams {
                        weights: &r.weights,
                        cov_inv: &r.cov_inv,
                    }
                }
            })
            .collect();
        for s in 0..spec.states {
            let features: Vec<&[f64]> = (0..spec.actions).map(|a| spec.phi(s, a)).collect();
            let (out, trace) = cert_linucb_traced(&features, &params, cap, &settings);
            let at = format!("k={} h={h} s={s}", plan.episode);
            if out != plan.policy[h][s] {
                return fail(format!(
                    "{at}: traced outcome {out:?} differs from plan {:?}",
                    plan.policy[h][s]
                ));
            }
            if plan.values[h][s] != out.v_hat {
                return fail(format!("{at}: planned value differs from outcome"));
            }
            if trace.len() != out.stop_phase as usize || out.stop_phase == 0 || out.stop_phase > cap + 1 {
                return fail(format!(
                    "{at}: stop phase {} with {} traced phases",
                    out.stop_phase,
                    trace.len()
                ));
            }
            stats.max_phase_seen = stats.max_phase_seen.max(out.stop_phase);

            let mut v_hat = horizon;
            let mut v_check = 0.0;
            let mut prev_active: Option<&Vec<usize>> = None;
            for (i, t) in trace.iter().enumerate() {
                let radius = (-(t.phase as f64)).exp2();
                if t.active.is_empty() {
                    return fail(format!("{at} l={}: empty action set", t.phase));
                }
                if t.active.windows(2).any(|w| w[0] >= w[1]) {
                    return fail(format!("{at} l={}: action set not sorted", t.phase));
                }
                if let Some(prev) = prev_active {
                    if t.active.iter().any(|a| !prev.contains(a)) {
                        return fail(format!("{at} l={}: action sets not nested", t.phase));
                    }
                }
                let best = t.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if t.value != best || !t.active.contains(&t.greedy) {
                    return fail(format!("{at} l={}: greedy value inconsistent", t.phase));
                }
                let first_best = t.active[t.q.iter().position(|&q| q == best).unwrap()];
                if t.greedy != first_best {
                    return fail(format!("{at} l={}: tie not broken toward lowest index", t.phase));
                }

                let last = i + 1 == trace.len();
                match (t.v_hat, t.v_check) {
                    (Some(up), Some(lo)) => {
                        if last {
                            return fail(format!("{at} l={}: final phase recorded as passed", t.phase));
                        }
                        stats.phases_passed += 1;
                        if up > v_hat || lo < v_check {
                            return fail(format!("{at} l={}: sandwich not monotone", t.phase));
                        }
                        if up > t.value + 3.0 * radius || lo < t.value - 3.0 * radius {
                            return fail(format!("{at} l={}: sandwich outside phase interval", t.phase));
                        }
                        if cfg.use_certification && !(lo <= up && lo >= 0.0 && up <= horizon) {
                            return fail(format!("{at} l={}: certified sandwich {lo} <= {up} broken", t.phase));
                        }
                        if !cfg.use_certification && up > horizon {
                            return fail(format!("{at} l={}: optimistic value above H", t.phase));
                        }
                        v_hat = up;
                        v_check = lo;
                        let next = &trace[i + 1].active;
                        let kept: Vec<usize> = t
                            .active
                            .iter()
                            .zip(&t.q)
                            .filter(|(_, &q)| q >= t.value - 4.0 * radius)
                            .map(|(&a, _)| a)
                            .collect();
                        if *next != kept {
                            return fail(format!(
                                "{at} l={}: elimination kept {next:?}, expected {kept:?}",
                                t.phase
                            ));
                        }
                    }
                    (None, None) if last => {}
                    _ => return fail(format!("{at} l={}: phase neither passed nor final", t.phase)),
                }
                prev_active = Some(&t.active);
            }

            if out.v_hat != v_hat {
                return fail(format!("{at}: returned {} but sandwich ended at {v_hat}", out.v_hat));
            }
            let final_phase = trace.last().unwrap();
            match out.reason {
                StopReason::PhaseCap => {
                    stats.cap_stops += 1;
                    if out.stop_phase != cap + 1 || !out.certified {
                        return fail(format!("{at}: phase-cap stop at {} (cap {cap})", out.stop_phase));
                    }
                }
                StopReason::Exploration => {
                    stats.explorations += 1;
                    let l = out.stop_phase;
                    let width = final_phase
                        .max_width
                        .ok_or(format!("{at}: exploration without width"))?;
                    if !out.certified || cfg.gamma(l) * width < (-(l as f64)).exp2() {
                        return fail(format!("{at}: exploration stop without a wide action"));
                    }
                    let p = params[l as usize - 1];
                    let widest = final_phase
                        .active
                        .iter()
                        .map(|&a| weighted_norm(features[a], p.cov_inv))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if weighted_norm(features[out.action], p.cov_inv) != widest
                        || !final_phase.active.contains(&out.action)
                    {
                        return fail(format!("{at}: explored action is not the widest surviving one"));
                    }
                }
                StopReason::CertificationFailed => {
                    stats.cert_failures += 1;
                    if !cfg.use_certification || out.certified {
                        return fail(format!("{at}: certification failure with flags {cfg:?}"));
                    }
                }
            }
            if !out.certified && out.reason != StopReason::CertificationFailed {
                return fail(format!("{at}: uncertified outcome for {:?}", out.reason));
            }
            if matches!(out.reason, StopReason::PhaseCap | StopReason::CertificationFailed) {
                let expected = if trace.len() >= 2 {
                    trace[trace.len() - 2].greedy
                } else {
                    trace[0].greedy
                };
                if out.action != expected {
                    return fail(format!("{at}: returned action is not the previous phase's greedy"));
                }
            }
        }
    }
    Ok(())
}

/// Runs `episodes` episodes of one cell and checks every invariant after
/// planning and after acting.
pub fn run_checked(
    dims: EnvDims,
    zeta: f64,
    ablation: Ablation,
    seed: usize,
    episodes: usize,
    gamma_scale: f64,
) -> Result<InvariantStats, String> {
    let cfg = ExperimentConfig {
        dims,
        episodes,
        ..ExperimentConfig::default()
    };
    let env = build_environment(dims, zeta, env_seed(cfg.base_seed, seed)).map_err(|e| e.to_string())?;
    check_environment(&env, zeta)?;
    let agent_cfg = cfg.agent_config(ablation, gamma_scale);
    let mut agent = CertLsviAgent::new(agent_cfg.clone(), env.spec.clone()).map_err(|e| e.to_string())?;
    let mut rng = labeled_rng("traj", &[cfg.base_seed, seed as u64]);
    let mut stats = InvariantStats::default();

    for _ in 0..episodes {
        let plan = agent.plan_episode();
        check_quantization(&agent, &plan)?;
        check_traces(&agent, &plan, &mut stats)?;

        let before = agent.ledger().index_set_sizes();
        let record = agent.act_episode(&plan, &env, &mut rng);
        let after = agent.ledger().index_set_sizes();
        for h in 0..agent_cfg.horizon {
            for l in 1..=after[h].len() as u32 {
                let was = before[h].get(l as usize - 1).copied().unwrap_or(0);
                let now = after[h][l as usize - 1];
                let admitted = record.certified[h] && record.stop_phases[h] == l;
                if now != was + admitted as usize {
                    return fail(format!("k={} h={h} l={l}: |C| went {was} -> {now}", record.episode));
                }
                let bound = index_set_bound(l, agent_cfg.d, agent_cfg.horizon, agent_cfg.delta, gamma_scale);
                if now as f64 > bound {
                    return fail(format!("k={} h={h} l={l}: |C| = {now} exceeds {bound}", record.episode));
                }
            }
        }
        agent
            .verify_ledger()
            .map_err(|e| format!("k={}: {e}", record.episode))?;
        stats.episodes += 1;
    }
    Ok(stats)
}

/// Row validity, exact L1 shift and Bellman residuals of a generated instance.
pub fn check_environment(env: &TabularMdp, zeta: f64) -> Result<(), String> {
    env.validate().map_err(|e| e.to_string())?;
    for h in 0..env.horizon {
        for s in 0..env.states {
            for a in 0..env.actions {
                let shift = env.l1_shift(h, s, a);
                if (shift - zeta).abs() > EXACT_TOL {
                    return fail(format!("h={h} s={s} a={a}: L1 shift {shift} != {zeta}"));
                }
                let noise = (env.reward(h, s, a) - env.spec.linear_reward(h, s, a)).abs();
                if noise > zeta {
                    return fail(format!("h={h} s={s} a={a}: reward noise {noise} > {zeta}"));
                }
            }
        }
    }
    let residual = bellman_residual(env);
    if residual > EXACT_TOL {
        return fail(format!("Bellman residual {residual:e}"));
    }
    Ok(())
}

/// Ranks with ties averaged, 1-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
