//! Exact oracles at desk scale: DAG enumeration, the exact posterior by
//! exhaustive scoring, the unique forward policy solved from the modified
//! detailed-balance system, structural feature/metric reports, and the
//! beam-plus-Monte-Carlo estimator of terminating log-probabilities.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dag::{canonical_key, state_from_key, DagEnv, DagState};
use crate::flow::{BackwardPolicy, ForwardPolicy};
use crate::graph::{enumerate_env, EnvError, Next, StateId};
use crate::num::{ln_factorial, log_add_exp, log_sum_exp, LogSumExp};
use crate::rng::Rng;
use crate::scores::{log_reward, GraphPrior, LocalScoreCache, ScoreError};

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("exhaustive enumeration is capped at d = 5, got {0}")]
    TooLarge(usize),
    #[error("distribution is not normalized (log-sum {0})")]
    Unnormalized(f64),
    #[error("distributions have different supports")]
    SupportMismatch,
    #[error("degenerate variance in correlation input")]
    DegenerateVariance,
    #[error("beam width and sample count cannot both be zero")]
    EmptyEstimator,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Every DAG over d labeled nodes, via breadth-first closure of the
/// edge-addition environment. Complete and duplicate-free.
pub fn enumerate_dags(d: usize) -> Result<Vec<DagState>, ExactError> {
    if d > 5 {
        return Err(ExactError::TooLarge(d));
    }
    let env = DagEnv::uniform(d).expect("valid d");
    let enumerated = enumerate_env(&env, 40_000)?;
    Ok(enumerated.topo_order.iter().map(|k| state_from_key(k, d)).collect())
}

/// Count of non-terminating transitions of the edge-addition environment.
pub fn count_transitions(d: usize) -> Result<usize, ExactError> {
    if d > 5 {
        return Err(ExactError::TooLarge(d));
    }
    let env = DagEnv::uniform(d).expect("valid d");
    let enumerated = enumerate_env(&env, 40_000)?;
    Ok(enumerated.transition_count)
}

/// Normalized log-probability per enumerated DAG.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    pub d: usize,
    pub log_probs: BTreeMap<StateId, f64>,
    /// log Σ_G R(G), the exact log-evidence up to the prior constant.
    pub log_evidence: f64,
}

impl PosteriorTable {
    pub fn log_prob(&self, key: &StateId) -> f64 {
        self.log_probs.get(key).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn prob(&self, key: &StateId) -> f64 {
        self.log_prob(key).exp()
    }

    /// Linear probabilities in key order.
    pub fn dense(&self) -> Vec<(StateId, f64)> {
        self.log_probs.iter().map(|(k, lp)| (k.clone(), lp.exp())).collect()
    }

    pub fn check_normalized(&self) -> Result<(), ExactError> {
        let total = log_sum_exp(&self.log_probs.values().copied().collect::<Vec<_>>());
        if total.abs() > 1e-10 {
            return Err(ExactError::Unnormalized(total));
        }
        Ok(())
    }
}

/// Exact posterior over all DAGs with d ≤ 5 nodes under a modular score and
/// a graph prior.
pub fn exact_posterior(
    cache: &LocalScoreCache,
    prior: GraphPrior,
    d: usize,
) -> Result<PosteriorTable, ExactError> {
    let dags = enumerate_dags(d)?;
    let mut scored: Vec<(StateId, f64)> = Vec::with_capacity(dags.len());
    for g in &dags {
        scored.push((canonical_key(g), log_reward(g, cache, prior)?));
    }
    let log_evidence = log_sum_exp(&scored.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    let log_probs = scored.into_iter().map(|(k, s)| (k, s - log_evidence)).collect();
    Ok(PosteriorTable { d, log_probs, log_evidence })
}

/// Uniform table over all DAGs (the exact posterior of a constant score).
pub fn uniform_posterior(d: usize) -> Result<PosteriorTable, ExactError> {
    let dags = enumerate_dags(d)?;
    let lp = -(dags.len() as f64).ln();
    let log_probs = dags.iter().map(|g| (canonical_key(g), lp)).collect();
    Ok(PosteriorTable { d, log_probs, log_evidence: -lp })
}

/// The forward policy solved exactly from the modified detailed-balance
/// system by log-domain back-substitution in reverse topological order.
#[derive(Debug, Clone)]
pub struct ExactPolicy {
    /// log P_F(next | state) per transition, sink included.
    pub log_probs: HashMap<(StateId, Next), f64>,
    dists: HashMap<StateId, Vec<(Next, f64)>>,
}

impl ForwardPolicy for ExactPolicy {
    fn distribution(&self, _env: &dyn crate::graph::EnvGraph, state: &StateId) -> crate::graph::TransitionDistribution {
        crate::graph::TransitionDistribution {
            support: self.dists.get(state).cloned().unwrap_or_default(),
        }
    }

    fn log_prob(&self, _env: &dyn crate::graph::EnvGraph, state: &StateId, next: &Next) -> f64 {
        self.log_probs
            .get(&(state.clone(), next.clone()))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Solves for the unique positive forward policy of an all-terminating env
/// with fixed backward policy: the ratios x(G'|G) = P_F(G'|G)/P_F(⊥|G)
/// satisfy an upper-triangular linear system solved backwards from the
/// childless states.
pub fn solve_forward_policy(
    env: &DagEnv,
    backward: &dyn BackwardPolicy,
    max_states: usize,
) -> Result<ExactPolicy, ExactError> {
    let enumerated = enumerate_env(env, max_states)?;
    let n = enumerated.len();
    let log_r: Vec<f64> =
        enumerated
        .topo_order
        .iter()
        .map(|k| crate::graph::EnvGraph::log_reward(env, k))
        .collect();
    if log_r.iter().any(|r| !r.is_finite()) {
        return Err(ExactError::Unnormalized(f64::NEG_INFINITY));
    }
    // log Σ_{G''} x(G'' | G), filled in reverse topological order
    let mut log_sum_x = vec![f64::NEG_INFINITY; n];
    let mut log_x: HashMap<(usize, usize), f64> = HashMap::new();
    for i in (0..n).rev() {
        let g = &enumerated.topo_order[i];
        let mut acc = LogSumExp::new();
        for &j in &enumerated.children[i] {
            let g2 = &enumerated.topo_order[j];
            let log_pb = backward.log_prob(env, g2, g);
            let v = log_r[j] - log_r[i] + log_pb + log_add_exp(0.0, log_sum_x[j]);
            log_x.insert((i, j), v);
            acc.add(v);
        }
        log_sum_x[i] = acc.value();
    }
    let mut log_probs = HashMap::new();
    let mut dists = HashMap::new();
    for (i, g) in enumerated.topo_order.iter().enumerate() {
        let log_stop = -log_add_exp(0.0, log_sum_x[i]);
        let mut support = Vec::with_capacity(enumerated.children[i].len() + 1);
        for &j in &enumerated.children[i] {
            let lp = log_stop + log_x[&(i, j)];
            let g2 = enumerated.topo_order[j].clone();
            log_probs.insert((g.clone(), Next::State(g2.clone())), lp);
            support.push((Next::State(g2), lp.exp()));
        }
        log_probs.insert((g.clone(), Next::Stop), log_stop);
        support.push((Next::Stop, log_stop.exp()));
        dists.insert(g.clone(), support);
    }
    Ok(ExactPolicy { log_probs, dists })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Edge,
    Path,
    Markov,
}

/// d x d marginal-probability matrix of a structural feature under a
/// distribution over DAGs.
#[derive(Debug, Clone)]
pub struct FeatureReport {
    pub kind: FeatureKind,
    pub d: usize,
    pub matrix: Vec<f64>,
}

impl FeatureReport {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.d + j]
    }
}

/// Feature marginals of a normalized distribution over DAG keys.
pub fn features(
    dist: &BTreeMap<StateId, f64>,
    d: usize,
    kind: FeatureKind,
) -> Result<FeatureReport, ExactError> {
    let total: f64 = dist.values().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(ExactError::Unnormalized(total.ln()));
    }
    let mut matrix = vec![0.0; d * d];
    for (key, &p) in dist {
        let g = state_from_key(key, d);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let hit = match kind {
                    FeatureKind::Edge => g.adj.get(i, j),
                    // path i ~> j exists iff closure_t[j][i] is set
                    FeatureKind::Path => g.closure_t.get(j, i),
                    FeatureKind::Markov => {
                        g.adj.get(i, j)
                            || g.adj.get(j, i)
                            || (0..d).any(|c| g.adj.get(i, c) && g.adj.get(j, c))
                    }
                };
                if hit {
                    matrix[i * d + j] += p;
                }
            }
        }
    }
    Ok(FeatureReport { kind, d, matrix })
}

/// Jensen-Shannon divergence between two distributions given on a common
/// support ordering. Natural log, so the range is [0, ln 2].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, ExactError> {
    if p.len() != q.len() {
        return Err(ExactError::SupportMismatch);
    }
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    Ok(total.max(0.0))
}

/// JSD between a policy's DP terminating distribution and a posterior table.
pub fn jsd_vs_posterior(
    env: &dyn crate::graph::EnvGraph,
    policy: &dyn ForwardPolicy,
    table: &PosteriorTable,
    max_states: usize,
) -> Result<f64, ExactError> {
    let dp = crate::flow::terminating_distribution_dp(env, policy, max_states)?;
    let mut p = Vec::with_capacity(table.log_probs.len());
    let mut q = Vec::with_capacity(table.log_probs.len());
    for (key, lp) in &table.log_probs {
        q.push(lp.exp());
        p.push(dp.get(key).copied().unwrap_or(0.0));
    }
    jsd(&p, &q)
}

#[derive(Debug, Clone)]
pub struct StructuralMetrics {
    pub e_shd: f64,
    pub auroc: f64,
}

/// E-SHD (mean symmetric difference of directed edge sets against the
/// reference) and the AUROC of the reference edges against the edge
/// marginals, by threshold sweep with trapezoidal integration.
pub fn structural_metrics(
    samples: &[StateId],
    g_star: &DagState,
    edge_marginals: &FeatureReport,
) -> StructuralMetrics {
    assert!(!samples.is_empty(), "structural metrics need at least one sample");
    let d = g_star.d();
    let mut total = 0usize;
    for key in samples {
        let g = state_from_key(key, d);
        let mut shd = 0usize;
        for i in 0..d {
            for j in 0..d {
                if g.adj.get(i, j) != g_star.adj.get(i, j) {
                    shd += 1;
                }
            }
        }
        total += shd;
    }
    let e_shd = total as f64 / samples.len() as f64;

    // ROC over ordered off-diagonal pairs
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                scored.push((edge_marginals.get(i, j), g_star.adj.get(i, j)));
            }
        }
    }
    let positives = scored.iter().filter(|(_, y)| *y).count() as f64;
    let negatives = scored.len() as f64 - positives;
    let mut thresholds: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = scored.iter().filter(|(s, y)| *s >= t && *y).count() as f64;
        let fp = scored.iter().filter(|(s, y)| *s >= t && !*y).count() as f64;
        points.push((
            if negatives > 0.0 { fp / negatives } else { 0.0 },
            if positives > 0.0 { tp / positives } else { 1.0 },
        ));
    }
    points.push((1.0, 1.0));
    let mut auroc = 0.0;
    for w in points.windows(2) {
        auroc += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    StructuralMetrics { e_shd, auroc }
}

/// Per-expansion-step record of the beam frontier.
#[derive(Debug, Clone)]
pub struct BeamStepLog {
    pub kept_min: f64,
    pub excluded_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    /// Complete trajectories (state key sequences ending at the target).
    pub trajectories: Vec<Vec<StateId>>,
    /// log ΠP_F over each trajectory, the final stop step excluded.
    pub log_prefix_probs: Vec<f64>,
    pub step_logs: Vec<BeamStepLog>,
}

/// Beam search over edge-addition orders constrained to the edges of `g`,
/// scored by the forward policy.
pub fn beam_search(
    env: &DagEnv,
    policy: &dyn ForwardPolicy,
    g: &DagState,
    width: usize,
) -> BeamResult {
    assert!(width > 0, "beam width must be positive");
    let target_edges: HashSet<(usize, usize)> = g.edges().into_iter().collect();
    let k = target_edges.len();
    let start = canonical_key(&crate::dag::initial_dag_state(g.d()).unwrap());
    let mut beam: Vec<(Vec<StateId>, DagState, f64)> =
        vec![(vec![start], crate::dag::initial_dag_state(g.d()).unwrap(), 0.0)];
    let mut step_logs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut candidates: Vec<(usize, (usize, usize), f64)> = Vec::new();
        for (b, (_, dag, logp)) in beam.iter().enumerate() {
            let dist = policy.distribution(env, &canonical_key(dag));
            for &(u, v) in &target_edges {
                if dag.adj.get(u, v) {
                    continue;
                }
                let child = crate::dag::apply_edge(dag, crate::dag::EdgeAction::Add { u, v })
                    .expect("sub-DAG edges stay valid");
                let p = dist.prob_of(&Next::State(canonical_key(&child)));
                candidates.push((b, (u, v), logp + p.ln()));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        let keep = candidates.len().min(width);
        step_logs.push(BeamStepLog {
            kept_min: candidates[keep - 1].2,
            excluded_max: candidates.get(keep).map(|c| c.2),
        });
        let mut next_beam = Vec::with_capacity(keep);
        for &(b, (u, v), score) in candidates.iter().take(keep) {
            let (states, dag, _) = &beam[b];
            let child =
                crate::dag::apply_edge(dag, crate::dag::EdgeAction::Add { u, v }).unwrap();
            let mut path = states.clone();
            path.push(canonical_key(&child));
            next_beam.push((path, child, score));
        }
        beam = next_beam;
    }
    BeamResult {
        trajectories: beam.iter().map(|(s, _, _)| s.clone()).collect(),
        log_prefix_probs: beam.iter().map(|(_, _, p)| *p).collect(),
        step_logs,
    }
}

#[derive(Debug, Clone)]
pub struct LogProbEstimate {
    pub log_estimate: f64,
    /// Relative standard error of the Monte-Carlo tail (None when exact).
    pub relative_stderr: Option<f64>,
    pub exact: bool,
}

/// Beam + Monte-Carlo estimate of log P_F^⊤(g): the top trajectories are
/// summed exactly, the tail is estimated by uniformly random edge orders
/// with rejection of beam members. Exact when the beam covers all K! orders.
pub fn estimate_log_pftop(
    env: &DagEnv,
    policy: &dyn ForwardPolicy,
    g: &DagState,
    beam_width: usize,
    mc_samples: usize,
    rng: &mut Rng,
) -> Result<LogProbEstimate, ExactError> {
    if beam_width == 0 && mc_samples == 0 {
        return Err(ExactError::EmptyEstimator);
    }
    let k = g.edge_count();
    let g_key = canonical_key(g);
    let log_stop = policy.log_prob(env, &g_key, &Next::Stop);
    if k == 0 {
        return Ok(LogProbEstimate { log_estimate: log_stop, relative_stderr: None, exact: true });
    }
    let ln_k_factorial = ln_factorial(k as u64);
    let exact_possible =
        k <= 20 && beam_width as u128 >= (1..=k as u128).product::<u128>();
    let width = beam_width.max(1);
    let beam = beam_search(env, policy, g, width);
    let top_lse = log_sum_exp(&beam.log_prefix_probs);
    if exact_possible {
        return Ok(LogProbEstimate {
            log_estimate: top_lse + log_stop,
            relative_stderr: None,
            exact: true,
        });
    }

    // ln(K! − B) = ln K! + ln(1 − B/K!)
    let ln_tail_count =
        ln_k_factorial + (-(beam.trajectories.len() as f64) * (-ln_k_factorial).exp()).ln_1p();
    let beam_set: HashSet<&Vec<StateId>> = beam.trajectories.iter().collect();
    let mut tail_logps = Vec::with_capacity(mc_samples);
    let edges = g.edges();
    for _ in 0..mc_samples {
        let mut accepted = None;
        for _attempt in 0..100 {
            let mut order = edges.clone();
            order.shuffle(rng);
            let mut dag = crate::dag::initial_dag_state(g.d()).unwrap();
            let mut path = vec![canonical_key(&dag)];
            let mut logp = 0.0;
            for &(u, v) in &order {
                let next = crate::dag::apply_edge(&dag, crate::dag::EdgeAction::Add { u, v })
                    .expect("edge orders of a DAG are valid");
                let key = canonical_key(&next);
                logp += policy
                    .log_prob(env, &canonical_key(&dag), &Next::State(key.clone()));
                path.push(key);
                dag = next;
            }
            if !beam_set.contains(&path) {
                accepted = Some(logp);
                break;
            }
        }
        if let Some(logp) = accepted {
            tail_logps.push(logp);
        }
    }
    let m = tail_logps.len();
    let tail_mean = if m > 0 {
        ln_tail_count + log_sum_exp(&tail_logps) - (m as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    let log_estimate = log_add_exp(top_lse, tail_mean) + log_stop;

    let relative_stderr = if m > 1 {
        // Var(Y)/m with Y = (K!−B)·P_F(τ); all in the log domain
        let log_e_y2 = 2.0 * ln_tail_count
            + log_sum_exp(&tail_logps.iter().map(|l| 2.0 * l).collect::<Vec<_>>())
            - (m as f64).ln();
        let log_mean_sq = 2.0 * tail_mean;
        let diff = log_mean_sq - log_e_y2;
        if diff < 0.0 {
            let log_var = log_e_y2 + (-diff.exp()).ln_1p();
            let log_se = 0.5 * (log_var - (m as f64).ln());
            Some((log_se - (tail_mean.max(top_lse))).exp())
        } else {
            Some(0.0)
        }
    } else {
        None
    };
    Ok(LogProbEstimate { log_estimate, relative_stderr, exact: false })
}

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub trimmed_slope: f64,
    pub trimmed_intercept: f64,
    pub trimmed_r: f64,
}

fn ols(pairs: &[(f64, f64)]) -> Result<(f64, f64, f64), ExactError> {
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(ExactError::DegenerateVariance);
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x, sxy / (sxx * syy).sqrt()))
}

/// Ordinary least squares of (x = log reward, y = log estimate) pairs, with
/// a 5%-trimmed refit (largest absolute residuals dropped) alongside.
pub fn correlation_report(pairs: &[(f64, f64)]) -> Result<CorrelationReport, ExactError> {
    if pairs.len() < 3 {
        return Err(ExactError::DegenerateVariance);
    }
    let input: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (y, x)).collect();
    let (slope, intercept, r) = ols(&input)?;
    let mut residuals: Vec<(f64, usize)> = input
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| ((y - slope * x - intercept).abs(), i))
        .collect();
    residuals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let keep = input.len() - (input.len() as f64 * 0.05).ceil() as usize;
    let keep = keep.max(3);
    let trimmed: Vec<(f64, f64)> =
        residuals.iter().take(keep).map(|&(_, i)| input[i]).collect();
    let (ts, ti, tr) = ols(&trimmed)?;
    Ok(CorrelationReport {
        slope,
        intercept,
        pearson_r: r,
        trimmed_slope: ts,
        trimmed_intercept: ti,
        trimmed_r: tr,
    })
}

/// Conditional entropy of trajectories given endpoints under a forward
/// policy, by full enumeration: −Σ_τ P_F(τ) log[P_F(τ)/P_F^⊤(x_τ)].
pub fn conditional_trajectory_entropy(
    env: &dyn crate::graph::EnvGraph,
    policy: &dyn ForwardPolicy,
    max_states: usize,
) -> Result<f64, ExactError> {
    let dp = crate::flow::terminating_distribution_dp(env, policy, max_states)?;
    let trajectories = crate::flow::enumerate_trajectories(env, max_states, 10_000_000)?;
    let mut h = 0.0;
    for traj in &trajectories {
        let logp = crate::flow::trajectory_logprob(
            &traj,
            env,
            Some(policy),
            None,
            crate::flow::Direction::Forward,
        );
        let p = logp.exp();
        if p > 0.0 {
            let marginal = dp[traj.endpoint()];
            h -= p * (logp - marginal.ln());
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{apply_edge, initial_dag_state, is_acyclic, BitMatrix, EdgeAction};
    use crate::rng::SeedSequence;

    #[test]
    fn enumeration_counts_match_known_values() {
        assert_eq!(enumerate_dags(1).unwrap().len(), 1);
        assert_eq!(enumerate_dags(2).unwrap().len(), 3);
        assert_eq!(enumerate_dags(3).unwrap().len(), 25);
        assert_eq!(count_transitions(3).unwrap(), 48);
        assert!(enumerate_dags(6).is_err());
    }

    #[test]
    fn enumeration_matches_brute_force_at_d4() {
        // independent oracle: all 2^12 off-diagonal bit patterns filtered
        // for acyclicity
        let d = 4;
        let positions: Vec<(usize, usize)> = (0..d)
            .flat_map(|u| (0..d).map(move |v| (u, v)))
            .filter(|&(u, v)| u != v)
            .collect();
        let mut count = 0usize;
        for bits in 0u32..(1 << positions.len()) {
            let mut adj = BitMatrix::zeros(d);
            for (b, &(u, v)) in positions.iter().enumerate() {
                if (bits >> b) & 1 == 1 {
                    adj.set(u, v, true);
                }
            }
            if is_acyclic(&adj) {
                count += 1;
            }
        }
        assert_eq!(enumerate_dags(4).unwrap().len(), count);
        assert_eq!(count, 543);
    }

    #[test]
    fn uniform_posterior_is_flat_and_normalized() {
        let table = uniform_posterior(3).unwrap();
        table.check_normalized().unwrap();
        let first = *table.log_probs.values().next().unwrap();
        assert!(table.log_probs.values().all(|&lp| (lp - first).abs() < 1e-14));
    }

    #[test]
    fn jsd_limits() {
        assert_eq!(jsd(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let max = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - 2.0f64.ln()).abs() < 1e-12);
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn structural_metrics_edge_cases() {
        let mut g_star = initial_dag_state(3).unwrap();
        g_star = apply_edge(&g_star, EdgeAction::Add { u: 0, v: 1 }).unwrap();
        g_star = apply_edge(&g_star, EdgeAction::Add { u: 1, v: 2 }).unwrap();
        let key = canonical_key(&g_star);
        // all samples equal to the reference with indicator marginals
        let mut matrix = vec![0.0; 9];
        matrix[0 * 3 + 1] = 1.0;
        matrix[1 * 3 + 2] = 1.0;
        let report = FeatureReport { kind: FeatureKind::Edge, d: 3, matrix };
        let m = structural_metrics(&[key], &g_star, &report);
        assert_eq!(m.e_shd, 0.0);
        assert!((m.auroc - 1.0).abs() < 1e-12);
        // empty-graph predictor: E-SHD equals the reference edge count
        let empty = canonical_key(&initial_dag_state(3).unwrap());
        let flat = FeatureReport { kind: FeatureKind::Edge, d: 3, matrix: vec![0.5; 9] };
        let m = structural_metrics(&[empty], &g_star, &flat);
        assert_eq!(m.e_shd, 2.0);
    }

    #[test]
    fn random_marginals_score_near_half_auroc() {
        let seq = SeedSequence::new(99);
        let mut rng = seq.stream(0);
        let mut g_star = initial_dag_state(4).unwrap();
        g_star = apply_edge(&g_star, EdgeAction::Add { u: 0, v: 2 }).unwrap();
        g_star = apply_edge(&g_star, EdgeAction::Add { u: 1, v: 3 }).unwrap();
        g_star = apply_edge(&g_star, EdgeAction::Add { u: 0, v: 3 }).unwrap();
        let mut mean = 0.0;
        let reps = 400;
        for _ in 0..reps {
            use rand::Rng as _;
            let matrix: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
            let report = FeatureReport { kind: FeatureKind::Edge, d: 4, matrix };
            mean += structural_metrics(&[canonical_key(&g_star)], &g_star, &report).auroc;
        }
        mean /= reps as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean AUROC {mean}");
    }

    #[test]
    fn correlation_on_exact_line() {
        let pairs: Vec<(f64, f64)> =
            (0..20).map(|i| (i as f64 * 0.3 + 2.0, i as f64 * 0.3)).collect();
        let report = correlation_report(&pairs).unwrap();
        assert!((report.slope - 1.0).abs() < 1e-12);
        assert!((report.intercept - 2.0).abs() < 1e-12);
        assert!((report.pearson_r - 1.0).abs() < 1e-12);
        // constant estimates: degenerate variance
        let degenerate: Vec<(f64, f64)> = (0..5).map(|i| (1.0, i as f64)).collect();
        assert!(correlation_report(&degenerate).is_err());
    }
}
