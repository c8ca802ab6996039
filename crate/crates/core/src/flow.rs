//! Edge flows on pointed DAGs: construction from rewards, conservation
//! checks, the induced forward policy, trajectory sampling, and the exact
//! dynamic-programming evaluation of the terminating-state distribution.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use crate::graph::{
    enumerate_env, EnumeratedEnv, EnvError, EnvGraph, Next, StateId, Trajectory,
    TransitionDistribution,
};
use crate::num::{log_sum_exp, LogSumExp};
use crate::rng::Rng;

/// Forward policy: a distribution over children (and the sink, when
/// terminating) of each reachable state.
pub trait ForwardPolicy: Sync {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution;

    fn log_prob(&self, env: &dyn EnvGraph, state: &StateId, next: &Next) -> f64 {
        self.distribution(env, state).prob_of(next).ln()
    }
}

impl<P: ForwardPolicy + ?Sized> ForwardPolicy for &P {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        (**self).distribution(env, state)
    }

    fn log_prob(&self, env: &dyn EnvGraph, state: &StateId, next: &Next) -> f64 {
        (**self).log_prob(env, state, next)
    }
}

/// Backward policy: a distribution over parents of each non-initial state.
pub trait BackwardPolicy: Sync {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> Vec<(StateId, f64)>;

    fn log_prob(&self, env: &dyn EnvGraph, state: &StateId, parent: &StateId) -> f64 {
        self.distribution(env, state)
            .iter()
            .find(|(s, _)| s == parent)
            .map(|(_, p)| p.ln())
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Uniform distribution over the parent states.
pub struct UniformBackward;

impl BackwardPolicy for UniformBackward {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> Vec<(StateId, f64)> {
        let parents = env.parents(state);
        let p = 1.0 / parents.len() as f64;
        parents.into_iter().map(|s| (s, p)).collect()
    }

    fn log_prob(&self, env: &dyn EnvGraph, state: &StateId, parent: &StateId) -> f64 {
        let parents = env.parents(state);
        if parents.contains(parent) {
            -(parents.len() as f64).ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// The uniform backward policy; errors if some non-initial reachable state
/// has no parent.
pub fn uniform_backward_policy(
    env: &dyn EnvGraph,
    max_states: usize,
) -> Result<UniformBackward, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    for state in enumerated.topo_order.iter().skip(1) {
        if env.parents(state).is_empty() {
            return Err(EnvError::OrphanState(state.clone()));
        }
    }
    Ok(UniformBackward)
}

/// Samples one complete trajectory by following `policy` from the initial
/// state until the sink is drawn.
pub fn sample_trajectory(
    env: &dyn EnvGraph,
    policy: &dyn ForwardPolicy,
    rng: &mut Rng,
) -> Result<Trajectory, EnvError> {
    let mut states = vec![env.initial_state()];
    loop {
        let state = states.last().unwrap().clone();
        let dist = policy.distribution(env, &state);
        dist.validate(env, &state)?;
        let u: f64 = rng.gen::<f64>() * dist.total();
        let mut acc = 0.0;
        let mut chosen = None;
        for (next, p) in &dist.support {
            acc += p;
            if u <= acc {
                chosen = Some(next.clone());
                break;
            }
        }
        let chosen = chosen.unwrap_or_else(|| dist.support.last().unwrap().0.clone());
        match chosen {
            Next::Stop => return Ok(Trajectory::new(states)),
            Next::State(s) => states.push(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Log-probability of a complete trajectory. Forward includes the final step
/// into the sink; backward walks parent steps and omits it. A step with zero
/// probability yields -inf.
pub fn trajectory_logprob(
    traj: &Trajectory,
    env: &dyn EnvGraph,
    forward: Option<&dyn ForwardPolicy>,
    backward: Option<&dyn BackwardPolicy>,
    direction: Direction,
) -> f64 {
    match direction {
        Direction::Forward => {
            let policy = forward.expect("forward direction needs a forward policy");
            let mut total = 0.0;
            for w in traj.states.windows(2) {
                total += policy.log_prob(env, &w[0], &Next::State(w[1].clone()));
            }
            total + policy.log_prob(env, traj.endpoint(), &Next::Stop)
        }
        Direction::Backward => {
            let policy = backward.expect("backward direction needs a backward policy");
            let mut total = 0.0;
            for w in traj.states.windows(2) {
                total += policy.log_prob(env, &w[1], &w[0]);
            }
            total
        }
    }
}

/// Non-negative flow per transition, the sink edge included. Values are kept
/// in the linear domain; comparisons happen in the log domain.
#[derive(Debug, Clone, Default)]
pub struct EdgeFlowTable {
    pub entries: HashMap<(StateId, Next), f64>,
}

impl EdgeFlowTable {
    pub fn get(&self, from: &StateId, to: &Next) -> Option<f64> {
        self.entries.get(&(from.clone(), to.clone())).copied()
    }

    pub fn insert(&mut self, from: StateId, to: Next, flow: f64) {
        assert!(flow >= 0.0, "edge flows are non-negative");
        self.entries.insert((from, to), flow);
    }

    /// Sum of flows out of `state` (sink edge included).
    pub fn outflow(&self, env: &dyn EnvGraph, state: &StateId) -> f64 {
        let mut total = 0.0;
        for child in env.children(state) {
            total += self.get(state, &Next::State(child)).unwrap_or(0.0);
        }
        if env.is_terminating(state) {
            total += self.get(state, &Next::Stop).unwrap_or(0.0);
        }
        total
    }

    /// Sum of flows into `state` from its parents.
    pub fn inflow(&self, env: &dyn EnvGraph, state: &StateId) -> f64 {
        env.parents(state)
            .iter()
            .map(|p| self.get(p, &Next::State(state.clone())).unwrap_or(0.0))
            .sum()
    }
}

/// Builds a flow meeting the boundary conditions by walking states in reverse
/// topological order: sink edges carry the rewards, and each state's outflow
/// is split equally among its incoming edges.
pub fn construct_flow_from_reward(
    env: &dyn EnvGraph,
    reward: &HashMap<StateId, f64>,
    max_states: usize,
) -> Result<EdgeFlowTable, EnvError> {
    for (state, r) in reward {
        if !r.is_finite() || *r <= 0.0 {
            return Err(EnvError::InvalidEnv(format!(
                "reward at {state:?} must be positive and finite, got {r}"
            )));
        }
    }
    let enumerated = enumerate_env(env, max_states)?;
    let mut table = EdgeFlowTable::default();
    for &i in indices_reverse(&enumerated).iter() {
        let state = &enumerated.topo_order[i];
        if enumerated.terminating[i] {
            let r = *reward.get(state).ok_or_else(|| {
                EnvError::InvalidEnv(format!("missing reward for terminating state {state:?}"))
            })?;
            table.insert(state.clone(), Next::Stop, r);
        }
        if i == 0 {
            continue; // the initial state has no incoming edges to assign
        }
        let out = table.outflow(env, state);
        let parents = enumerated.parents[i].clone();
        let share = out / parents.len() as f64;
        for p in parents {
            table.insert(
                enumerated.topo_order[p].clone(),
                Next::State(state.clone()),
                share,
            );
        }
    }
    Ok(table)
}

fn indices_reverse(enumerated: &EnumeratedEnv) -> Vec<usize> {
    (0..enumerated.len()).rev().collect()
}

/// Per-state conservation residuals of an edge flow: log(inflow) minus
/// log(outflow + reward residual), plus one global terminal-accounting
/// residual comparing the sink inflow against the initial outflow.
#[derive(Debug, Clone)]
pub struct FlowResidualReport {
    pub per_state: BTreeMap<StateId, f64>,
    /// log(Σ flow into the sink) − log(flow out of the initial state).
    pub terminal_residual: f64,
    pub initial_outflow: f64,
    pub terminal_inflow: f64,
}

impl FlowResidualReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.per_state
            .values()
            .map(|r| r.abs())
            .fold(self.terminal_residual.abs(), f64::max)
    }
}

pub fn flow_residual_report(
    flow: &EdgeFlowTable,
    env: &dyn EnvGraph,
    reward: Option<&HashMap<StateId, f64>>,
    max_states: usize,
) -> Result<FlowResidualReport, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    // Every env edge needs an entry.
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        for &j in &enumerated.children[i] {
            let child = &enumerated.topo_order[j];
            if flow.get(state, &Next::State(child.clone())).is_none() {
                return Err(EnvError::InvalidEnv(format!(
                    "flow table is missing the edge {state:?} -> {child:?}"
                )));
            }
        }
        if enumerated.terminating[i] && flow.get(state, &Next::Stop).is_none() {
            return Err(EnvError::InvalidEnv(format!(
                "flow table is missing the sink edge of {state:?}"
            )));
        }
    }

    let mut per_state = BTreeMap::new();
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        if i == enumerated.index[&env.initial_state()] {
            continue;
        }
        let inflow = flow.inflow(env, state);
        // With a reward map the boundary form is checked: outflow counts only
        // non-sink edges and the reward stands in for the sink flow.
        let outflow = match reward {
            Some(map) => {
                let mut out = 0.0;
                for child in env.children(state) {
                    out += flow.get(state, &Next::State(child)).unwrap_or(0.0);
                }
                out + map.get(state).copied().unwrap_or(0.0)
            }
            None => flow.outflow(env, state),
        };
        per_state.insert(state.clone(), inflow.ln() - outflow.ln());
    }

    let initial_outflow = flow.outflow(env, &env.initial_state());
    let mut terminal_inflow = 0.0;
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        if enumerated.terminating[i] {
            terminal_inflow += match reward {
                Some(map) => map.get(state).copied().unwrap_or(0.0),
                None => flow.get(state, &Next::Stop).unwrap_or(0.0),
            };
        }
    }
    Ok(FlowResidualReport {
        per_state,
        terminal_residual: terminal_inflow.ln() - initial_outflow.ln(),
        initial_outflow,
        terminal_inflow,
    })
}

/// Forward policy induced by an edge flow: outgoing flows normalized per
/// state.
#[derive(Debug, Clone)]
pub struct FlowPolicy {
    dists: HashMap<StateId, TransitionDistribution>,
}

impl ForwardPolicy for FlowPolicy {
    fn distribution(&self, _env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        self.dists
            .get(state)
            .cloned()
            .unwrap_or(TransitionDistribution { support: vec![] })
    }
}

pub fn policy_from_flow(
    flow: &EdgeFlowTable,
    env: &dyn EnvGraph,
    max_states: usize,
) -> Result<FlowPolicy, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    let mut dists = HashMap::new();
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        let mut support = Vec::new();
        for &j in &enumerated.children[i] {
            let child = enumerated.topo_order[j].clone();
            support.push((
                Next::State(child.clone()),
                flow.get(state, &Next::State(child)).unwrap_or(0.0),
            ));
        }
        if enumerated.terminating[i] {
            support.push((Next::Stop, flow.get(state, &Next::Stop).unwrap_or(0.0)));
        }
        let total: f64 = support.iter().map(|(_, f)| f).sum();
        if support.is_empty() {
            continue;
        }
        if total <= 0.0 {
            return Err(EnvError::InvalidEnv(format!(
                "state {state:?} has outgoing edges but zero outflow"
            )));
        }
        for (_, f) in support.iter_mut() {
            *f /= total;
        }
        dists.insert(state.clone(), TransitionDistribution { support });
    }
    Ok(FlowPolicy { dists })
}

/// Exact terminating-state probabilities of a forward policy, by pushing one
/// unit of flow from the initial state along a topological order.
pub fn terminating_distribution_dp(
    env: &dyn EnvGraph,
    policy: &dyn ForwardPolicy,
    max_states: usize,
) -> Result<BTreeMap<StateId, f64>, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    let mut state_flow = vec![0.0f64; enumerated.len()];
    state_flow[0] = 1.0;
    let mut result = BTreeMap::new();
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        if state_flow[i] == 0.0 && i != 0 {
            // unreachable under this policy; it still contributes zeros
        }
        let dist = policy.distribution(env, state);
        dist.validate(env, state)?;
        for (next, p) in &dist.support {
            match next {
                Next::Stop => {
                    *result.entry(state.clone()).or_insert(0.0) += state_flow[i] * p;
                }
                Next::State(s) => {
                    let j = enumerated.index[s];
                    state_flow[j] += state_flow[i] * p;
                }
            }
        }
        if enumerated.terminating[i] {
            result.entry(state.clone()).or_insert(0.0);
        }
    }
    Ok(result)
}

/// Log-domain variant of the DP sweep, for policies whose terminating masses
/// span many orders of magnitude.
pub fn terminating_distribution_dp_log(
    env: &dyn EnvGraph,
    policy: &dyn ForwardPolicy,
    max_states: usize,
) -> Result<BTreeMap<StateId, f64>, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    let mut log_flow = vec![Vec::<f64>::new(); enumerated.len()];
    log_flow[0].push(0.0);
    let mut result = BTreeMap::new();
    for (i, state) in enumerated.topo_order.iter().enumerate() {
        let lf = log_sum_exp(&log_flow[i]);
        let dist = policy.distribution(env, state);
        for (next, p) in &dist.support {
            let contribution = lf + p.ln();
            match next {
                Next::Stop => {
                    result
                        .entry(state.clone())
                        .and_modify(|v: &mut f64| *v = crate::num::log_add_exp(*v, contribution))
                        .or_insert(contribution);
                }
                Next::State(s) => {
                    let j = enumerated.index[s];
                    log_flow[j].push(contribution);
                }
            }
        }
        if enumerated.terminating[i] {
            result.entry(state.clone()).or_insert(f64::NEG_INFINITY);
        }
    }
    Ok(result)
}

/// Enumerates every complete trajectory of a small environment.
pub fn enumerate_trajectories(
    env: &dyn EnvGraph,
    max_states: usize,
    max_trajectories: usize,
) -> Result<Vec<Trajectory>, EnvError> {
    let enumerated = enumerate_env(env, max_states)?;
    let mut out = Vec::new();
    let mut stack = vec![vec![env.initial_state()]];
    while let Some(prefix) = stack.pop() {
        let last = prefix.last().unwrap().clone();
        if env.is_terminating(&last) {
            if out.len() >= max_trajectories {
                return Err(EnvError::BudgetExceeded { max_states: max_trajectories });
            }
            out.push(Trajectory::new(prefix.clone()));
        }
        let i = enumerated.index[&last];
        for &j in enumerated.children[i].iter().rev() {
            let mut next = prefix.clone();
            next.push(enumerated.topo_order[j].clone());
            stack.push(next);
        }
    }
    Ok(out)
}

/// Result of the Markovian-flow check on a full trajectory-flow table.
#[derive(Debug, Clone)]
pub struct MarkovianCheck {
    pub is_markovian: bool,
    /// A violating (prefix, transition) pair when not Markovian.
    pub witness: Option<(Trajectory, (StateId, StateId))>,
}

/// Decides whether a table of per-trajectory flows is a Markovian flow, by
/// testing F(s)·F(τ⊕(s→s') ⪯ ·) = F(s→s')·F(τ ⪯ ·) on every prefix.
pub fn is_markovian_table(
    trajectory_flows: &HashMap<Trajectory, f64>,
    env: &dyn EnvGraph,
    max_states: usize,
) -> Result<MarkovianCheck, EnvError> {
    let all = enumerate_trajectories(env, max_states, 1_000_000)?;
    for t in &all {
        if !trajectory_flows.contains_key(t) {
            return Err(EnvError::InvalidEnv(format!(
                "trajectory flow table is missing {t:?}"
            )));
        }
    }

    let state_flow = |s: &StateId| -> f64 {
        trajectory_flows
            .iter()
            .filter(|(t, _)| t.states.contains(s))
            .map(|(_, f)| f)
            .sum()
    };
    let edge_flow = |s: &StateId, s2: &StateId| -> f64 {
        trajectory_flows
            .iter()
            .filter(|(t, _)| t.states.windows(2).any(|w| &w[0] == s && &w[1] == s2))
            .map(|(_, f)| f)
            .sum()
    };
    let prefix_flow = |prefix: &[StateId]| -> f64 {
        trajectory_flows
            .iter()
            .filter(|(t, _)| t.states.len() >= prefix.len() && &t.states[..prefix.len()] == prefix)
            .map(|(_, f)| f)
            .sum()
    };

    for t in &all {
        for end in 1..t.states.len() {
            let prefix = &t.states[..end];
            let s = &prefix[end - 1];
            let s2 = &t.states[end];
            let lhs = state_flow(s) * prefix_flow(&t.states[..end + 1]);
            let rhs = edge_flow(s, s2) * prefix_flow(prefix);
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            if ((lhs - rhs) / scale).abs() > 1e-9 {
                return Ok(MarkovianCheck {
                    is_markovian: false,
                    witness: Some((
                        Trajectory::new(prefix.to_vec()),
                        (s.clone(), s2.clone()),
                    )),
                });
            }
        }
    }
    Ok(MarkovianCheck { is_markovian: true, witness: None })
}

/// Total log-flow out of the initial state of a constructed flow table.
pub fn log_initial_outflow(flow: &EdgeFlowTable, env: &dyn EnvGraph) -> f64 {
    let s0 = env.initial_state();
    let mut acc = LogSumExp::new();
    for child in env.children(&s0) {
        if let Some(f) = flow.get(&s0, &Next::State(child)) {
            acc.add(f.ln());
        }
    }
    if env.is_terminating(&s0) {
        if let Some(f) = flow.get(&s0, &Next::Stop) {
            acc.add(f.ln());
        }
    }
    acc.value()
}
