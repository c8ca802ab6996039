//! Pointed-DAG state graphs: an environment exposes a unique initial state, a
//! child/parent relation over opaque state keys, and a terminal sink reachable
//! from every terminating state. Everything else in the crate is built on this
//! contract.

use std::collections::{HashMap, HashSet, VecDeque};

use thiserror::Error;

/// Canonical byte key of a state. Two states are equal iff their keys are
/// byte-equal. The terminal sink is *not* a `StateId`; it is represented by
/// [`Next::Stop`], so no in-space key can collide with it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub Vec<u8>);

impl StateId {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        StateId(key.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Outcome of one forward step: either an in-space state or the terminal sink.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Next {
    State(StateId),
    Stop,
}

impl Next {
    pub fn state(&self) -> Option<&StateId> {
        match self {
            Next::State(s) => Some(s),
            Next::Stop => None,
        }
    }
}

/// A complete trajectory: states s0..sT followed by the implicit terminal
/// sink. `sequence_len` counts the sink, matching the T+2 convention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trajectory {
    pub states: Vec<StateId>,
}

impl Trajectory {
    pub fn new(states: Vec<StateId>) -> Self {
        assert!(!states.is_empty(), "a complete trajectory has at least the initial state");
        Trajectory { states }
    }

    /// Last in-space state, i.e. the terminating state reached.
    pub fn endpoint(&self) -> &StateId {
        self.states.last().unwrap()
    }

    /// Number of entries including the terminal sink (T + 2 for T
    /// intermediate steps).
    pub fn sequence_len(&self) -> usize {
        self.states.len() + 1
    }

    /// Checks the trajectory against an environment: starts at the initial
    /// state, every consecutive pair is an env edge, and the state before
    /// the sink is terminating.
    pub fn validate(&self, env: &dyn EnvGraph) -> Result<(), EnvError> {
        if self.states[0] != env.initial_state() {
            return Err(EnvError::InvalidEnv("trajectory does not start at the initial state".into()));
        }
        for w in self.states.windows(2) {
            if !env.children(&w[0]).contains(&w[1]) {
                return Err(EnvError::SupportViolation {
                    state: w[0].clone(),
                    next: Next::State(w[1].clone()),
                });
            }
        }
        if !env.is_terminating(self.endpoint()) {
            return Err(EnvError::SupportViolation {
                state: self.endpoint().clone(),
                next: Next::Stop,
            });
        }
        Ok(())
    }
}

/// Contract for a pointed DAG with rewards on terminating states.
///
/// `children` returns only in-space children, sorted by canonical key bytes;
/// the edge to the terminal sink is reported through `is_terminating`.
/// Rewards live in the log domain (flow magnitudes differ by hundreds of nats
/// on real scoring problems).
pub trait EnvGraph: Sync {
    fn initial_state(&self) -> StateId;
    fn children(&self, state: &StateId) -> Vec<StateId>;
    fn parents(&self, state: &StateId) -> Vec<StateId>;
    fn is_terminating(&self, state: &StateId) -> bool;
    fn log_reward(&self, state: &StateId) -> f64;
}

/// Distribution over the next step from one state.
#[derive(Debug, Clone)]
pub struct TransitionDistribution {
    pub support: Vec<(Next, f64)>,
}

impl TransitionDistribution {
    pub fn prob_of(&self, next: &Next) -> f64 {
        self.support
            .iter()
            .find(|(n, _)| n == next)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.support.iter().map(|(_, p)| p).sum()
    }

    /// Checks normalization (1 ± 1e-12) and that the support is contained in
    /// the children of `state` (plus the sink when terminating).
    pub fn validate(&self, env: &dyn EnvGraph, state: &StateId) -> Result<(), EnvError> {
        let total = self.total();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnvError::UnnormalizedDistribution { total });
        }
        let children = env.children(state);
        for (next, p) in &self.support {
            if *p < 0.0 {
                return Err(EnvError::UnnormalizedDistribution { total: *p });
            }
            match next {
                Next::Stop => {
                    if !env.is_terminating(state) {
                        return Err(EnvError::SupportViolation {
                            state: state.clone(),
                            next: next.clone(),
                        });
                    }
                }
                Next::State(s) => {
                    if !children.contains(s) {
                        return Err(EnvError::SupportViolation {
                            state: state.clone(),
                            next: next.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("enumeration budget exceeded: more than {max_states} states reachable")]
    BudgetExceeded { max_states: usize },
    #[error("distribution does not sum to 1 (got {total})")]
    UnnormalizedDistribution { total: f64 },
    #[error("step to {next:?} is outside the children of {state:?}")]
    SupportViolation { state: StateId, next: Next },
    #[error("state {0:?} has no parent but is not the initial state")]
    OrphanState(StateId),
    #[error("environment is not a valid pointed DAG: {0}")]
    InvalidEnv(String),
}

/// Fully enumerated view of a small environment: every reachable state in a
/// deterministic topological order, plus index maps for DP sweeps.
#[derive(Debug, Clone)]
pub struct EnumeratedEnv {
    /// Topological order (initial state first). Ties are broken by BFS
    /// discovery order, which itself is fixed by lexicographic child keys.
    pub topo_order: Vec<StateId>,
    pub index: HashMap<StateId, usize>,
    /// Children indices per state, sorted by key.
    pub children: Vec<Vec<usize>>,
    pub parents: Vec<Vec<usize>>,
    pub terminating: Vec<bool>,
    /// Count of non-terminating transitions (edges between in-space states).
    pub transition_count: usize,
}

impl EnumeratedEnv {
    pub fn terminating_states(&self) -> impl Iterator<Item = &StateId> {
        self.topo_order
            .iter()
            .enumerate()
            .filter(|(i, _)| self.terminating[*i])
            .map(|(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.topo_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topo_order.is_empty()
    }
}

/// BFS-enumerates every state reachable from the initial state, then fixes a
/// topological order with Kahn's algorithm (BFS discovery rank as the
/// tie-break, so the result is reproducible).
pub fn enumerate_env(env: &dyn EnvGraph, max_states: usize) -> Result<EnumeratedEnv, EnvError> {
    let s0 = env.initial_state();
    let mut discovery: Vec<StateId> = vec![s0.clone()];
    let mut seen: HashSet<StateId> = HashSet::from([s0.clone()]);
    let mut queue = VecDeque::from([s0]);
    while let Some(state) = queue.pop_front() {
        for child in env.children(&state) {
            if seen.insert(child.clone()) {
                if discovery.len() >= max_states {
                    return Err(EnvError::BudgetExceeded { max_states });
                }
                discovery.push(child.clone());
                queue.push_back(child);
            }
        }
    }

    let rank: HashMap<StateId, usize> =
        discovery.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut children_by_rank: Vec<Vec<usize>> = vec![Vec::new(); discovery.len()];
    let mut indegree = vec![0usize; discovery.len()];
    let mut transition_count = 0;
    for (i, state) in discovery.iter().enumerate() {
        for child in env.children(state) {
            let j = rank[&child];
            children_by_rank[i].push(j);
            indegree[j] += 1;
            transition_count += 1;
        }
    }

    // Kahn's algorithm; the ready set is kept sorted by discovery rank.
    let mut ready: Vec<usize> =
        (0..discovery.len()).filter(|&i| indegree[i] == 0).collect();
    ready.sort_unstable();
    let mut topo_ranks = Vec::with_capacity(discovery.len());
    while let Some(i) = ready.first().copied() {
        ready.remove(0);
        topo_ranks.push(i);
        for &j in &children_by_rank[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                let pos = ready.binary_search(&j).unwrap_err();
                ready.insert(pos, j);
            }
        }
    }
    if topo_ranks.len() != discovery.len() {
        return Err(EnvError::InvalidEnv("cycle among reachable states".into()));
    }

    let topo_order: Vec<StateId> = topo_ranks.iter().map(|&i| discovery[i].clone()).collect();
    let index: HashMap<StateId, usize> =
        topo_order.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut children = vec![Vec::new(); topo_order.len()];
    let mut parents = vec![Vec::new(); topo_order.len()];
    let mut terminating = vec![false; topo_order.len()];
    for (i, state) in topo_order.iter().enumerate() {
        terminating[i] = env.is_terminating(state);
        for child in env.children(state) {
            let j = index[&child];
            children[i].push(j);
            parents[j].push(i);
        }
    }
    Ok(EnumeratedEnv { topo_order, index, children, parents, terminating, transition_count })
}

/// One defect found by `validate_env`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvDefect {
    /// A cycle exists among the reachable states.
    Cycle,
    /// State from which the terminal sink is unreachable.
    DeadEnd(StateId),
    /// Non-initial state with no parents (unreachable through `parents`).
    Orphan(StateId),
    /// `children`/`parents` disagree on an edge.
    AdjacencyMismatch { from: StateId, to: StateId },
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub defects: Vec<EnvDefect>,
    pub states_visited: usize,
    pub transitions: usize,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.defects.is_empty()
    }
}

/// Checks the pointed-DAG preconditions on every state reachable within
/// `max_states`: acyclicity, reachability of the sink from every state, and
/// consistency of the child/parent relations.
pub fn validate_env(env: &dyn EnvGraph, max_states: usize) -> Result<ValidationReport, EnvError> {
    // Reuse BFS discovery, but detect cycles instead of failing on them.
    let s0 = env.initial_state();
    let mut discovery: Vec<StateId> = vec![s0.clone()];
    let mut seen: HashSet<StateId> = HashSet::from([s0.clone()]);
    let mut queue = VecDeque::from([s0.clone()]);
    while let Some(state) = queue.pop_front() {
        for child in env.children(&state) {
            if seen.insert(child.clone()) {
                if discovery.len() >= max_states {
                    return Err(EnvError::BudgetExceeded { max_states });
                }
                discovery.push(child.clone());
                queue.push_back(child);
            }
        }
    }
    let rank: HashMap<StateId, usize> =
        discovery.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();

    let mut defects = Vec::new();
    let mut transitions = 0;

    // Kahn-style cycle detection over the reachable subgraph.
    let mut indegree = vec![0usize; discovery.len()];
    let mut children_idx: Vec<Vec<usize>> = vec![Vec::new(); discovery.len()];
    for (i, state) in discovery.iter().enumerate() {
        for child in env.children(state) {
            let j = rank[&child];
            children_idx[i].push(j);
            indegree[j] += 1;
            transitions += 1;
        }
    }
    let mut ready: VecDeque<usize> =
        (0..discovery.len()).filter(|&i| indegree[i] == 0).collect();
    let mut removed = 0;
    while let Some(i) = ready.pop_front() {
        removed += 1;
        for &j in &children_idx[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push_back(j);
            }
        }
    }
    if removed != discovery.len() {
        defects.push(EnvDefect::Cycle);
    }

    // Sink reachability: walk the reversed subgraph from terminating states.
    let mut reaches_sink = vec![false; discovery.len()];
    let mut stack: Vec<usize> = Vec::new();
    for (i, state) in discovery.iter().enumerate() {
        if env.is_terminating(state) {
            reaches_sink[i] = true;
            stack.push(i);
        }
    }
    let mut parents_idx: Vec<Vec<usize>> = vec![Vec::new(); discovery.len()];
    for (i, kids) in children_idx.iter().enumerate() {
        for &j in kids {
            parents_idx[j].push(i);
        }
    }
    while let Some(i) = stack.pop() {
        for &p in &parents_idx[i] {
            if !reaches_sink[p] {
                reaches_sink[p] = true;
                stack.push(p);
            }
        }
    }
    for (i, state) in discovery.iter().enumerate() {
        if !reaches_sink[i] {
            defects.push(EnvDefect::DeadEnd(state.clone()));
        }
    }

    // Parent/child consistency on the reachable subgraph.
    for state in &discovery {
        for child in env.children(state) {
            if !env.parents(&child).contains(state) {
                defects.push(EnvDefect::AdjacencyMismatch { from: state.clone(), to: child });
            }
        }
    }
    for state in &discovery {
        if *state != env.initial_state() && env.parents(state).is_empty() {
            defects.push(EnvDefect::Orphan(state.clone()));
        }
    }

    Ok(ValidationReport { defects, states_visited: discovery.len(), transitions })
}
