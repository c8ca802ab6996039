//! Edge-by-edge DAG construction with constant-time action masks. Each state
//! carries its adjacency bits plus the transpose of its transitive closure,
//! kept current by a word-parallel boolean outer-product update.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{EnvGraph, StateId};

pub const MAX_NODES: usize = 64;

#[derive(Debug, Error)]
pub enum DagError {
    #[error("node count must be between 1 and {MAX_NODES}, got {0}")]
    BadNodeCount(usize),
    #[error("edge ({u}, {v}) is rejected by the action mask")]
    MaskedAction { u: usize, v: usize },
    #[error("node index {0} out of range for d={1}")]
    NodeOutOfRange(usize, usize),
}

/// Square bit matrix with one 64-bit word per row (d <= 64).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    pub d: usize,
    rows: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(d: usize) -> Self {
        BitMatrix { d, rows: vec![0; d] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.set(i, i, true);
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.rows[i] >> j) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        if value {
            self.rows[i] |= 1 << j;
        } else {
            self.rows[i] &= !(1 << j);
        }
    }

    pub fn row(&self, i: usize) -> u64 {
        self.rows[i]
    }

    pub fn count_ones(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }

    pub fn column_count(&self, j: usize) -> u32 {
        self.rows.iter().map(|r| ((r >> j) & 1) as u32).sum()
    }
}

/// One construction action: add the edge u -> v, or stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeAction {
    Add { u: usize, v: usize },
    Stop,
}

/// A DAG under construction. `closure_t[i][j] = 1` iff a path j ~> i exists
/// in `adj`, with the diagonal forced to one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DagState {
    pub adj: BitMatrix,
    pub closure_t: BitMatrix,
}

impl DagState {
    pub fn d(&self) -> usize {
        self.adj.d
    }

    pub fn edge_count(&self) -> usize {
        self.adj.count_ones() as usize
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.d();
        let mut out = Vec::new();
        for u in 0..d {
            for v in 0..d {
                if self.adj.get(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj.get(u, v)
    }

    pub fn parent_set(&self, v: usize) -> Vec<usize> {
        (0..self.d()).filter(|&u| self.adj.get(u, v)).collect()
    }
}

/// The fully disconnected graph: empty adjacency, identity closure.
pub fn initial_dag_state(d: usize) -> Result<DagState, DagError> {
    if d == 0 || d > MAX_NODES {
        return Err(DagError::BadNodeCount(d));
    }
    Ok(DagState { adj: BitMatrix::zeros(d), closure_t: BitMatrix::identity(d) })
}

/// Rebuilds a state from a packed adjacency key.
pub fn state_from_key(key: &StateId, d: usize) -> DagState {
    let mut state = initial_dag_state(d).expect("valid d");
    let bytes = key.as_bytes();
    for u in 0..d {
        for v in 0..d {
            let bit = u * d + v;
            if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                state = apply_edge(&state, EdgeAction::Add { u, v }).expect("key encodes a DAG");
            }
        }
    }
    state
}

/// Row-major bit-packed adjacency; injective for fixed d.
pub fn canonical_key(state: &DagState) -> StateId {
    let d = state.d();
    let mut bytes = vec![0u8; (d * d + 7) / 8];
    for u in 0..d {
        for v in 0..d {
            if state.adj.get(u, v) {
                let bit = u * d + v;
                bytes[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    StateId::new(bytes)
}

/// Valid-action mask: M[u][v] = 1 iff adding u -> v keeps the graph a simple
/// DAG, with columns that exhausted `max_parents` zeroed out.
pub fn action_mask(state: &DagState, max_parents: Option<usize>) -> BitMatrix {
    let d = state.d();
    let mut mask = BitMatrix::zeros(d);
    let full: u64 = if d == 64 { !0 } else { (1u64 << d) - 1 };
    let mut column_open = full;
    if let Some(limit) = max_parents {
        for v in 0..d {
            if state.adj.column_count(v) as usize >= limit {
                column_open &= !(1 << v);
            }
        }
    }
    for u in 0..d {
        mask.rows[u] = full & !(state.adj.row(u) | state.closure_t.row(u)) & column_open;
    }
    mask
}

/// Mask with an extra user-supplied structural filter composed on top.
pub fn action_mask_filtered(
    state: &DagState,
    max_parents: Option<usize>,
    allow: &dyn Fn(usize, usize) -> bool,
) -> BitMatrix {
    let mut mask = action_mask(state, max_parents);
    let d = state.d();
    for u in 0..d {
        for v in 0..d {
            if mask.get(u, v) && !allow(u, v) {
                mask.set(u, v, false);
            }
        }
    }
    mask
}

/// Adds one edge, updating the closure with the rank-1 boolean outer product:
/// row_i |= row_u whenever closure_t[i][v] is set.
pub fn apply_edge(state: &DagState, action: EdgeAction) -> Result<DagState, DagError> {
    let (u, v) = match action {
        EdgeAction::Add { u, v } => (u, v),
        EdgeAction::Stop => panic!("apply_edge takes an edge action"),
    };
    let d = state.d();
    if u >= d {
        return Err(DagError::NodeOutOfRange(u, d));
    }
    if v >= d {
        return Err(DagError::NodeOutOfRange(v, d));
    }
    if !action_mask(state, None).get(u, v) {
        return Err(DagError::MaskedAction { u, v });
    }
    let mut next = state.clone();
    next.adj.set(u, v, true);
    let row_u = next.closure_t.row(u);
    for i in 0..d {
        if next.closure_t.get(i, v) {
            next.closure_t.rows[i] |= row_u;
        }
    }
    Ok(next)
}

/// All parent states: one per edge, each closure recomputed from scratch
/// (removal has no incremental rule).
pub fn parent_states(state: &DagState) -> Vec<(DagState, EdgeAction)> {
    let mut out = Vec::new();
    for (u, v) in state.edges() {
        let mut adj = state.adj.clone();
        adj.set(u, v, false);
        let closure_t = transpose_closure_from_scratch(&adj);
        out.push((DagState { adj, closure_t }, EdgeAction::Add { u, v }));
    }
    out
}

/// Floyd-Warshall style recomputation of the transpose transitive closure,
/// used as the from-scratch reference and by edge removal.
pub fn transpose_closure_from_scratch(adj: &BitMatrix) -> BitMatrix {
    let d = adj.d;
    // reach[i] holds, as bits, the set of nodes reachable from i in adj.
    let mut reach: Vec<u64> = (0..d).map(|i| adj.row(i) | (1 << i)).collect();
    for k in 0..d {
        for i in 0..d {
            if (reach[i] >> k) & 1 == 1 {
                reach[i] |= reach[k];
            }
        }
    }
    let mut closure_t = BitMatrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            // path j ~> i exists  <=>  i in reach[j]
            if (reach[j] >> i) & 1 == 1 {
                closure_t.set(i, j, true);
            }
        }
    }
    closure_t
}

/// The single edge present in `b` but not in `a`, when the two states are
/// one construction step apart.
pub fn edge_added(a: &DagState, b: &DagState) -> Option<EdgeAction> {
    let d = a.d();
    let mut found = None;
    for u in 0..d {
        let diff = b.adj.row(u) & !a.adj.row(u);
        if diff != 0 {
            if found.is_some() || diff.count_ones() != 1 {
                return None;
            }
            found = Some(EdgeAction::Add { u, v: diff.trailing_zeros() as usize });
        }
    }
    found
}

/// Checks acyclicity of an adjacency matrix by Kahn's algorithm.
pub fn is_acyclic(adj: &BitMatrix) -> bool {
    let d = adj.d;
    let mut indegree = vec![0usize; d];
    for u in 0..d {
        for v in 0..d {
            if adj.get(u, v) {
                indegree[v] += 1;
            }
        }
    }
    let mut stack: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).collect();
    let mut removed = 0;
    while let Some(u) = stack.pop() {
        removed += 1;
        for v in 0..d {
            if adj.get(u, v) {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    stack.push(v);
                }
            }
        }
    }
    removed == d
}

/// Pointed-DAG environment whose states are all DAGs over d nodes, grown one
/// edge at a time. Every state is terminating; the log-reward is supplied by
/// the caller (typically a Bayesian score).
pub struct DagEnv {
    pub d: usize,
    pub max_parents: Option<usize>,
    log_reward: Box<dyn Fn(&DagState) -> f64 + Sync + Send>,
}

impl DagEnv {
    pub fn new(
        d: usize,
        max_parents: Option<usize>,
        log_reward: Box<dyn Fn(&DagState) -> f64 + Sync + Send>,
    ) -> Result<Self, DagError> {
        if d == 0 || d > MAX_NODES {
            return Err(DagError::BadNodeCount(d));
        }
        Ok(DagEnv { d, max_parents, log_reward })
    }

    /// Uniform reward over all DAGs.
    pub fn uniform(d: usize) -> Result<Self, DagError> {
        Self::new(d, None, Box::new(|_| 0.0))
    }

    pub fn decode(&self, key: &StateId) -> DagState {
        state_from_key(key, self.d)
    }

    pub fn log_reward_of(&self, state: &DagState) -> f64 {
        (self.log_reward)(state)
    }

    pub fn valid_actions(&self, state: &DagState) -> Vec<(usize, usize)> {
        let mask = action_mask(state, self.max_parents);
        let d = self.d;
        let mut out = Vec::new();
        for u in 0..d {
            for v in 0..d {
                if mask.get(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

impl EnvGraph for DagEnv {
    fn initial_state(&self) -> StateId {
        canonical_key(&initial_dag_state(self.d).unwrap())
    }

    fn children(&self, state: &StateId) -> Vec<StateId> {
        let dag = self.decode(state);
        let mut out: Vec<StateId> = self
            .valid_actions(&dag)
            .into_iter()
            .map(|(u, v)| canonical_key(&apply_edge(&dag, EdgeAction::Add { u, v }).unwrap()))
            .collect();
        out.sort();
        out
    }

    fn parents(&self, state: &StateId) -> Vec<StateId> {
        let dag = self.decode(state);
        let mut out: Vec<StateId> = parent_states(&dag)
            .into_iter()
            .filter(|(parent, action)| match action {
                // only removals that the mask would re-admit (relevant when a
                // max-parents or custom filter narrows the env)
                EdgeAction::Add { u, v } => {
                    action_mask(parent, self.max_parents).get(*u, *v)
                }
                EdgeAction::Stop => false,
            })
            .map(|(parent, _)| canonical_key(&parent))
            .collect();
        out.sort();
        out
    }

    fn is_terminating(&self, _state: &StateId) -> bool {
        true
    }

    fn log_reward(&self, state: &StateId) -> f64 {
        (self.log_reward)(&self.decode(state))
    }
}

/// Count of distinct trajectories from the empty graph to each enumerated
/// state (dynamic program over parent counts).
pub fn trajectory_counts(env: &DagEnv, max_states: usize) -> HashMap<StateId, f64> {
    let enumerated = crate::graph::enumerate_env(env, max_states).expect("enumerable");
    let mut counts: HashMap<StateId, f64> = HashMap::new();
    for state in &enumerated.topo_order {
        let parents = env.parents(state);
        let n = if parents.is_empty() {
            1.0
        } else {
            parents.iter().map(|p| counts[p]).sum()
        };
        counts.insert(state.clone(), n);
    }
    counts
}
