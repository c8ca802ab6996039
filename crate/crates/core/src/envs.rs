//! Reference environments: table-driven pointed DAGs with a line-oriented
//! text format, the quincunx board, and the autoregressive factor-graph
//! sampler. These are the fixtures every exactness test runs against.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{EnvGraph, Next, StateId, TransitionDistribution};
use crate::flow::ForwardPolicy;

/// Environments whose terminal energy decomposes into per-transition
/// increments that sum to the endpoint energy along every trajectory.
pub trait DecomposableEnergy: EnvGraph {
    fn step_energy(&self, from: &StateId, to: &StateId) -> f64;
}

#[derive(Debug, Error)]
pub enum SpecParseError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Structure(String),
}

/// Explicit pointed DAG given by its state list, adjacency, and terminating
/// rewards. State keys are the state names as bytes.
#[derive(Debug, Clone)]
pub struct ExplicitEnv {
    names: Vec<String>,
    ids: Vec<StateId>,
    index: HashMap<StateId, usize>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    log_rewards: HashMap<usize, f64>,
    initial: usize,
}

impl ExplicitEnv {
    pub fn builder() -> ExplicitEnvBuilder {
        ExplicitEnvBuilder::default()
    }

    pub fn state(&self, name: &str) -> StateId {
        StateId::new(name.as_bytes().to_vec())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn set_log_reward(&mut self, name: &str, log_reward: f64) {
        let id = self.state(name);
        let i = self.index[&id];
        assert!(self.log_rewards.contains_key(&i), "{name} is not terminating");
        self.log_rewards.insert(i, log_reward);
    }

    /// Parses the line-oriented env description:
    ///
    /// ```text
    /// states: s0 s1 s2
    /// initial: s0
    /// edges:
    /// s0 -> s1
    /// s1 -> s2
    /// rewards:
    /// s2 1.0
    /// ```
    ///
    /// Rewards are linear in the file and stored in the log domain. States
    /// with a reward entry are the terminating states.
    pub fn from_text(text: &str) -> Result<ExplicitEnv, SpecParseError> {
        let mut builder = ExplicitEnvBuilder::default();
        #[derive(PartialEq)]
        enum Section {
            None,
            Edges,
            Rewards,
        }
        let mut section = Section::None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("states:") {
                for name in rest.split_whitespace() {
                    builder = builder.state(name);
                }
            } else if let Some(rest) = line.strip_prefix("initial:") {
                builder = builder.initial(rest.trim());
            } else if line == "edges:" {
                section = Section::Edges;
            } else if line == "rewards:" {
                section = Section::Rewards;
            } else {
                match section {
                    Section::Edges => {
                        let mut parts = line.split("->");
                        let from = parts.next().map(str::trim);
                        let to = parts.next().map(str::trim);
                        match (from, to) {
                            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                                builder.try_edge(a, b).map_err(|message| {
                                    SpecParseError::Line { line: lineno, message }
                                })?;
                            }
                            _ => {
                                return Err(SpecParseError::Line {
                                    line: lineno,
                                    message: format!("expected 'a -> b', got '{line}'"),
                                })
                            }
                        }
                    }
                    Section::Rewards => {
                        let mut parts = line.split_whitespace();
                        let name = parts.next().unwrap_or_default();
                        let value: f64 = parts
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| SpecParseError::Line {
                                line: lineno,
                                message: format!("expected '<state> <reward>', got '{line}'"),
                            })?;
                        if value <= 0.0 {
                            return Err(SpecParseError::Line {
                                line: lineno,
                                message: format!("reward must be positive, got {value}"),
                            });
                        }
                        builder = builder.reward(name, value);
                    }
                    Section::None => {
                        return Err(SpecParseError::Line {
                            line: lineno,
                            message: format!("unexpected line outside any section: '{line}'"),
                        })
                    }
                }
            }
        }
        builder.build()
    }
}

#[derive(Debug, Default)]
pub struct ExplicitEnvBuilder {
    names: Vec<String>,
    name_index: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
    rewards: Vec<(String, f64)>,
    initial: Option<String>,
}

impl ExplicitEnvBuilder {
    pub fn state(mut self, name: &str) -> Self {
        if !self.name_index.contains_key(name) {
            self.name_index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
        }
        self
    }

    pub fn initial(mut self, name: &str) -> Self {
        self.initial = Some(name.to_string());
        self
    }

    pub fn edge(mut self, from: &str, to: &str) -> Self {
        self.try_edge(from, to).expect("invalid edge");
        self
    }

    fn try_edge(&mut self, from: &str, to: &str) -> Result<(), String> {
        let &f = self.name_index.get(from).ok_or_else(|| format!("unknown state '{from}'"))?;
        let &t = self.name_index.get(to).ok_or_else(|| format!("unknown state '{to}'"))?;
        if self.edges.contains(&(f, t)) {
            return Err(format!("duplicate edge {from} -> {to}"));
        }
        if f == t {
            return Err(format!("self-loop on {from}"));
        }
        self.edges.push((f, t));
        Ok(())
    }

    /// Linear reward; stored as its logarithm.
    pub fn reward(mut self, name: &str, value: f64) -> Self {
        self.rewards.push((name.to_string(), value));
        self
    }

    pub fn build(self) -> Result<ExplicitEnv, SpecParseError> {
        let initial_name = self
            .initial
            .clone()
            .or_else(|| self.names.first().cloned())
            .ok_or_else(|| SpecParseError::Structure("no states declared".into()))?;
        let initial = *self
            .name_index
            .get(&initial_name)
            .ok_or_else(|| SpecParseError::Structure(format!("unknown initial '{initial_name}'")))?;
        let ids: Vec<StateId> =
            self.names.iter().map(|n| StateId::new(n.as_bytes().to_vec())).collect();
        let index: HashMap<StateId, usize> =
            ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let n = self.names.len();
        let mut children = vec![Vec::new(); n];
        let mut parents = vec![Vec::new(); n];
        for &(f, t) in &self.edges {
            children[f].push(t);
            parents[t].push(f);
        }
        for kids in children.iter_mut() {
            kids.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        }
        for ps in parents.iter_mut() {
            ps.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        }
        let mut log_rewards = HashMap::new();
        for (name, value) in &self.rewards {
            let i = *self
                .name_index
                .get(name)
                .ok_or_else(|| SpecParseError::Structure(format!("unknown state '{name}'")))?;
            log_rewards.insert(i, value.ln());
        }
        let env = ExplicitEnv {
            names: self.names,
            ids,
            index,
            children,
            parents,
            log_rewards,
            initial,
        };
        // Terminating states must exist and every sink-less state must reach one.
        if env.log_rewards.is_empty() {
            return Err(SpecParseError::Structure("no terminating states declared".into()));
        }
        let report = crate::graph::validate_env(&env, 1_000_000)
            .map_err(|e| SpecParseError::Structure(e.to_string()))?;
        if !report.is_valid() {
            return Err(SpecParseError::Structure(format!(
                "not a valid pointed DAG: {:?}",
                report.defects
            )));
        }
        Ok(env)
    }
}

impl EnvGraph for ExplicitEnv {
    fn initial_state(&self) -> StateId {
        self.ids[self.initial].clone()
    }

    fn children(&self, state: &StateId) -> Vec<StateId> {
        match self.index.get(state) {
            Some(&i) => self.children[i].iter().map(|&j| self.ids[j].clone()).collect(),
            None => vec![],
        }
    }

    fn parents(&self, state: &StateId) -> Vec<StateId> {
        match self.index.get(state) {
            Some(&i) => self.parents[i].iter().map(|&j| self.ids[j].clone()).collect(),
            None => vec![],
        }
    }

    fn is_terminating(&self, state: &StateId) -> bool {
        self.index.get(state).is_some_and(|i| self.log_rewards.contains_key(i))
    }

    fn log_reward(&self, state: &StateId) -> f64 {
        self.index
            .get(state)
            .and_then(|i| self.log_rewards.get(i))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Quincunx board over `rows` pin rows. The state `r{r}k{k}` is the pin in
/// row r at offset k (k counts right bounces); the last row holds the bins.
/// The bundled policy bounces left with probability `p`, and the rewards are
/// the implied binomial masses, so the canonical policy is already optimal.
pub fn galton_env(rows: usize, p: f64) -> Result<(ExplicitEnv, GaltonPolicy), SpecParseError> {
    if rows == 0 {
        return Err(SpecParseError::Structure("rows must be >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(SpecParseError::Structure(format!("degenerate bounce probability {p}")));
    }
    let name = |r: usize, k: usize| format!("r{r:02}k{k:02}");
    let mut builder = ExplicitEnv::builder();
    for r in 0..=rows {
        for k in 0..=r {
            builder = builder.state(&name(r, k));
        }
    }
    builder = builder.initial(&name(0, 0));
    for r in 0..rows {
        for k in 0..=r {
            builder = builder.edge(&name(r, k), &name(r + 1, k));
            builder = builder.edge(&name(r, k), &name(r + 1, k + 1));
        }
    }
    for k in 0..=rows {
        builder = builder.reward(&name(rows, k), binomial_pmf(rows, k, 1.0 - p));
    }
    Ok((builder.build()?, GaltonPolicy { p }))
}

fn binomial_pmf(n: usize, k: usize, q: f64) -> f64 {
    let ln_choose = crate::num::ln_factorial(n as u64)
        - crate::num::ln_factorial(k as u64)
        - crate::num::ln_factorial((n - k) as u64);
    (ln_choose + (k as f64) * q.ln() + ((n - k) as f64) * (1.0 - q).ln()).exp()
}

/// Left-with-probability-p policy on the quincunx board.
#[derive(Debug, Clone, Copy)]
pub struct GaltonPolicy {
    pub p: f64,
}

impl ForwardPolicy for GaltonPolicy {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        let children = env.children(state);
        if children.is_empty() {
            return TransitionDistribution { support: vec![(Next::Stop, 1.0)] };
        }
        // Children are key-sorted, so the smaller offset (the left pin) is first.
        TransitionDistribution {
            support: vec![
                (Next::State(children[0].clone()), self.p),
                (Next::State(children[1].clone()), 1.0 - self.p),
            ],
        }
    }
}

/// One factor of a discrete factor graph: a value table over a subset of
/// variables, indexed row-major in the listed variable order.
#[derive(Debug, Clone)]
pub struct Factor {
    pub vars: Vec<usize>,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FactorSpec {
    pub d: usize,
    pub arity: usize,
    pub factors: Vec<Factor>,
}

impl FactorSpec {
    /// Energy of a full assignment: the sum of all factor values.
    pub fn energy(&self, assignment: &[u8]) -> f64 {
        assert_eq!(assignment.len(), self.d);
        self.factors.iter().map(|f| self.factor_value(f, assignment)).sum()
    }

    fn factor_value(&self, factor: &Factor, assignment: &[u8]) -> f64 {
        let mut idx = 0usize;
        for &v in &factor.vars {
            idx = idx * self.arity + assignment[v] as usize;
        }
        factor.table[idx]
    }

    pub fn validate(&self) -> Result<(), SpecParseError> {
        for (i, f) in self.factors.iter().enumerate() {
            for &v in &f.vars {
                if v >= self.d {
                    return Err(SpecParseError::Structure(format!(
                        "factor {i} references unknown variable {v}"
                    )));
                }
            }
            let want = self.arity.pow(f.vars.len() as u32);
            if f.table.len() != want {
                return Err(SpecParseError::Structure(format!(
                    "factor {i} table has {} entries, expected {want}",
                    f.table.len()
                )));
            }
        }
        Ok(())
    }
}

/// Autoregressive assignment env: variables take values one at a time in a
/// fixed order, giving a tree of depth d with K^d terminating leaves. The
/// reward of a leaf is exp(-E(x)/alpha), and each transition carries the sum
/// of the factors that become fully determined by it.
#[derive(Debug, Clone)]
pub struct FactorGraphEnv {
    spec: FactorSpec,
    order: Vec<usize>,
    alpha: f64,
}

impl FactorGraphEnv {
    pub fn new(spec: FactorSpec, order: Option<Vec<usize>>) -> Result<Self, SpecParseError> {
        spec.validate()?;
        let order = order.unwrap_or_else(|| (0..spec.d).collect());
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..spec.d).collect::<Vec<_>>() {
            return Err(SpecParseError::Structure(
                "order must be a permutation of the variables".into(),
            ));
        }
        Ok(FactorGraphEnv { spec, order, alpha: 1.0 })
    }

    /// Tempered target exp(-E/alpha).
    pub fn with_temperature(mut self, alpha: f64) -> Self {
        assert!(alpha > 0.0);
        self.alpha = alpha;
        self
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    /// Key layout: first byte is the number of assigned variables, then the
    /// assigned values in generation order.
    fn decode(state: &StateId) -> (&[u8], usize) {
        let bytes = state.as_bytes();
        let len = bytes[0] as usize;
        (&bytes[1..1 + len], len)
    }

    fn encode(values: &[u8]) -> StateId {
        let mut bytes = Vec::with_capacity(values.len() + 1);
        bytes.push(values.len() as u8);
        bytes.extend_from_slice(values);
        StateId::new(bytes)
    }

    /// Full assignment (variable-indexed) at a leaf state.
    pub fn assignment(&self, state: &StateId) -> Vec<u8> {
        let (values, len) = Self::decode(state);
        assert_eq!(len, self.spec.d, "assignment is only defined at leaves");
        let mut out = vec![0u8; self.spec.d];
        for (step, &v) in values.iter().enumerate() {
            out[self.order[step]] = v;
        }
        out
    }

    pub fn leaf(&self, assignment: &[u8]) -> StateId {
        let values: Vec<u8> = self.order.iter().map(|&v| assignment[v]).collect();
        Self::encode(&values)
    }

    /// Energy of the endpoint times 1/alpha defines the log-reward.
    pub fn energy_of(&self, state: &StateId) -> f64 {
        self.spec.energy(&self.assignment(state))
    }
}

impl EnvGraph for FactorGraphEnv {
    fn initial_state(&self) -> StateId {
        Self::encode(&[])
    }

    fn children(&self, state: &StateId) -> Vec<StateId> {
        let (values, len) = Self::decode(state);
        if len == self.spec.d {
            return vec![];
        }
        (0..self.spec.arity as u8)
            .map(|v| {
                let mut next = values.to_vec();
                next.push(v);
                Self::encode(&next)
            })
            .collect()
    }

    fn parents(&self, state: &StateId) -> Vec<StateId> {
        let (values, len) = Self::decode(state);
        if len == 0 {
            return vec![];
        }
        vec![Self::encode(&values[..len - 1])]
    }

    fn is_terminating(&self, state: &StateId) -> bool {
        Self::decode(state).1 == self.spec.d
    }

    fn log_reward(&self, state: &StateId) -> f64 {
        -self.energy_of(state) / self.alpha
    }
}

impl DecomposableEnergy for FactorGraphEnv {
    /// Sum of the factors that become fully assigned on this transition.
    fn step_energy(&self, from: &StateId, to: &StateId) -> f64 {
        let (_, from_len) = Self::decode(from);
        let (to_values, to_len) = Self::decode(to);
        debug_assert_eq!(to_len, from_len + 1);
        let newly_assigned = self.order[to_len - 1];
        let assigned: Vec<usize> = self.order[..to_len].to_vec();
        let mut full = vec![0u8; self.spec.d];
        for (step, &v) in to_values.iter().enumerate() {
            full[self.order[step]] = v;
        }
        self.spec
            .factors
            .iter()
            .filter(|f| {
                f.vars.contains(&newly_assigned)
                    && f.vars.iter().all(|v| assigned.contains(v))
            })
            .map(|f| self.spec.factor_value(f, &full))
            .sum()
    }
}

/// Fixtures shared by tests, the CLI, and the acceptance suite.
pub mod fixtures {
    use super::*;

    /// Four-state braid: s0 -> {s1, s2}, s1 -> s2, s2 -> {s3, sink},
    /// s3 -> sink. Two terminating states with the given linear rewards.
    pub fn two_sink_env(r2: f64, r3: f64) -> ExplicitEnv {
        ExplicitEnv::builder()
            .state("s0")
            .state("s1")
            .state("s2")
            .state("s3")
            .initial("s0")
            .edge("s0", "s1")
            .edge("s0", "s2")
            .edge("s1", "s2")
            .edge("s2", "s3")
            .reward("s2", r2)
            .reward("s3", r3)
            .build()
            .unwrap()
    }

    /// Six-state toy with one doubly-reachable endpoint:
    /// s0 -> {s1, s2}, s1 -> {x3, x4}, s2 -> {x4, x5}. Rewards exp(-e).
    pub fn double_path_env(energies: [f64; 3]) -> ExplicitEnv {
        ExplicitEnv::builder()
            .state("s0")
            .state("s1")
            .state("s2")
            .state("x3")
            .state("x4")
            .state("x5")
            .initial("s0")
            .edge("s0", "s1")
            .edge("s0", "s2")
            .edge("s1", "x3")
            .edge("s1", "x4")
            .edge("s2", "x4")
            .edge("s2", "x5")
            .reward("x3", (-energies[0]).exp())
            .reward("x4", (-energies[1]).exp())
            .reward("x5", (-energies[2]).exp())
            .build()
            .unwrap()
    }

    /// Chain with a fork whose balance equations can skip a state:
    /// s0 -> s1 -> {s2, s3}, s3 -> s4; terminating {s2, s4}.
    pub fn skip_chain_env() -> ExplicitEnv {
        ExplicitEnv::builder()
            .state("s0")
            .state("s1")
            .state("s2")
            .state("s3")
            .state("s4")
            .initial("s0")
            .edge("s0", "s1")
            .edge("s1", "s2")
            .edge("s1", "s3")
            .edge("s3", "s4")
            .reward("s2", 1.0)
            .reward("s4", 1.0)
            .build()
            .unwrap()
    }

    /// Single path s0 -> x -> sink with reward `r`.
    pub fn chain_env(r: f64) -> ExplicitEnv {
        ExplicitEnv::builder()
            .state("s0")
            .state("x1")
            .initial("s0")
            .edge("s0", "x1")
            .reward("x1", r)
            .build()
            .unwrap()
    }
}
