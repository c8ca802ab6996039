//! Policy parametrizations and gradient plumbing: a generic tabular softmax
//! policy, hierarchical stop/edge policies over DAG construction (tabular and
//! MLP-backed), the Adam optimizer, periodically synced target copies, and
//! flat-binary checkpoints.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::dag::{action_mask, apply_edge, canonical_key, state_from_key, BitMatrix, DagState, EdgeAction};
use crate::flow::ForwardPolicy;
use crate::graph::{EnvGraph, Next, StateId, TransitionDistribution};
use crate::num::log_sum_exp;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("gradient contains a non-finite entry; step rejected")]
    NonFiniteGradient,
    #[error("action is masked for this state")]
    MaskedAction,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Gradient of a scalar with respect to the policy parameters. Tabular
/// policies produce a handful of touched indices; the MLP produces a dense
/// vector over all of its weights.
#[derive(Debug, Clone)]
pub enum Grad {
    Sparse(Vec<(u32, f64)>),
    Dense(Vec<f64>),
}

impl Grad {
    pub fn zero() -> Self {
        Grad::Sparse(Vec::new())
    }

    /// acc += coeff * self, growing acc as needed.
    pub fn axpy_into(&self, coeff: f64, acc: &mut Vec<f64>) {
        match self {
            Grad::Sparse(entries) => {
                for &(i, g) in entries {
                    let i = i as usize;
                    if acc.len() <= i {
                        acc.resize(i + 1, 0.0);
                    }
                    acc[i] += coeff * g;
                }
            }
            Grad::Dense(v) => {
                if acc.len() < v.len() {
                    acc.resize(v.len(), 0.0);
                }
                for (a, g) in acc.iter_mut().zip(v.iter()) {
                    *a += coeff * g;
                }
            }
        }
    }

    fn combine(a: &Grad, ca: f64, b: &Grad, cb: f64) -> Grad {
        match (a, b) {
            (Grad::Sparse(x), Grad::Sparse(y)) => {
                let mut entries: Vec<(u32, f64)> =
                    x.iter().map(|&(i, g)| (i, ca * g)).collect();
                entries.extend(y.iter().map(|&(i, g)| (i, cb * g)));
                entries.sort_by_key(|&(i, _)| i);
                let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
                for (i, g) in entries {
                    match merged.last_mut() {
                        Some((j, acc)) if *j == i => *acc += g,
                        _ => merged.push((i, g)),
                    }
                }
                Grad::Sparse(merged)
            }
            _ => {
                let mut dense = Vec::new();
                a.axpy_into(ca, &mut dense);
                b.axpy_into(cb, &mut dense);
                Grad::Dense(dense)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Grad::Sparse(e) => e.iter().all(|(_, g)| g.is_finite()),
            Grad::Dense(v) => v.iter().all(|g| g.is_finite()),
        }
    }
}

/// A differentiable scalar: value plus gradient w.r.t. the parameters.
#[derive(Debug, Clone)]
pub struct Term {
    pub value: f64,
    pub grad: Grad,
}

impl Term {
    pub fn constant(value: f64) -> Self {
        Term { value, grad: Grad::zero() }
    }

    pub fn add(&self, other: &Term) -> Term {
        Term {
            value: self.value + other.value,
            grad: Grad::combine(&self.grad, 1.0, &other.grad, 1.0),
        }
    }

    pub fn sub(&self, other: &Term) -> Term {
        Term {
            value: self.value - other.value,
            grad: Grad::combine(&self.grad, 1.0, &other.grad, -1.0),
        }
    }

    pub fn scale(&self, c: f64) -> Term {
        Term { value: c * self.value, grad: Grad::combine(&self.grad, c, &Grad::zero(), 0.0) }
    }

    pub fn add_const(&self, c: f64) -> Term {
        Term { value: self.value + c, grad: self.grad.clone() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    last: Vec<u64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, m: Vec::new(), v: Vec::new(), last: Vec::new(), step: 0 }
    }

    pub fn ensure_len(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
            self.last.resize(n, self.step);
        }
    }

    fn update_one(&mut self, i: usize, g: f64, params: &mut [f64]) {
        let c = self.cfg;
        let gap = self.step - 1 - self.last[i];
        if gap > 0 {
            self.m[i] *= c.beta1.powi(gap as i32);
            self.v[i] *= c.beta2.powi(gap as i32);
        }
        self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
        self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
        self.last[i] = self.step;
        let m_hat = self.m[i] / (1.0 - c.beta1.powi(self.step as i32));
        let v_hat = self.v[i] / (1.0 - c.beta2.powi(self.step as i32));
        params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }

    /// Standard dense update over every parameter.
    pub fn step_dense(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), PolicyError> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        self.ensure_len(params.len());
        self.step += 1;
        for i in 0..params.len() {
            let g = grad.get(i).copied().unwrap_or(0.0);
            self.update_one(i, g, params);
        }
        Ok(())
    }

    /// Lazy variant: only parameters with a nonzero gradient entry are
    /// touched, with the skipped moment decay applied on contact.
    pub fn step_lazy(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), PolicyError> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        self.ensure_len(params.len());
        self.step += 1;
        for (i, &g) in grad.iter().enumerate() {
            if g != 0.0 {
                self.update_one(i, g, params);
            }
        }
        Ok(())
    }
}

/// One optimizer step (the dense update). Rejects non-finite gradients.
pub fn optimizer_step(
    params: &mut [f64],
    grad: &[f64],
    adam: &mut AdamState,
) -> Result<(), PolicyError> {
    adam.step_dense(params, grad)
}

/// Hierarchical forward distribution at one DAG state: a stop probability
/// plus edge probabilities that sum to 1 - stop. When the mask admits no
/// edge, termination is forced (stop = 1).
#[derive(Debug, Clone)]
pub struct HierarchicalDist {
    pub stop: f64,
    /// (u, v, probability) for every mask-permitted edge.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Combines a stop logit and d*d edge logits with a mask into the
/// hierarchical distribution P(stop) = sigmoid, P(edge) = (1-stop)*softmax.
pub fn hierarchical_forward(
    stop_logit: f64,
    edge_logits: &[f64],
    mask: &BitMatrix,
) -> HierarchicalDist {
    let d = mask.d;
    let mut valid = Vec::new();
    for u in 0..d {
        for v in 0..d {
            if mask.get(u, v) {
                valid.push((u, v));
            }
        }
    }
    if valid.is_empty() {
        return HierarchicalDist { stop: 1.0, edges: Vec::new() };
    }
    let stop = sigmoid(stop_logit);
    let logits: Vec<f64> = valid.iter().map(|&(u, v)| edge_logits[u * d + v]).collect();
    let lse = log_sum_exp(&logits);
    let edges = valid
        .into_iter()
        .zip(logits)
        .map(|((u, v), l)| (u, v, (1.0 - stop) * (l - lse).exp()))
        .collect();
    HierarchicalDist { stop, edges }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable on both tails
    if x >= 0.0 {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

/// Policy over the DAG-construction environment: a stop head and a d*d edge
/// head, evaluated on an explicit parameter slice so target snapshots can be
/// queried with the same code path.
pub trait DagPolicy: Sync + Send {
    fn d(&self) -> usize;
    fn max_parents(&self) -> Option<usize>;
    fn param_len(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_vec_mut(&mut self) -> &mut Vec<f64>;
    /// (stop logit, d*d edge logits) under `params`. Unvisited tabular states
    /// read as zeros, so snapshots shorter than the live vector stay valid.
    fn heads_on(&self, params: &[f64], state: &DagState) -> (f64, Vec<f64>);
    /// Allocates gradient slots for this state if the backing is tabular.
    fn ensure_state(&mut self, state: &DagState);
    /// log probability of an action with its parameter gradient.
    fn log_prob_grad(&mut self, state: &DagState, action: EdgeAction) -> Term;

    fn mask_of(&self, state: &DagState) -> BitMatrix {
        action_mask(state, self.max_parents())
    }

    fn hierarchical(&self, state: &DagState) -> HierarchicalDist {
        let (stop, edges) = self.heads_on(self.params(), state);
        hierarchical_forward(stop, &edges, &self.mask_of(state))
    }

    /// log P(stop | state) under an arbitrary parameter slice (used for the
    /// frozen target head). Forced to 0 = log 1 when no edge is addable.
    fn log_stop_on(&self, params: &[f64], state: &DagState) -> f64 {
        if self.mask_of(state).count_ones() == 0 {
            0.0
        } else {
            log_sigmoid(self.heads_on(params, state).0)
        }
    }
}

/// Tabular hierarchical policy: one stop logit plus d*d edge logits per
/// visited state, lazily initialized to zeros (unvisited states act uniform).
pub struct TabularHierarchical {
    d: usize,
    max_parents: Option<usize>,
    index: HashMap<StateId, u32>,
    params: Vec<f64>,
}

impl TabularHierarchical {
    pub fn new(d: usize, max_parents: Option<usize>) -> Self {
        TabularHierarchical { d, max_parents, index: HashMap::new(), params: Vec::new() }
    }

    fn slots(&self) -> usize {
        1 + self.d * self.d
    }

    fn offset(&self, state: &DagState) -> Option<u32> {
        self.index.get(&canonical_key(state)).copied()
    }

    fn logits_at(&self, params: &[f64], offset: Option<u32>) -> (f64, Vec<f64>) {
        match offset {
            Some(o) => {
                let o = o as usize;
                let stop = params.get(o).copied().unwrap_or(0.0);
                let edges = (0..self.d * self.d)
                    .map(|i| params.get(o + 1 + i).copied().unwrap_or(0.0))
                    .collect();
                (stop, edges)
            }
            None => (0.0, vec![0.0; self.d * self.d]),
        }
    }

    pub fn state_index(&self) -> &HashMap<StateId, u32> {
        &self.index
    }

    /// (key, offset, slot count) triples for checkpointing.
    pub fn index_triples(&self) -> Vec<(StateId, u32, u32)> {
        let slots = self.slots() as u32;
        let mut out: Vec<(StateId, u32, u32)> =
            self.index.iter().map(|(k, &o)| (k.clone(), o, slots)).collect();
        out.sort_by_key(|&(_, o, _)| o);
        out
    }

    pub fn restore(
        d: usize,
        max_parents: Option<usize>,
        index: HashMap<StateId, u32>,
        params: Vec<f64>,
    ) -> Self {
        TabularHierarchical { d, max_parents, index, params }
    }
}

impl DagPolicy for TabularHierarchical {
    fn d(&self) -> usize {
        self.d
    }

    fn max_parents(&self) -> Option<usize> {
        self.max_parents
    }

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    fn heads_on(&self, params: &[f64], state: &DagState) -> (f64, Vec<f64>) {
        self.logits_at(params, self.offset(state))
    }

    fn ensure_state(&mut self, state: &DagState) {
        let key = canonical_key(state);
        if !self.index.contains_key(&key) {
            let offset = self.params.len() as u32;
            self.index.insert(key, offset);
            self.params.extend(std::iter::repeat(0.0).take(self.slots()));
        }
    }

    fn log_prob_grad(&mut self, state: &DagState, action: EdgeAction) -> Term {
        self.ensure_state(state);
        let offset = self.offset(state).unwrap() as usize;
        let mask = self.mask_of(state);
        let d = self.d;
        if mask.count_ones() == 0 {
            // forced termination
            return match action {
                EdgeAction::Stop => Term::constant(0.0),
                EdgeAction::Add { .. } => Term { value: f64::NEG_INFINITY, grad: Grad::zero() },
            };
        }
        let stop_logit = self.params[offset];
        let s = sigmoid(stop_logit);
        match action {
            EdgeAction::Stop => Term {
                value: log_sigmoid(stop_logit),
                grad: Grad::Sparse(vec![(offset as u32, 1.0 - s)]),
            },
            EdgeAction::Add { u, v } => {
                if !mask.get(u, v) {
                    return Term { value: f64::NEG_INFINITY, grad: Grad::zero() };
                }
                let mut valid = Vec::new();
                for a in 0..d {
                    for b in 0..d {
                        if mask.get(a, b) {
                            valid.push((a, b));
                        }
                    }
                }
                let logits: Vec<f64> =
                    valid.iter().map(|&(a, b)| self.params[offset + 1 + a * d + b]).collect();
                let lse = log_sum_exp(&logits);
                let mut entries = vec![(offset as u32, -s)];
                let mut value = log_sigmoid(-stop_logit); // log(1 - sigmoid(stop))
                for (&(a, b), &l) in valid.iter().zip(logits.iter()) {
                    let p = (l - lse).exp();
                    let indicator = if (a, b) == (u, v) { 1.0 } else { 0.0 };
                    entries.push(((offset + 1 + a * d + b) as u32, indicator - p));
                    if (a, b) == (u, v) {
                        value += l - lse;
                    }
                }
                Term { value, grad: Grad::Sparse(entries) }
            }
        }
    }
}

impl ForwardPolicy for TabularHierarchical {
    fn distribution(&self, _env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        let dag = state_from_key(state, self.d);
        let h = self.hierarchical(&dag);
        let mut support = Vec::with_capacity(h.edges.len() + 1);
        for (u, v, p) in h.edges {
            let child = apply_edge(&dag, EdgeAction::Add { u, v }).expect("mask-valid");
            support.push((Next::State(canonical_key(&child)), p));
        }
        support.push((Next::Stop, h.stop));
        TransitionDistribution { support }
    }
}

/// Two-hidden-layer MLP over the flattened adjacency bits with a stop head
/// and a d*d edge head. Gradients by hand-written reverse accumulation.
pub struct MlpPolicy {
    d: usize,
    max_parents: Option<usize>,
    hidden: usize,
    params: Vec<f64>,
}

struct MlpOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ws: usize,
    bs: usize,
    we: usize,
    be: usize,
    total: usize,
}

impl MlpPolicy {
    pub fn new(d: usize, hidden: usize, max_parents: Option<usize>, rng: &mut Rng) -> Self {
        let offs = Self::offsets_for(d, hidden);
        let mut params = vec![0.0; offs.total];
        let input = d * d;
        let init = |fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-bound..bound)
        };
        for i in offs.w1..offs.b1 {
            params[i] = init(input, rng);
        }
        for i in offs.w2..offs.b2 {
            params[i] = init(hidden, rng);
        }
        for i in offs.ws..offs.bs {
            params[i] = init(hidden, rng);
        }
        for i in offs.we..offs.be {
            params[i] = init(hidden, rng);
        }
        MlpPolicy { d, max_parents, hidden, params }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn restore(d: usize, hidden: usize, max_parents: Option<usize>, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), Self::offsets_for(d, hidden).total);
        MlpPolicy { d, max_parents, hidden, params }
    }

    fn offsets_for(d: usize, hidden: usize) -> MlpOffsets {
        let input = d * d;
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let ws = b2 + hidden;
        let bs = ws + hidden;
        let we = bs + 1;
        let be = we + input * hidden;
        let total = be + input;
        MlpOffsets { w1, b1, w2, b2, ws, bs, we, be, total }
    }

    fn offsets(&self) -> MlpOffsets {
        Self::offsets_for(self.d, self.hidden)
    }

    fn input_of(&self, state: &DagState) -> Vec<f64> {
        let d = self.d;
        let mut x = vec![0.0; d * d];
        for u in 0..d {
            for v in 0..d {
                if state.adj.get(u, v) {
                    x[u * d + v] = 1.0;
                }
            }
        }
        x
    }

    fn forward(&self, params: &[f64], state: &DagState) -> MlpActivations {
        let offs = self.offsets();
        let h = self.hidden;
        let input = self.d * self.d;
        let x = self.input_of(state);
        let mut h1 = vec![0.0; h];
        for i in 0..h {
            let mut z = params[offs.b1 + i];
            for j in 0..input {
                z += params[offs.w1 + i * input + j] * x[j];
            }
            h1[i] = z.tanh();
        }
        let mut h2 = vec![0.0; h];
        for i in 0..h {
            let mut z = params[offs.b2 + i];
            for j in 0..h {
                z += params[offs.w2 + i * h + j] * h1[j];
            }
            h2[i] = z.tanh();
        }
        let mut stop = params[offs.bs];
        for j in 0..h {
            stop += params[offs.ws + j] * h2[j];
        }
        let mut edges = vec![0.0; input];
        for (i, e) in edges.iter_mut().enumerate() {
            let mut z = params[offs.be + i];
            for j in 0..h {
                z += params[offs.we + i * h + j] * h2[j];
            }
            *e = z;
        }
        MlpActivations { x, h1, h2, stop, edges }
    }
}

struct MlpActivations {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    stop: f64,
    edges: Vec<f64>,
}

impl DagPolicy for MlpPolicy {
    fn d(&self) -> usize {
        self.d
    }

    fn max_parents(&self) -> Option<usize> {
        self.max_parents
    }

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    fn heads_on(&self, params: &[f64], state: &DagState) -> (f64, Vec<f64>) {
        let act = self.forward(params, state);
        (act.stop, act.edges)
    }

    fn ensure_state(&mut self, _state: &DagState) {}

    fn log_prob_grad(&mut self, state: &DagState, action: EdgeAction) -> Term {
        let mask = self.mask_of(state);
        if mask.count_ones() == 0 {
            return match action {
                EdgeAction::Stop => Term::constant(0.0),
                EdgeAction::Add { .. } => Term { value: f64::NEG_INFINITY, grad: Grad::zero() },
            };
        }
        let offs = self.offsets();
        let h = self.hidden;
        let input = self.d * self.d;
        let act = self.forward(&self.params, state);
        let s = sigmoid(act.stop);

        let mut d_edges = vec![0.0; input];
        let d_stop;
        let value;
        match action {
            EdgeAction::Stop => {
                value = log_sigmoid(act.stop);
                d_stop = 1.0 - s;
            }
            EdgeAction::Add { u, v } => {
                if !mask.get(u, v) {
                    return Term { value: f64::NEG_INFINITY, grad: Grad::zero() };
                }
                let mut valid = Vec::new();
                for a in 0..self.d {
                    for b in 0..self.d {
                        if mask.get(a, b) {
                            valid.push(a * self.d + b);
                        }
                    }
                }
                let logits: Vec<f64> = valid.iter().map(|&i| act.edges[i]).collect();
                let lse = log_sum_exp(&logits);
                value = log_sigmoid(-act.stop) + act.edges[u * self.d + v] - lse;
                d_stop = -s;
                for (&i, &l) in valid.iter().zip(logits.iter()) {
                    let p = (l - lse).exp();
                    d_edges[i] = if i == u * self.d + v { 1.0 - p } else { -p };
                }
            }
        }

        let mut grad = vec![0.0; offs.total];
        let mut g_h2 = vec![0.0; h];
        for j in 0..h {
            g_h2[j] += self.params[offs.ws + j] * d_stop;
            grad[offs.ws + j] += d_stop * act.h2[j];
        }
        grad[offs.bs] += d_stop;
        for (i, &de) in d_edges.iter().enumerate() {
            if de != 0.0 {
                grad[offs.be + i] += de;
                for j in 0..h {
                    g_h2[j] += self.params[offs.we + i * h + j] * de;
                    grad[offs.we + i * h + j] += de * act.h2[j];
                }
            }
        }
        let mut g_h1 = vec![0.0; h];
        for i in 0..h {
            let g_z2 = g_h2[i] * (1.0 - act.h2[i] * act.h2[i]);
            grad[offs.b2 + i] += g_z2;
            for j in 0..h {
                grad[offs.w2 + i * h + j] += g_z2 * act.h1[j];
                g_h1[j] += self.params[offs.w2 + i * h + j] * g_z2;
            }
        }
        for i in 0..h {
            let g_z1 = g_h1[i] * (1.0 - act.h1[i] * act.h1[i]);
            grad[offs.b1 + i] += g_z1;
            for j in 0..input {
                if act.x[j] != 0.0 {
                    grad[offs.w1 + i * input + j] += g_z1 * act.x[j];
                }
            }
        }
        Term { value, grad: Grad::Dense(grad) }
    }
}

impl ForwardPolicy for MlpPolicy {
    fn distribution(&self, _env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        let dag = state_from_key(state, self.d);
        let h = self.hierarchical(&dag);
        let mut support = Vec::with_capacity(h.edges.len() + 1);
        for (u, v, p) in h.edges {
            let child = apply_edge(&dag, EdgeAction::Add { u, v }).expect("mask-valid");
            support.push((Next::State(canonical_key(&child)), p));
        }
        support.push((Next::Stop, h.stop));
        TransitionDistribution { support }
    }
}

/// Tabular softmax policy over the children of any enumerable environment.
/// Slots follow the sorted child keys, with the sink slot last when the
/// state is terminating. Unvisited states act uniform.
pub struct TabularPolicy {
    index: HashMap<StateId, (u32, u32)>,
    params: Vec<f64>,
}

impl TabularPolicy {
    pub fn new() -> Self {
        TabularPolicy { index: HashMap::new(), params: Vec::new() }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    fn actions(env: &dyn EnvGraph, state: &StateId) -> Vec<Next> {
        let mut actions: Vec<Next> =
            env.children(state).into_iter().map(Next::State).collect();
        if env.is_terminating(state) {
            actions.push(Next::Stop);
        }
        actions
    }

    fn logits(&self, env: &dyn EnvGraph, state: &StateId) -> (Vec<Next>, Vec<f64>) {
        let actions = Self::actions(env, state);
        let logits = match self.index.get(state) {
            Some(&(offset, n)) => {
                debug_assert_eq!(n as usize, actions.len());
                self.params[offset as usize..offset as usize + n as usize].to_vec()
            }
            None => vec![0.0; actions.len()],
        };
        (actions, logits)
    }

    pub fn ensure_state(&mut self, env: &dyn EnvGraph, state: &StateId) -> (u32, u32) {
        if let Some(&entry) = self.index.get(state) {
            return entry;
        }
        let n = Self::actions(env, state).len() as u32;
        let offset = self.params.len() as u32;
        self.params.extend(std::iter::repeat(0.0).take(n as usize));
        self.index.insert(state.clone(), (offset, n));
        (offset, n)
    }

    pub fn log_prob_grad(&mut self, env: &dyn EnvGraph, state: &StateId, next: &Next) -> Term {
        let (offset, _) = self.ensure_state(env, state);
        let (actions, logits) = self.logits(env, state);
        let lse = log_sum_exp(&logits);
        let Some(chosen) = actions.iter().position(|a| a == next) else {
            return Term { value: f64::NEG_INFINITY, grad: Grad::zero() };
        };
        let mut entries = Vec::with_capacity(actions.len());
        for (i, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let indicator = if i == chosen { 1.0 } else { 0.0 };
            entries.push((offset + i as u32, indicator - p));
        }
        Term { value: logits[chosen] - lse, grad: Grad::Sparse(entries) }
    }
}

impl Default for TabularPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl TabularPolicy {
    pub fn restore(index: HashMap<StateId, (u32, u32)>, params: Vec<f64>) -> Self {
        TabularPolicy { index, params }
    }

    pub fn index_triples(&self) -> Vec<(StateId, u32, u32)> {
        let mut out: Vec<(StateId, u32, u32)> =
            self.index.iter().map(|(k, &(o, n))| (k.clone(), o, n)).collect();
        out.sort_by_key(|&(_, o, _)| o);
        out
    }
}

impl ForwardPolicy for TabularPolicy {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        let (actions, logits) = self.logits(env, state);
        let lse = log_sum_exp(&logits);
        let support = actions
            .into_iter()
            .zip(logits)
            .map(|(a, l)| (a, (l - lse).exp()))
            .collect();
        TransitionDistribution { support }
    }
}

/// Exploration wrapper: epsilon-mixture with the uniform distribution over
/// the valid actions, then tempering with exponent 1/alpha_b, renormalized.
pub struct BehaviorPolicy<'a> {
    pub base: &'a dyn ForwardPolicy,
    pub epsilon: f64,
    pub temperature: f64,
}

impl<'a> BehaviorPolicy<'a> {
    pub fn new(base: &'a dyn ForwardPolicy, epsilon: f64, temperature: f64) -> Self {
        assert!((0.0..=1.0).contains(&epsilon));
        assert!(temperature >= 1.0);
        BehaviorPolicy { base, epsilon, temperature }
    }
}

impl ForwardPolicy for BehaviorPolicy<'_> {
    fn distribution(&self, env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        let base = self.base.distribution(env, state);
        let n = base.support.len() as f64;
        let mut support: Vec<(Next, f64)> = base
            .support
            .into_iter()
            .map(|(a, p)| (a, (1.0 - self.epsilon) * p + self.epsilon / n))
            .collect();
        if self.temperature != 1.0 {
            let mut total = 0.0;
            for (_, p) in support.iter_mut() {
                *p = p.powf(1.0 / self.temperature);
                total += *p;
            }
            for (_, p) in support.iter_mut() {
                *p /= total;
            }
        }
        TransitionDistribution { support }
    }
}

/// Frozen snapshot of the parameters, refreshed every `sync_period` steps.
#[derive(Debug, Clone)]
pub struct TargetCopy {
    pub params: Vec<f64>,
    pub sync_period: u64,
}

impl TargetCopy {
    pub fn new(params: &[f64], sync_period: u64) -> Self {
        TargetCopy { params: params.to_vec(), sync_period }
    }
}

/// Refreshes the snapshot iff `step` is a multiple of the sync period.
pub fn sync_target(live_params: &[f64], target: &mut TargetCopy, step: u64) -> bool {
    if step % target.sync_period == 0 {
        target.params = live_params.to_vec();
        true
    } else {
        false
    }
}

/// Writes a checkpoint: `<path>` holds the flat little-endian f64 parameter
/// array, `<path>.manifest` a text sidecar with shapes, step, and seed, plus
/// the tabular state index when one exists.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    d: usize,
    params: &[f64],
    step: u64,
    seed: u64,
    state_index: Option<&[(StateId, u32, u32)]>,
    extra: &[(String, String)],
) -> Result<(), PolicyError> {
    let mut bin = std::fs::File::create(path)?;
    for p in params {
        bin.write_all(&p.to_le_bytes())?;
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("kind={kind}\n"));
    manifest.push_str(&format!("d={d}\n"));
    manifest.push_str(&format!("params={}\n", params.len()));
    manifest.push_str(&format!("step={step}\n"));
    manifest.push_str(&format!("seed={seed}\n"));
    for (k, v) in extra {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    if let Some(index) = state_index {
        let mut entries = index.to_vec();
        entries.sort_by_key(|&(_, o, _)| o);
        for (key, offset, len) in entries {
            manifest.push_str(&format!("state {} {} {}\n", key.to_hex(), offset, len));
        }
    }
    std::fs::write(path.with_extension("manifest"), manifest)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub d: usize,
    pub params: Vec<f64>,
    pub step: u64,
    pub seed: u64,
    pub fields: HashMap<String, String>,
    pub state_index: HashMap<StateId, (u32, u32)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PolicyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(PolicyError::Format("parameter file length is not a multiple of 8".into()));
    }
    let params: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let manifest = std::fs::read_to_string(path.with_extension("manifest"))?;
    let mut fields = HashMap::new();
    let mut state_index = HashMap::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("state ") {
            let mut parts = rest.split_whitespace();
            let hex = parts.next().ok_or_else(|| PolicyError::Format("bad state line".into()))?;
            let offset: u32 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PolicyError::Format("bad state offset".into()))?;
            let len: u32 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PolicyError::Format("bad state slot count".into()))?;
            let key = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                .collect::<Result<Vec<u8>, _>>()
                .map_err(|_| PolicyError::Format("bad state hex".into()))?;
            state_index.insert(StateId::new(key), (offset, len));
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String, PolicyError> {
        fields.get(k).cloned().ok_or_else(|| PolicyError::Format(format!("missing field {k}")))
    };
    let declared: usize =
        get("params")?.parse().map_err(|_| PolicyError::Format("bad params".into()))?;
    if declared != params.len() {
        return Err(PolicyError::Format(format!(
            "manifest declares {declared} parameters, file holds {}",
            params.len()
        )));
    }
    Ok(Checkpoint {
        kind: get("kind")?,
        d: get("d")?.parse().map_err(|_| PolicyError::Format("bad d".into()))?,
        params,
        step: get("step")?.parse().map_err(|_| PolicyError::Format("bad step".into()))?,
        seed: get("seed")?.parse().map_err(|_| PolicyError::Format("bad seed".into()))?,
        fields,
        state_index,
    })
}
