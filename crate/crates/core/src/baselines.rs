//! MCMC baselines: a generic Metropolis-Hastings kernel and structure MCMC
//! over DAGs with add/delete/reverse moves scored through delta scores.

use rand::Rng as _;
use thiserror::Error;

use crate::dag::{
    action_mask, apply_edge, canonical_key, initial_dag_state, DagState, EdgeAction,
};
use crate::graph::StateId;
use crate::rng::Rng;
use crate::scores::{delta_score, GraphPrior, LocalScoreCache, ScoreError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("step count must be positive")]
    ZeroSteps,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Post-burn-in, thinned chain record.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub states: Vec<StateId>,
    pub log_scores: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_count: u64,
    pub step_count: u64,
    pub burn_in: u64,
    pub thinning: u64,
}

impl ChainTrace {
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_count as f64 / self.step_count.max(1) as f64
    }
}

/// Proposal kernel: draws a move and evaluates its density both ways.
pub trait Proposal<S> {
    fn sample(&self, current: &S, rng: &mut Rng) -> S;
    /// log q(to | from); -inf marks an impossible move.
    fn log_density(&self, from: &S, to: &S) -> f64;
}

/// Generic Metropolis-Hastings chain over an arbitrary state type. The
/// acceptance ratio is evaluated in the log domain; proposed moves whose
/// reverse density is zero are rejected outright.
pub fn metropolis_hastings<S: Clone>(
    log_target: &dyn Fn(&S) -> f64,
    proposal: &dyn Proposal<S>,
    key_of: &dyn Fn(&S) -> StateId,
    init: S,
    steps: u64,
    burn_in: u64,
    thinning: u64,
    rng: &mut Rng,
) -> Result<ChainTrace, BaselineError> {
    if steps == 0 {
        return Err(BaselineError::ZeroSteps);
    }
    let thinning = thinning.max(1);
    let mut current = init;
    let mut current_score = log_target(&current);
    let mut trace = ChainTrace {
        states: Vec::new(),
        log_scores: Vec::new(),
        accepted: Vec::new(),
        acceptance_count: 0,
        step_count: steps,
        burn_in,
        thinning,
    };
    for step in 0..steps {
        let candidate = proposal.sample(&current, rng);
        let forward = proposal.log_density(&current, &candidate);
        let reverse = proposal.log_density(&candidate, &current);
        let mut accept = false;
        if reverse > f64::NEG_INFINITY {
            let candidate_score = log_target(&candidate);
            let log_ratio = candidate_score - current_score + reverse - forward;
            if log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp() {
                current = candidate;
                current_score = candidate_score;
                accept = true;
            }
        }
        if accept {
            trace.acceptance_count += 1;
        }
        if step >= burn_in && (step - burn_in) % thinning == 0 {
            trace.states.push(key_of(&current));
            trace.log_scores.push(current_score);
            trace.accepted.push(accept);
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Add(usize, usize),
    Delete(usize, usize),
    Reverse(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoveSet {
    pub add: bool,
    pub delete: bool,
    pub reverse: bool,
}

impl Default for MoveSet {
    fn default() -> Self {
        MoveSet { add: true, delete: true, reverse: true }
    }
}

/// Legal structure moves from a graph, in deterministic enumeration order:
/// mask-permitted additions, deletions of present edges, and reversals whose
/// reinsertion passes the mask on the deletion intermediate.
pub fn legal_moves(g: &DagState, moves: MoveSet) -> Vec<Move> {
    let d = g.d();
    let mut out = Vec::new();
    let mask = action_mask(g, None);
    if moves.add {
        for u in 0..d {
            for v in 0..d {
                if mask.get(u, v) {
                    out.push(Move::Add(u, v));
                }
            }
        }
    }
    if moves.delete {
        for (u, v) in g.edges() {
            out.push(Move::Delete(u, v));
        }
    }
    if moves.reverse {
        for (u, v) in g.edges() {
            let mut without = g.adj.clone();
            without.set(u, v, false);
            let intermediate = DagState {
                adj: without.clone(),
                closure_t: crate::dag::transpose_closure_from_scratch(&without),
            };
            if action_mask(&intermediate, None).get(v, u) {
                out.push(Move::Reverse(u, v));
            }
        }
    }
    out
}

pub fn apply_move(g: &DagState, m: Move) -> DagState {
    match m {
        Move::Add(u, v) => apply_edge(g, EdgeAction::Add { u, v }).expect("legal add"),
        Move::Delete(u, v) => {
            let mut adj = g.adj.clone();
            adj.set(u, v, false);
            DagState {
                closure_t: crate::dag::transpose_closure_from_scratch(&adj),
                adj,
            }
        }
        Move::Reverse(u, v) => {
            let deleted = apply_move(g, Move::Delete(u, v));
            apply_edge(&deleted, EdgeAction::Add { u: v, v: u }).expect("legal reversal")
        }
    }
}

/// Log-score change of a move via delta scores: one family recomputation for
/// add/delete, two for a reversal.
pub fn move_delta(
    g: &DagState,
    m: Move,
    cache: &LocalScoreCache,
    prior: GraphPrior,
) -> Result<f64, ScoreError> {
    let edge_term = |from: &DagState, to: &DagState| -> f64 {
        prior.log_prior(to) - prior.log_prior(from)
    };
    match m {
        Move::Add(u, v) => {
            let to = apply_move(g, m);
            Ok(delta_score(g, EdgeAction::Add { u, v }, cache)? + edge_term(g, &to))
        }
        Move::Delete(u, v) => {
            let to = apply_move(g, m);
            // deletion is the reverse of the addition to -> g
            Ok(-delta_score(&to, EdgeAction::Add { u, v }, cache)? + edge_term(g, &to))
        }
        Move::Reverse(u, v) => {
            let intermediate = apply_move(g, Move::Delete(u, v));
            let to = apply_edge(&intermediate, EdgeAction::Add { u: v, v: u }).expect("legal");
            let drop_term = -delta_score(&intermediate, EdgeAction::Add { u, v }, cache)?;
            let add_term = delta_score(&intermediate, EdgeAction::Add { u: v, v: u }, cache)?;
            Ok(drop_term + add_term + edge_term(g, &to))
        }
    }
}

/// Structure MCMC over DAGs: uniform proposals over the legal moves with the
/// count-ratio correction |moves(G)| / |moves(G')| in the acceptance.
#[allow(clippy::too_many_arguments)]
pub fn structure_mc3(
    cache: &LocalScoreCache,
    prior: GraphPrior,
    d: usize,
    moves: MoveSet,
    steps: u64,
    burn_in: u64,
    thinning: u64,
    rng: &mut Rng,
) -> Result<ChainTrace, BaselineError> {
    if steps == 0 {
        return Err(BaselineError::ZeroSteps);
    }
    let thinning = thinning.max(1);
    let mut current = initial_dag_state(d).expect("valid d");
    let mut current_score = crate::scores::log_reward(&current, cache, prior)?;
    let mut current_moves = legal_moves(&current, moves);
    let mut trace = ChainTrace {
        states: Vec::new(),
        log_scores: Vec::new(),
        accepted: Vec::new(),
        acceptance_count: 0,
        step_count: steps,
        burn_in,
        thinning,
    };
    for step in 0..steps {
        let mv = current_moves[rng.gen_range(0..current_moves.len())];
        let delta = move_delta(&current, mv, cache, prior)?;
        let candidate = apply_move(&current, mv);
        let candidate_moves = legal_moves(&candidate, moves);
        // Hastings ratio of uniform-over-moves proposals
        let log_ratio =
            delta + (current_moves.len() as f64).ln() - (candidate_moves.len() as f64).ln();
        let mut accept = false;
        if log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp() {
            current = candidate;
            current_score += delta;
            current_moves = candidate_moves;
            accept = true;
        }
        if accept {
            trace.acceptance_count += 1;
        }
        if step >= burn_in && (step - burn_in) % thinning == 0 {
            trace.states.push(canonical_key(&current));
            trace.log_scores.push(current_score);
            trace.accepted.push(accept);
        }
    }
    Ok(trace)
}

/// Explicit transition matrix of the structure-MCMC kernel on a fully
/// enumerated space, for detailed-balance verification.
pub fn explicit_kernel(
    cache: &LocalScoreCache,
    prior: GraphPrior,
    d: usize,
    moves: MoveSet,
) -> Result<(Vec<StateId>, Vec<f64>), BaselineError> {
    let dags = crate::exact::enumerate_dags(d).expect("desk scale");
    let keys: Vec<StateId> = dags.iter().map(canonical_key).collect();
    let index: std::collections::HashMap<StateId, usize> =
        keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    let n = keys.len();
    let mut kernel = vec![0.0; n * n];
    for (i, g) in dags.iter().enumerate() {
        let from_moves = legal_moves(g, moves);
        let mut stay = 1.0;
        for &mv in &from_moves {
            let delta = move_delta(g, mv, cache, prior)?;
            let to = apply_move(g, mv);
            let j = index[&canonical_key(&to)];
            let to_moves = legal_moves(&to, moves);
            let log_ratio =
                delta + (from_moves.len() as f64).ln() - (to_moves.len() as f64).ln();
            let accept = log_ratio.min(0.0).exp();
            let p = accept / from_moves.len() as f64;
            kernel[i * n + j] += p;
            stay -= p;
        }
        kernel[i * n + i] += stay;
    }
    Ok((keys, kernel))
}
