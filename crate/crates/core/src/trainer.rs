//! Training loops: trajectory balance, modified detailed balance with replay
//! and a target stop-head, tabular soft Q-learning, the on-policy reverse-KL
//! surrogate, and exact soft value iteration on enumerable environments.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::seq::index::sample as index_sample;
use rand::Rng as _;
use thiserror::Error;

use crate::dag::{canonical_key, state_from_key, DagEnv, EdgeAction};
use crate::exact::{jsd_vs_posterior, ExactError, PosteriorTable};
use crate::flow::{sample_trajectory, BackwardPolicy, ForwardPolicy, UniformBackward};
use crate::graph::{enumerate_env, EnvError, EnvGraph, Next, StateId, Trajectory};
use crate::num::log_sum_exp;
use crate::objectives::{
    loss_aggregate, modified_db_residual, reverse_kl_gradient, tb_residual, Baseline, LossKind,
    ObjectiveError, Residual, RklSample,
};
use crate::policy::{
    sync_target, AdamConfig, AdamState, BehaviorPolicy, DagPolicy, PolicyError, TargetCopy, Term,
};
use crate::rng::SeedSequence;
use crate::scores::{delta_score, GraphPrior, LocalScoreCache, ScoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Exact(#[from] ExactError),
}

/// Hyperparameters of a run; every stochastic choice flows from `seed`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for the total-flow scalar in trajectory balance.
    pub lr_log_z: f64,
    pub loss: LossKind,
    /// Epsilon anneals linearly from start to end over the first half of
    /// training, then stays at end.
    pub eps_start: f64,
    pub eps_end: f64,
    /// Behavior tempering exponent (1 = none).
    pub temperature: f64,
    pub target_sync: u64,
    pub use_target: bool,
    pub replay_capacity: usize,
    pub alpha: f64,
    pub seed: u64,
    pub workers: usize,
    /// Evaluate JSD against a reference posterior every this many steps
    /// (0 = never).
    pub eval_every: u64,
    /// Stop as soon as an evaluation reaches this JSD.
    pub early_stop_jsd: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 256,
            lr: 1e-2,
            lr_log_z: 1e-1,
            loss: LossKind::default(),
            eps_start: 1.0,
            eps_end: 0.1,
            temperature: 1.0,
            target_sync: 100,
            use_target: true,
            replay_capacity: 100_000,
            alpha: 1.0,
            seed: 0,
            workers: 1,
            eval_every: 0,
            early_stop_jsd: None,
        }
    }
}

impl TrainConfig {
    pub fn epsilon_at(&self, step: u64) -> f64 {
        let half = (self.steps / 2).max(1);
        if step < half {
            self.eps_start + (self.eps_end - self.eps_start) * step as f64 / half as f64
        } else {
            self.eps_end
        }
    }

    fn is_on_policy(&self) -> bool {
        self.eps_start == 0.0 && self.eps_end == 0.0 && self.temperature == 1.0
    }
}

/// Policies trainable by step-level log-probabilities over a generic env.
pub trait StepModel: ForwardPolicy {
    fn param_len(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_vec_mut(&mut self) -> &mut Vec<f64>;
    fn log_prob_grad(&mut self, env: &dyn EnvGraph, state: &StateId, next: &Next) -> Term;
}

impl StepModel for crate::policy::TabularPolicy {
    fn param_len(&self) -> usize {
        self.param_len()
    }

    fn params(&self) -> &[f64] {
        self.params()
    }

    fn params_vec_mut(&mut self) -> &mut Vec<f64> {
        self.params_vec_mut()
    }

    fn log_prob_grad(&mut self, env: &dyn EnvGraph, state: &StateId, next: &Next) -> Term {
        self.log_prob_grad(env, state, next)
    }
}

/// Hierarchical DAG policies train over the same interface by recovering the
/// edge action from the key difference.
macro_rules! impl_step_model_for_dag_policy {
    ($ty:ty) => {
        impl StepModel for $ty {
            fn param_len(&self) -> usize {
                DagPolicy::param_len(self)
            }

            fn params(&self) -> &[f64] {
                DagPolicy::params(self)
            }

            fn params_vec_mut(&mut self) -> &mut Vec<f64> {
                DagPolicy::params_vec_mut(self)
            }

            fn log_prob_grad(
                &mut self,
                _env: &dyn EnvGraph,
                state: &StateId,
                next: &Next,
            ) -> Term {
                let dag = state_from_key(state, DagPolicy::d(self));
                let action = match next {
                    Next::Stop => EdgeAction::Stop,
                    Next::State(key) => {
                        let child = state_from_key(key, DagPolicy::d(self));
                        crate::dag::edge_added(&dag, &child)
                            .expect("consecutive states differ by one edge")
                    }
                };
                DagPolicy::log_prob_grad(self, &dag, action)
            }
        }
    };
}

impl_step_model_for_dag_policy!(crate::policy::TabularHierarchical);
impl_step_model_for_dag_policy!(crate::policy::MlpPolicy);

/// Rollouts for one step, parallel over workers with per-rollout streams, so
/// results are identical for any worker count.
fn rollout_batch(
    env: &dyn EnvGraph,
    policy: &(impl ForwardPolicy + ?Sized),
    seeds: &SeedSequence,
    stream_base: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<Trajectory>, EnvError> {
    if workers <= 1 || count == 1 {
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let mut rng = seeds.stream(stream_base + k as u64);
            out.push(sample_trajectory(env, &policy, &mut rng)?);
        }
        return Ok(out);
    }
    let workers = workers.min(count);
    let mut slots: Vec<Option<Result<Trajectory, EnvError>>> = Vec::new();
    slots.resize_with(count, || None);
    std::thread::scope(|scope| {
        let chunks: Vec<&mut [Option<Result<Trajectory, EnvError>>]> = {
            let mut rest = slots.as_mut_slice();
            let mut parts = Vec::new();
            let base = count / workers;
            let extra = count % workers;
            for w in 0..workers {
                let take = base + usize::from(w < extra);
                let (head, tail) = rest.split_at_mut(take);
                parts.push(head);
                rest = tail;
            }
            parts
        };
        let mut start = 0u64;
        for chunk in chunks {
            let offset = start;
            start += chunk.len() as u64;
            let policy = &policy;
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let mut rng = seeds.stream(stream_base + offset + i as u64);
                    *slot = Some(sample_trajectory(env, policy, &mut rng));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    /// Mean |Δ| per step.
    pub mean_abs_residual: Vec<f64>,
    pub loss: Vec<f64>,
    /// (step, JSD) at each evaluation point.
    pub jsd: Vec<(u64, f64)>,
    pub log_z: Vec<f64>,
    pub nonfinite_skipped: u64,
    pub rejected_steps: u64,
    pub steps_run: u64,
}

pub struct TbResult {
    pub log_z: f64,
    pub trace: TrainTrace,
}

/// Trajectory-balance training with a learned total-flow scalar and a fixed
/// uniform backward policy. Rewards are shifted by the initial state's
/// log-reward when it is terminating, which rescales Z without changing the
/// target distribution.
pub fn train_tb<M: StepModel + Sync>(
    env: &dyn EnvGraph,
    model: &mut M,
    config: &TrainConfig,
    reference: Option<&PosteriorTable>,
) -> Result<TbResult, TrainError> {
    let seeds = SeedSequence::new(config.seed);
    let backward = UniformBackward;
    let s0 = env.initial_state();
    let shift = if env.is_terminating(&s0) { env.log_reward(&s0) } else { 0.0 };
    let mut log_z = 0.0f64;
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut adam_z = AdamState::new(AdamConfig { lr: config.lr_log_z, ..Default::default() });
    let mut trace = TrainTrace::default();

    for step in 0..config.steps {
        let eps = config.epsilon_at(step);
        let behavior = BehaviorPolicy::new(model, eps, config.temperature);
        let trajectories = rollout_batch(
            env,
            &behavior,
            &seeds,
            1 + step * config.batch_size as u64,
            config.batch_size,
            config.workers,
        )?;
        let mut residuals = Vec::with_capacity(trajectories.len());
        for traj in &trajectories {
            let mut log_pf = Term::constant(0.0);
            for w in traj.states.windows(2) {
                log_pf = log_pf.add(&model.log_prob_grad(env, &w[0], &Next::State(w[1].clone())));
            }
            log_pf = log_pf.add(&model.log_prob_grad(env, traj.endpoint(), &Next::Stop));
            let mut log_pb = 0.0;
            for w in traj.states.windows(2) {
                log_pb += backward.log_prob(env, &w[1], &w[0]);
            }
            let log_r = env.log_reward(traj.endpoint()) - shift;
            residuals.push(tb_residual(&Term::constant(log_z), &log_pf, log_r, log_pb));
        }
        let agg = loss_aggregate(&residuals, config.loss)?;
        trace.nonfinite_skipped += agg.skipped_nonfinite as u64;
        if !agg.loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        // the scalar Z sees the mean residual slope directly
        let z_grad: f64 = residuals
            .iter()
            .filter(|r| r.is_finite())
            .map(|r| crate::objectives::loss_slope(config.loss, r.value))
            .sum::<f64>()
            / residuals.iter().filter(|r| r.is_finite()).count().max(1) as f64;
        match adam.step_lazy(model.params_vec_mut(), &agg.grad) {
            Ok(()) => {}
            Err(PolicyError::NonFiniteGradient) => {
                trace.rejected_steps += 1;
            }
            Err(e) => return Err(e.into()),
        }
        let mut z_arr = [log_z];
        adam_z.step_dense(&mut z_arr, &[z_grad])?;
        log_z = z_arr[0];

        trace.loss.push(agg.loss);
        trace.log_z.push(log_z + shift);
        trace.mean_abs_residual.push(
            residuals.iter().filter(|r| r.is_finite()).map(|r| r.value.abs()).sum::<f64>()
                / residuals.iter().filter(|r| r.is_finite()).count().max(1) as f64,
        );
        trace.steps_run = step + 1;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            if let Some(table) = reference {
                let j = jsd_vs_posterior(env, model, table, 200_000)?;
                trace.jsd.push((step + 1, j));
                if config.early_stop_jsd.is_some_and(|t| j <= t) {
                    break;
                }
            }
        }
    }
    Ok(TbResult { log_z: log_z + shift, trace })
}

/// On-policy reverse-KL training with a local or running-average baseline.
pub fn train_reverse_kl<M: StepModel + Sync>(
    env: &dyn EnvGraph,
    model: &mut M,
    config: &TrainConfig,
    baseline: Baseline,
    reference: Option<&PosteriorTable>,
) -> Result<TrainTrace, TrainError> {
    let seeds = SeedSequence::new(config.seed);
    let backward = UniformBackward;
    let s0 = env.initial_state();
    let shift = if env.is_terminating(&s0) { env.log_reward(&s0) } else { 0.0 };
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut trace = TrainTrace::default();
    let mut baseline = baseline;

    for step in 0..config.steps {
        let trajectories = rollout_batch(
            env,
            &*model,
            &seeds,
            1 + step * config.batch_size as u64,
            config.batch_size,
            config.workers,
        )?;
        let mut batch = Vec::with_capacity(trajectories.len());
        for traj in &trajectories {
            let mut log_pf = Term::constant(0.0);
            for w in traj.states.windows(2) {
                log_pf = log_pf.add(&model.log_prob_grad(env, &w[0], &Next::State(w[1].clone())));
            }
            log_pf = log_pf.add(&model.log_prob_grad(env, traj.endpoint(), &Next::Stop));
            let mut log_pb = 0.0;
            for w in traj.states.windows(2) {
                log_pb += backward.log_prob(env, &w[1], &w[0]);
            }
            batch.push(RklSample {
                log_pf_sum: log_pf,
                log_reward: env.log_reward(traj.endpoint()) - shift,
                log_pb_sum: log_pb,
                on_policy: config.is_on_policy(),
            });
        }
        let g = reverse_kl_gradient(&batch, baseline)?;
        if let Some(updated) = g.updated_global {
            if let Baseline::Global { eta, .. } = baseline {
                baseline = Baseline::Global { value: updated, eta };
            }
        }
        match adam.step_lazy(model.params_vec_mut(), &g.grad) {
            Ok(()) => {}
            Err(PolicyError::NonFiniteGradient) => {
                trace.rejected_steps += 1;
            }
            Err(e) => return Err(e.into()),
        }
        trace.loss.push(g.batch_mean_cost);
        trace.steps_run = step + 1;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            if let Some(table) = reference {
                let j = jsd_vs_posterior(env, model, table, 200_000)?;
                trace.jsd.push((step + 1, j));
                if config.early_stop_jsd.is_some_and(|t| j <= t) {
                    break;
                }
            }
        }
    }
    Ok(trace)
}

/// One stored interaction of the DAG environment; the delta score is policy
/// independent and computed once at insertion.
#[derive(Debug, Clone)]
pub struct Transition {
    pub from: StateId,
    pub action: (u8, u8),
    pub delta_score: f64,
    /// Edge count of the destination graph (the parent count under the
    /// uniform backward policy).
    pub next_edges: u32,
}

/// FIFO ring buffer with uniform without-replacement batch sampling.
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn sample(&self, k: usize, rng: &mut crate::rng::Rng) -> Vec<&Transition> {
        let k = k.min(self.items.len());
        index_sample(rng, self.items.len(), k).iter().map(|i| &self.items[i]).collect()
    }
}

pub struct MdbResult {
    pub trace: TrainTrace,
    /// Stop probability of the empty graph at every evaluation point, the
    /// degeneracy monitor.
    pub stop_prob_trace: Vec<(u64, f64)>,
}

/// Modified detailed-balance training over the DAG environment: epsilon
/// rollouts feed a replay buffer (delta scores attached at insertion),
/// uniform batches drive the residuals, and the stop head in the next-state
/// term comes from a periodically synced target copy.
pub fn train_modified_db(
    env: &DagEnv,
    cache: &LocalScoreCache,
    prior: GraphPrior,
    policy: &mut dyn DagPolicy,
    config: &TrainConfig,
    reference: Option<&PosteriorTable>,
) -> Result<MdbResult, TrainError> {
    let seeds = SeedSequence::new(config.seed);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut adam = AdamState::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut target = TargetCopy::new(policy.params(), config.target_sync.max(1));
    let mut trace = TrainTrace::default();
    let mut stop_prob_trace = Vec::new();
    let d = policy.d();

    struct PolicyView<'a>(&'a dyn DagPolicy);
    impl ForwardPolicy for PolicyView<'_> {
        fn distribution(
            &self,
            _env: &dyn EnvGraph,
            state: &StateId,
        ) -> crate::graph::TransitionDistribution {
            let dag = state_from_key(state, self.0.d());
            let h = self.0.hierarchical(&dag);
            let mut support = Vec::with_capacity(h.edges.len() + 1);
            for (u, v, p) in h.edges {
                let child = crate::dag::apply_edge(&dag, EdgeAction::Add { u, v }).unwrap();
                support.push((Next::State(canonical_key(&child)), p));
            }
            support.push((Next::Stop, h.stop));
            crate::graph::TransitionDistribution { support }
        }
    }

    for step in 0..config.steps {
        // interaction phase: one rollout through the live policy
        let eps = config.epsilon_at(step);
        let traj = {
            let view = PolicyView(policy);
            let behavior = BehaviorPolicy::new(&view, eps, config.temperature);
            let mut rng = seeds.stream(1 + step);
            sample_trajectory(env, &behavior, &mut rng)?
        };
        for w in traj.states.windows(2) {
            let from = state_from_key(&w[0], d);
            let to = state_from_key(&w[1], d);
            let action = crate::dag::edge_added(&from, &to)
                .expect("consecutive rollout states differ by one edge");
            let EdgeAction::Add { u, v } = action else { unreachable!() };
            let _ = prior; // modular priors cancel in delta scores except edge terms
            let mut delta = delta_score(&from, action, cache)?;
            if let GraphPrior::EdgePenalty { beta } = prior {
                delta -= beta;
            }
            buffer.push(Transition {
                from: w[0].clone(),
                action: (u as u8, v as u8),
                delta_score: delta,
                next_edges: to.edge_count() as u32,
            });
        }
        if buffer.is_empty() {
            continue;
        }

        // update phase: uniform batch from the buffer
        let batch: Vec<Transition> = {
            let mut rng = seeds.stream((1 << 40) + step);
            buffer.sample(config.batch_size, &mut rng).into_iter().cloned().collect()
        };
        let mut residuals: Vec<Residual> = Vec::with_capacity(batch.len());
        for t in &batch {
            let from = state_from_key(&t.from, d);
            let action = EdgeAction::Add { u: t.action.0 as usize, v: t.action.1 as usize };
            let to = crate::dag::apply_edge(&from, action).expect("stored actions were valid");
            let log_pb = -(t.next_edges as f64).ln();
            let log_stop_s = policy.log_prob_grad(&from, EdgeAction::Stop);
            let log_edge = policy.log_prob_grad(&from, action);
            let log_stop_next = if config.use_target {
                Term::constant(policy.log_stop_on(&target.params, &to))
            } else {
                policy.log_prob_grad(&to, EdgeAction::Stop)
            };
            residuals.push(modified_db_residual(
                t.delta_score,
                log_pb,
                &log_stop_s,
                &log_edge,
                &log_stop_next,
            ));
        }
        let agg = loss_aggregate(&residuals, config.loss)?;
        trace.nonfinite_skipped += agg.skipped_nonfinite as u64;
        if !agg.loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        match adam.step_lazy(policy.params_vec_mut(), &agg.grad) {
            Ok(()) => {}
            Err(PolicyError::NonFiniteGradient) => {
                trace.rejected_steps += 1;
            }
            Err(e) => return Err(e.into()),
        }
        if config.use_target {
            sync_target(policy.params(), &mut target, step + 1);
        }
        trace.loss.push(agg.loss);
        trace.mean_abs_residual.push(
            residuals.iter().filter(|r| r.is_finite()).map(|r| r.value.abs()).sum::<f64>()
                / residuals.iter().filter(|r| r.is_finite()).count().max(1) as f64,
        );
        trace.steps_run = step + 1;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let g0 = crate::dag::initial_dag_state(d).unwrap();
            stop_prob_trace.push((step + 1, policy.hierarchical(&g0).stop));
            if let Some(table) = reference {
                let view = PolicyView(policy);
                let j = jsd_vs_posterior(env, &view, table, 200_000)?;
                trace.jsd.push((step + 1, j));
                if config.early_stop_jsd.is_some_and(|t| j <= t) {
                    break;
                }
            }
        }
    }
    Ok(MdbResult { trace, stop_prob_trace })
}

/// Tabular soft Q-values keyed by (state, next).
#[derive(Debug, Clone, Default)]
pub struct QTable {
    pub values: HashMap<(StateId, Next), f64>,
}

impl QTable {
    pub fn get(&self, state: &StateId, next: &Next) -> f64 {
        self.values.get(&(state.clone(), next.clone())).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, state: StateId, next: Next, q: f64) {
        self.values.insert((state, next), q);
    }

    /// Soft value V(s) = α log Σ exp(Q(s,·)/α) over children and the sink.
    pub fn soft_value(&self, env: &dyn EnvGraph, state: &StateId, alpha: f64) -> f64 {
        let mut qs: Vec<f64> = env
            .children(state)
            .into_iter()
            .map(|c| self.get(state, &Next::State(c)) / alpha)
            .collect();
        if env.is_terminating(state) {
            qs.push(self.get(state, &Next::Stop) / alpha);
        }
        alpha * log_sum_exp(&qs)
    }
}

/// Softmax-of-Q policy.
pub struct SoftQPolicy<'a> {
    pub q: &'a QTable,
    pub alpha: f64,
}

impl ForwardPolicy for SoftQPolicy<'_> {
    fn distribution(
        &self,
        env: &dyn EnvGraph,
        state: &StateId,
    ) -> crate::graph::TransitionDistribution {
        let mut actions: Vec<Next> =
            env.children(state).into_iter().map(Next::State).collect();
        if env.is_terminating(state) {
            actions.push(Next::Stop);
        }
        let logits: Vec<f64> =
            actions.iter().map(|a| self.q.get(state, a) / self.alpha).collect();
        let lse = log_sum_exp(&logits);
        crate::graph::TransitionDistribution {
            support: actions
                .into_iter()
                .zip(logits)
                .map(|(a, l)| (a, (l - lse).exp()))
                .collect(),
        }
    }
}

pub struct SqlResult {
    pub q: QTable,
    pub trace: TrainTrace,
}

/// Tabular soft Q-learning: behavior is the epsilon-greedy softmax of the
/// live Q-table; every visited transition takes the semi-gradient update
/// Q ← Q + β [r + V(s') − Q].
pub fn train_sql(
    env: &dyn EnvGraph,
    reward: &crate::objectives::CorrectedReward,
    config: &TrainConfig,
) -> Result<SqlResult, TrainError> {
    let seeds = SeedSequence::new(config.seed);
    let mut q = QTable::default();
    let alpha = config.alpha;
    let mut trace = TrainTrace::default();

    for step in 0..config.steps {
        let eps = config.epsilon_at(step);
        let mut rng = seeds.stream(1 + step);
        let mut state = env.initial_state();
        let mut abs_residuals = Vec::new();
        loop {
            // behavior distribution: epsilon-mixed softmax of the live Q row
            let mut actions: Vec<Next> =
                env.children(&state).into_iter().map(Next::State).collect();
            if env.is_terminating(&state) {
                actions.push(Next::Stop);
            }
            let logits: Vec<f64> =
                actions.iter().map(|a| q.get(&state, a) / alpha).collect();
            let lse = log_sum_exp(&logits);
            let n = actions.len() as f64;
            let probs: Vec<f64> = logits
                .iter()
                .map(|l| (1.0 - eps) * (l - lse).exp() + eps / n)
                .collect();
            let u: f64 = rng.gen::<f64>();
            let mut acc = 0.0;
            let mut chosen = actions.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u <= acc {
                    chosen = i;
                    break;
                }
            }
            let next = actions[chosen].clone();
            let r = reward.step_reward(&state, &next);
            let v_next = match &next {
                Next::Stop => 0.0,
                Next::State(s2) => q.soft_value(env, s2, alpha),
            };
            let old = q.get(&state, &next);
            let residual = old - (r + v_next);
            abs_residuals.push(residual.abs());
            q.set(state.clone(), next.clone(), old - config.lr * residual);
            match next {
                Next::Stop => break,
                Next::State(s2) => state = s2,
            }
        }
        trace
            .mean_abs_residual
            .push(abs_residuals.iter().sum::<f64>() / abs_residuals.len() as f64);
        trace.steps_run = step + 1;
    }
    Ok(SqlResult { q, trace })
}

/// Exact soft values on an enumerable environment: one backward sweep of the
/// soft Bellman recursion in reverse topological order, V(⊥) = 0.
pub fn soft_value_iteration(
    env: &dyn EnvGraph,
    reward: &crate::objectives::CorrectedReward,
    alpha: f64,
    max_states: usize,
) -> Result<(QTable, BTreeMap<StateId, f64>), TrainError> {
    let enumerated = enumerate_env(env, max_states)?;
    let mut q = QTable::default();
    let mut v: BTreeMap<StateId, f64> = BTreeMap::new();
    for i in (0..enumerated.len()).rev() {
        let state = enumerated.topo_order[i].clone();
        let mut qs = Vec::new();
        for &j in &enumerated.children[i] {
            let child = enumerated.topo_order[j].clone();
            let value = reward.step_reward(&state, &Next::State(child.clone())) + v[&child];
            q.set(state.clone(), Next::State(child), value);
            qs.push(value / alpha);
        }
        if enumerated.terminating[i] {
            let value = reward.step_reward(&state, &Next::Stop);
            q.set(state.clone(), Next::Stop, value);
            qs.push(value / alpha);
        }
        v.insert(state, alpha * log_sum_exp(&qs));
    }
    Ok((q, v))
}
