//! Balance-condition residuals and their entropy-regularized control
//! counterparts, as pure functions of policy/flow evaluations. Residual sign
//! conventions put the forward quantities in the numerator throughout, so the
//! exact proportionalities between the two families hold term by term:
//! Δ_SQL = α·Δ_DB, Δ_PCL = α·Δ_SubTB, Δ_πSQL = α·Δ_MDB, Δ_SQL = α·Δ_FL-DB.

use thiserror::Error;

use crate::envs::DecomposableEnergy;
use crate::flow::BackwardPolicy;
use crate::graph::{EnvGraph, Next, StateId, Trajectory};
use crate::num::log_sum_exp;
use crate::policy::{Grad, Term};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty residual batch")]
    EmptyBatch,
    #[error("reverse-KL gradients require on-policy trajectories (no importance weights)")]
    OffPolicyBatch,
    #[error("this environment exposes no per-step energy decomposition")]
    MissingEnergyDecomposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualTag {
    FlowMatching,
    DetailedBalance,
    TrajectoryBalance,
    SubTrajectoryBalance,
    ModifiedDetailedBalance,
    ForwardLookingDetailedBalance,
    SoftQ,
    PathConsistency,
    PolicySoftQ,
}

/// Signed log-domain mismatch of one condition, with its parameter gradient.
/// Non-finite values mark a zero-probability step; they are flagged and
/// excluded from gradients by `loss_aggregate`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub value: f64,
    pub grad: Grad,
    pub tag: ResidualTag,
}

impl Residual {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// log Σ exp over differentiable terms; gradient weights are the softmax of
/// the values.
fn log_sum_exp_terms(terms: &[Term]) -> Term {
    let values: Vec<f64> = terms.iter().map(|t| t.value).collect();
    let lse = log_sum_exp(&values);
    let mut grad = Grad::zero();
    if lse.is_finite() {
        let mut acc = Vec::new();
        for t in terms {
            let w = (t.value - lse).exp();
            if w != 0.0 {
                t.grad.axpy_into(w, &mut acc);
            }
        }
        grad = Grad::Dense(acc);
    }
    Term { value: lse, grad }
}

/// Soft state value V = α log Σ exp(Q/α) over the child Q-terms; the
/// gradient is the Boltzmann weighting of the child gradients.
pub fn soft_value(q_terms: &[Term], alpha: f64) -> Term {
    let scaled: Vec<Term> = q_terms.iter().map(|t| t.scale(1.0 / alpha)).collect();
    log_sum_exp_terms(&scaled).scale(alpha)
}

/// Flow-matching residual at a non-initial state:
/// log Σ in-flows − log(Σ out-flows + R). Flow terms are log-domain.
pub fn fm_residual(
    in_log_flows: &[Term],
    out_log_flows: &[Term],
    log_reward: Option<f64>,
) -> Residual {
    let inflow = log_sum_exp_terms(in_log_flows);
    let mut out = out_log_flows.to_vec();
    if let Some(r) = log_reward {
        out.push(Term::constant(r));
    }
    let outflow = log_sum_exp_terms(&out);
    let diff = inflow.sub(&outflow);
    Residual { value: diff.value, grad: diff.grad, tag: ResidualTag::FlowMatching }
}

/// Detailed-balance residual log[F(s)P_F(s'|s) / F(s')P_B(s|s')] for an
/// interior transition.
pub fn db_residual(log_f_s: &Term, log_pf: &Term, log_f_s2: &Term, log_pb: f64) -> Residual {
    let t = log_f_s.add(log_pf).sub(log_f_s2).add_const(-log_pb);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::DetailedBalance }
}

/// Reward-matching residual at a terminating edge:
/// log[F(x)P_F(⊥|x) / R(x)].
pub fn db_terminal_residual(log_f_x: &Term, log_pf_stop: &Term, log_reward: f64) -> Residual {
    let t = log_f_x.add(log_pf_stop).add_const(-log_reward);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::DetailedBalance }
}

/// Trajectory-balance residual log[Z ΠP_F / R(s_T) ΠP_B] over one complete
/// trajectory; `log_pf_sum` carries the policy gradient, P_B is fixed.
pub fn tb_residual(log_z: &Term, log_pf_sum: &Term, log_reward: f64, log_pb_sum: f64) -> Residual {
    let t = log_z.add(log_pf_sum).add_const(-log_reward - log_pb_sum);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::TrajectoryBalance }
}

/// Sub-trajectory balance residual over a segment s_m..s_n with s_n ≠ ⊥:
/// log[F(s_m) ΠP_F / F(s_n) ΠP_B]. Reduces to `db_residual` at length one.
pub fn subtb_residual(
    log_f_m: &Term,
    log_f_n: &Term,
    log_pf_sum: &Term,
    log_pb_sum: f64,
) -> Residual {
    let t = log_f_m.add(log_pf_sum).sub(log_f_n).add_const(-log_pb_sum);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::SubTrajectoryBalance }
}

/// Terminal variant of the sub-trajectory residual (segment ending at ⊥):
/// log[F(s_m) ΠP_F / R(s_T) ΠP_B], the x→⊥ step included in ΠP_F.
pub fn subtb_terminal_residual(
    log_f_m: &Term,
    log_pf_sum: &Term,
    log_reward: f64,
    log_pb_sum: f64,
) -> Residual {
    let t = log_f_m.add(log_pf_sum).add_const(-log_reward - log_pb_sum);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::SubTrajectoryBalance }
}

/// Modified detailed-balance residual for all-terminating environments:
/// log[R(G')P_B(G|G')P_φ(⊥|G) / R(G)P_φ(G'|G)P_φ̄(⊥|G')], expressed through
/// the delta score log R(G') − log R(G). The target stop term is a constant
/// (stop-gradient) when a frozen head is used.
pub fn modified_db_residual(
    delta_score: f64,
    log_pb: f64,
    log_stop_s: &Term,
    log_edge: &Term,
    log_stop_s2_target: &Term,
) -> Residual {
    let t = log_stop_s
        .sub(log_edge)
        .sub(log_stop_s2_target)
        .add_const(delta_score + log_pb);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::ModifiedDetailedBalance }
}

/// Forward-looking detailed balance with an offset flow:
/// log[F̃(s)P_F / F̃(s')P_B] + E(s→s')/α.
pub fn fl_db_residual(
    log_ftilde_s: &Term,
    log_pf: &Term,
    log_ftilde_s2: &Term,
    log_pb: f64,
    step_energy: f64,
    alpha: f64,
) -> Residual {
    let t = log_ftilde_s
        .add(log_pf)
        .sub(log_ftilde_s2)
        .add_const(-log_pb + step_energy / alpha);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::ForwardLookingDetailedBalance }
}

/// Soft Bellman residual Δ = Q(s,s') − (r(s,s') + V(s')), with V the soft
/// value over the children of s' (a constant 0 at the sink).
pub fn sql_residual(q: &Term, step_reward: f64, v_next: &Term) -> Residual {
    let t = q.sub(v_next).add_const(-step_reward);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::SoftQ }
}

/// Path-consistency residual over a segment, oriented to match the
/// sub-trajectory residual: Δ = V(s_m) − V(s_n) − Σ(r − α log π).
pub fn pcl_residual(
    v_m: &Term,
    v_n: &Term,
    step_rewards: &[f64],
    log_pi_terms: &[Term],
    alpha: f64,
) -> Residual {
    let mut t = v_m.sub(v_n);
    for (r, log_pi) in step_rewards.iter().zip(log_pi_terms) {
        t = t.add(&log_pi.scale(alpha)).add_const(-r);
    }
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::PathConsistency }
}

/// Policy-parametrized soft Bellman residual (all states terminating,
/// r(s,⊥) = 0): Δ = r(s,s') − α[log π(s'|s) − log π(⊥|s) + log π(⊥|s')].
pub fn pisql_residual(
    step_reward: f64,
    log_pi_edge: &Term,
    log_pi_stop_s: &Term,
    log_pi_stop_s2: &Term,
    alpha: f64,
) -> Residual {
    let t = log_pi_stop_s
        .sub(log_pi_edge)
        .sub(log_pi_stop_s2)
        .scale(alpha)
        .add_const(step_reward);
    Residual { value: t.value, grad: t.grad, tag: ResidualTag::PolicySoftQ }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionScheme {
    /// Energy only at termination: r(s,s') = α log P_B, r(x,⊥) = −E(x).
    Sparse,
    /// Per-step energy increments: r(s,s') = −E(s→s') + α log P_B, r(x,⊥) = 0.
    Dense,
}

/// Per-step rewards whose sum along any complete trajectory equals
/// −E(s_T) + α Σ log P_B(s_t | s_{t+1}).
pub struct CorrectedReward<'a> {
    env: &'a dyn EnvGraph,
    backward: &'a dyn BackwardPolicy,
    terminal_energy: Box<dyn Fn(&StateId) -> f64 + Sync + 'a>,
    step_energy: Option<&'a dyn DecomposableEnergy>,
    pub alpha: f64,
    pub scheme: CorrectionScheme,
}

impl<'a> CorrectedReward<'a> {
    pub fn sparse(
        env: &'a dyn EnvGraph,
        backward: &'a dyn BackwardPolicy,
        terminal_energy: Box<dyn Fn(&StateId) -> f64 + Sync + 'a>,
        alpha: f64,
    ) -> Self {
        CorrectedReward {
            env,
            backward,
            terminal_energy,
            step_energy: None,
            alpha,
            scheme: CorrectionScheme::Sparse,
        }
    }

    pub fn dense(
        env: &'a dyn DecomposableEnergy,
        backward: &'a dyn BackwardPolicy,
        alpha: f64,
    ) -> Self {
        CorrectedReward {
            env,
            backward,
            terminal_energy: Box::new(|_| 0.0),
            step_energy: Some(env),
            alpha,
            scheme: CorrectionScheme::Dense,
        }
    }

    /// Uncorrected sparse reward (zero in place of the α log P_B terms);
    /// the baseline whose optimal policy over-counts multi-path endpoints.
    pub fn sparse_uncorrected(
        env: &'a dyn EnvGraph,
        terminal_energy: Box<dyn Fn(&StateId) -> f64 + Sync + 'a>,
        alpha: f64,
    ) -> Self {
        struct NoCorrection;
        impl BackwardPolicy for NoCorrection {
            fn distribution(&self, _: &dyn EnvGraph, _: &StateId) -> Vec<(StateId, f64)> {
                Vec::new()
            }
            fn log_prob(&self, _: &dyn EnvGraph, _: &StateId, _: &StateId) -> f64 {
                0.0
            }
        }
        static NO_CORRECTION: NoCorrection = NoCorrection;
        CorrectedReward {
            env,
            backward: &NO_CORRECTION,
            terminal_energy,
            step_energy: None,
            alpha,
            scheme: CorrectionScheme::Sparse,
        }
    }

    pub fn step_reward(&self, state: &StateId, next: &Next) -> f64 {
        match next {
            Next::Stop => match self.scheme {
                CorrectionScheme::Sparse => -(self.terminal_energy)(state),
                CorrectionScheme::Dense => 0.0,
            },
            Next::State(s2) => {
                let correction = self.alpha * self.backward.log_prob(self.env, s2, state);
                match self.scheme {
                    CorrectionScheme::Sparse => correction,
                    CorrectionScheme::Dense => {
                        let inc = self
                            .step_energy
                            .expect("dense scheme requires a decomposable energy")
                            .step_energy(state, s2);
                        -inc + correction
                    }
                }
            }
        }
    }

    /// Sum of rewards along a complete trajectory.
    pub fn trajectory_return(&self, traj: &Trajectory) -> f64 {
        let mut total = 0.0;
        for w in traj.states.windows(2) {
            total += self.step_reward(&w[0], &Next::State(w[1].clone()));
        }
        total + self.step_reward(traj.endpoint(), &Next::Stop)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LossKind {
    Squared,
    Huber { delta: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Huber { delta: 1.0 }
    }
}

fn loss_and_slope(kind: LossKind, r: f64) -> (f64, f64) {
    match kind {
        LossKind::Squared => (0.5 * r * r, r),
        LossKind::Huber { delta } => {
            if r.abs() <= delta {
                (0.5 * r * r, r)
            } else {
                (delta * (r.abs() - 0.5 * delta), delta * r.signum())
            }
        }
    }
}

/// d(loss)/d(residual) for one residual value.
pub fn loss_slope(kind: LossKind, r: f64) -> f64 {
    loss_and_slope(kind, r).1
}

#[derive(Debug)]
pub struct AggregatedLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Residuals dropped because they were non-finite.
    pub skipped_nonfinite: usize,
}

/// Mean loss over the batch with per-parameter gradient contributions.
/// Gradients treat the behavior policy as parameter-independent; non-finite
/// residuals are counted and skipped rather than propagated.
pub fn loss_aggregate(residuals: &[Residual], kind: LossKind) -> Result<AggregatedLoss, ObjectiveError> {
    if residuals.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut grad = Vec::new();
    let mut loss = 0.0;
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for r in residuals {
        if !r.is_finite() {
            skipped += 1;
            continue;
        }
        let (l, slope) = loss_and_slope(kind, r.value);
        loss += l;
        r.grad.axpy_into(slope, &mut grad);
        kept += 1;
    }
    if kept == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let scale = 1.0 / kept as f64;
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(AggregatedLoss { loss, grad, skipped_nonfinite: skipped })
}

/// One on-policy trajectory for the score-function estimator: the summed
/// forward log-probability term and the constant parts of
/// c(τ) = log P_F(τ) − log R(x) − log P_B(τ|x).
pub struct RklSample {
    pub log_pf_sum: Term,
    pub log_reward: f64,
    pub log_pb_sum: f64,
    /// Whether the trajectory was drawn from the current policy itself.
    pub on_policy: bool,
}

impl RklSample {
    pub fn cost(&self) -> f64 {
        self.log_pf_sum.value - self.log_reward - self.log_pb_sum
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Baseline {
    Local,
    /// Running average b ← (1−η) b + η b_local.
    Global { value: f64, eta: f64 },
}

#[derive(Debug)]
pub struct RklGradient {
    pub grad: Vec<f64>,
    pub batch_mean_cost: f64,
    pub updated_global: Option<f64>,
}

/// Score-function gradient of the reverse KL over complete trajectories,
/// with a local or running-average control variate:
/// (1/K) Σ ∇log P_F(τ_k) (c(τ_k) − b).
pub fn reverse_kl_gradient(
    batch: &[RklSample],
    baseline: Baseline,
) -> Result<RklGradient, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if batch.iter().any(|s| !s.on_policy) {
        return Err(ObjectiveError::OffPolicyBatch);
    }
    let k = batch.len() as f64;
    let b_local: f64 = batch.iter().map(|s| s.cost()).sum::<f64>() / k;
    let (b, updated_global) = match baseline {
        Baseline::Local => (b_local, None),
        Baseline::Global { value, eta } => {
            let updated = (1.0 - eta) * value + eta * b_local;
            (value, Some(updated))
        }
    };
    let mut grad = Vec::new();
    for s in batch {
        s.log_pf_sum.grad.axpy_into((s.cost() - b) / k, &mut grad);
    }
    Ok(RklGradient { grad, batch_mean_cost: b_local, updated_global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::fixtures;
    use crate::flow::{construct_flow_from_reward, enumerate_trajectories, UniformBackward};
    use crate::graph::Next;
    use std::collections::HashMap;

    fn term(v: f64) -> Term {
        Term::constant(v)
    }

    #[test]
    fn fm_zero_on_exact_flow_and_log2_when_doubled() {
        let env = fixtures::two_sink_env(2.0, 3.0);
        let mut reward = HashMap::new();
        reward.insert(env.state("s2"), 2.0);
        reward.insert(env.state("s3"), 3.0);
        let flow = construct_flow_from_reward(&env, &reward, 100).unwrap();
        // state s2: inflow from s0 and s1; outflow to s3 plus its reward
        let inflow: Vec<Term> = [env.state("s0"), env.state("s1")]
            .iter()
            .map(|p| term(flow.get(p, &Next::State(env.state("s2"))).unwrap().ln()))
            .collect();
        let out = vec![term(flow.get(&env.state("s2"), &Next::State(env.state("s3"))).unwrap().ln())];
        let r = fm_residual(&inflow, &out, Some(2.0f64.ln()));
        assert!(r.value.abs() < 1e-12);
        // double the inflow: residual log 2 exactly
        let doubled: Vec<Term> = inflow.iter().map(|t| t.add_const(2.0f64.ln())).collect();
        let r = fm_residual(&doubled, &out, Some(2.0f64.ln()));
        assert!((r.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn db_analytic_shift() {
        // scaling F(s') by c shifts the residual by -log c
        let base = db_residual(&term(1.0), &term(-0.5), &term(0.7), -0.2);
        let scaled = db_residual(&term(1.0), &term(-0.5), &term(0.7 + 0.3), -0.2);
        assert!((scaled.value - (base.value - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn tb_z_scaling_is_additive() {
        let base = tb_residual(&term(0.4), &term(-1.1), -0.3, -0.8);
        let scaled = tb_residual(&term(0.4 + 0.25), &term(-1.1), -0.3, -0.8);
        assert!((scaled.value - (base.value + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn subtb_length_one_equals_db() {
        let f_m = term(0.9);
        let f_n = term(0.1);
        let pf = term(-0.4);
        let pb = -0.6;
        let a = subtb_residual(&f_m, &f_n, &pf, pb);
        let b = db_residual(&f_m, &pf, &f_n, pb);
        assert!((a.value - b.value).abs() < 1e-15);
    }

    #[test]
    fn skip_chain_segments_balance_but_flow_does_not() {
        // the fixed assignment: F(s0)=4, F(s1)=F(s2)=F(s3)=2, F(s4)=1,
        // P_F(s2|s1)=P_F(s3|s1)=1/2, all other transition probs forced to 1
        let env = fixtures::skip_chain_env();
        let f: HashMap<&str, f64> =
            [("s0", 4.0), ("s1", 2.0), ("s2", 2.0), ("s3", 2.0), ("s4", 1.0)].into();
        let pf: HashMap<(&str, &str), f64> = [
            (("s0", "s1"), 1.0),
            (("s1", "s2"), 0.5),
            (("s1", "s3"), 0.5),
            (("s3", "s4"), 1.0),
        ]
        .into();
        // every length-2 segment: (s0,s1,s2), (s0,s1,s3), (s1,s3,s4)
        for (a, b, c) in [("s0", "s1", "s2"), ("s0", "s1", "s3"), ("s1", "s3", "s4")] {
            let log_pf = term(pf[&(a, b)].ln() + pf[&(b, c)].ln());
            // unique parents everywhere: every log P_B is 0
            let r = subtb_residual(&term(f[a].ln()), &term(f[c].ln()), &log_pf, 0.0);
            assert!(r.value.abs() <= 1e-12, "segment ({a},{b},{c}): {}", r.value);
        }
        // yet the induced edge flow breaks conservation: terminal inflow
        // F(s2)+F(s4) = 3 against initial outflow F(s0) = 4
        let mut table = crate::flow::EdgeFlowTable::default();
        for ((a, b), p) in &pf {
            table.insert(env.state(a), Next::State(env.state(b)), f[a] * p);
        }
        table.insert(env.state("s2"), Next::Stop, f["s2"]);
        table.insert(env.state("s4"), Next::Stop, f["s4"]);
        let report = crate::flow::flow_residual_report(&table, &env, None, 100).unwrap();
        assert!((report.terminal_inflow - 3.0).abs() < 1e-12);
        assert!((report.initial_outflow - 4.0).abs() < 1e-12);
        assert!(report.terminal_residual.abs() > 0.2);
    }

    #[test]
    fn sql_and_db_proportional_under_correspondence() {
        // tabular instance with Q = α log(F·P_F) at one transition
        let alpha = 1.7;
        let log_f_s = 0.8;
        let log_pf = -0.9f64;
        let log_pb = -0.3;
        // child state s' with two outgoing Q values
        let q_next = [term(alpha * 0.2), term(alpha * -0.4)];
        let v_next = soft_value(&q_next, alpha);
        let log_f_s2 = v_next.value / alpha;
        let q = term(alpha * (log_f_s + log_pf));
        let r = alpha * log_pb;
        let sql = sql_residual(&q, r, &v_next);
        let db = db_residual(&term(log_f_s), &term(log_pf), &term(log_f_s2), log_pb);
        assert!((sql.value - alpha * db.value).abs() < 1e-12);
    }

    #[test]
    fn pcl_matches_alpha_subtb() {
        let alpha = 0.5;
        let log_f = [0.4, -0.2, 0.9];
        let log_pf = [-0.7, -1.1];
        let log_pb = [-0.4, -0.9];
        let v: Vec<Term> = log_f.iter().map(|&f| term(alpha * f)).collect();
        let rewards: Vec<f64> = log_pb.iter().map(|&b| alpha * b).collect();
        let pi: Vec<Term> = log_pf.iter().map(|&p| term(p)).collect();
        let pcl = pcl_residual(&v[0], &v[2], &rewards, &pi, alpha);
        let subtb = subtb_residual(
            &term(log_f[0]),
            &term(log_f[2]),
            &term(log_pf.iter().sum()),
            log_pb.iter().sum(),
        );
        assert!((pcl.value - alpha * subtb.value).abs() < 1e-12);
    }

    #[test]
    fn pisql_matches_alpha_modified_db() {
        let alpha = 2.0;
        let energy = (0.3, -0.8); // E(s), E(s')
        let log_pb = -0.69;
        let log_pi_edge = term(-1.2);
        let log_pi_stop_s = term(-0.4);
        let log_pi_stop_s2 = term(-0.25);
        let r = energy.0 - energy.1 + alpha * log_pb;
        let pisql = pisql_residual(r, &log_pi_edge, &log_pi_stop_s, &log_pi_stop_s2, alpha);
        let delta = (-energy.1 / alpha) - (-energy.0 / alpha); // log R(G') − log R(G)
        let mdb = modified_db_residual(delta, log_pb, &log_pi_stop_s, &log_pi_edge, &log_pi_stop_s2);
        assert!((pisql.value - alpha * mdb.value).abs() < 1e-12);
    }

    #[test]
    fn fl_db_with_zero_increment_is_db_without_reward() {
        let f_s = term(0.5);
        let pf = term(-0.3);
        let f_s2 = term(0.2);
        let fl = fl_db_residual(&f_s, &pf, &f_s2, -0.1, 0.0, 1.0);
        let db = db_residual(&f_s, &pf, &f_s2, -0.1);
        assert!((fl.value - db.value).abs() < 1e-15);
    }

    #[test]
    fn corrected_reward_trajectory_contract() {
        let env = fixtures::double_path_env([0.3, -0.2, 0.7]);
        let backward = UniformBackward;
        let alpha = 1.3;
        let energies: HashMap<StateId, f64> = [
            (env.state("x3"), 0.3),
            (env.state("x4"), -0.2),
            (env.state("x5"), 0.7),
        ]
        .into();
        let corrected = CorrectedReward::sparse(
            &env,
            &backward,
            Box::new(move |x| energies[x]),
            alpha,
        );
        for traj in enumerate_trajectories(&env, 100, 100).unwrap() {
            let expect_energy = match traj.endpoint() {
                x if *x == env.state("x3") => 0.3,
                x if *x == env.state("x4") => -0.2,
                _ => 0.7,
            };
            let mut log_pb = 0.0;
            for w in traj.states.windows(2) {
                log_pb += backward.log_prob(&env, &w[1], &w[0]);
            }
            let total = corrected.trajectory_return(&traj);
            assert!((total - (-expect_energy + alpha * log_pb)).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_env_corrections_vanish() {
        use crate::envs::{Factor, FactorGraphEnv, FactorSpec};
        let spec = FactorSpec {
            d: 2,
            arity: 2,
            factors: vec![Factor { vars: vec![0, 1], table: vec![0.1, 0.4, -0.3, 0.2] }],
        };
        let env = FactorGraphEnv::new(spec, None).unwrap();
        let backward = UniformBackward;
        let corrected = CorrectedReward::sparse(&env, &backward, Box::new(|_| 0.0), 1.0);
        for traj in enumerate_trajectories(&env, 100, 100).unwrap() {
            for w in traj.states.windows(2) {
                let r = corrected.step_reward(&w[0], &Next::State(w[1].clone()));
                assert_eq!(r, 0.0, "unique parents make every correction log 1");
            }
        }
    }

    #[test]
    fn dense_and_sparse_schemes_share_trajectory_sums() {
        use crate::envs::{Factor, FactorGraphEnv, FactorSpec};
        let spec = FactorSpec {
            d: 3,
            arity: 2,
            factors: vec![
                Factor { vars: vec![0], table: vec![0.25, -0.5] },
                Factor { vars: vec![0, 1], table: vec![0.1, 0.4, -0.3, 0.2] },
                Factor { vars: vec![1, 2], table: vec![-0.2, 0.3, 0.6, -0.1] },
            ],
        };
        let env = FactorGraphEnv::new(spec, None).unwrap();
        let backward = UniformBackward;
        let alpha = 0.7;
        let dense = CorrectedReward::dense(&env, &backward, alpha);
        let env2 = env.clone();
        let sparse = CorrectedReward::sparse(
            &env,
            &backward,
            Box::new(move |x| env2.energy_of(x)),
            alpha,
        );
        for traj in enumerate_trajectories(&env, 100, 100).unwrap() {
            let a = dense.trajectory_return(&traj);
            let b = sparse.trajectory_return(&traj);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_aggregate_closed_forms() {
        let r = |v: f64| Residual { value: v, grad: Grad::zero(), tag: ResidualTag::TrajectoryBalance };
        // all-zero residuals: zero loss, zero gradient
        let agg = loss_aggregate(&[r(0.0), r(0.0)], LossKind::Squared).unwrap();
        assert_eq!(agg.loss, 0.0);
        assert!(agg.grad.iter().all(|&g| g == 0.0));
        // single residual under the squared loss
        let agg = loss_aggregate(&[r(3.0)], LossKind::Squared).unwrap();
        assert!((agg.loss - 4.5).abs() < 1e-15);
        // Huber(1) at r = 3: 3 − 0.5 = 2.5
        let agg = loss_aggregate(&[r(3.0)], LossKind::Huber { delta: 1.0 }).unwrap();
        assert!((agg.loss - 2.5).abs() < 1e-15);
        // a non-finite residual is skipped and counted
        let agg = loss_aggregate(
            &[r(1.0), Residual { value: f64::NEG_INFINITY, grad: Grad::zero(), tag: ResidualTag::TrajectoryBalance }],
            LossKind::Squared,
        )
        .unwrap();
        assert_eq!(agg.skipped_nonfinite, 1);
        assert!((agg.loss - 0.5).abs() < 1e-15);
        assert!(loss_aggregate(&[], LossKind::Squared).is_err());
    }

    #[test]
    fn rkl_constant_cost_cancels_with_local_baseline() {
        let sample = |c: f64| RklSample {
            log_pf_sum: Term { value: c, grad: Grad::Sparse(vec![(0, 1.0)]) },
            log_reward: 0.0,
            log_pb_sum: 0.0,
            on_policy: true,
        };
        let batch = [sample(1.3), sample(1.3), sample(1.3)];
        let g = reverse_kl_gradient(&batch, Baseline::Local).unwrap();
        assert!(g.grad.iter().all(|&x| x.abs() < 1e-15));
        // eta = 1 reduces the running average to the local baseline
        let g = reverse_kl_gradient(&batch, Baseline::Global { value: -4.0, eta: 1.0 }).unwrap();
        assert!((g.updated_global.unwrap() - g.batch_mean_cost).abs() < 1e-15);
        // off-policy batches are rejected
        let mut off = [sample(1.0)];
        off[0].on_policy = false;
        assert!(matches!(reverse_kl_gradient(&off, Baseline::Local), Err(ObjectiveError::OffPolicyBatch)));
    }
}
