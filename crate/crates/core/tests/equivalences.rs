//! The control/flow equivalence battery over random tabular instances, the
//! finite-difference gradient audit of every residual, and the gradient-level
//! identity between on-policy trajectory balance and the reverse-KL
//! surrogate with a running-average baseline.

mod common;

use std::collections::HashMap;

use dagflow_core::dag::{state_from_key, DagEnv};
use dagflow_core::envs::fixtures;
use dagflow_core::flow::{enumerate_trajectories, trajectory_logprob, Direction, UniformBackward, BackwardPolicy};
use dagflow_core::graph::{enumerate_env, EnvGraph, Next, StateId};
use dagflow_core::objectives::{
    db_residual, db_terminal_residual, fl_db_residual, fm_residual, loss_aggregate,
    modified_db_residual, pcl_residual, pisql_residual, reverse_kl_gradient, soft_value,
    sql_residual, subtb_residual, tb_residual, Baseline, LossKind, RklSample,
};
use dagflow_core::policy::Term;
use dagflow_core::rng::{Rng, SeedSequence};
use rand::Rng as _;

#[test]
fn every_residual_gradient_survives_finite_differences() {
    common::gradient_battery(41, 100);
}

struct Instance {
    env: dagflow_core::envs::ExplicitEnv,
    tab: common::RandomTabular,
    energies: HashMap<StateId, f64>,
}

fn random_instance(rng: &mut Rng, all_terminating: bool) -> Instance {
    let env = common::random_layered_env(rng, all_terminating);
    let tab = common::RandomTabular::generate(&env, rng);
    let enumerated = enumerate_env(&env, 10_000).unwrap();
    let energies = enumerated
        .topo_order
        .iter()
        .map(|s| (s.clone(), rng.gen_range(-1.0..1.0)))
        .collect();
    Instance { env, tab, energies }
}

/// Q-values derived from the correspondence Q = α log(F · P_F), so the soft
/// value of a state equals α log F of that state.
fn q_of(inst: &Instance, alpha: f64, s: &StateId, next: &Next) -> f64 {
    alpha * (inst.tab.log_f(s) + inst.tab.log_pf(s, next))
}

#[test]
fn sql_matches_alpha_db_on_random_instances() {
    let seq = SeedSequence::new(42);
    for case in 0..200u64 {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, false);
        let enumerated = enumerate_env(&inst.env, 10_000).unwrap();
        for alpha in [0.5, 1.0, 2.0] {
            for (i, s) in enumerated.topo_order.iter().enumerate() {
                for &j in &enumerated.children[i] {
                    let s2 = &enumerated.topo_order[j];
                    // soft value of s2 over its children from the Q correspondence
                    let mut qs: Vec<Term> = enumerated.children[j]
                        .iter()
                        .map(|&k| {
                            Term::constant(q_of(
                                &inst,
                                alpha,
                                s2,
                                &Next::State(enumerated.topo_order[k].clone()),
                            ))
                        })
                        .collect();
                    if enumerated.terminating[j] {
                        qs.push(Term::constant(q_of(&inst, alpha, s2, &Next::Stop)));
                    }
                    let v_next = soft_value(&qs, alpha);
                    let log_pb = inst.tab.log_pb(s2, s);
                    let q = Term::constant(q_of(&inst, alpha, s, &Next::State(s2.clone())));
                    let sql = sql_residual(&q, alpha * log_pb, &v_next);
                    let db = db_residual(
                        &Term::constant(inst.tab.log_f(s)),
                        &Term::constant(inst.tab.log_pf(s, &Next::State(s2.clone()))),
                        &Term::constant(v_next.value / alpha),
                        log_pb,
                    );
                    assert!(
                        (sql.value - alpha * db.value).abs() <= 1e-10,
                        "case {case} alpha {alpha}: {} vs {}",
                        sql.value,
                        alpha * db.value
                    );
                }
                // terminal transition with energy E = -alpha log R
                if enumerated.terminating[i] {
                    let energy = inst.energies[s];
                    let q = Term::constant(q_of(&inst, alpha, s, &Next::Stop));
                    let sql = sql_residual(&q, -energy, &Term::constant(0.0));
                    let db = db_terminal_residual(
                        &Term::constant(inst.tab.log_f(s)),
                        &Term::constant(inst.tab.log_pf(s, &Next::Stop)),
                        -energy / alpha,
                    );
                    assert!((sql.value - alpha * db.value).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn pcl_matches_alpha_subtb_on_random_segments() {
    let seq = SeedSequence::new(43);
    for case in 0..200u64 {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, false);
        let trajectories = enumerate_trajectories(&inst.env, 10_000, 100_000).unwrap();
        for alpha in [0.5, 1.0, 2.0] {
            for traj in trajectories.iter().take(12) {
                let n = traj.states.len();
                if n < 2 {
                    continue;
                }
                let a = rng.gen_range(0..n - 1);
                let b = rng.gen_range(a + 1..n);
                let segment = &traj.states[a..=b];
                let mut log_pf_sum = 0.0;
                let mut log_pb_sum = 0.0;
                let mut rewards = Vec::new();
                let mut log_pis = Vec::new();
                for w in segment.windows(2) {
                    let lp = inst.tab.log_pf(&w[0], &Next::State(w[1].clone()));
                    let lb = inst.tab.log_pb(&w[1], &w[0]);
                    log_pf_sum += lp;
                    log_pb_sum += lb;
                    rewards.push(alpha * lb);
                    log_pis.push(Term::constant(lp));
                }
                let v_m = Term::constant(alpha * inst.tab.log_f(&segment[0]));
                let v_n = Term::constant(alpha * inst.tab.log_f(segment.last().unwrap()));
                let pcl = pcl_residual(&v_m, &v_n, &rewards, &log_pis, alpha);
                let subtb = subtb_residual(
                    &Term::constant(inst.tab.log_f(&segment[0])),
                    &Term::constant(inst.tab.log_f(segment.last().unwrap())),
                    &Term::constant(log_pf_sum),
                    log_pb_sum,
                );
                assert!(
                    (pcl.value - alpha * subtb.value).abs() <= 1e-10,
                    "case {case}: {} vs {}",
                    pcl.value,
                    alpha * subtb.value
                );
            }
        }
    }
}

#[test]
fn pcl_on_complete_trajectories_matches_alpha_tb() {
    // V(s0) parametrized as α log Z reduces path consistency to trajectory
    // balance on complete trajectories
    let seq = SeedSequence::new(44);
    for case in 0..50u64 {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, false);
        let log_z: f64 = rng.gen_range(-1.0..1.0);
        let alpha = 1.5;
        for traj in enumerate_trajectories(&inst.env, 10_000, 100_000).unwrap().iter().take(8) {
            let mut rewards = Vec::new();
            let mut log_pis = Vec::new();
            let mut log_pf_sum = 0.0;
            let mut log_pb_sum = 0.0;
            for w in traj.states.windows(2) {
                let lb = inst.tab.log_pb(&w[1], &w[0]);
                rewards.push(alpha * lb);
                log_pb_sum += lb;
                let lp = inst.tab.log_pf(&w[0], &Next::State(w[1].clone()));
                log_pis.push(Term::constant(lp));
                log_pf_sum += lp;
            }
            // the terminal step carries the energy
            let energy = inst.energies[traj.endpoint()];
            rewards.push(-energy);
            let stop_lp = inst.tab.log_pf(traj.endpoint(), &Next::Stop);
            log_pis.push(Term::constant(stop_lp));
            log_pf_sum += stop_lp;
            let pcl = pcl_residual(
                &Term::constant(alpha * log_z),
                &Term::constant(0.0),
                &rewards,
                &log_pis,
                alpha,
            );
            let tb = tb_residual(
                &Term::constant(log_z),
                &Term::constant(log_pf_sum),
                -energy / alpha,
                log_pb_sum,
            );
            assert!((pcl.value - alpha * tb.value).abs() <= 1e-10);
        }
    }
}

#[test]
fn pisql_matches_alpha_mdb_on_all_terminating_instances() {
    let seq = SeedSequence::new(45);
    for case in 0..200u64 {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, true);
        let enumerated = enumerate_env(&inst.env, 10_000).unwrap();
        for alpha in [0.5, 1.0, 2.0] {
            for (i, s) in enumerated.topo_order.iter().enumerate() {
                for &j in &enumerated.children[i] {
                    let s2 = &enumerated.topo_order[j];
                    let log_pb = inst.tab.log_pb(s2, s);
                    let e_s = inst.energies[s];
                    let e_s2 = inst.energies[s2];
                    let r = e_s - e_s2 + alpha * log_pb;
                    let edge = Term::constant(inst.tab.log_pf(s, &Next::State(s2.clone())));
                    let stop_s = Term::constant(inst.tab.log_pf(s, &Next::Stop));
                    let stop_s2 = Term::constant(inst.tab.log_pf(s2, &Next::Stop));
                    let pisql = pisql_residual(r, &edge, &stop_s, &stop_s2, alpha);
                    let delta = -e_s2 / alpha - (-e_s / alpha);
                    let mdb = modified_db_residual(delta, log_pb, &stop_s, &edge, &stop_s2);
                    assert!(
                        (pisql.value - alpha * mdb.value).abs() <= 1e-10,
                        "case {case} alpha {alpha}"
                    );
                }
            }
        }
    }
}

#[test]
fn fl_db_matches_scaled_sql_with_dense_rewards() {
    use dagflow_core::envs::{Factor, FactorGraphEnv, FactorSpec};
    let seq = SeedSequence::new(46);
    for case in 0..200u64 {
        let mut rng = seq.stream(case);
        let spec = FactorSpec {
            d: 3,
            arity: 2,
            factors: vec![
                Factor { vars: vec![0], table: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect() },
                Factor {
                    vars: vec![0, 1],
                    table: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                },
                Factor {
                    vars: vec![1, 2],
                    table: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                },
            ],
        };
        let env = FactorGraphEnv::new(spec, None).unwrap();
        let tab = common::RandomTabular::generate(&env, &mut rng);
        let enumerated = enumerate_env(&env, 10_000).unwrap();
        let alpha = [0.5, 1.0, 2.0][case as usize % 3];
        // offset flows are arbitrary positives; reuse the tabular state flows
        for (i, s) in enumerated.topo_order.iter().enumerate() {
            for &j in &enumerated.children[i] {
                let s2 = &enumerated.topo_order[j];
                let log_pb = 0.0; // tree
                let inc = dagflow_core::envs::DecomposableEnergy::step_energy(&env, s, s2);
                // SQL under Q̃ = α log(F̃ P_F), dense corrected reward
                let mut qs: Vec<Term> = enumerated.children[j]
                    .iter()
                    .map(|&k| {
                        Term::constant(
                            alpha
                                * (tab.log_f(s2)
                                    + tab.log_pf(
                                        s2,
                                        &Next::State(enumerated.topo_order[k].clone()),
                                    )),
                        )
                    })
                    .collect();
                if enumerated.terminating[j] {
                    qs.push(Term::constant(
                        alpha * (tab.log_f(s2) + tab.log_pf(s2, &Next::Stop)),
                    ));
                }
                let v_next = soft_value(&qs, alpha);
                let q = Term::constant(
                    alpha * (tab.log_f(s) + tab.log_pf(s, &Next::State(s2.clone()))),
                );
                let r = -inc + alpha * log_pb;
                let sql = sql_residual(&q, r, &v_next);
                // the correspondence fixes V(s') = α log F̃(s')
                let fl_aligned = fl_db_residual(
                    &Term::constant(tab.log_f(s)),
                    &Term::constant(tab.log_pf(s, &Next::State(s2.clone()))),
                    &Term::constant(v_next.value / alpha),
                    log_pb,
                    inc,
                    alpha,
                );
                assert!((sql.value - alpha * fl_aligned.value).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn tb_gradient_equals_reverse_kl_with_logz_baseline() {
    // on-policy: mean(Δ·∇logPF) with Δ = logZ + c equals the score-function
    // gradient with the fixed control variate b = −logZ
    let env = fixtures::double_path_env([0.2, -0.4, 0.9]);
    let backward = UniformBackward;
    let mut policy = dagflow_core::policy::TabularPolicy::new();
    let seq = SeedSequence::new(47);
    let mut rng = seq.stream(0);
    // randomize the visited logits
    for name in ["s0", "s1", "s2"] {
        let s = env.state(name);
        policy.ensure_state(&env, &s);
    }
    for v in policy.params_vec_mut().iter_mut() {
        *v = rng.gen_range(-0.7..0.7);
    }
    let log_z: f64 = 0.31;
    let mut trajectories = Vec::new();
    for k in 0..64 {
        let mut r = seq.stream(100 + k);
        trajectories
            .push(dagflow_core::flow::sample_trajectory(&env, &policy, &mut r).unwrap());
    }
    let mut residuals = Vec::new();
    let mut samples = Vec::new();
    for traj in &trajectories {
        let mut log_pf = Term::constant(0.0);
        for w in traj.states.windows(2) {
            log_pf = log_pf.add(&policy.log_prob_grad(&env, &w[0], &Next::State(w[1].clone())));
        }
        log_pf = log_pf.add(&policy.log_prob_grad(&env, traj.endpoint(), &Next::Stop));
        let mut log_pb = 0.0;
        for w in traj.states.windows(2) {
            log_pb += backward.log_prob(&env, &w[1], &w[0]);
        }
        let log_r = env.log_reward(traj.endpoint());
        residuals.push(tb_residual(&Term::constant(log_z), &log_pf, log_r, log_pb));
        samples.push(RklSample { log_pf_sum: log_pf, log_reward: log_r, log_pb_sum: log_pb, on_policy: true });
    }
    let tb = loss_aggregate(&residuals, LossKind::Squared).unwrap();
    let rkl = reverse_kl_gradient(&samples, Baseline::Global { value: -log_z, eta: 0.05 }).unwrap();
    let n = tb.grad.len().max(rkl.grad.len());
    for i in 0..n {
        let a = tb.grad.get(i).copied().unwrap_or(0.0);
        let b = rkl.grad.get(i).copied().unwrap_or(0.0);
        assert!((a - b).abs() <= 1e-8, "index {i}: {a} vs {b}");
    }
    // and the logZ gradient step mirrors the running-average update with
    // eta = lr: d(loss)/d(logZ) = logZ − b_local
    let z_grad: f64 = residuals.iter().map(|r| r.value).sum::<f64>() / residuals.len() as f64;
    assert!((z_grad - (log_z + rkl.batch_mean_cost)).abs() < 1e-12);
}

#[test]
fn tb_convergence_bounds_hold_for_any_parameters() {
    // |log Z_φ − log Z| ≤ max_τ |Δ_TB| and the 2-max per-state bound are
    // identities; spot-check them on random policies over the braid fixture
    let env = fixtures::two_sink_env(2.0, 3.0);
    let backward = UniformBackward;
    let seq = SeedSequence::new(48);
    let trajectories = enumerate_trajectories(&env, 100, 100).unwrap();
    let log_z_true = 5.0f64.ln();
    for case in 0..50u64 {
        let mut rng = seq.stream(case);
        let tab = common::RandomTabular::generate(&env, &mut rng);
        let log_z_model: f64 = rng.gen_range(-1.0..3.0);
        let mut max_abs = 0.0f64;
        for traj in &trajectories {
            let log_pf = trajectory_logprob(traj, &env, Some(&tab), None, Direction::Forward);
            let log_pb = trajectory_logprob(traj, &env, None, Some(&backward), Direction::Backward);
            let log_r = env.log_reward(traj.endpoint());
            let residual =
                tb_residual(&Term::constant(log_z_model), &Term::constant(log_pf), log_r, log_pb);
            max_abs = max_abs.max(residual.value.abs());
        }
        assert!((log_z_model - log_z_true).abs() <= max_abs + 1e-12);
        let dp = dagflow_core::flow::terminating_distribution_dp(&env, &tab, 100).unwrap();
        for (state, p) in &dp {
            let target = env.log_reward(state) - log_z_true;
            assert!((p.ln() - target).abs() <= 2.0 * max_abs + 1e-12);
        }
    }
}

#[test]
fn modified_db_residuals_vanish_at_the_solved_policy() {
    use dagflow_core::exact::solve_forward_policy;
    let env = DagEnv::uniform(3).unwrap();
    let backward = UniformBackward;
    let exact = solve_forward_policy(&env, &backward, 1000).unwrap();
    let enumerated = enumerate_env(&env, 1000).unwrap();
    for (i, s) in enumerated.topo_order.iter().enumerate() {
        for &j in &enumerated.children[i] {
            let s2 = &enumerated.topo_order[j];
            let g = state_from_key(s, 3);
            let g2 = state_from_key(s2, 3);
            let delta = env.log_reward(s2) - env.log_reward(s);
            let log_pb = -(g2.edge_count() as f64).ln();
            let residual = modified_db_residual(
                delta,
                log_pb,
                &Term::constant(exact.log_probs[&(s.clone(), Next::Stop)]),
                &Term::constant(exact.log_probs[&(s.clone(), Next::State(s2.clone()))]),
                &Term::constant(exact.log_probs[&(s2.clone(), Next::Stop)]),
            );
            assert!(residual.value.abs() < 1e-9, "transition {g:?} -> {g2:?}");
        }
    }
    // symmetric graphs get symmetric stop probabilities under uniform reward
    let stops: Vec<f64> = enumerated
        .topo_order
        .iter()
        .filter(|s| state_from_key(s, 3).edge_count() == 1)
        .map(|s| exact.log_probs[&(s.clone(), Next::Stop)])
        .collect();
    for w in stops.windows(2) {
        assert!((w[0] - w[1]).abs() < 1e-9);
    }
}

#[test]
fn fm_residual_matches_direct_recomputation_on_random_flows() {
    // independent recomputation: ln Σ in − ln(Σ out + R), linear domain
    let env = DagEnv::uniform(3).unwrap();
    let enumerated = enumerate_env(&env, 1000).unwrap();
    let seq = SeedSequence::new(49);
    let mut rng = seq.stream(0);
    for _ in 0..50 {
        // random positive edge flows over the whole env
        let mut flows: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, _) in enumerated.topo_order.iter().enumerate() {
            for &j in &enumerated.children[i] {
                flows.insert((i, j), rng.gen_range(0.1..2.0));
            }
        }
        for (i, state) in enumerated.topo_order.iter().enumerate() {
            if i == 0 {
                continue;
            }
            let reward = env.log_reward(state).exp();
            let in_terms: Vec<Term> = enumerated.parents[i]
                .iter()
                .map(|&p| Term::constant(flows[&(p, i)].ln()))
                .collect();
            let out_terms: Vec<Term> = enumerated.children[i]
                .iter()
                .map(|&c| Term::constant(flows[&(i, c)].ln()))
                .collect();
            let residual = fm_residual(&in_terms, &out_terms, Some(reward.ln()));
            let inflow: f64 = enumerated.parents[i].iter().map(|&p| flows[&(p, i)]).sum();
            let outflow: f64 =
                enumerated.children[i].iter().map(|&c| flows[&(i, c)]).sum::<f64>() + reward;
            let direct = inflow.ln() - outflow.ln();
            assert!((residual.value - direct).abs() < 1e-12);
        }
    }
}
