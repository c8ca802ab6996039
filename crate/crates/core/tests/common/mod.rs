//! Shared fixtures for the integration suites: random layered pointed DAGs
//! and random tabular policy/flow assignments over them.

#![allow(dead_code)]

use std::collections::HashMap;

use dagflow_core::envs::ExplicitEnv;
use dagflow_core::flow::{BackwardPolicy, ForwardPolicy};
use dagflow_core::graph::{enumerate_env, EnvGraph, Next, StateId, TransitionDistribution};
use dagflow_core::rng::{Rng, SeedSequence};
use rand::Rng as _;

/// Random layered pointed DAG: layer 0 is the initial state, consecutive
/// layers are densely-ish wired, every last-layer state terminates, and
/// middle states terminate at random. Rewards are uniform in [0.5, 3.0].
pub fn random_layered_env(rng: &mut Rng, all_terminating: bool) -> ExplicitEnv {
    loop {
        if let Some(env) = try_random_layered_env(rng, all_terminating) {
            return env;
        }
    }
}

fn try_random_layered_env(rng: &mut Rng, all_terminating: bool) -> Option<ExplicitEnv> {
    let layers = 2 + rng.gen_range(0..3); // 2..=4 layers after the root
    let mut sizes = vec![1usize];
    for _ in 0..layers {
        sizes.push(1 + rng.gen_range(0..3));
    }
    let name = |l: usize, i: usize| format!("l{l}n{i}");
    let mut builder = ExplicitEnv::builder();
    for (l, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            builder = builder.state(&name(l, i));
        }
    }
    builder = builder.initial(&name(0, 0));
    let mut edges: Vec<(String, String)> = Vec::new();
    for l in 0..layers {
        for i in 0..sizes[l] {
            for j in 0..sizes[l + 1] {
                if rng.gen::<f64>() < 0.6 {
                    edges.push((name(l, i), name(l + 1, j)));
                }
            }
            // occasional skip edge
            if l + 2 <= layers && rng.gen::<f64>() < 0.25 {
                let j = rng.gen_range(0..sizes[l + 2]);
                edges.push((name(l, i), name(l + 2, j)));
            }
        }
    }
    // every non-root state needs a parent; give orphans one from the layer above
    for l in 1..=layers {
        for j in 0..sizes[l] {
            let target = name(l, j);
            if !edges.iter().any(|(_, t)| *t == target) {
                let i = rng.gen_range(0..sizes[l - 1]);
                edges.push((name(l - 1, i), target));
            }
        }
    }
    // every non-final state needs a child
    for l in 0..layers {
        for i in 0..sizes[l] {
            let source = name(l, i);
            if !edges.iter().any(|(s, _)| *s == source) {
                let j = rng.gen_range(0..sizes[l + 1]);
                edges.push((source, name(l + 1, j)));
            }
        }
    }
    edges.sort();
    edges.dedup();
    for (a, b) in &edges {
        builder = builder.edge(a, b);
    }
    for (l, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let terminal_layer = l == layers;
            let chosen = all_terminating || terminal_layer || (l > 0 && rng.gen::<f64>() < 0.3);
            if chosen && (l > 0 || all_terminating) {
                builder = builder.reward(&name(l, i), rng.gen_range(0.5..3.0));
            }
        }
    }
    builder.build().ok()
}

/// Arbitrary positive state-flow assignment with a consistent forward policy
/// (random logits) and a random fixed backward policy, for residual tests.
pub struct RandomTabular {
    pub log_state_flow: HashMap<StateId, f64>,
    pub forward: HashMap<StateId, Vec<(Next, f64)>>,
    pub backward: HashMap<StateId, Vec<(StateId, f64)>>,
}

impl RandomTabular {
    pub fn generate(env: &dyn EnvGraph, rng: &mut Rng) -> Self {
        let enumerated = enumerate_env(env, 10_000).unwrap();
        let mut log_state_flow = HashMap::new();
        let mut forward = HashMap::new();
        let mut backward = HashMap::new();
        for (i, state) in enumerated.topo_order.iter().enumerate() {
            log_state_flow.insert(state.clone(), rng.gen_range(-1.5..1.5));
            let mut actions: Vec<Next> = enumerated.children[i]
                .iter()
                .map(|&j| Next::State(enumerated.topo_order[j].clone()))
                .collect();
            if enumerated.terminating[i] {
                actions.push(Next::Stop);
            }
            let weights: Vec<f64> = actions.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            forward.insert(
                state.clone(),
                actions.into_iter().zip(weights).map(|(a, w)| (a, w / total)).collect(),
            );
            if i > 0 {
                let parents: Vec<StateId> = enumerated.parents[i]
                    .iter()
                    .map(|&j| enumerated.topo_order[j].clone())
                    .collect();
                let weights: Vec<f64> = parents.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                backward.insert(
                    state.clone(),
                    parents.into_iter().zip(weights).map(|(p, w)| (p, w / total)).collect(),
                );
            }
        }
        RandomTabular { log_state_flow, forward, backward }
    }

    pub fn log_pf(&self, state: &StateId, next: &Next) -> f64 {
        self.forward[state]
            .iter()
            .find(|(a, _)| a == next)
            .map(|(_, p)| p.ln())
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn log_pb(&self, state: &StateId, parent: &StateId) -> f64 {
        self.backward[state]
            .iter()
            .find(|(p, _)| p == parent)
            .map(|(_, p)| p.ln())
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn log_f(&self, state: &StateId) -> f64 {
        self.log_state_flow[state]
    }
}

impl ForwardPolicy for RandomTabular {
    fn distribution(&self, _env: &dyn EnvGraph, state: &StateId) -> TransitionDistribution {
        TransitionDistribution { support: self.forward.get(state).cloned().unwrap_or_default() }
    }
}

impl BackwardPolicy for RandomTabular {
    fn distribution(&self, _env: &dyn EnvGraph, state: &StateId) -> Vec<(StateId, f64)> {
        self.backward.get(state).cloned().unwrap_or_default()
    }
}

use dagflow_core::objectives::{
    db_residual, db_terminal_residual, fl_db_residual, fm_residual, modified_db_residual,
    pcl_residual, pisql_residual, soft_value, sql_residual, subtb_residual,
    subtb_terminal_residual, tb_residual, Residual,
};
use dagflow_core::policy::{Grad, Term};

/// Leaf parameter wrapper: value p[i] with unit gradient on index i.
pub fn leaf(p: &[f64], i: usize) -> Term {
    Term { value: p[i], grad: Grad::Sparse(vec![(i as u32, 1.0)]) }
}

fn grad_entries(grad: &Grad, len: usize) -> Vec<f64> {
    let mut dense = vec![0.0; len];
    grad.axpy_into(1.0, &mut dense);
    dense.truncate(len);
    dense
}

/// Central finite differences (step 1e-5) against the analytic gradient,
/// relative tolerance 1e-4.
pub fn check_gradient(params: &mut Vec<f64>, eval: &dyn Fn(&[f64]) -> Residual) {
    let base = eval(params);
    let analytic = grad_entries(&base.grad, params.len());
    for i in 0..params.len() {
        let eps = 1e-5;
        let saved = params[i];
        params[i] = saved + eps;
        let plus = eval(params).value;
        params[i] = saved - eps;
        let minus = eval(params).value;
        params[i] = saved;
        let fd = (plus - minus) / (2.0 * eps);
        let tol = 1e-4 * fd.abs().max(1.0);
        assert!(
            (fd - analytic[i]).abs() <= tol,
            "param {i}: finite difference {fd} vs analytic {}",
            analytic[i]
        );
    }
}

/// Finite-difference audit of every residual over `cases` random instances.
pub fn gradient_battery(master_seed: u64, cases: u64) {
    let seq = SeedSequence::new(master_seed);
    for case in 0..cases {
        let mut rng = seq.stream(case);
        let mut p: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let r1: f64 = rng.gen_range(-1.0..1.0);
        let r2: f64 = rng.gen_range(-1.0..1.0);
        let alpha = [0.5, 1.0, 2.0][case as usize % 3];

        check_gradient(&mut p, &|p| {
            fm_residual(&[leaf(p, 0), leaf(p, 1)], &[leaf(p, 2), leaf(p, 3)], Some(r1))
        });
        check_gradient(&mut p, &|p| db_residual(&leaf(p, 0), &leaf(p, 1), &leaf(p, 2), r1));
        check_gradient(&mut p, &|p| db_terminal_residual(&leaf(p, 0), &leaf(p, 1), r1));
        check_gradient(&mut p, &|p| {
            tb_residual(&leaf(p, 4), &leaf(p, 5).add(&leaf(p, 6)), r1, r2)
        });
        check_gradient(&mut p, &|p| {
            subtb_residual(&leaf(p, 0), &leaf(p, 7), &leaf(p, 5).add(&leaf(p, 6)), r2)
        });
        check_gradient(&mut p, &|p| {
            subtb_terminal_residual(&leaf(p, 0), &leaf(p, 5).add(&leaf(p, 6)), r1, r2)
        });
        check_gradient(&mut p, &|p| {
            modified_db_residual(r1, r2, &leaf(p, 8), &leaf(p, 9), &leaf(p, 10))
        });
        check_gradient(&mut p, &|p| {
            fl_db_residual(&leaf(p, 0), &leaf(p, 1), &leaf(p, 2), r2, r1, alpha)
        });
        check_gradient(&mut p, &|p| {
            let v = soft_value(&[leaf(p, 3), leaf(p, 11)], alpha);
            sql_residual(&leaf(p, 0), r1, &v)
        });
        check_gradient(&mut p, &|p| {
            pcl_residual(&leaf(p, 0), &leaf(p, 7), &[r1, r2], &[leaf(p, 5), leaf(p, 6)], alpha)
        });
        check_gradient(&mut p, &|p| {
            pisql_residual(r1, &leaf(p, 9), &leaf(p, 8), &leaf(p, 10), alpha)
        });
    }
}

pub struct Instance {
    pub env: ExplicitEnv,
    pub tab: RandomTabular,
    pub energies: HashMap<StateId, f64>,
}

pub fn random_instance(rng: &mut Rng, all_terminating: bool) -> Instance {
    let env = random_layered_env(rng, all_terminating);
    let tab = RandomTabular::generate(&env, rng);
    let enumerated = enumerate_env(&env, 10_000).unwrap();
    let energies = enumerated
        .topo_order
        .iter()
        .map(|s| (s.clone(), rng.gen_range(-1.0..1.0)))
        .collect();
    Instance { env, tab, energies }
}

fn q_of(inst: &Instance, alpha: f64, s: &StateId, next: &Next) -> f64 {
    alpha * (inst.tab.log_f(s) + inst.tab.log_pf(s, next))
}

/// max |Δ_SQL − α Δ_DB| under Q = α log(F P_F), over random instances and
/// α in {0.5, 1, 2}.
pub fn max_sql_db_gap(master_seed: u64, cases: u64) -> f64 {
    let seq = SeedSequence::new(master_seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, false);
        let enumerated = enumerate_env(&inst.env, 10_000).unwrap();
        for alpha in [0.5, 1.0, 2.0] {
            for (i, s) in enumerated.topo_order.iter().enumerate() {
                for &j in &enumerated.children[i] {
                    let s2 = &enumerated.topo_order[j];
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
                    worst = worst.max((sql.value - alpha * db.value).abs());
                }
                if enumerated.terminating[i] {
                    let energy = inst.energies[s];
                    let q = Term::constant(q_of(&inst, alpha, s, &Next::Stop));
                    let sql = sql_residual(&q, -energy, &Term::constant(0.0));
                    let db = db_terminal_residual(
                        &Term::constant(inst.tab.log_f(s)),
                        &Term::constant(inst.tab.log_pf(s, &Next::Stop)),
                        -energy / alpha,
                    );
                    worst = worst.max((sql.value - alpha * db.value).abs());
                }
            }
        }
    }
    worst
}

/// max |Δ_PCL − α Δ_SubTB| under V = α log F, π = P_F, r = α log P_B.
pub fn max_pcl_subtb_gap(master_seed: u64, cases: u64) -> f64 {
    let seq = SeedSequence::new(master_seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = seq.stream(case);
        let inst = random_instance(&mut rng, false);
        let trajectories =
            dagflow_core::flow::enumerate_trajectories(&inst.env, 10_000, 100_000).unwrap();
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
                worst = worst.max((pcl.value - alpha * subtb.value).abs());
            }
        }
    }
    worst
}

/// max |Δ_πSQL − α Δ_MDB| under π = P_F on all-terminating instances.
pub fn max_pisql_mdb_gap(master_seed: u64, cases: u64) -> f64 {
    let seq = SeedSequence::new(master_seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
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
                    worst = worst.max((pisql.value - alpha * mdb.value).abs());
                }
            }
        }
    }
    worst
}
