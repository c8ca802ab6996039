//! Discrete flow-network engine over pointed DAG state spaces, with a
//! Bayesian structure-learning application: BGe/BDe scores, an edge-by-edge
//! DAG environment, balance-condition objectives and their entropy-regularized
//! control counterparts, training loops, MCMC baselines, and exact
//! enumeration oracles for desk-scale verification.

pub mod baselines;
pub mod dag;
pub mod data;
pub mod envs;
pub mod exact;
pub mod flow;
pub mod graph;
pub mod num;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod scores;
pub mod trainer;
