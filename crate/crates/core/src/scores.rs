//! Modular Bayesian scores over DAG families: the Gaussian (BGe) and
//! Dirichlet (BDe) marginal likelihoods with per-family memoization, graph
//! priors, the modular log-reward, and delta scores.

use std::collections::HashMap;
use std::sync::RwLock;

use thiserror::Error;

use crate::dag::{action_mask, DagState, EdgeAction};
use crate::num::{cholesky_log_det, ln_gamma};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset kind does not match the score")]
    KindMismatch,
    #[error("category index {value} out of range for arity {arity}")]
    CategoryOutOfRange { value: usize, arity: usize },
    #[error("hyperparameter out of range: {0}")]
    BadHyper(String),
    #[error("posterior scatter submatrix is not positive definite")]
    NotPositiveDefinite,
    #[error("action ({u}, {v}) is invalid for this graph")]
    InvalidAction { u: usize, v: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Continuous,
    Categorical { arity: usize },
}

#[derive(Debug, Clone)]
enum DataValues {
    Continuous(Vec<f64>),
    Categorical(Vec<u8>),
}

/// N x d observation matrix, with an optional per-entry intervention mask
/// (entry true = that variable was intervened in that sample, so the sample
/// is dropped from the counts of that child).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    kind: DataKind,
    values: DataValues,
    intervention: Option<Vec<bool>>,
}

impl Dataset {
    pub fn continuous(n: usize, d: usize, values: Vec<f64>) -> Result<Self, ScoreError> {
        if values.len() != n * d {
            return Err(ScoreError::Shape(format!("{} values for {n}x{d}", values.len())));
        }
        Ok(Dataset { n, d, kind: DataKind::Continuous, values: DataValues::Continuous(values), intervention: None })
    }

    pub fn categorical(n: usize, d: usize, arity: usize, values: Vec<u8>) -> Result<Self, ScoreError> {
        if values.len() != n * d {
            return Err(ScoreError::Shape(format!("{} values for {n}x{d}", values.len())));
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize >= arity) {
            return Err(ScoreError::CategoryOutOfRange { value: v as usize, arity });
        }
        Ok(Dataset { n, d, kind: DataKind::Categorical { arity }, values: DataValues::Categorical(values), intervention: None })
    }

    pub fn with_interventions(mut self, mask: Vec<bool>) -> Result<Self, ScoreError> {
        if mask.len() != self.n * self.d {
            return Err(ScoreError::Shape("intervention mask shape".into()));
        }
        self.intervention = Some(mask);
        Ok(self)
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        match &self.values {
            DataValues::Continuous(v) => v[row * self.d + col],
            DataValues::Categorical(v) => v[row * self.d + col] as f64,
        }
    }

    pub fn category(&self, row: usize, col: usize) -> u8 {
        match &self.values {
            DataValues::Categorical(v) => v[row * self.d + col],
            DataValues::Continuous(_) => panic!("categorical access on continuous data"),
        }
    }

    pub fn is_intervened(&self, row: usize, col: usize) -> bool {
        self.intervention
            .as_ref()
            .map(|m| m[row * self.d + col])
            .unwrap_or(false)
    }

    pub fn has_interventions(&self) -> bool {
        self.intervention.is_some()
    }

    pub fn intervention_mask(&self) -> Option<&[bool]> {
        self.intervention.as_deref()
    }

    /// Zero-mean unit-variance per column (continuous data only). Columns
    /// with zero variance are left centered but unscaled.
    pub fn standardized(&self) -> Result<Dataset, ScoreError> {
        let values = match &self.values {
            DataValues::Continuous(v) => v,
            DataValues::Categorical(_) => return Err(ScoreError::KindMismatch),
        };
        let mut out = values.clone();
        for j in 0..self.d {
            let mean: f64 = (0..self.n).map(|i| values[i * self.d + j]).sum::<f64>() / self.n as f64;
            let var: f64 = (0..self.n)
                .map(|i| (values[i * self.d + j] - mean).powi(2))
                .sum::<f64>()
                / self.n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.n {
                out[i * self.d + j] = (values[i * self.d + j] - mean) / scale;
            }
        }
        let mut ds = Dataset::continuous(self.n, self.d, out)?;
        ds.intervention = self.intervention.clone();
        Ok(ds)
    }
}

/// A per-family log marginal-likelihood term.
pub trait LocalScorer: Sync + Send {
    fn d(&self) -> usize;
    fn local_score(&self, child: usize, parents: &[usize]) -> Result<f64, ScoreError>;
}

/// Normal-Wishart marginal likelihood hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct BgeHyper {
    pub alpha_mu: f64,
    pub alpha_w: f64,
}

impl BgeHyper {
    /// The addendum defaults: alpha_mu = 1, alpha_w = d + 2.
    pub fn default_for(d: usize) -> Self {
        BgeHyper { alpha_mu: 1.0, alpha_w: d as f64 + 2.0 }
    }
}

/// Gaussian score. Precomputes the posterior scatter matrix R once per
/// effective sample set (one shared matrix without interventions, one per
/// child with them).
pub struct BgeScore {
    d: usize,
    n_eff: Vec<usize>,
    /// Row-major d x d scatter per child (shared when no interventions).
    r_mats: Vec<Vec<f64>>,
    hyper: BgeHyper,
}

impl BgeScore {
    pub fn new(data: &Dataset, hyper: BgeHyper) -> Result<Self, ScoreError> {
        if data.kind() != DataKind::Continuous {
            return Err(ScoreError::KindMismatch);
        }
        if data.n == 0 {
            return Err(ScoreError::EmptyDataset);
        }
        if hyper.alpha_mu <= 0.0 {
            return Err(ScoreError::BadHyper(format!("alpha_mu = {}", hyper.alpha_mu)));
        }
        if hyper.alpha_w <= data.d as f64 + 1.0 {
            return Err(ScoreError::BadHyper(format!(
                "alpha_w = {} must exceed d + 1 = {}",
                hyper.alpha_w,
                data.d + 1
            )));
        }
        let d = data.d;
        let mut n_eff = Vec::with_capacity(d);
        let mut r_mats = Vec::with_capacity(d);
        for child in 0..d {
            let rows: Vec<usize> = (0..data.n)
                .filter(|&i| !data.is_intervened(i, child))
                .collect();
            if rows.is_empty() {
                return Err(ScoreError::EmptyDataset);
            }
            n_eff.push(rows.len());
            r_mats.push(Self::scatter(data, &rows, hyper));
            if !data.has_interventions() {
                // all children share the same sample set
                let shared = r_mats.pop().unwrap();
                let n = n_eff.pop().unwrap();
                for _ in 0..d {
                    r_mats.push(shared.clone());
                    n_eff.push(n);
                }
                break;
            }
        }
        Ok(BgeScore { d, n_eff, r_mats, hyper })
    }

    /// R = t I + Σ (x - x̄)(x - x̄)ᵀ + N αμ/(N + αμ) x̄ x̄ᵀ over the given rows.
    fn scatter(data: &Dataset, rows: &[usize], hyper: BgeHyper) -> Vec<f64> {
        let d = data.d;
        let n = rows.len() as f64;
        let t = hyper.alpha_mu * (hyper.alpha_w - d as f64 - 1.0) / (hyper.alpha_mu + 1.0);
        let mut mean = vec![0.0; d];
        for &i in rows {
            for j in 0..d {
                mean[j] += data.value(i, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut r = vec![0.0; d * d];
        for &i in rows {
            for a in 0..d {
                let da = data.value(i, a) - mean[a];
                for b in 0..d {
                    r[a * d + b] += da * (data.value(i, b) - mean[b]);
                }
            }
        }
        let shrink = n * hyper.alpha_mu / (n + hyper.alpha_mu);
        for a in 0..d {
            for b in 0..d {
                r[a * d + b] += shrink * mean[a] * mean[b];
            }
            r[a * d + a] += t;
        }
        r
    }

    fn sub_log_det(&self, child: usize, idx: &[usize]) -> Result<f64, ScoreError> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let d = self.d;
        let n = idx.len();
        let mut sub = vec![0.0; n * n];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub[a * n + b] = self.r_mats[child][i * d + j];
            }
        }
        cholesky_log_det(&sub, n).ok_or(ScoreError::NotPositiveDefinite)
    }
}

impl LocalScorer for BgeScore {
    fn d(&self) -> usize {
        self.d
    }

    fn local_score(&self, child: usize, parents: &[usize]) -> Result<f64, ScoreError> {
        let d = self.d as f64;
        let n = self.n_eff[child] as f64;
        let l = parents.len() as f64;
        let h = self.hyper;
        let t = h.alpha_mu * (h.alpha_w - d - 1.0) / (h.alpha_mu + 1.0);
        let mut with_child = parents.to_vec();
        with_child.push(child);
        let gamma_part = 0.5 * (h.alpha_mu.ln() - (n + h.alpha_mu).ln())
            + ln_gamma(0.5 * (n + h.alpha_w - d + l + 1.0))
            - ln_gamma(0.5 * (h.alpha_w - d + l + 1.0))
            - 0.5 * n * std::f64::consts::PI.ln()
            + 0.5 * (h.alpha_w - d + 2.0 * l + 1.0) * t.ln();
        let det_part = 0.5 * (n + h.alpha_w - d + l) * self.sub_log_det(child, parents)?
            - 0.5 * (n + h.alpha_w - d + l + 1.0) * self.sub_log_det(child, &with_child)?;
        Ok(gamma_part + det_part)
    }
}

/// Dirichlet-multinomial hyperparameters (BDeu when the prior joint is
/// uniform, equivalent sample size N').
#[derive(Debug, Clone, Copy)]
pub struct BdeHyper {
    pub equivalent_sample_size: f64,
    pub arity: usize,
}

impl BdeHyper {
    pub fn bdeu(arity: usize) -> Self {
        BdeHyper { equivalent_sample_size: 1.0, arity }
    }
}

pub struct BdeScore {
    data: Dataset,
    hyper: BdeHyper,
}

impl BdeScore {
    pub fn new(data: &Dataset, hyper: BdeHyper) -> Result<Self, ScoreError> {
        match data.kind() {
            DataKind::Categorical { arity } if arity == hyper.arity => {}
            DataKind::Categorical { .. } => return Err(ScoreError::BadHyper("arity mismatch".into())),
            DataKind::Continuous => return Err(ScoreError::KindMismatch),
        }
        if hyper.equivalent_sample_size <= 0.0 {
            return Err(ScoreError::BadHyper("equivalent sample size must be positive".into()));
        }
        Ok(BdeScore { data: data.clone(), hyper })
    }
}

impl LocalScorer for BdeScore {
    fn d(&self) -> usize {
        self.data.d
    }

    fn local_score(&self, child: usize, parents: &[usize]) -> Result<f64, ScoreError> {
        let k = self.hyper.arity;
        let l = parents.len() as u32;
        let configs = k.pow(l);
        // counts[u * k + c]: child value c under parent configuration u
        let mut counts = vec![0u32; configs * k];
        for row in 0..self.data.n {
            if self.data.is_intervened(row, child) {
                continue;
            }
            let mut u = 0usize;
            for &p in parents {
                u = u * k + self.data.category(row, p) as usize;
            }
            counts[u * k + self.data.category(row, child) as usize] += 1;
        }
        let prior_ku = self.hyper.equivalent_sample_size / (configs * k) as f64;
        let prior_u = self.hyper.equivalent_sample_size / configs as f64;
        let mut total = 0.0;
        for u in 0..configs {
            let n_u: u32 = counts[u * k..(u + 1) * k].iter().sum();
            if n_u == 0 {
                continue; // the Gamma ratios cancel exactly
            }
            total += ln_gamma(prior_u) - ln_gamma(prior_u + n_u as f64);
            for c in 0..k {
                let n_ku = counts[u * k + c];
                if n_ku > 0 {
                    total += ln_gamma(prior_ku + n_ku as f64) - ln_gamma(prior_ku);
                }
            }
        }
        Ok(total)
    }
}

/// Log prior over structures.
#[derive(Debug, Clone, Copy)]
pub enum GraphPrior {
    Uniform,
    /// log P(G) = -beta * |edges|
    EdgePenalty { beta: f64 },
}

impl GraphPrior {
    pub fn log_prior(&self, g: &DagState) -> f64 {
        match self {
            GraphPrior::Uniform => 0.0,
            GraphPrior::EdgePenalty { beta } => -beta * g.edge_count() as f64,
        }
    }
}

/// Memoized per-family scores. Reads may run concurrently; insertions are
/// serialized behind the lock.
pub struct LocalScoreCache {
    scorer: Box<dyn LocalScorer>,
    cache: RwLock<HashMap<(usize, Vec<usize>), f64>>,
}

impl LocalScoreCache {
    pub fn new(scorer: Box<dyn LocalScorer>) -> Self {
        LocalScoreCache { scorer, cache: RwLock::new(HashMap::new()) }
    }

    pub fn d(&self) -> usize {
        self.scorer.d()
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn local(&self, child: usize, parents: &[usize]) -> Result<f64, ScoreError> {
        let mut key_parents = parents.to_vec();
        key_parents.sort_unstable();
        let key = (child, key_parents);
        if let Some(&v) = self.cache.read().unwrap().get(&key) {
            return Ok(v);
        }
        let v = self.scorer.local_score(child, &key.1)?;
        self.cache.write().unwrap().insert(key, v);
        Ok(v)
    }
}

/// Modular log-reward: Σ_j LocalScore(X_j | Pa_G(X_j)) + log P(G).
pub fn log_reward(
    g: &DagState,
    cache: &LocalScoreCache,
    prior: GraphPrior,
) -> Result<f64, ScoreError> {
    let mut total = prior.log_prior(g);
    for child in 0..g.d() {
        total += cache.local(child, &g.parent_set(child))?;
    }
    Ok(total)
}

/// Score change from one edge addition: a single local-score difference.
pub fn delta_score(
    g: &DagState,
    action: EdgeAction,
    cache: &LocalScoreCache,
) -> Result<f64, ScoreError> {
    let (u, v) = match action {
        EdgeAction::Add { u, v } => (u, v),
        EdgeAction::Stop => return Err(ScoreError::InvalidAction { u: 0, v: 0 }),
    };
    if !action_mask(g, None).get(u, v) {
        return Err(ScoreError::InvalidAction { u, v });
    }
    let parents = g.parent_set(v);
    let mut extended = parents.clone();
    extended.push(u);
    extended.sort_unstable();
    Ok(cache.local(v, &extended)? - cache.local(v, &parents)?)
}
