//! Synthetic Bayesian-network generation, ancestral sampling, and dataset
//! CSV I/O (with optional intervention-mask companions).

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::dag::{apply_edge, initial_dag_state, DagState, EdgeAction};
use crate::rng::Rng;
use crate::scores::{DataKind, Dataset, ScoreError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{0}")]
    Invalid(String),
}

/// Random DAG from a node-order model: draw a uniform node order, then keep
/// each order-respecting edge independently with probability chosen so the
/// expected edge count is `edges_per_node * d`.
pub fn sample_er_dag(d: usize, edges_per_node: f64, rng: &mut Rng) -> DagState {
    assert!(edges_per_node >= 0.0);
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let pairs = (d * (d - 1) / 2) as f64;
    let p = if pairs > 0.0 { (edges_per_node * d as f64 / pairs).min(1.0) } else { 0.0 };
    let mut g = initial_dag_state(d).expect("valid d");
    for i in 0..d {
        for j in (i + 1)..d {
            if rng.gen::<f64>() < p {
                g = apply_edge(&g, EdgeAction::Add { u: order[i], v: order[j] })
                    .expect("order-respecting edges never cycle");
            }
        }
    }
    g
}

/// Linear-Gaussian structural equations X_i := Σ_j θ_ji X_j + ε_i.
#[derive(Debug, Clone)]
pub struct LinGaussBn {
    pub g_star: DagState,
    /// Row-major d x d weights, nonzero only on edges (theta[j][i] weights
    /// the edge j -> i).
    pub theta: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

/// Edge weights drawn standard normal, homoscedastic noise (0.01 default).
pub fn sample_lingauss_bn(g: &DagState, noise_variance: f64, rng: &mut Rng) -> LinGaussBn {
    let d = g.d();
    let mut theta = vec![0.0; d * d];
    for (u, v) in g.edges() {
        // Box-Muller from two uniform draws
        theta[u * d + v] = standard_normal(rng);
    }
    LinGaussBn {
        g_star: g.clone(),
        theta,
        noise_variances: vec![noise_variance; d],
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Categorical Bayesian network with per-configuration CPT rows.
#[derive(Debug, Clone)]
pub struct DiscreteBn {
    pub g_star: DagState,
    pub arity: usize,
    /// cpts[i] has arity^|Pa(i)| rows of `arity` probabilities each.
    pub cpts: Vec<Vec<f64>>,
}

/// CPT rows drawn from a flat Dirichlet (normalized exponentials).
pub fn sample_discrete_bn(g: &DagState, arity: usize, rng: &mut Rng) -> DiscreteBn {
    let d = g.d();
    let mut cpts = Vec::with_capacity(d);
    for i in 0..d {
        let configs = arity.pow(g.parent_set(i).len() as u32);
        let mut table = Vec::with_capacity(configs * arity);
        for _ in 0..configs {
            // Dirichlet(1) row via normalized exponential draws
            let mut row: Vec<f64> = (0..arity)
                .map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln())
                .collect();
            let total: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= total;
            }
            table.extend(row);
        }
        cpts.push(table);
    }
    DiscreteBn { g_star: g.clone(), arity, cpts }
}

fn topological_order(g: &DagState) -> Vec<usize> {
    let d = g.d();
    let mut indegree: Vec<usize> = (0..d).map(|v| g.parent_set(v).len()).collect();
    let mut ready: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).collect();
    ready.sort_unstable();
    let mut order = Vec::with_capacity(d);
    while let Some(&u) = ready.first() {
        ready.remove(0);
        order.push(u);
        for v in 0..d {
            if g.adj.get(u, v) {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    let pos = ready.binary_search(&v).unwrap_err();
                    ready.insert(pos, v);
                }
            }
        }
    }
    order
}

/// N rows sampled by walking a topological order of the structure.
pub fn ancestral_sample_lingauss(bn: &LinGaussBn, n: usize, rng: &mut Rng) -> Dataset {
    assert!(n >= 1);
    let d = bn.g_star.d();
    let order = topological_order(&bn.g_star);
    let mut values = vec![0.0; n * d];
    for row in 0..n {
        for &i in &order {
            let mut x = standard_normal(rng) * bn.noise_variances[i].sqrt();
            for j in bn.g_star.parent_set(i) {
                x += bn.theta[j * d + i] * values[row * d + j];
            }
            values[row * d + i] = x;
        }
    }
    Dataset::continuous(n, d, values).expect("shape by construction")
}

pub fn ancestral_sample_discrete(bn: &DiscreteBn, n: usize, rng: &mut Rng) -> Dataset {
    assert!(n >= 1);
    let d = bn.g_star.d();
    let order = topological_order(&bn.g_star);
    let mut values = vec![0u8; n * d];
    for row in 0..n {
        for &i in &order {
            let parents = bn.g_star.parent_set(i);
            let mut config = 0usize;
            for &p in &parents {
                config = config * bn.arity + values[row * d + p] as usize;
            }
            let cpt = &bn.cpts[i][config * bn.arity..(config + 1) * bn.arity];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = bn.arity - 1;
            for (k, p) in cpt.iter().enumerate() {
                acc += p;
                if u <= acc {
                    chosen = k;
                    break;
                }
            }
            values[row * d + i] = chosen as u8;
        }
    }
    Dataset::categorical(n, d, bn.arity, values).expect("shape by construction")
}

/// Writes a dataset as CSV: a header of variable names, one observation per
/// row. Floats use the shortest round-trip representation, so write-read is
/// bit-stable. An intervention mask, when present, goes to a 0/1 companion.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    let header: Vec<String> = (0..data.d).map(|j| format!("x{j}")).collect();
    writeln!(file, "{}", header.join(","))?;
    for row in 0..data.n {
        let cells: Vec<String> = (0..data.d)
            .map(|col| match data.kind() {
                DataKind::Continuous => format!("{:?}", data.value(row, col)),
                DataKind::Categorical { .. } => format!("{}", data.category(row, col)),
            })
            .collect();
        writeln!(file, "{}", cells.join(","))?;
    }
    if let Some(mask) = data.intervention_mask() {
        let mut mfile = std::fs::File::create(mask_path(path))?;
        writeln!(mfile, "{}", header.join(","))?;
        for row in 0..data.n {
            let cells: Vec<String> = (0..data.d)
                .map(|col| if mask[row * data.d + col] { "1" } else { "0" }.to_string())
                .collect();
            writeln!(mfile, "{}", cells.join(","))?;
        }
    }
    Ok(())
}

fn mask_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.mask.csv"))
}

/// Reads a dataset CSV; a companion `<stem>.mask.csv` is loaded as the
/// intervention mask when present. Categorical files carry integer codes.
pub fn read_csv(path: &Path, kind: DataKind) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let d = reader.headers()?.len();
    let mut continuous = Vec::new();
    let mut categorical = Vec::new();
    let mut n = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(DataError::Parse {
                row: row_idx + 1,
                col: record.len(),
                message: format!("expected {d} cells, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            match kind {
                DataKind::Continuous => {
                    let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                        row: row_idx + 1,
                        col,
                        message: format!("not a real number: '{cell}'"),
                    })?;
                    continuous.push(v);
                }
                DataKind::Categorical { arity } => {
                    let v: usize = cell.trim().parse().map_err(|_| DataError::Parse {
                        row: row_idx + 1,
                        col,
                        message: format!("not an integer code: '{cell}'"),
                    })?;
                    if v >= arity {
                        return Err(DataError::Parse {
                            row: row_idx + 1,
                            col,
                            message: format!("code {v} out of range for arity {arity}"),
                        });
                    }
                    categorical.push(v as u8);
                }
            }
        }
        n += 1;
    }
    let mut data = match kind {
        DataKind::Continuous => Dataset::continuous(n, d, continuous)?,
        DataKind::Categorical { arity } => Dataset::categorical(n, d, arity, categorical)?,
    };
    let mpath = mask_path(path);
    if mpath.exists() {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(&mpath)?;
        let mut mask = Vec::with_capacity(n * d);
        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            for (col, cell) in record.iter().enumerate() {
                match cell.trim() {
                    "0" => mask.push(false),
                    "1" => mask.push(true),
                    other => {
                        return Err(DataError::Parse {
                            row: row_idx + 1,
                            col,
                            message: format!("mask cell must be 0 or 1, got '{other}'"),
                        })
                    }
                }
            }
        }
        data = data.with_interventions(mask)?;
    }
    Ok(data)
}
