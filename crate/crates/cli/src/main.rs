//! `dagflow`: reproducible experiments over the flow-sampler engine.
//! Subcommands: gen-data, train, evaluate, baseline, enumerate.
//! Exit codes: 0 success, 2 argument error, 3 runtime failure.

mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dagflow_core::dag::{state_from_key, DagEnv, DagState};
use dagflow_core::data;
use dagflow_core::envs::{galton_env, ExplicitEnv};
use dagflow_core::exact::{
    self, correlation_report, estimate_log_pftop, exact_posterior, features, structural_metrics,
    uniform_posterior, FeatureKind, PosteriorTable,
};
use dagflow_core::flow::{sample_trajectory, terminating_distribution_dp, ForwardPolicy, UniformBackward};
use dagflow_core::graph::{EnvGraph, StateId};
use dagflow_core::objectives::{Baseline, CorrectedReward};
use dagflow_core::policy::{
    load_checkpoint, save_checkpoint, DagPolicy, MlpPolicy, TabularHierarchical, TabularPolicy,
};
use dagflow_core::rng::SeedSequence;
use dagflow_core::scores::{
    log_reward, BdeHyper, BdeScore, BgeHyper, BgeScore, DataKind, Dataset, GraphPrior,
    LocalScoreCache, LocalScorer,
};
use dagflow_core::trainer::{
    train_modified_db, train_reverse_kl, train_sql, train_tb, StepModel, TrainConfig,
};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "dagflow", version, about = "Flow samplers over DAG spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a random Bayesian network.
    GenData(GenDataArgs),
    /// Train a sampler (trajectory balance, modified detailed balance,
    /// soft Q-learning, or reverse KL).
    Train(TrainArgs),
    /// Evaluate a checkpoint: features, metrics, and the estimate/reward
    /// correlation.
    Evaluate(EvaluateArgs),
    /// Run the structure-MCMC baseline.
    Baseline(BaselineArgs),
    /// Dump the exact posterior table over all DAGs (d <= 5).
    Enumerate(EnumerateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataGenKind {
    Lingauss,
    Discrete,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    d: usize,
    /// Average edges per node of the random structure (1 = sparse, 2 = denser).
    #[arg(long, default_value_t = 1.0)]
    er: f64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value_t = DataGenKind::Lingauss)]
    kind: DataGenKind,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    noise_var: f64,
    #[arg(long, default_value_t = 2)]
    arity: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreKind {
    Bge,
    Bde,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Tabular,
    Mlp,
}

#[derive(Args)]
struct TrainArgs {
    /// `dag`, `galton<rows>` (e.g. galton2), or `spec:<path>` for a text env.
    #[arg(long)]
    env: String,
    /// One of: tb, modified-db, sql, reverse-kl.
    #[arg(long)]
    loss: String,
    /// Optional key=value file; explicit flags always win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreKind::Bge)]
    score: ScoreKind,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = PolicyKind::Tabular)]
    policy: PolicyKind,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    max_parents: Option<usize>,
    #[arg(long)]
    eps_start: Option<f64>,
    #[arg(long)]
    eps_end: Option<f64>,
    /// Track JSD against the exact posterior during training (d <= 5).
    #[arg(long, default_value_t = false)]
    exact_eval: bool,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    early_stop_jsd: Option<f64>,
    /// Standardize continuous data before scoring (recorded in the manifest).
    #[arg(long, default_value_t = true)]
    standardize: bool,
    #[arg(long, default_value_t = 2)]
    arity: usize,
    /// Sparsity prior strength: log P(G) = -beta |edges| (0 = uniform).
    #[arg(long, default_value_t = 0.0)]
    prior_beta: f64,
    #[arg(long, default_value_t = 100)]
    target_sync: u64,
    #[arg(long, default_value_t = true)]
    use_target: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreKind::Bge)]
    score: ScoreKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    g_star: Option<PathBuf>,
    /// Comma-separated subset of edge,path,markov.
    #[arg(long, default_value = "edge")]
    features: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    mc: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = true)]
    standardize: bool,
    #[arg(long, default_value_t = 2)]
    arity: usize,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, default_value_t = true)]
    mc3: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreKind::Bge)]
    score: ScoreKind,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Constant score (the uniform target over DAGs).
    #[arg(long, default_value_t = false)]
    uniform_score: bool,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long, default_value_t = 10)]
    thinning: u64,
    #[arg(long)]
    g_star: Option<PathBuf>,
    #[arg(long, default_value_t = true)]
    standardize: bool,
    #[arg(long, default_value_t = 2)]
    arity: usize,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreKind::Bge)]
    score: ScoreKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = true)]
    standardize: bool,
    #[arg(long, default_value_t = 2)]
    arity: usize,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ArgumentError>().is_some() {
                2
            } else {
                3
            }
        }
    };
    std::process::exit(code);
}

#[derive(Debug)]
struct ArgumentError(String);

impl std::fmt::Display for ArgumentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ArgumentError {}

fn arg_error(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ArgumentError(message.into()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Enumerate(args) => cmd_enumerate(args),
    }
}

fn write_ground_truth(path: &Path, g: &DagState) -> anyhow::Result<()> {
    let mut out = format!("d {}\n", g.d());
    for (u, v) in g.edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_ground_truth(path: &Path) -> anyhow::Result<DagState> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| arg_error("empty ground-truth file"))?;
    let d: usize = first
        .strip_prefix("d ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| arg_error("ground-truth file must start with 'd <count>'"))?;
    let mut g = dagflow_core::dag::initial_dag_state(d)?;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let u: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| arg_error("bad edge line"))?;
        let v: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| arg_error("bad edge line"))?;
        g = dagflow_core::dag::apply_edge(&g, dagflow_core::dag::EdgeAction::Add { u, v })?;
    }
    Ok(g)
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    if args.d == 0 {
        return Err(arg_error("--d must be at least 1"));
    }
    if args.n == 0 {
        return Err(arg_error("--n must be at least 1"));
    }
    let started = Instant::now();
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("gen-data", args.seed);
    manifest.set("d", args.d);
    manifest.set("er", args.er);
    manifest.set("n", args.n);
    manifest.set("noise_var", args.noise_var);
    manifest.set("arity", args.arity);
    manifest.set(
        "kind",
        match args.kind {
            DataGenKind::Lingauss => "lingauss",
            DataGenKind::Discrete => "discrete",
        },
    );

    let seq = SeedSequence::new(args.seed);
    let mut rng = seq.stream(0);
    let g_star = data::sample_er_dag(args.d, args.er, &mut rng);
    let data_path = args.out_dir.join("data.csv");
    let mut generator = BTreeMap::new();
    generator.insert("seed".to_string(), args.seed.to_string());
    generator.insert(
        "g_star_edges".to_string(),
        g_star.edges().iter().map(|(u, v)| format!("{u}->{v}")).collect::<Vec<_>>().join(","),
    );
    match args.kind {
        DataGenKind::Lingauss => {
            let bn = data::sample_lingauss_bn(&g_star, args.noise_var, &mut rng);
            let dataset = data::ancestral_sample_lingauss(&bn, args.n, &mut rng);
            data::write_csv(&data_path, &dataset)?;
            generator.insert("noise_var".to_string(), args.noise_var.to_string());
        }
        DataGenKind::Discrete => {
            let bn = data::sample_discrete_bn(&g_star, args.arity, &mut rng);
            let dataset = data::ancestral_sample_discrete(&bn, args.n, &mut rng);
            data::write_csv(&data_path, &dataset)?;
            generator.insert("arity".to_string(), args.arity.to_string());
        }
    }
    write_ground_truth(&args.out_dir.join("ground_truth.txt"), &g_star)?;
    std::fs::write(
        args.out_dir.join("generator.json"),
        serde_json::to_string_pretty(&generator)?,
    )?;
    manifest.digest_input(&data_path)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    println!("wrote {}", data_path.display());
    Ok(())
}

fn load_dataset(
    path: &Path,
    score: ScoreKind,
    arity: usize,
    standardize: bool,
) -> anyhow::Result<Dataset> {
    let kind = match score {
        ScoreKind::Bge => DataKind::Continuous,
        ScoreKind::Bde => DataKind::Categorical { arity },
    };
    let dataset = data::read_csv(path, kind)?;
    if standardize && score == ScoreKind::Bge {
        Ok(dataset.standardized()?)
    } else {
        Ok(dataset)
    }
}

fn build_cache(dataset: &Dataset, score: ScoreKind, arity: usize) -> anyhow::Result<Arc<LocalScoreCache>> {
    let scorer: Box<dyn LocalScorer> = match score {
        ScoreKind::Bge => Box::new(BgeScore::new(dataset, BgeHyper::default_for(dataset.d))?),
        ScoreKind::Bde => Box::new(BdeScore::new(dataset, BdeHyper { equivalent_sample_size: 1.0, arity })?),
    };
    Ok(Arc::new(LocalScoreCache::new(scorer)))
}

fn dag_env_from_cache(d: usize, max_parents: Option<usize>, cache: Arc<LocalScoreCache>, beta: f64) -> anyhow::Result<DagEnv> {
    let prior = if beta == 0.0 { GraphPrior::Uniform } else { GraphPrior::EdgePenalty { beta } };
    Ok(DagEnv::new(
        d,
        max_parents,
        Box::new(move |g| log_reward(g, &cache, prior).expect("scorable graph")),
    )?)
}

fn write_trace_csv(
    path: &Path,
    loss: &[f64],
    mean_abs: &[f64],
    log_z: &[f64],
    jsd: &[(u64, f64)],
) -> anyhow::Result<()> {
    let jsd_map: HashMap<u64, f64> = jsd.iter().copied().collect();
    let mut file = std::fs::File::create(path)?;
    let has_z = !log_z.is_empty();
    writeln!(file, "step,loss,mean_abs_residual{}{}", if has_z { ",log_z" } else { "" }, if jsd_map.is_empty() { "" } else { ",jsd" })?;
    for (i, l) in loss.iter().enumerate() {
        let step = (i + 1) as u64;
        let mut row = format!("{step},{l:?},{:?}", mean_abs.get(i).copied().unwrap_or(f64::NAN));
        if has_z {
            row.push_str(&format!(",{:?}", log_z[i]));
        }
        if !jsd_map.is_empty() {
            match jsd_map.get(&step) {
                Some(j) => row.push_str(&format!(",{j:?}")),
                None => row.push(','),
            }
        }
        writeln!(file, "{row}")?;
    }
    Ok(())
}

fn parse_config_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).context("reading config file")?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| arg_error(format!("config line {}: expected key=value", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn cmd_train(mut args: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    if let Some(path) = args.config.clone() {
        let file = parse_config_file(&path)?;
        fn fill<T: std::str::FromStr>(slot: &mut Option<T>, file: &BTreeMap<String, String>, key: &str) -> anyhow::Result<()> {
            if slot.is_none() {
                if let Some(v) = file.get(key) {
                    *slot = Some(v.parse().map_err(|_| arg_error(format!("config key '{key}' has an unparsable value '{v}'")))?);
                }
            }
            Ok(())
        }
        fill(&mut args.steps, &file, "steps")?;
        fill(&mut args.batch_size, &file, "batch-size")?;
        fill(&mut args.lr, &file, "lr")?;
        fill(&mut args.alpha, &file, "alpha")?;
        fill(&mut args.eps_start, &file, "eps-start")?;
        fill(&mut args.eps_end, &file, "eps-end")?;
        let known = ["steps", "batch-size", "lr", "alpha", "eps-start", "eps-end"];
        if let Some(unknown) = file.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(arg_error(format!(
                "unknown config key '{unknown}'; supported keys: {}",
                known.join(", ")
            )));
        }
    }
    let steps = args.steps.unwrap_or(50_000);
    let batch_size = args.batch_size.unwrap_or(256);
    let alpha = args.alpha.unwrap_or(1.0);
    let eps_start = args.eps_start.unwrap_or(1.0);
    let eps_end = args.eps_end.unwrap_or(0.1);
    let valid_losses = ["tb", "modified-db", "sql", "reverse-kl"];
    if !valid_losses.contains(&args.loss.as_str()) {
        return Err(arg_error(format!(
            "unknown loss '{}'; valid losses: {}",
            args.loss,
            valid_losses.join(", ")
        )));
    }
    if steps == 0 {
        return Err(arg_error("--steps must be positive"));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("train", args.seed);
    for (k, v) in [
        ("env", args.env.clone()),
        ("loss", args.loss.clone()),
        ("steps", steps.to_string()),
        ("batch_size", batch_size.to_string()),
        ("alpha", alpha.to_string()),
        ("workers", args.workers.to_string()),
        ("standardize", args.standardize.to_string()),
        ("eps_start", eps_start.to_string()),
        ("eps_end", eps_end.to_string()),
        ("prior_beta", args.prior_beta.to_string()),
        ("target_sync", args.target_sync.to_string()),
        ("use_target", args.use_target.to_string()),
    ] {
        manifest.set(k, v);
    }

    let lr_default = match args.policy {
        PolicyKind::Tabular => 1e-2,
        PolicyKind::Mlp => 1e-3,
    };
    let config = TrainConfig {
        steps,
        batch_size,
        lr: args.lr.unwrap_or(lr_default),
        eps_start,
        eps_end,
        alpha,
        seed: args.seed,
        workers: args.workers,
        target_sync: args.target_sync,
        use_target: args.use_target,
        eval_every: args.eval_every.unwrap_or(if args.exact_eval { 1000 } else { 0 }),
        early_stop_jsd: args.early_stop_jsd,
        ..Default::default()
    };
    manifest.set("lr", config.lr);

    if args.env == "dag" {
        let data_path = args
            .data
            .clone()
            .ok_or_else(|| arg_error("--data is required for the dag environment"))?;
        manifest.digest_input(&data_path)?;
        let dataset = load_dataset(&data_path, args.score, args.arity, args.standardize)?;
        let d = dataset.d;
        let cache = build_cache(&dataset, args.score, args.arity)?;
        let env = dag_env_from_cache(d, args.max_parents, cache.clone(), args.prior_beta)?;
        let prior = if args.prior_beta == 0.0 {
            GraphPrior::Uniform
        } else {
            GraphPrior::EdgePenalty { beta: args.prior_beta }
        };
        let reference = if (args.exact_eval || args.early_stop_jsd.is_some()) && d <= 5 {
            Some(exact_posterior(&cache, prior, d)?)
        } else {
            None
        };

        let ckpt = args.out_dir.join("checkpoint.bin");
        match (args.loss.as_str(), args.policy) {
            ("modified-db", PolicyKind::Tabular) => {
                let mut policy = TabularHierarchical::new(d, args.max_parents);
                let result =
                    train_modified_db(&env, &cache, prior, &mut policy, &config, reference.as_ref())?;
                write_trace_csv(
                    &args.out_dir.join("trace.csv"),
                    &result.trace.loss,
                    &result.trace.mean_abs_residual,
                    &[],
                    &result.trace.jsd,
                )?;
                save_checkpoint(
                    &ckpt,
                    "tabular-hierarchical",
                    d,
                    DagPolicy::params(&policy),
                    result.trace.steps_run,
                    args.seed,
                    Some(&policy.index_triples()),
                    &[("max_parents".into(), format!("{:?}", args.max_parents))],
                )?;
            }
            ("modified-db", PolicyKind::Mlp) => {
                let seq = SeedSequence::new(args.seed);
                let mut policy = MlpPolicy::new(d, args.hidden, args.max_parents, &mut seq.stream(u64::MAX));
                let result =
                    train_modified_db(&env, &cache, prior, &mut policy, &config, reference.as_ref())?;
                write_trace_csv(
                    &args.out_dir.join("trace.csv"),
                    &result.trace.loss,
                    &result.trace.mean_abs_residual,
                    &[],
                    &result.trace.jsd,
                )?;
                save_checkpoint(
                    &ckpt,
                    "mlp",
                    d,
                    DagPolicy::params(&policy),
                    result.trace.steps_run,
                    args.seed,
                    None,
                    &[("hidden".into(), args.hidden.to_string())],
                )?;
            }
            ("tb", kind) | ("reverse-kl", kind) => {
                let is_tb = args.loss == "tb";
                macro_rules! run_model {
                    ($policy:expr, $kind:expr, $index:expr, $extra:expr) => {{
                        let mut policy = $policy;
                        let trace = if is_tb {
                            let r = train_tb(&env, &mut policy, &config, reference.as_ref())?;
                            write_trace_csv(
                                &args.out_dir.join("trace.csv"),
                                &r.trace.loss,
                                &r.trace.mean_abs_residual,
                                &r.trace.log_z,
                                &r.trace.jsd,
                            )?;
                            manifest.set("log_z", r.log_z);
                            r.trace
                        } else {
                            let r = train_reverse_kl(
                                &env,
                                &mut policy,
                                &config,
                                Baseline::Local,
                                reference.as_ref(),
                            )?;
                            write_trace_csv(
                                &args.out_dir.join("trace.csv"),
                                &r.loss,
                                &r.mean_abs_residual,
                                &[],
                                &r.jsd,
                            )?;
                            r
                        };
                        let index = $index(&policy);
                        save_checkpoint(
                            &ckpt,
                            $kind,
                            d,
                            StepModel::params(&policy),
                            trace.steps_run,
                            args.seed,
                            index.as_deref(),
                            $extra,
                        )?;
                    }};
                }
                match kind {
                    PolicyKind::Tabular => run_model!(
                        TabularHierarchical::new(d, args.max_parents),
                        "tabular-hierarchical",
                        |p: &TabularHierarchical| Some(p.index_triples()),
                        &[("max_parents".into(), format!("{:?}", args.max_parents))]
                    ),
                    PolicyKind::Mlp => run_model!(
                        {
                            let seq = SeedSequence::new(args.seed);
                            MlpPolicy::new(d, args.hidden, args.max_parents, &mut seq.stream(u64::MAX))
                        },
                        "mlp",
                        |_: &MlpPolicy| Option::<Vec<(StateId, u32, u32)>>::None,
                        &[("hidden".into(), args.hidden.to_string())]
                    ),
                }
            }
            ("sql", _) => {
                let backward = UniformBackward;
                let cache2 = cache.clone();
                let reward = CorrectedReward::sparse(
                    &env,
                    &backward,
                    Box::new(move |key: &StateId| {
                        let g = state_from_key(key, d);
                        -log_reward(&g, &cache2, prior).expect("scorable graph") * alpha
                    }),
                    alpha,
                );
                let result = train_sql(&env, &reward, &config)?;
                write_trace_csv(
                    &args.out_dir.join("trace.csv"),
                    &result.trace.mean_abs_residual,
                    &result.trace.mean_abs_residual,
                    &[],
                    &[],
                )?;
                let (params, index) = flatten_q_table(&env, &result.q, alpha);
                save_checkpoint(&ckpt, "tabular-softmax", d, &params, result.trace.steps_run, args.seed, Some(&index), &[])?;
            }
            _ => unreachable!("loss validated above"),
        }
        println!("trained {} on dag d={d}; outputs in {}", args.loss, args.out_dir.display());
    } else {
        // fixture environments train with TB over a generic tabular policy
        let env: ExplicitEnv = if let Some(rows) = args.env.strip_prefix("galton") {
            let rows: usize = rows.parse().map_err(|_| arg_error("galton env needs a row count, e.g. galton2"))?;
            galton_env(rows, 0.5).map_err(|e| arg_error(e.to_string()))?.0
        } else if let Some(path) = args.env.strip_prefix("spec:") {
            let text = std::fs::read_to_string(path).context("reading env spec")?;
            ExplicitEnv::from_text(&text).map_err(|e| arg_error(e.to_string()))?
        } else {
            return Err(arg_error(format!(
                "unknown env '{}'; expected dag, galton<rows>, or spec:<path>",
                args.env
            )));
        };
        if args.loss != "tb" {
            return Err(arg_error("fixture environments support --loss tb"));
        }
        let mut policy = TabularPolicy::new();
        let result = train_tb(&env, &mut policy, &config, None)?;
        write_trace_csv(
            &args.out_dir.join("trace.csv"),
            &result.trace.loss,
            &result.trace.mean_abs_residual,
            &result.trace.log_z,
            &[],
        )?;
        manifest.set("log_z", result.log_z);
        // the learned terminating distribution, for inspection
        let dp = terminating_distribution_dp(&env, &policy, 1_000_000)?;
        let mut out = String::from("state,probability\n");
        for (state, p) in &dp {
            out.push_str(&format!("{},{p:?}\n", String::from_utf8_lossy(state.as_bytes())));
        }
        std::fs::write(args.out_dir.join("terminating_distribution.csv"), out)?;
        save_checkpoint(
            &args.out_dir.join("checkpoint.bin"),
            "tabular-generic",
            0,
            StepModel::params(&policy),
            result.trace.steps_run,
            args.seed,
            Some(&policy.index_triples()),
            &[("env".into(), args.env.clone())],
        )?;
        println!("trained tb on {}; outputs in {}", args.env, args.out_dir.display());
    }
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    Ok(())
}

/// Q-table flattened into the generic tabular layout (children sorted, sink
/// slot last), scaled by 1/alpha so a softmax policy reproduces it.
fn flatten_q_table(
    env: &DagEnv,
    q: &dagflow_core::trainer::QTable,
    alpha: f64,
) -> (Vec<f64>, Vec<(StateId, u32, u32)>) {
    let mut params = Vec::new();
    let mut index = Vec::new();
    let mut states: Vec<&StateId> = q.values.keys().map(|(s, _)| s).collect();
    states.sort();
    states.dedup();
    for state in states {
        let offset = params.len() as u32;
        let mut actions: Vec<dagflow_core::graph::Next> = env
            .children(state)
            .into_iter()
            .map(dagflow_core::graph::Next::State)
            .collect();
        actions.push(dagflow_core::graph::Next::Stop);
        for a in &actions {
            params.push(q.get(state, a) / alpha);
        }
        index.push((state.clone(), offset, actions.len() as u32));
    }
    (params, index)
}

fn policy_from_checkpoint(
    ckpt: &dagflow_core::policy::Checkpoint,
) -> anyhow::Result<Box<dyn ForwardPolicy>> {
    match ckpt.kind.as_str() {
        "tabular-hierarchical" => {
            let index: HashMap<StateId, u32> =
                ckpt.state_index.iter().map(|(k, &(o, _))| (k.clone(), o)).collect();
            let max_parents = ckpt
                .fields
                .get("max_parents")
                .and_then(|v| v.strip_prefix("Some(").and_then(|s| s.trim_end_matches(')').parse().ok()));
            Ok(Box::new(TabularHierarchical::restore(ckpt.d, max_parents, index, ckpt.params.clone())))
        }
        "mlp" => {
            let hidden: usize = ckpt
                .fields
                .get("hidden")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| anyhow!("mlp checkpoint is missing its hidden width"))?;
            Ok(Box::new(MlpPolicy::restore(ckpt.d, hidden, None, ckpt.params.clone())))
        }
        "tabular-softmax" | "tabular-generic" => {
            Ok(Box::new(TabularPolicy::restore(ckpt.state_index.clone(), ckpt.params.clone())))
        }
        other => bail!("cannot evaluate checkpoints of kind '{other}'"),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("evaluate", args.seed);
    manifest.digest_input(&args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.d == 0 {
        bail!("this checkpoint was trained on a fixture env; evaluate expects a dag policy");
    }
    let policy = policy_from_checkpoint(&ckpt)?;
    let d = ckpt.d;
    let data_path = args
        .data
        .clone()
        .ok_or_else(|| arg_error("--data is required to score sampled graphs"))?;
    manifest.digest_input(&data_path)?;
    let dataset = load_dataset(&data_path, args.score, args.arity, args.standardize)?;
    let cache = build_cache(&dataset, args.score, args.arity)?;
    let env = dag_env_from_cache(d, None, cache.clone(), 0.0)?;

    // sample graphs from the policy
    let seq = SeedSequence::new(args.seed);
    let mut samples: Vec<StateId> = Vec::with_capacity(args.samples);
    for k in 0..args.samples {
        let traj = sample_trajectory(&env, policy.as_ref(), &mut seq.stream(k as u64))?;
        samples.push(traj.endpoint().clone());
    }

    // distribution for features: exact DP at desk scale, else sample counts
    let dist: BTreeMap<StateId, f64> = if d <= 5 {
        terminating_distribution_dp(&env, policy.as_ref(), 200_000)?
    } else {
        let mut counts: BTreeMap<StateId, f64> = BTreeMap::new();
        for s in &samples {
            *counts.entry(s.clone()).or_insert(0.0) += 1.0 / args.samples as f64;
        }
        counts
    };
    let mut edge_report = None;
    for kind_name in args.features.split(',').filter(|s| !s.is_empty()) {
        let kind = match kind_name {
            "edge" => FeatureKind::Edge,
            "path" => FeatureKind::Path,
            "markov" => FeatureKind::Markov,
            other => return Err(arg_error(format!("unknown feature '{other}'"))),
        };
        let report = features(&dist, d, kind)?;
        let mut csv = String::new();
        for i in 0..d {
            let row: Vec<String> = (0..d).map(|j| format!("{:?}", report.get(i, j))).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(args.out_dir.join(format!("features_{kind_name}.csv")), csv)?;
        if kind == FeatureKind::Edge {
            edge_report = Some(report);
        }
    }

    // correlation of estimated terminating log-probabilities with log-rewards
    let mut pairs = Vec::new();
    let mut corr_csv = String::from("log_estimate,log_reward,relative_stderr\n");
    let mut unique: Vec<StateId> = samples.clone();
    unique.sort();
    unique.dedup();
    let mut rng = seq.stream(u64::MAX - 1);
    for key in unique.iter() {
        let g = state_from_key(key, d);
        let est = estimate_log_pftop(&env, policy.as_ref(), &g, args.beam, args.mc, &mut rng)?;
        let log_r = EnvGraph::log_reward(&env, key);
        pairs.push((est.log_estimate, log_r));
        corr_csv.push_str(&format!(
            "{:?},{log_r:?},{:?}\n",
            est.log_estimate,
            est.relative_stderr.unwrap_or(0.0)
        ));
    }
    std::fs::write(args.out_dir.join("correlation.csv"), corr_csv)?;

    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    if pairs.len() >= 3 {
        if let Ok(report) = correlation_report(&pairs) {
            metrics.insert("slope".into(), report.slope);
            metrics.insert("intercept".into(), report.intercept);
            metrics.insert("pearson_r".into(), report.pearson_r);
            metrics.insert("trimmed_slope".into(), report.trimmed_slope);
            metrics.insert("trimmed_r".into(), report.trimmed_r);
        }
    }
    if let (Some(g_star_path), Some(edges)) = (args.g_star.as_ref(), edge_report.as_ref()) {
        let g_star = read_ground_truth(g_star_path)?;
        let m = structural_metrics(&samples, &g_star, edges);
        metrics.insert("e_shd".into(), m.e_shd);
        metrics.insert("auroc".into(), m.auroc);
    }
    if d <= 5 {
        let table = exact_posterior(&cache, GraphPrior::Uniform, d)?;
        let j = exact::jsd_vs_posterior(&env, policy.as_ref(), &table, 200_000)?;
        metrics.insert("jsd_vs_exact".into(), j);
    }
    std::fs::write(args.out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    println!("evaluated {} samples; outputs in {}", args.samples, args.out_dir.display());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    if args.steps == 0 {
        return Err(arg_error("--steps must be positive"));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("baseline", args.seed);
    manifest.set("d", args.d);
    manifest.set("steps", args.steps);
    manifest.set("uniform_score", args.uniform_score);

    let cache = if args.uniform_score {
        Arc::new(LocalScoreCache::new(Box::new(ConstantScorer { d: args.d })))
    } else {
        let data_path = args
            .data
            .clone()
            .ok_or_else(|| arg_error("--data is required unless --uniform-score is set"))?;
        manifest.digest_input(&data_path)?;
        let dataset = load_dataset(&data_path, args.score, args.arity, args.standardize)?;
        if dataset.d != args.d {
            return Err(arg_error(format!(
                "--d {} does not match the dataset ({} variables)",
                args.d, dataset.d
            )));
        }
        build_cache(&dataset, args.score, args.arity)?
    };
    let burn_in = args.burn_in.unwrap_or(args.steps / 10);
    let seq = SeedSequence::new(args.seed);
    let trace = dagflow_core::baselines::structure_mc3(
        &cache,
        GraphPrior::Uniform,
        args.d,
        dagflow_core::baselines::MoveSet::default(),
        args.steps,
        burn_in,
        args.thinning,
        &mut seq.stream(0),
    )?;

    let mut csv = String::from("step,key_hex,log_score,accepted\n");
    for (i, key) in trace.states.iter().enumerate() {
        let step = trace.burn_in + i as u64 * trace.thinning;
        csv.push_str(&format!(
            "{step},{},{:?},{}\n",
            key.to_hex(),
            trace.log_scores[i],
            u8::from(trace.accepted[i])
        ));
    }
    std::fs::write(args.out_dir.join("chain.csv"), csv)?;

    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    metrics.insert("acceptance_rate".into(), trace.acceptance_rate());
    metrics.insert("recorded_states".into(), trace.states.len() as f64);
    // empirical edge marginals of the chain
    let mut edge_matrix = vec![0.0; args.d * args.d];
    for key in &trace.states {
        let g = state_from_key(key, args.d);
        for (u, v) in g.edges() {
            edge_matrix[u * args.d + v] += 1.0 / trace.states.len() as f64;
        }
    }
    let edge_report = exact::FeatureReport { kind: FeatureKind::Edge, d: args.d, matrix: edge_matrix };
    if args.d <= 5 {
        let table = if args.uniform_score {
            uniform_posterior(args.d)?
        } else {
            exact_posterior(&cache, GraphPrior::Uniform, args.d)?
        };
        let exact_edges = features(
            &table.dense().into_iter().collect(),
            args.d,
            FeatureKind::Edge,
        )?;
        let mut max_diff = 0.0f64;
        for i in 0..args.d {
            for j in 0..args.d {
                max_diff = max_diff.max((edge_report.get(i, j) - exact_edges.get(i, j)).abs());
            }
        }
        metrics.insert("edge_marginal_max_abs_error".into(), max_diff);
    }
    if let Some(g_star_path) = args.g_star.as_ref() {
        let g_star = read_ground_truth(g_star_path)?;
        let m = structural_metrics(&trace.states, &g_star, &edge_report);
        metrics.insert("e_shd".into(), m.e_shd);
        metrics.insert("auroc".into(), m.auroc);
    }
    std::fs::write(args.out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    println!(
        "baseline chain recorded {} states; outputs in {}",
        trace.states.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// Constant local score: the uniform target over DAGs.
struct ConstantScorer {
    d: usize,
}

impl LocalScorer for ConstantScorer {
    fn d(&self) -> usize {
        self.d
    }

    fn local_score(&self, _child: usize, _parents: &[usize]) -> Result<f64, dagflow_core::scores::ScoreError> {
        Ok(0.0)
    }
}

fn cmd_enumerate(args: EnumerateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    if args.d > 5 {
        return Err(arg_error("--d must be at most 5 for exhaustive enumeration"));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = RunManifest::new("enumerate", 0);
    manifest.set("d", args.d);
    let table: PosteriorTable = match args.data.as_ref() {
        Some(path) => {
            manifest.digest_input(path)?;
            let dataset = load_dataset(path, args.score, args.arity, args.standardize)?;
            let cache = build_cache(&dataset, args.score, args.arity)?;
            exact_posterior(&cache, GraphPrior::Uniform, args.d)?
        }
        None => uniform_posterior(args.d)?,
    };
    let mut out = String::new();
    for (key, lp) in &table.log_probs {
        out.push_str(&format!("{} {lp:?}\n", key.to_hex()));
    }
    std::fs::write(args.out_dir.join("posterior.txt"), out)?;
    manifest.set("log_evidence", table.log_evidence);
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(&args.out_dir)?;
    println!(
        "enumerated {} graphs; posterior written to {}",
        table.log_probs.len(),
        args.out_dir.join("posterior.txt").display()
    );
    Ok(())
}
