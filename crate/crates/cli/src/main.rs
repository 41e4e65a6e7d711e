use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gntk_lab::gnn::{init_params, train_gd, train_gd_node, StepSize, TrainOptions};
use gntk_lab::graph::{generate_separated_dataset, GeneratorSpec, Mode, SelfLoopPolicy};
use gntk_lab::io::{dataset_to_json, kernel_to_csv, load_dataset, parse_kernel_csv, save_checkpoint, write_output};
use gntk_lab::kernel::{
    gntk_gram, mc_gntk_gram, node_gntk, node_single_layer_gram, shifted_gntk_gram, NodeGntkOptions,
};
use gntk_lab::lab::{
    prepare, run_concentration, run_drift, run_equivalence, run_node_equivalence, DatasetSource, EtaSpec,
    ExperimentConfig,
};
use gntk_lab::regression::{iterate_regression, RegressionProblem};
use gntk_lab::spectral::{check_separation_bound, lambda_extremes};
use gntk_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "gntk-lab", version, about = "Graph neural tangent kernel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a delta-separated dataset as JSON.
    GenData(GenDataArgs),
    /// Gram matrix of a dataset (analytic, or Monte Carlo with --mc-width).
    Gram(GramArgs),
    /// Multi-level node kernel of a single-graph dataset.
    NodeGntk(NodeGntkArgs),
    /// Iterative kernel regression against the exact solve.
    Regress(ExperimentArgs),
    /// Train one network (first width and seed of the config).
    Train(TrainArgs),
    /// Graph-level sweep: trained networks vs kernel regression.
    Equiv(ExperimentArgs),
    /// Node-level sweep with a held-out node.
    EquivNode(ExperimentArgs),
    /// Monte Carlo Gram error against the analytic Gram.
    Concentration(ExperimentArgs),
    /// Kernel drift during training.
    Drift(ExperimentArgs),
    /// Extreme eigenvalues of a kernel CSV or a dataset's Gram.
    Spectral(SpectralArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = Mode::Graph)]
    mode: Mode,
    /// Number of graphs (graph mode).
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Nodes per graph.
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0.3)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SelfLoopPolicy::Include)]
    policy: SelfLoopPolicy,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GramArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = SelfLoopPolicy::Include)]
    policy: SelfLoopPolicy,
    /// Use a Monte Carlo estimate with this many neurons.
    #[arg(long)]
    mc_width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Activation threshold of the Monte Carlo estimate.
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NodeGntkArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = SelfLoopPolicy::Include)]
    policy: SelfLoopPolicy,
    /// Aggregation levels L.
    #[arg(long, default_value_t = 1)]
    levels: usize,
    /// ReLU layers R per level.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Start the first level from the unaggregated feature products.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectralArgs {
    /// Kernel CSV (comment lines starting with '#' are skipped).
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    kernel: Option<PathBuf>,
    /// Dataset whose analytic Gram is analysed.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = SelfLoopPolicy::Include)]
    policy: SelfLoopPolicy,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Also check lambda_min >= delta / (100 n^2) with this delta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Write the trained parameters as JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Experiment flags. `--config` loads a full JSON config; other flags override it.
#[derive(Args, Default)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Dataset JSON; without it the dataset is generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    edge_prob: Option<f64>,
    /// Generator seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, short = 'T', visible_alias = "t")]
    steps: Option<usize>,
    /// "auto" or a positive number.
    #[arg(long)]
    eta: Option<EtaSpec>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    bias: Option<f64>,
    /// Comma-separated list or a half-open range such as 0..10.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    policy: Option<SelfLoopPolicy>,
    #[arg(long)]
    trace_every: Option<usize>,
    /// Failure probability used by high-probability bounds.
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    test_node: Option<usize>,
    #[arg(long)]
    test_graph: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        return Ok(SeedList((a..b).collect()));
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("bad seed {x:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(SeedList)
}

impl ExperimentArgs {
    fn resolve(&self, default_mode: Mode) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?,
            None => match self.mode.unwrap_or(default_mode) {
                Mode::Graph => ExperimentConfig::reference_graph(),
                Mode::Node => ExperimentConfig::reference_node(),
            },
        };
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(p) = &self.dataset {
            c.dataset = DatasetSource::Path(p.clone());
        }
        let generator_flags = self.n.is_some()
            || self.nodes.is_some()
            || self.d.is_some()
            || self.delta.is_some()
            || self.edge_prob.is_some()
            || self.data_seed.is_some();
        if generator_flags {
            let DatasetSource::Generate(spec) = &mut c.dataset else {
                return Err(LabError::Config("generator flags given with a dataset path".into()));
            };
            if let Some(v) = self.n {
                spec.n = v;
            }
            if let Some(v) = self.nodes {
                spec.nodes = v;
            }
            if let Some(v) = self.d {
                spec.d = v;
            }
            if let Some(v) = self.delta {
                spec.delta = v;
            }
            if let Some(v) = self.edge_prob {
                spec.edge_prob = v;
            }
            if let Some(v) = self.data_seed {
                spec.seed = v;
            }
        }
        if let Some(v) = &self.widths {
            c.widths = v.clone();
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        if let Some(v) = self.bias {
            c.bias = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.0.clone();
        }
        if let Some(v) = self.policy {
            c.policy = v;
        }
        if let Some(v) = self.trace_every {
            c.trace_every = v;
        }
        if let Some(v) = self.confidence {
            c.confidence = v;
        }
        if self.test_node.is_some() {
            c.test_node = self.test_node;
        }
        if self.test_graph.is_some() {
            c.test_graph = self.test_graph.clone();
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Output text and whether any row failed.
struct Emitted {
    text: String,
    row_errors: bool,
}

fn clean(text: String) -> Emitted {
    Emitted {
        text,
        row_errors: false,
    }
}

fn gen_data(a: &GenDataArgs) -> Result<Emitted> {
    let spec = GeneratorSpec {
        mode: a.mode,
        policy: a.policy,
        ..match a.mode {
            Mode::Graph => GeneratorSpec::graph_mode(a.n, a.nodes, a.d, a.delta, a.edge_prob, a.seed),
            Mode::Node => GeneratorSpec::node_mode(a.nodes, a.d, a.delta, a.edge_prob, a.seed),
        }
    };
    Ok(clean(dataset_to_json(&generate_separated_dataset(&spec)?)? + "\n"))
}

fn gram(a: &GramArgs) -> Result<Emitted> {
    let ds = load_dataset(&a.dataset)?;
    let k = match (ds.mode(), a.mc_width) {
        (Mode::Node, None) => node_single_layer_gram(&ds.graphs()[0], a.policy)?,
        (Mode::Node, Some(_)) => {
            return Err(LabError::Config(
                "Monte Carlo Gram is defined for graph-mode datasets".into(),
            ))
        }
        (Mode::Graph, None) => gntk_gram(&ds, a.policy)?,
        (Mode::Graph, Some(m)) if a.bias == 0.0 => mc_gntk_gram(&ds, a.policy, m, a.seed)?.kernel,
        (Mode::Graph, Some(m)) => shifted_gntk_gram(&ds, a.policy, a.bias, m, a.seed)?.kernel,
    };
    Ok(clean(kernel_to_csv(&k)))
}

fn node_kernel(a: &NodeGntkArgs) -> Result<Emitted> {
    let ds = load_dataset(&a.dataset)?;
    let opts = NodeGntkOptions {
        strict_unaggregated_init: a.strict,
    };
    let k = node_gntk(&ds.graphs()[0], a.policy, a.levels, a.layers, opts)?;
    Ok(clean(kernel_to_csv(&k.kernel)))
}

fn spectral(a: &SpectralArgs) -> Result<Emitted> {
    let (k, n) = match (&a.kernel, &a.dataset) {
        (Some(p), _) => {
            let k = parse_kernel_csv(&std::fs::read_to_string(p)?)?;
            let n = k.size();
            (k, n)
        }
        (None, Some(p)) => {
            let ds = load_dataset(p)?;
            let k = match ds.mode() {
                Mode::Graph => gntk_gram(&ds, a.policy)?,
                Mode::Node => node_single_layer_gram(&ds.graphs()[0], a.policy)?,
            };
            (k, ds.labels().len())
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let s = lambda_extremes(&k, a.tol)?;
    let mut text = String::from("lambda_min,lambda_max,iterations,residual");
    let mut row = format!("{},{},{},{}", s.lambda_min, s.lambda_max, s.iterations, s.residual);
    if let Some(delta) = a.delta {
        let c = check_separation_bound(&k, delta, n, false)?;
        text.push_str(",bound,holds");
        row.push_str(&format!(",{},{}", c.bound, c.holds));
        if let Some(w) = c.warning {
            eprintln!("warning: {w}");
        }
    }
    Ok(clean(format!("{text}\n{row}\n")))
}

fn regress(c: &ExperimentConfig) -> Result<Emitted> {
    let prep = prepare(c)?;
    let trace = iterate_regression(&RegressionProblem {
        h: prep.h.clone(),
        k_test: prep.k_test.clone(),
        y: prep.y.clone(),
        kappa: c.kappa,
        eta: prep.eta,
        steps: c.steps,
    })?;
    let mut out = format!("# {}\n", c.to_json());
    out.push_str(&format!(
        "# u_star_test={} lambda_min={} lambda_max={} eta={}\n",
        prep.u_star_test, prep.lambda_min, prep.lambda_max, prep.eta
    ));
    out.push_str("t,train_residual,u_test,gap\n");
    for (t, (u, ut)) in trace.u.iter().zip(&trace.u_test).enumerate() {
        if t % c.trace_every == 0 || t == c.steps {
            out.push_str(&format!(
                "{t},{},{ut},{}\n",
                (u - &prep.y).norm(),
                (ut - prep.u_star_test).abs()
            ));
        }
    }
    Ok(clean(out))
}

fn train(c: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Emitted> {
    let prep = prepare(c)?;
    let (m, seed) = (c.widths[0], c.seeds[0]);
    let mut params = init_params(prep.dataset.dim(), m, c.bias, c.kappa, seed)?;
    let opts = TrainOptions {
        trace_every: c.trace_every,
        ..TrainOptions::new(StepSize::Fixed(prep.eta), c.steps)
    };
    let trace = match c.mode {
        Mode::Graph => train_gd(&mut params, &prep.dataset, c.policy, &opts, prep.test_graph.as_ref())?,
        Mode::Node => {
            let labels: Vec<f64> = prep.y.iter().copied().collect();
            train_gd_node(
                &mut params,
                &prep.dataset.graphs()[0],
                &labels,
                &prep.train_nodes,
                prep.test_node,
                c.policy,
                &opts,
            )?
        }
    };
    if let Some(p) = checkpoint {
        save_checkpoint(&params, p)?;
    }
    let mut out = format!(
        "# {}\n# m={m} seed={seed} u_star_test={}\n",
        c.to_json(),
        prep.u_star_test
    );
    out.push_str("t,loss,u_test,max_weight_move\n");
    for r in &trace.steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.t,
            r.loss,
            r.u_test.map(|v| v.to_string()).unwrap_or_default(),
            r.max_weight_move
        ));
    }
    Ok(clean(out))
}

fn run(command: &Command) -> Result<(Emitted, Option<PathBuf>)> {
    Ok(match command {
        Command::GenData(a) => (gen_data(a)?, a.out.clone()),
        Command::Gram(a) => (gram(a)?, a.out.clone()),
        Command::NodeGntk(a) => (node_kernel(a)?, a.out.clone()),
        Command::Spectral(a) => (spectral(a)?, a.out.clone()),
        Command::Regress(a) => {
            let c = a.resolve(Mode::Graph)?;
            (regress(&c)?, c.out)
        }
        Command::Train(a) => {
            let c = a.experiment.resolve(Mode::Graph)?;
            (train(&c, a.checkpoint.as_deref())?, c.out)
        }
        Command::Equiv(a) => {
            let c = a.resolve(Mode::Graph)?;
            let r = run_equivalence(&c)?;
            (
                Emitted {
                    text: r.to_csv(),
                    row_errors: r.has_errors(),
                },
                c.out,
            )
        }
        Command::EquivNode(a) => {
            let c = a.resolve(Mode::Node)?;
            let r = run_node_equivalence(&c)?;
            (
                Emitted {
                    text: r.to_csv(),
                    row_errors: r.has_errors(),
                },
                c.out,
            )
        }
        Command::Concentration(a) => {
            let c = a.resolve(Mode::Graph)?;
            (clean(run_concentration(&c)?.to_csv()), c.out)
        }
        Command::Drift(a) => {
            let c = a.resolve(Mode::Graph)?;
            let r = run_drift(&c)?;
            (
                Emitted {
                    text: r.to_csv(),
                    row_errors: r.has_errors(),
                },
                c.out,
            )
        }
    })
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GNTK_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| LabError::Config(format!("GNTK_LAB_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads()
        .and_then(|()| run(&cli.command))
        .and_then(|(e, out)| {
            write_output(out.as_deref(), &e.text)?;
            Ok(e.row_errors)
        });
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: some rows failed; see the error column");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
