//! Experiment harness: configuration, width sweeps comparing trained networks
//! with kernel regression, concentration and drift sweeps, and their reports.

use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{concentration_bound, drift_report, DriftReport};
use crate::error::{LabError, Result};
use crate::gnn::{init_params, train_gd, train_gd_node, StepSize, TrainOptions, TrainTrace};
use crate::graph::{
    generate_separated_dataset, generate_test_graph, GeneratorSpec, Graph, GraphDataset, Mode, SelfLoopPolicy,
};
use crate::io::{load_dataset, parse_dataset};
use crate::kernel::{gntk_cross, gntk_gram, mc_gntk_gram, node_single_layer_gram, KernelMatrix};
use crate::regression::{iterate_regression, solve_exact, RegressionProblem};
use crate::spectral::{lambda_extremes, PowerOptions};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path(PathBuf),
    Generate(GeneratorSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

/// `"auto"` (`1 / (kappa^2 lambda_max(H^cts))`) or a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Fixed(f64),
    Auto(AutoTag),
}

impl FromStr for EtaSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(EtaSpec::Auto(AutoTag::Auto));
        }
        s.parse::<f64>()
            .map(EtaSpec::Fixed)
            .map_err(|_| LabError::Config(format!("eta must be \"auto\" or a number, got {s:?}")))
    }
}

fn default_trace_every() -> usize {
    100
}

fn default_confidence() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSource,
    pub widths: Vec<usize>,
    #[serde(rename = "T", alias = "steps")]
    pub steps: usize,
    pub eta: EtaSpec,
    pub kappa: f64,
    #[serde(default)]
    pub bias: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub policy: SelfLoopPolicy,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Failure probability `delta` used in high-probability bounds.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Held-out node in node mode (default: the last node).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_node: Option<usize>,
    /// Dataset file whose first graph is the test graph in graph mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_graph: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Five graphs of four nodes in three dimensions, widths 64..4096, 10 seeds.
    pub fn reference_graph() -> Self {
        Self {
            mode: Mode::Graph,
            dataset: DatasetSource::Generate(GeneratorSpec::graph_mode(5, 4, 3, 0.3, 0.5, 0)),
            widths: vec![64, 256, 1024, 4096],
            steps: 2000,
            eta: EtaSpec::Auto(AutoTag::Auto),
            kappa: 0.25,
            bias: 0.0,
            seeds: (0..10).collect(),
            policy: SelfLoopPolicy::Include,
            trace_every: 100,
            confidence: 0.05,
            test_node: None,
            test_graph: None,
            out: None,
        }
    }

    /// One eight-node graph in four dimensions, same sweep.
    pub fn reference_node() -> Self {
        Self {
            mode: Mode::Node,
            dataset: DatasetSource::Generate(GeneratorSpec::node_mode(8, 4, 0.3, 0.5, 0)),
            ..Self::reference_graph()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(LabError::Config("widths must be nonempty".into()));
        }
        if self.widths.contains(&0) || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config(
                "widths must be positive and strictly increasing".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must be nonempty".into()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(LabError::Config(format!(
                "kappa must lie in (0, 1], got {}",
                self.kappa
            )));
        }
        if !(self.bias >= 0.0) {
            return Err(LabError::Config(format!("bias must be >= 0, got {}", self.bias)));
        }
        if self.trace_every == 0 {
            return Err(LabError::Config("trace_every must be at least 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(LabError::Config("confidence must lie in (0, 1)".into()));
        }
        if let EtaSpec::Fixed(e) = self.eta {
            if !(e > 0.0 && e.is_finite()) {
                return Err(LabError::Config(format!("eta must be positive, got {e}")));
            }
        }
        Ok(())
    }

    /// Loads or generates the training data (mode and policy follow the config).
    pub fn load_dataset(&self) -> Result<GraphDataset> {
        let ds = match &self.dataset {
            DatasetSource::Path(p) => load_dataset(p)?,
            DatasetSource::Generate(spec) => generate_separated_dataset(&GeneratorSpec {
                mode: self.mode,
                policy: self.policy,
                n: if self.mode == Mode::Node { 1 } else { spec.n },
                ..spec.clone()
            })?,
        };
        if ds.mode() != self.mode {
            return Err(LabError::Config(format!(
                "dataset is in {} mode but the config asks for {} mode",
                ds.mode(),
                self.mode
            )));
        }
        Ok(ds)
    }

    /// The held-out graph: from `test_graph` if given, otherwise drawn like the
    /// generated graphs (same node count, edge probability and seed).
    pub fn load_test_graph(&self, ds: &GraphDataset) -> Result<Graph> {
        if let Some(p) = &self.test_graph {
            let text = std::fs::read_to_string(p)?;
            return Ok(parse_dataset(&text)?.graphs()[0].clone());
        }
        Ok(match &self.dataset {
            DatasetSource::Generate(spec) => generate_test_graph(spec.nodes, spec.d, spec.edge_prob, spec.seed),
            DatasetSource::Path(_) => generate_test_graph(ds.max_nodes(), ds.dim(), 0.5, 0),
        })
    }
}

/// Kernel regression target for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: GraphDataset,
    pub test_graph: Option<Graph>,
    pub train_nodes: Vec<usize>,
    pub test_node: Option<usize>,
    pub h: KernelMatrix,
    pub k_test: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub u_star_test: f64,
    pub eta: f64,
}

/// Smallest eigenvalue below which the equivalence runs refuse to start.
pub const LAMBDA_FLOOR: f64 = 1e-8;

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    if config.bias != 0.0 {
        return Err(LabError::Config(
            "kernel comparisons use the unshifted network; set bias = 0".into(),
        ));
    }
    let dataset = config.load_dataset()?;
    let policy = config.policy;
    let (h, k_test, y, test_graph, train_nodes, test_node) = match config.mode {
        Mode::Graph => {
            let test = config.load_test_graph(&dataset)?;
            let h = gntk_gram(&dataset, policy)?;
            let k = gntk_cross(&test, &dataset, policy)?;
            let y = DVector::from_column_slice(dataset.labels());
            (h, k, y, Some(test), Vec::new(), None)
        }
        Mode::Node => {
            let graph = &dataset.graphs()[0];
            let n = graph.num_nodes();
            if n < 2 {
                return Err(LabError::Config("node mode needs at least two nodes".into()));
            }
            let test = config.test_node.unwrap_or(n - 1);
            if test >= n {
                return Err(LabError::IndexOutOfRange {
                    what: "nodes",
                    index: test,
                    len: n,
                });
            }
            let train: Vec<usize> = (0..n).filter(|&u| u != test).collect();
            let full = node_single_layer_gram(graph, policy)?;
            let h = full.select(&train)?;
            let k = DVector::from_iterator(train.len(), train.iter().map(|&u| full.get(test, u)));
            let y = DVector::from_iterator(train.len(), train.iter().map(|&u| dataset.labels()[u]));
            (h, k, y, None, train, Some(test))
        }
    };
    let spec = lambda_extremes(&h, PowerOptions::default().tol)?;
    if spec.lambda_min <= LAMBDA_FLOOR {
        return Err(LabError::SingularKernel {
            lambda_min: spec.lambda_min,
            floor: LAMBDA_FLOOR,
        });
    }
    let u_star_test = solve_exact(&h, &k_test, &y, Some(LAMBDA_FLOOR))?.u_test;
    let eta = match config.eta {
        EtaSpec::Fixed(e) => e,
        EtaSpec::Auto(_) => 1.0 / (config.kappa * config.kappa * spec.lambda_max),
    };
    Ok(Prepared {
        dataset,
        test_graph,
        train_nodes,
        test_node,
        h,
        k_test,
        y,
        lambda_min: spec.lambda_min,
        lambda_max: spec.lambda_max,
        u_star_test,
        eta,
    })
}

fn train_row(prep: &Prepared, config: &ExperimentConfig, m: usize, seed: u64, snapshots: bool) -> Result<TrainTrace> {
    let mut params = init_params(prep.dataset.dim(), m, config.bias, config.kappa, seed)?;
    let opts = TrainOptions {
        eta: StepSize::Fixed(prep.eta),
        steps: config.steps,
        trace_every: config.trace_every,
        kernel_snapshots: snapshots,
    };
    match config.mode {
        Mode::Graph => train_gd(
            &mut params,
            &prep.dataset,
            config.policy,
            &opts,
            prep.test_graph.as_ref(),
        ),
        Mode::Node => {
            let graph = &prep.dataset.graphs()[0];
            let labels: Vec<f64> = prep.y.iter().copied().collect();
            train_gd_node(
                &mut params,
                graph,
                &labels,
                &prep.train_nodes,
                prep.test_node,
                config.policy,
                &opts,
            )
        }
    }
}

fn grid(config: &ExperimentConfig) -> Vec<(usize, u64)> {
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    config
        .widths
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub m: usize,
    pub seed: u64,
    /// `|u_gnn,test(T) - u*_test|`
    pub gap_gnn_vs_exact: Option<f64>,
    /// `|u_gntk,test(T) - u*_test|`
    pub gap_gntkiter_vs_exact: f64,
    /// Same gap after `T/2` steps.
    pub gap_gntkiter_half: f64,
    pub lambda_min: f64,
    pub final_loss: Option<f64>,
    pub u_gnn_test: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub config: ExperimentConfig,
    pub u_star_test: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta: f64,
    pub rows: Vec<EquivalenceRow>,
}

impl EquivalenceReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    /// Median network-vs-exact gap per width, in width order.
    pub fn median_gap_by_width(&self) -> Vec<(usize, f64)> {
        self.config
            .widths
            .iter()
            .filter_map(|&m| {
                let mut gaps: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.m == m)
                    .filter_map(|r| r.gap_gnn_vs_exact)
                    .collect();
                median(&mut gaps).map(|g| (m, g))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.config.to_json());
        out.push_str(&format!(
            "# u_star_test={} lambda_min={} lambda_max={} eta={}\n",
            self.u_star_test, self.lambda_min, self.lambda_max, self.eta
        ));
        out.push_str("m,seed,gap_gnn_vs_exact,gap_gntkiter_vs_exact,lambda_min,final_loss,u_gnn_test,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.m,
                r.seed,
                fmt_opt(r.gap_gnn_vs_exact),
                r.gap_gntkiter_vs_exact,
                r.lambda_min,
                fmt_opt(r.final_loss),
                fmt_opt(r.u_gnn_test),
                r.error.as_deref().map(csv_escape).unwrap_or_default()
            ));
        }
        out
    }
}

fn equivalence(config: &ExperimentConfig, mode: Mode) -> Result<EquivalenceReport> {
    if config.mode != mode {
        return Err(LabError::Config(format!("this run needs mode = {mode}")));
    }
    let prep = prepare(config)?;
    let iter = iterate_regression(&RegressionProblem {
        h: prep.h.clone(),
        k_test: prep.k_test.clone(),
        y: prep.y.clone(),
        kappa: config.kappa,
        eta: prep.eta,
        steps: config.steps,
    })?;
    let gap_iter = (iter.u_test[config.steps] - prep.u_star_test).abs();
    let gap_half = (iter.u_test[config.steps / 2] - prep.u_star_test).abs();
    let rows: Vec<EquivalenceRow> = grid(config)
        .into_par_iter()
        .map(|(m, seed)| {
            let base = EquivalenceRow {
                m,
                seed,
                gap_gnn_vs_exact: None,
                gap_gntkiter_vs_exact: gap_iter,
                gap_gntkiter_half: gap_half,
                lambda_min: prep.lambda_min,
                final_loss: None,
                u_gnn_test: None,
                error: None,
            };
            match train_row(&prep, config, m, seed, false) {
                Ok(trace) => {
                    let last = trace.last();
                    let u = last.u_test.expect("test input supplied");
                    EquivalenceRow {
                        gap_gnn_vs_exact: Some((u - prep.u_star_test).abs()),
                        final_loss: Some(last.loss),
                        u_gnn_test: Some(u),
                        ..base
                    }
                }
                Err(e) => EquivalenceRow {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    Ok(EquivalenceReport {
        config: config.clone(),
        u_star_test: prep.u_star_test,
        lambda_min: prep.lambda_min,
        lambda_max: prep.lambda_max,
        eta: prep.eta,
        rows,
    })
}

/// Graph-level sweep: trained network vs exact kernel regression on the test graph.
pub fn run_equivalence(config: &ExperimentConfig) -> Result<EquivalenceReport> {
    equivalence(config, Mode::Graph)
}

/// Node-level sweep on one graph with a held-out node.
pub fn run_node_equivalence(config: &ExperimentConfig) -> Result<EquivalenceReport> {
    equivalence(config, Mode::Node)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationRow {
    pub m: usize,
    pub seed: u64,
    /// `|H^dis - H^cts|_F`
    pub frob_err: f64,
    pub bound: f64,
    pub mc_stderr_frob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ConcentrationRow>,
    /// Least-squares slope of `log median frob_err` against `log m`; absent
    /// with fewer than two widths.
    pub slope: Option<f64>,
}

impl ConcentrationReport {
    pub fn median_by_width(&self) -> Vec<(usize, f64)> {
        self.config
            .widths
            .iter()
            .filter_map(|&m| {
                let mut v: Vec<f64> = self.rows.iter().filter(|r| r.m == m).map(|r| r.frob_err).collect();
                median(&mut v).map(|x| (m, x))
            })
            .collect()
    }

    pub fn within_bound(&self, m: usize) -> (usize, usize) {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.m == m).collect();
        (rows.iter().filter(|r| r.frob_err <= r.bound).count(), rows.len())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.config.to_json());
        out.push_str("m,seed,frob_err,bound,mc_stderr_frob,slope\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},\n",
                r.m, r.seed, r.frob_err, r.bound, r.mc_stderr_frob
            ));
        }
        out.push_str(&format!("slope,,,,,{}\n", fmt_opt(self.slope)));
        out
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Monte Carlo Gram error against the analytic Gram for every `(m, seed)`.
pub fn run_concentration(config: &ExperimentConfig) -> Result<ConcentrationReport> {
    config.validate()?;
    if config.mode != Mode::Graph {
        return Err(LabError::Config("the concentration sweep runs in graph mode".into()));
    }
    let ds = config.load_dataset()?;
    let h = gntk_gram(&ds, config.policy)?;
    let rows = grid(config)
        .into_par_iter()
        .map(|(m, seed)| {
            let mc = mc_gntk_gram(&ds, config.policy, m, seed)?;
            Ok(ConcentrationRow {
                m,
                seed,
                frob_err: (mc.kernel.matrix() - h.matrix()).norm(),
                bound: concentration_bound(ds.max_nodes(), ds.len(), config.confidence, m),
                mc_stderr_frob: mc.stderr_frob(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ConcentrationReport {
        config: config.clone(),
        rows,
        slope: None,
    };
    let pts: Vec<(f64, f64)> = report
        .median_by_width()
        .into_iter()
        .map(|(m, e)| (m as f64, e))
        .collect();
    report.slope = log_log_slope(&pts);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRow {
    pub m: usize,
    pub seed: u64,
    pub report: Option<DriftReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSweep {
    pub config: ExperimentConfig,
    pub rows: Vec<DriftRow>,
}

impl DriftSweep {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn median_final_drift_by_width(&self) -> Vec<(usize, f64)> {
        self.config
            .widths
            .iter()
            .filter_map(|&m| {
                let mut v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.m == m)
                    .filter_map(|r| r.report.as_ref().map(DriftReport::final_drift))
                    .collect();
                median(&mut v).map(|x| (m, x))
            })
            .collect()
    }

    pub fn violations(&self) -> usize {
        self.rows
            .iter()
            .filter_map(|r| r.report.as_ref())
            .map(DriftReport::violations)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.config.to_json());
        out.push_str("m,seed,t,ht_vs_h0_frob,max_weight_move,bound_drift,violation,h0_vs_cts_frob,bound_h0,error\n");
        for r in &self.rows {
            match (&r.report, &r.error) {
                (Some(rep), _) => {
                    for s in &rep.samples {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},\n",
                            r.m,
                            r.seed,
                            s.t,
                            s.ht_vs_h0_frob,
                            s.max_weight_move,
                            s.bound_drift,
                            s.violation,
                            rep.h0_vs_cts_frob,
                            rep.bound_h0
                        ));
                    }
                }
                (None, e) => out.push_str(&format!(
                    "{},{},,,,,,,,{}\n",
                    r.m,
                    r.seed,
                    csv_escape(e.as_deref().unwrap_or("unknown error"))
                )),
            }
        }
        out
    }
}

/// Trains with kernel snapshots every `trace_every` steps and reports drift.
pub fn run_drift(config: &ExperimentConfig) -> Result<DriftSweep> {
    let prep = prepare(config)?;
    let rows = grid(config)
        .into_par_iter()
        .map(|(m, seed)| {
            let res = train_row(&prep, config, m, seed, true)
                .and_then(|trace| drift_report(&trace, &prep.dataset, &prep.h, config.confidence));
            match res {
                Ok(report) => DriftRow {
                    m,
                    seed,
                    report: Some(report),
                    error: None,
                },
                Err(e) => DriftRow {
                    m,
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(DriftSweep {
        config: config.clone(),
        rows,
    })
}
