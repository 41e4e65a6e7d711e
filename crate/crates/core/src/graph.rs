//! Graphs, neighbor aggregation, dataset containers and the separated-dataset
//! generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{keyed_rng, standard_normal, Role, StreamKey};

/// Whether a node counts as its own neighbor during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfLoopPolicy {
    #[default]
    Include,
    Exclude,
}

impl std::fmt::Display for SelfLoopPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelfLoopPolicy::Include => f.write_str("include"),
            SelfLoopPolicy::Exclude => f.write_str("exclude"),
        }
    }
}

impl std::str::FromStr for SelfLoopPolicy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(SelfLoopPolicy::Include),
            "exclude" => Ok(SelfLoopPolicy::Exclude),
            other => Err(LabError::Config(format!(
                "unknown self-loop policy {other:?} (expected include|exclude)"
            ))),
        }
    }
}

/// Regression mode of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Graph,
    Node,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Graph => f.write_str("graph"),
            Mode::Node => f.write_str("node"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Mode::Graph),
            "node" => Ok(Mode::Node),
            other => Err(LabError::Config(format!(
                "unknown mode {other:?} (expected graph|node)"
            ))),
        }
    }
}

/// An undirected graph with one `d`-dimensional feature column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: DMatrix<f64>,
    // sorted, deduplicated, never contains the node itself
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from a `d x N` feature matrix and an undirected edge
    /// list (each edge listed once, no self-loops).
    pub fn new(features: DMatrix<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = features.ncols();
        if n == 0 {
            return Err(LabError::domain("a graph needs at least one node"));
        }
        let mut adjacency = vec![Vec::new(); n];
        for (k, &(u, v)) in edges.iter().enumerate() {
            for node in [u, v] {
                if node >= n {
                    return Err(LabError::schema(
                        format!("edges[{k}]"),
                        format!("node index {node} out of range for {n} nodes"),
                    ));
                }
            }
            if u == v {
                return Err(LabError::schema(
                    format!("edges[{k}]"),
                    "self-loops are controlled by the self-loop policy, not the edge list",
                ));
            }
            if adjacency[u].contains(&v) {
                return Err(LabError::schema(
                    format!("edges[{k}]"),
                    format!("duplicate edge ({u}, {v})"),
                ));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { features, adjacency })
    }

    /// A graph with no edges.
    pub fn singleton_nodes(features: DMatrix<f64>) -> Result<Self> {
        Self::new(features, &[])
    }

    pub fn num_nodes(&self) -> usize {
        self.features.ncols()
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adjacency[u]
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    /// Aggregation members of `u` in ascending order.
    pub fn members(&self, u: usize, policy: SelfLoopPolicy) -> Vec<usize> {
        let mut out = self.adjacency[u].clone();
        if policy == SelfLoopPolicy::Include {
            let pos = out.partition_point(|&v| v < u);
            out.insert(pos, u);
        }
        out
    }

    /// Relabels nodes: old node `i` becomes new node `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(LabError::Dimension {
                context: "relabeled",
                expected: n,
                found: perm.len(),
            });
        }
        let mut features = DMatrix::zeros(self.dim(), n);
        for (old, &new) in perm.iter().enumerate() {
            features.set_column(new, &self.features.column(old));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::new(features, &edges)
    }

    /// Same topology, new features.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.ncols() != self.num_nodes() {
            return Err(LabError::Dimension {
                context: "with_features",
                expected: self.num_nodes(),
                found: features.ncols(),
            });
        }
        Ok(Self {
            features,
            adjacency: self.adjacency.clone(),
        })
    }
}

/// Training graphs (or a single graph in node mode) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    mode: Mode,
    dim: usize,
    graphs: Vec<Graph>,
    labels: Vec<f64>,
}

impl GraphDataset {
    pub fn new(mode: Mode, graphs: Vec<Graph>, labels: Vec<f64>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| LabError::domain("a dataset needs at least one graph"))?;
        let dim = first.dim();
        for (i, g) in graphs.iter().enumerate() {
            if g.dim() != dim {
                return Err(LabError::schema(
                    format!("graphs[{i}].features"),
                    format!("feature dimension {} differs from {dim}", g.dim()),
                ));
            }
        }
        let expected = match mode {
            Mode::Graph => graphs.len(),
            Mode::Node => {
                if graphs.len() != 1 {
                    return Err(LabError::schema(
                        "graphs",
                        format!("node mode needs exactly one graph, found {}", graphs.len()),
                    ));
                }
                first.num_nodes()
            }
        };
        if labels.len() != expected {
            return Err(LabError::schema(
                "labels",
                format!(
                    "{} labels for {expected} {} in {mode} mode",
                    labels.len(),
                    if mode == Mode::Graph { "graphs" } else { "nodes" }
                ),
            ));
        }
        Ok(Self {
            mode,
            dim,
            graphs,
            labels,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Number of graphs.
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::num_nodes).max().unwrap_or(0)
    }

    pub fn aggregated(&self, policy: SelfLoopPolicy) -> Vec<AggregatedFeatures> {
        self.graphs.iter().map(|g| aggregate_features(g, policy)).collect()
    }

    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        Self::new(self.mode, self.graphs.clone(), labels)
    }
}

/// Neighbor-summed feature columns of one graph, `d x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures {
    matrix: DMatrix<f64>,
    policy: SelfLoopPolicy,
}

impl AggregatedFeatures {
    /// Wraps precomputed columns (e.g. a single vector for a singleton graph).
    pub fn from_matrix(matrix: DMatrix<f64>, policy: SelfLoopPolicy) -> Self {
        Self { matrix, policy }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn policy(&self) -> SelfLoopPolicy {
        self.policy
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_columns(&self) -> usize {
        self.matrix.ncols()
    }

    /// Restricts to a single node, giving the input of the node-level network.
    pub fn column_as_graph(&self, node: usize) -> Result<AggregatedFeatures> {
        if node >= self.num_columns() {
            return Err(LabError::IndexOutOfRange {
                what: "nodes",
                index: node,
                len: self.num_columns(),
            });
        }
        Ok(Self {
            matrix: DMatrix::from_column_slice(self.dim(), 1, self.matrix.column(node).as_slice()),
            policy: self.policy,
        })
    }
}

/// Sums each node's neighbor features (plus its own under `Include`).
pub fn aggregate_features(graph: &Graph, policy: SelfLoopPolicy) -> AggregatedFeatures {
    AggregatedFeatures {
        matrix: aggregate_columns(graph, policy, &graph.features),
        policy,
    }
}

/// Neighbor sum applied to any per-node column matrix (`k x N`).
pub fn aggregate_columns(graph: &Graph, policy: SelfLoopPolicy, values: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, n) = values.shape();
    debug_assert_eq!(n, graph.num_nodes());
    let mut out = DMatrix::zeros(k, n);
    for u in 0..n {
        let mut col = out.column_mut(u);
        for v in graph.members(u, policy) {
            col += values.column(v);
        }
    }
    out
}

/// Largest raw and aggregated feature norms over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureBounds {
    pub raw: f64,
    pub aggregated: f64,
}

pub fn feature_norm_bound(dataset: &GraphDataset, policy: SelfLoopPolicy) -> Result<FeatureBounds> {
    if dataset.is_empty() {
        return Err(LabError::domain("feature bound of an empty dataset"));
    }
    let max_col_norm = |m: &DMatrix<f64>| m.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    let mut bounds = FeatureBounds {
        raw: 0.0,
        aggregated: 0.0,
    };
    for g in dataset.graphs() {
        bounds.raw = bounds.raw.max(max_col_norm(g.features()));
        bounds.aggregated = bounds
            .aggregated
            .max(max_col_norm(aggregate_features(g, policy).matrix()));
    }
    Ok(bounds)
}

fn normalized(columns: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let norm = c.norm();
            if norm == 0.0 || !norm.is_finite() {
                Err(LabError::domain(format!(
                    "unnormalizable point: column {i} has norm {norm}"
                )))
            } else {
                Ok(c / norm)
            }
        })
        .collect()
}

#[inline]
fn pair_separation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm().min((a + b).norm())
}

/// Minimum over distinct pairs of `min(|a - b|, |a + b|)` after normalizing
/// every column. Fewer than two columns have no pairs and give `+inf`.
pub fn delta_separation(columns: &[DVector<f64>]) -> Result<f64> {
    let unit = normalized(columns)?;
    let mut best = f64::INFINITY;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            best = best.min(pair_separation(&unit[i], &unit[j]));
        }
    }
    Ok(best)
}

/// All aggregated columns of a dataset, graph by graph.
pub fn aggregated_columns(dataset: &GraphDataset, policy: SelfLoopPolicy) -> Vec<DVector<f64>> {
    dataset
        .graphs()
        .iter()
        .flat_map(|g| {
            let agg = aggregate_features(g, policy);
            agg.matrix.column_iter().map(|c| c.into_owned()).collect::<Vec<_>>()
        })
        .collect()
}

/// Parameters of [`generate_separated_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Number of graphs (must be 1 in node mode).
    pub n: usize,
    /// Nodes per graph.
    pub nodes: usize,
    pub d: usize,
    pub delta: f64,
    pub edge_prob: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub policy: SelfLoopPolicy,
    #[serde(default = "GeneratorSpec::default_attempts")]
    pub max_attempts: usize,
}

impl GeneratorSpec {
    pub const DEFAULT_ATTEMPTS: usize = 100_000;

    fn default_attempts() -> usize {
        Self::DEFAULT_ATTEMPTS
    }

    pub fn graph_mode(n: usize, nodes: usize, d: usize, delta: f64, edge_prob: f64, seed: u64) -> Self {
        Self {
            n,
            nodes,
            d,
            delta,
            edge_prob,
            seed,
            mode: Mode::Graph,
            policy: SelfLoopPolicy::Include,
            max_attempts: Self::DEFAULT_ATTEMPTS,
        }
    }

    pub fn node_mode(nodes: usize, d: usize, delta: f64, edge_prob: f64, seed: u64) -> Self {
        Self {
            n: 1,
            mode: Mode::Node,
            ..Self::graph_mode(1, nodes, d, delta, edge_prob, seed)
        }
    }
}

// consecutive failed single-node repairs before the whole dataset is redrawn
const REDRAW_EVERY: usize = 32;

fn unit_feature<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| standard_normal(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn random_topology<R: Rng + ?Sized>(rng: &mut R, nodes: usize, edge_prob: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..nodes {
        for v in u + 1..nodes {
            let x: f64 = rng.random();
            if x < edge_prob {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn random_graph<R: Rng + ?Sized>(rng: &mut R, nodes: usize, d: usize, edge_prob: f64) -> Graph {
    let edges = random_topology(rng, nodes, edge_prob);
    let mut features = DMatrix::zeros(d, nodes);
    for u in 0..nodes {
        features.set_column(u, &unit_feature(rng, d));
    }
    Graph::new(features, &edges).expect("generated topology is valid")
}

/// Column index `(graph, node)` of the first pair violating the target, or
/// of the first unnormalizable column (reported as `(c, c)`).
fn first_violation(graphs: &[Graph], policy: SelfLoopPolicy, delta: f64) -> Option<((usize, usize), (usize, usize))> {
    let mut cols = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        let agg = aggregate_features(g, policy);
        for (p, c) in agg.matrix.column_iter().enumerate() {
            let norm = c.norm();
            if norm <= 1e-12 {
                return Some(((i, p), (i, p)));
            }
            cols.push(((i, p), c / norm));
        }
    }
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            if pair_separation(&cols[a].1, &cols[b].1) < delta {
                return Some((cols[a].0, cols[b].0));
            }
        }
    }
    None
}

/// Random Erdős–Rényi graphs with unit-norm features whose aggregated,
/// normalized columns are `delta`-separated across the whole dataset.
///
/// Draw order on the `(seed, Dataset)` stream: for each graph, one uniform per
/// node pair `(u, v)`, `u < v`, in lexicographic order (edge iff below
/// `edge_prob`), then `d` normals per node (normalized). When the candidate
/// violates the target, one node feeding the first violating column is
/// picked uniformly and its feature redrawn; after 32 failed repairs in a
/// row the whole dataset is redrawn. Every separation check counts against
/// `max_attempts`. Labels come afterwards from the `(seed, Labels)` stream,
/// uniform on `[-1, 1)`, one per graph (graph mode) or node (node mode).
pub fn generate_separated_dataset(spec: &GeneratorSpec) -> Result<GraphDataset> {
    if spec.d < 2 {
        return Err(LabError::domain("generator needs d >= 2"));
    }
    if !(spec.delta > 0.0 && spec.delta < std::f64::consts::SQRT_2) {
        return Err(LabError::domain(format!(
            "delta target {} outside (0, sqrt 2)",
            spec.delta
        )));
    }
    if spec.n == 0 || spec.nodes == 0 {
        return Err(LabError::domain("generator needs n >= 1 and nodes >= 1"));
    }
    if spec.mode == Mode::Node && spec.n != 1 {
        return Err(LabError::domain("node mode generates exactly one graph"));
    }
    if !(0.0..=1.0).contains(&spec.edge_prob) {
        return Err(LabError::domain("edge probability outside [0, 1]"));
    }

    let mut rng = keyed_rng(spec.seed, StreamKey::new(Role::Dataset, 0));
    let draw_all = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Graph> {
        (0..spec.n)
            .map(|_| random_graph(rng, spec.nodes, spec.d, spec.edge_prob))
            .collect()
    };
    let mut graphs = draw_all(&mut rng);
    let mut failures_since_redraw = 0;
    let mut accepted = false;
    for _ in 0..spec.max_attempts {
        let Some(((gi, p), _)) = first_violation(&graphs, spec.policy, spec.delta) else {
            accepted = true;
            break;
        };
        failures_since_redraw += 1;
        let members = graphs[gi].members(p, spec.policy);
        if failures_since_redraw >= REDRAW_EVERY || members.is_empty() {
            graphs = draw_all(&mut rng);
            failures_since_redraw = 0;
            continue;
        }
        let pick = members[rng.random_range(0..members.len())];
        let mut features = graphs[gi].features().clone();
        features.set_column(pick, &unit_feature(&mut rng, spec.d));
        graphs[gi] = graphs[gi].with_features(features)?;
    }
    if !accepted {
        return Err(LabError::Generation {
            delta_target: spec.delta,
            attempts: spec.max_attempts,
        });
    }

    let mut label_rng = keyed_rng(spec.seed, StreamKey::new(Role::Labels, 0));
    let count = match spec.mode {
        Mode::Graph => spec.n,
        Mode::Node => spec.nodes,
    };
    let labels = (0..count).map(|_| label_rng.random_range(-1.0..1.0)).collect();
    GraphDataset::new(spec.mode, graphs, labels)
}

/// A held-out graph drawn from the same distribution as the generator's
/// graphs (`(seed, TestGraph)` stream, same draw order, no separation filter).
pub fn generate_test_graph(nodes: usize, d: usize, edge_prob: f64, seed: u64) -> Graph {
    let mut rng = keyed_rng(seed, StreamKey::new(Role::TestGraph, 0));
    random_graph(&mut rng, nodes, d, edge_prob)
}
