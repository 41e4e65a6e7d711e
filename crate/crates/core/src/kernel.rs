//! Kernel matrices: closed-form and Monte Carlo single-layer graph kernels,
//! Gaussian ReLU moments and the multi-level node kernel recursion.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::graph::{aggregate_features, AggregatedFeatures, Graph, GraphDataset, SelfLoopPolicy};
use crate::rng::{fill_standard_normal, keyed_rng, Role, StreamKey};

/// Where a kernel matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    MonteCarlo { m: usize, seed: u64, bias: f64 },
    Dynamic { t: usize },
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Analytic => f.write_str("analytic"),
            Provenance::MonteCarlo { m, seed, bias } => {
                write!(f, "monte_carlo(m={m}, seed={seed}, bias={bias})")
            }
            Provenance::Dynamic { t } => write!(f, "dynamic(t={t})"),
        }
    }
}

/// Exactly symmetric, finite Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl KernelMatrix {
    /// Evaluates `entry(i, j)` on the upper triangle (in parallel) and mirrors it.
    pub fn from_upper<F>(size: usize, provenance: Provenance, entry: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let pairs: Vec<(usize, usize)> = (0..size).flat_map(|i| (i..size).map(move |j| (i, j))).collect();
        let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| entry(i, j)).collect::<Result<_>>()?;
        let mut matrix = DMatrix::zeros(size, size);
        for (&(i, j), &v) in pairs.iter().zip(&values) {
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
        Self::checked(matrix, provenance)
    }

    /// Takes the upper triangle of `matrix` as authoritative.
    pub fn from_matrix(mut matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if !matrix.is_square() {
            return Err(LabError::Dimension {
                context: "kernel matrix columns",
                expected: matrix.nrows(),
                found: matrix.ncols(),
            });
        }
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                matrix[(i, j)] = matrix[(j, i)];
            }
        }
        Self::checked(matrix, provenance)
    }

    fn checked(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if let Some(bad) = matrix.iter().find(|v| !v.is_finite()) {
            return Err(LabError::domain(format!("non-finite kernel entry {bad}")));
        }
        Ok(Self { matrix, provenance })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Principal submatrix on `keep` (in the given order).
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let n = keep.len();
        Self::from_matrix(
            DMatrix::from_fn(n, n, |i, j| self.matrix[(keep[i], keep[j])]),
            self.provenance,
        )
    }
}

/// `P[w.x >= 0, w.x' >= 0]` for Gaussian `w` and inputs at angle `arccos(cos_angle)`.
pub fn coactivation_probability(cos_angle: f64) -> Result<f64> {
    if cos_angle.is_nan() {
        return Err(LabError::domain("co-activation of a NaN cosine"));
    }
    let theta = cos_angle.clamp(-1.0, 1.0).acos();
    Ok((PI - theta) / (2.0 * PI))
}

fn check_dims(a: &AggregatedFeatures, b: &AggregatedFeatures) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LabError::Dimension {
            context: "kernel inputs",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

/// Infinite-width single-layer kernel between two graphs' aggregated features.
pub fn gntk_graph_pair(a: &AggregatedFeatures, b: &AggregatedFeatures) -> Result<f64> {
    check_dims(a, b)?;
    let (xa, xb) = (a.matrix(), b.matrix());
    let (na, nb) = (column_norms(xa), column_norms(xb));
    let mut total = 0.0;
    for (p, ca) in xa.column_iter().enumerate() {
        for (q, cb) in xb.column_iter().enumerate() {
            let ip = ca.dot(&cb);
            if ip == 0.0 {
                continue;
            }
            total += ip * coactivation_probability(ip / (na[p] * nb[q]))?;
        }
    }
    Ok(total)
}

fn gram_of(aggs: &[AggregatedFeatures]) -> Result<KernelMatrix> {
    KernelMatrix::from_upper(aggs.len(), Provenance::Analytic, |i, j| {
        gntk_graph_pair(&aggs[i], &aggs[j])
    })
}

/// Analytic train Gram `H^cts`.
pub fn gntk_gram(dataset: &GraphDataset, policy: SelfLoopPolicy) -> Result<KernelMatrix> {
    gram_of(&dataset.aggregated(policy))
}

/// Kernel between a test graph and every training graph.
pub fn gntk_cross(test: &Graph, dataset: &GraphDataset, policy: SelfLoopPolicy) -> Result<DVector<f64>> {
    let t = aggregate_features(test, policy);
    let aggs = dataset.aggregated(policy);
    let values = aggs
        .iter()
        .map(|a| gntk_graph_pair(&t, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(values))
}

/// Single-layer node kernel on one graph: `k(u, u') = x_u.x_u' * P[co-activation]`.
pub fn node_single_layer_gram(graph: &Graph, policy: SelfLoopPolicy) -> Result<KernelMatrix> {
    let agg = aggregate_features(graph, policy);
    let cols = (0..agg.num_columns())
        .map(|u| agg.column_as_graph(u))
        .collect::<Result<Vec<_>>>()?;
    gram_of(&cols)
}

/// Monte Carlo kernel estimate with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct McKernel {
    pub kernel: KernelMatrix,
    /// Standard error of each entry, from the spread over hidden units.
    pub stderr: DMatrix<f64>,
}

impl McKernel {
    /// Frobenius norm of the standard-error matrix.
    pub fn stderr_frob(&self) -> f64 {
        self.stderr.norm()
    }
}

/// Draws the `d x m` first-layer weights used by `init_params(d, m, .., seed)`,
/// column-major on the `(seed, Init, m)` stream.
pub(crate) fn draw_weights(d: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = keyed_rng(seed, StreamKey::new(Role::Init, m as u64));
    let mut data = vec![0.0; d * m];
    fill_standard_normal(&mut rng, &mut data);
    DMatrix::from_vec(d, m, data)
}

const R_BLOCK: usize = 4096;

/// Gram of `g_i(r) = sum_l x_il 1{w_r.x_il >= b}` averaged over the columns
/// `w_r` of `weights`. Blocks of hidden units are summed in a fixed order.
pub(crate) fn indicator_gram(
    aggs: &[AggregatedFeatures],
    weights: &DMatrix<f64>,
    bias: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = aggs.len();
    let (d, m) = weights.shape();
    for a in aggs {
        if a.dim() != d {
            return Err(LabError::Dimension {
                context: "weights vs features",
                expected: d,
                found: a.dim(),
            });
        }
    }
    if m == 0 {
        return Err(LabError::domain("width m must be at least 1"));
    }
    let blocks: Vec<(usize, usize)> = (0..m).step_by(R_BLOCK).map(|s| (s, (s + R_BLOCK).min(m))).collect();
    let partial: Vec<(Vec<f64>, Vec<f64>)> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let mut sum = vec![0.0; n * n];
            let mut sumsq = vec![0.0; n * n];
            let mut g = vec![0.0; n * d];
            for r in start..end {
                let w = weights.column(r);
                g.iter_mut().for_each(|x| *x = 0.0);
                for (i, a) in aggs.iter().enumerate() {
                    let gi = &mut g[i * d..(i + 1) * d];
                    for col in a.matrix().column_iter() {
                        if w.dot(&col) >= bias {
                            for (acc, x) in gi.iter_mut().zip(col.iter()) {
                                *acc += x;
                            }
                        }
                    }
                }
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in i..n {
                        let gj = &g[j * d..(j + 1) * d];
                        let z: f64 = gi.iter().zip(gj).map(|(x, y)| x * y).sum();
                        sum[i * n + j] += z;
                        sumsq[i * n + j] += z * z;
                    }
                }
            }
            (sum, sumsq)
        })
        .collect();
    let mut sum = vec![0.0; n * n];
    let mut sumsq = vec![0.0; n * n];
    for (s, q) in &partial {
        for k in 0..n * n {
            sum[k] += s[k];
            sumsq[k] += q[k];
        }
    }
    let mf = m as f64;
    let mut mean = DMatrix::zeros(n, n);
    let mut se = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mu = sum[i * n + j] / mf;
            let var = if m > 1 {
                ((sumsq[i * n + j] / mf - mu * mu) * mf / (mf - 1.0)).max(0.0)
            } else {
                0.0
            };
            mean[(i, j)] = mu;
            mean[(j, i)] = mu;
            se[(i, j)] = (var / mf).sqrt();
            se[(j, i)] = se[(i, j)];
        }
    }
    Ok((mean, se))
}

/// Monte Carlo train Gram `H^dis` over `m` Gaussian hidden units. The weights
/// are exactly those of `init_params(d, m, .., seed)`, so this equals the
/// dynamic kernel at initialization.
pub fn mc_gntk_gram(dataset: &GraphDataset, policy: SelfLoopPolicy, m: usize, seed: u64) -> Result<McKernel> {
    shifted_gntk_gram(dataset, policy, 0.0, m, seed)
}

/// Monte Carlo kernel of the shifted network (indicators `1{w.x >= b}`).
pub fn shifted_gntk_gram(
    dataset: &GraphDataset,
    policy: SelfLoopPolicy,
    bias: f64,
    m: usize,
    seed: u64,
) -> Result<McKernel> {
    if !(bias >= 0.0) {
        return Err(LabError::domain(format!("bias must be >= 0, got {bias}")));
    }
    let aggs = dataset.aggregated(policy);
    let weights = draw_weights(dataset.dim(), m, seed);
    let (mean, stderr) = indicator_gram(&aggs, &weights, bias)?;
    Ok(McKernel {
        kernel: KernelMatrix::from_matrix(mean, Provenance::MonteCarlo { m, seed, bias })?,
        stderr,
    })
}

/// Values of the two Gaussian ReLU expectations (with `c_sigma = 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussReluMoments {
    /// `2 E[relu(a) relu(b)]`
    pub sigma: f64,
    /// `2 E[1{a >= 0} 1{b >= 0}]`
    pub sigma_dot: f64,
    /// A variance was (numerically) zero; the angle is taken as a right angle.
    pub degenerate: bool,
}

const DIAG_TOL: f64 = 1e-12;

/// Arc-cosine closed forms for `(a, b) ~ N(0, lambda)`.
pub fn gauss_relu_moments(lambda: [[f64; 2]; 2]) -> Result<GaussReluMoments> {
    let (l11, l22, l12) = (lambda[0][0], lambda[1][1], lambda[0][1]);
    if [l11, l22, l12, lambda[1][0]].iter().any(|v| !v.is_finite()) {
        return Err(LabError::domain("non-finite covariance entry"));
    }
    if l11 < -DIAG_TOL || l22 < -DIAG_TOL {
        return Err(LabError::domain(format!(
            "covariance has a negative diagonal ({l11}, {l22})"
        )));
    }
    let s = (l11.max(0.0) * l22.max(0.0)).sqrt();
    if s <= DIAG_TOL {
        return Ok(GaussReluMoments {
            sigma: 0.0,
            sigma_dot: 0.5,
            degenerate: true,
        });
    }
    let cos = (l12 / s).clamp(-1.0, 1.0);
    let theta = cos.acos();
    Ok(GaussReluMoments {
        sigma: s / PI * (theta.sin() + (PI - theta) * cos),
        sigma_dot: (PI - theta) / PI,
        degenerate: false,
    })
}

/// Snapshot of the node recursion after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGntkState {
    /// 1-based level.
    pub level: usize,
    /// 0 for the aggregated input of the level, then 1..=R.
    pub layer: usize,
    pub sigma: DMatrix<f64>,
    /// Absent at layer 0.
    pub sigma_dot: Option<DMatrix<f64>>,
    pub kernel: DMatrix<f64>,
    pub degenerate_entries: usize,
}

/// Node kernel together with every intermediate state.
#[derive(Debug, Clone)]
pub struct NodeGntk {
    pub kernel: KernelMatrix,
    pub states: Vec<NodeGntkState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeGntkOptions {
    /// Use raw `h_u.h_u'` (no neighbor sums) for the first level's input
    /// covariance and kernel instead of the aggregated form.
    pub strict_unaggregated_init: bool,
}

fn symmetric_from_upper(n: usize, entry: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = entry(i, j);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn aggregate_pairs(graph: &Graph, policy: SelfLoopPolicy, m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = graph.num_nodes();
    let members: Vec<Vec<usize>> = (0..n).map(|u| graph.members(u, policy)).collect();
    symmetric_from_upper(n, |u, w| {
        members[u]
            .iter()
            .map(|&v| members[w].iter().map(|&v2| m[(v, v2)]).sum::<f64>())
            .sum()
    })
}

fn check_state(state: &NodeGntkState) -> Result<()> {
    let n = state.sigma.nrows();
    for i in 0..n {
        if state.sigma[(i, i)] < -DIAG_TOL {
            return Err(LabError::Internal(format!(
                "negative variance {} at node {i}, level {}, layer {}",
                state.sigma[(i, i)],
                state.level,
                state.layer
            )));
        }
        for j in 0..i {
            if state.sigma[(i, j)] != state.sigma[(j, i)] || state.kernel[(i, j)] != state.kernel[(j, i)] {
                return Err(LabError::Internal(format!(
                    "asymmetric recursion state at level {}, layer {}",
                    state.level, state.layer
                )));
            }
        }
    }
    if state.sigma.iter().chain(state.kernel.iter()).any(|v| !v.is_finite()) {
        return Err(LabError::Internal("non-finite recursion state".into()));
    }
    Ok(())
}

/// Node-level kernel of an `L`-level, `R`-layer network: aggregate between
/// levels, then `R` ReLU layers per level.
pub fn node_gntk(
    graph: &Graph,
    policy: SelfLoopPolicy,
    levels: usize,
    layers: usize,
    options: NodeGntkOptions,
) -> Result<NodeGntk> {
    if levels == 0 || layers == 0 {
        return Err(LabError::domain("node kernel needs L >= 1 and R >= 1"));
    }
    let h = graph.features();
    let n = graph.num_nodes();
    let raw = symmetric_from_upper(n, |i, j| h.column(i).dot(&h.column(j)));
    let mut states = Vec::with_capacity(levels * (layers + 1));
    let mut prev_sigma = raw.clone();
    let mut prev_kernel = raw.clone();
    for level in 1..=levels {
        let (mut sigma, mut kernel) = if level == 1 && options.strict_unaggregated_init {
            (raw.clone(), raw.clone())
        } else {
            (
                aggregate_pairs(graph, policy, &prev_sigma),
                aggregate_pairs(graph, policy, &prev_kernel),
            )
        };
        let init = NodeGntkState {
            level,
            layer: 0,
            sigma: sigma.clone(),
            sigma_dot: None,
            kernel: kernel.clone(),
            degenerate_entries: 0,
        };
        check_state(&init)?;
        states.push(init);
        for layer in 1..=layers {
            let mut next_sigma = DMatrix::zeros(n, n);
            let mut dot = DMatrix::zeros(n, n);
            let mut degenerate = 0;
            for i in 0..n {
                for j in i..n {
                    let mom = gauss_relu_moments([[sigma[(i, i)], sigma[(i, j)]], [sigma[(j, i)], sigma[(j, j)]]])?;
                    degenerate += usize::from(mom.degenerate);
                    next_sigma[(i, j)] = mom.sigma;
                    next_sigma[(j, i)] = mom.sigma;
                    dot[(i, j)] = mom.sigma_dot;
                    dot[(j, i)] = mom.sigma_dot;
                }
            }
            kernel = kernel.component_mul(&dot) + &next_sigma;
            sigma = next_sigma;
            let state = NodeGntkState {
                level,
                layer,
                sigma: sigma.clone(),
                sigma_dot: Some(dot),
                kernel: kernel.clone(),
                degenerate_entries: degenerate,
            };
            check_state(&state)?;
            states.push(state);
        }
        prev_sigma = sigma;
        prev_kernel = kernel;
    }
    Ok(NodeGntk {
        kernel: KernelMatrix::from_matrix(prev_kernel, Provenance::Analytic)?,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::rng::{rng_from_seed, standard_normal};
    use proptest::prelude::*;

    fn singleton(v: &[f64]) -> Graph {
        Graph::singleton_nodes(DMatrix::from_column_slice(v.len(), 1, v)).unwrap()
    }

    fn agg(v: &[f64]) -> AggregatedFeatures {
        aggregate_features(&singleton(v), SelfLoopPolicy::Include)
    }

    #[test]
    fn coactivation_values() {
        assert_eq!(coactivation_probability(1.0).unwrap(), 0.5);
        assert_eq!(coactivation_probability(-1.0).unwrap(), 0.0);
        assert!((coactivation_probability(0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((coactivation_probability(1.0 + 1e-9).unwrap() - 0.5).abs() < 1e-15);
        assert!(coactivation_probability(f64::NAN).is_err());
    }

    #[test]
    fn coactivation_matches_sampling() {
        let mut rng = rng_from_seed(5);
        let samples = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..samples {
            let (a, b) = (standard_normal(&mut rng), standard_normal(&mut rng));
            // x = e1, x' = e2
            if a >= 0.0 && b >= 0.0 {
                hits += 1;
            }
        }
        assert!((hits as f64 / samples as f64 - 0.25).abs() < 1e-3);
    }

    #[test]
    fn pair_values() {
        assert!((gntk_graph_pair(&agg(&[1.0, 0.0]), &agg(&[1.0, 0.0])).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gntk_graph_pair(&agg(&[1.0, 0.0]), &agg(&[-1.0, 0.0])).unwrap(), 0.0);
        let a = PI / 3.0;
        let v = gntk_graph_pair(&agg(&[1.0, 0.0]), &agg(&[a.cos(), a.sin()])).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(gntk_graph_pair(&agg(&[0.0, 0.0]), &agg(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(gntk_graph_pair(&agg(&[1.0]), &agg(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn gram_of_identical_graphs_is_constant() {
        let g = Graph::new(DMatrix::from_column_slice(2, 2, &[1.0, 0.5, -0.2, 0.7]), &[(0, 1)]).unwrap();
        let ds = GraphDataset::new(Mode::Graph, vec![g.clone(), g.clone(), g], vec![0.0; 3]).unwrap();
        let h = gntk_gram(&ds, SelfLoopPolicy::Include).unwrap();
        let c = h.get(0, 0);
        assert!(h.matrix().iter().all(|&v| v == c));
    }

    #[test]
    fn gram_of_antipodal_pair() {
        let ds = GraphDataset::new(
            Mode::Graph,
            vec![singleton(&[0.6, 0.8]), singleton(&[-0.6, -0.8])],
            vec![0.0; 2],
        )
        .unwrap();
        let h = gntk_gram(&ds, SelfLoopPolicy::Include).unwrap();
        assert!((h.get(0, 0) - 0.5).abs() < 1e-15 && (h.get(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(h.get(0, 1), 0.0);
    }

    #[test]
    fn mc_gram_single_unit_all_active() {
        let ds = GraphDataset::new(
            Mode::Graph,
            vec![
                Graph::new(DMatrix::from_column_slice(2, 2, &[1.0, 0.2, 0.5, 0.1]), &[(0, 1)]).unwrap(),
                singleton(&[0.3, 0.4]),
            ],
            vec![0.0; 2],
        )
        .unwrap();
        let aggs = ds.aggregated(SelfLoopPolicy::Include);
        let seed = (0..100)
            .find(|&s| {
                let w = draw_weights(2, 1, s);
                aggs.iter()
                    .all(|a| a.matrix().column_iter().all(|c| w.column(0).dot(&c) >= 0.0))
            })
            .expect("some seed activates everything");
        let mc = mc_gntk_gram(&ds, SelfLoopPolicy::Include, 1, seed).unwrap();
        let sums: Vec<DVector<f64>> = aggs.iter().map(|a| a.matrix().column_sum()).collect();
        for i in 0..2 {
            for j in 0..2 {
                assert!((mc.kernel.get(i, j) - sums[i].dot(&sums[j])).abs() < 1e-14);
            }
        }
        assert_eq!(
            mc.kernel,
            mc_gntk_gram(&ds, SelfLoopPolicy::Include, 1, seed).unwrap().kernel
        );
    }

    #[test]
    fn shifted_at_zero_bias_equals_unshifted() {
        let ds =
            crate::graph::generate_separated_dataset(&crate::graph::GeneratorSpec::graph_mode(3, 3, 3, 0.2, 0.5, 4))
                .unwrap();
        let a = mc_gntk_gram(&ds, SelfLoopPolicy::Include, 500, 9).unwrap();
        let b = shifted_gntk_gram(&ds, SelfLoopPolicy::Include, 0.0, 500, 9).unwrap();
        assert_eq!(a.kernel.matrix(), b.kernel.matrix());
    }

    #[test]
    fn shifted_tail_probabilities() {
        let ds = GraphDataset::new(Mode::Graph, vec![singleton(&[0.0, 1.0, 0.0])], vec![0.0]).unwrap();
        let one = shifted_gntk_gram(&ds, SelfLoopPolicy::Include, 1.0, 1_000_000, 2).unwrap();
        // P[g >= 1] = 0.158655
        assert!((one.kernel.get(0, 0) - 0.158_655_253_931_457).abs() < 2e-3);
        let ten = shifted_gntk_gram(&ds, SelfLoopPolicy::Include, 10.0, 1_000_000, 2).unwrap();
        assert!(ten.kernel.get(0, 0) <= 1e-3 * 0.5);
    }

    #[test]
    fn mc_average_is_unbiased() {
        let ds =
            crate::graph::generate_separated_dataset(&crate::graph::GeneratorSpec::graph_mode(3, 3, 3, 0.2, 0.5, 8))
                .unwrap();
        let exact = gntk_gram(&ds, SelfLoopPolicy::Include).unwrap();
        let runs: Vec<DMatrix<f64>> = (0..50)
            .map(|s| {
                mc_gntk_gram(&ds, SelfLoopPolicy::Include, 1000, s)
                    .unwrap()
                    .kernel
                    .into_matrix()
            })
            .collect();
        let k = runs.len() as f64;
        let mean = runs.iter().fold(DMatrix::zeros(3, 3), |acc, r| acc + r) / k;
        for i in 0..3 {
            for j in 0..3 {
                let var = runs.iter().map(|r| (r[(i, j)] - mean[(i, j)]).powi(2)).sum::<f64>() / (k - 1.0);
                let se = (var / k).sqrt();
                assert!(
                    (mean[(i, j)] - exact.get(i, j)).abs() <= 3.0 * se + 1e-12,
                    "entry ({i},{j}): {} vs {} (se {se})",
                    mean[(i, j)],
                    exact.get(i, j)
                );
            }
        }
    }

    #[test]
    fn moments_closed_forms() {
        let m = gauss_relu_moments([[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!((m.sigma - 1.0).abs() < 1e-15 && (m.sigma_dot - 1.0).abs() < 1e-15);
        let m = gauss_relu_moments([[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((m.sigma - 1.0 / PI).abs() < 1e-15 && (m.sigma_dot - 0.5).abs() < 1e-15);
        let m = gauss_relu_moments([[0.0, 0.0], [0.0, 2.0]]).unwrap();
        assert!(m.degenerate && m.sigma == 0.0);
        assert!(gauss_relu_moments([[-1e-6, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn moments_match_sampling() {
        let mut rng = rng_from_seed(17);
        let samples = 1_000_000;
        let (mut s, mut sd) = (0.0, 0.0);
        for _ in 0..samples {
            let a = standard_normal(&mut rng);
            let b = standard_normal(&mut rng);
            s += a.max(0.0) * b.max(0.0);
            if a >= 0.0 && b >= 0.0 {
                sd += 1.0;
            }
        }
        let m = gauss_relu_moments([[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((2.0 * s / samples as f64 - m.sigma).abs() < 2e-3);
        assert!((2.0 * sd / samples as f64 - m.sigma_dot).abs() < 2e-3);
    }

    #[test]
    fn node_recursion_single_node() {
        let g = singleton(&[1.0]);
        let out = node_gntk(&g, SelfLoopPolicy::Include, 1, 1, NodeGntkOptions::default()).unwrap();
        assert!((out.kernel.get(0, 0) - 2.0).abs() < 1e-15);
        assert_eq!(out.states.len(), 2);
        assert_eq!(out.states[0].sigma[(0, 0)], 1.0);
        assert!((out.states[1].sigma[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((out.states[1].sigma_dot.as_ref().unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn node_recursion_zero_features() {
        let g = Graph::new(DMatrix::zeros(2, 3), &[(0, 1), (1, 2)]).unwrap();
        let out = node_gntk(&g, SelfLoopPolicy::Include, 2, 2, NodeGntkOptions::default()).unwrap();
        assert!(out.kernel.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strict_init_differs_only_with_neighbors() {
        let f = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.3, 0.9, -0.5, 0.5]);
        let edgeless = Graph::singleton_nodes(f.clone()).unwrap();
        let strict = NodeGntkOptions {
            strict_unaggregated_init: true,
        };
        let a = node_gntk(&edgeless, SelfLoopPolicy::Include, 2, 2, strict).unwrap();
        let b = node_gntk(&edgeless, SelfLoopPolicy::Include, 2, 2, NodeGntkOptions::default()).unwrap();
        assert_eq!(a.kernel, b.kernel);
        let path = Graph::new(f, &[(0, 1), (1, 2)]).unwrap();
        let a = node_gntk(&path, SelfLoopPolicy::Include, 2, 2, strict).unwrap();
        let b = node_gntk(&path, SelfLoopPolicy::Include, 2, 2, NodeGntkOptions::default()).unwrap();
        assert!((a.kernel.matrix() - b.kernel.matrix()).amax() > 1e-6);
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..5, 1usize..4).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(-2.0f64..2.0, n * d),
                proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
            )
                .prop_map(move |(f, mask)| {
                    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
                    let edges: Vec<_> = pairs
                        .into_iter()
                        .zip(mask)
                        .filter(|(_, k)| *k)
                        .map(|(e, _)| e)
                        .collect();
                    Graph::new(DMatrix::from_column_slice(d, n, &f), &edges).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pair_properties(g in arb_graph(), h in arb_graph(), c in 0.1f64..5.0, rot in 0usize..4) {
            prop_assume!(g.dim() == h.dim());
            let policy = SelfLoopPolicy::Include;
            let (ag, ah) = (aggregate_features(&g, policy), aggregate_features(&h, policy));
            let kgh = gntk_graph_pair(&ag, &ah).unwrap();
            let kgg = gntk_graph_pair(&ag, &ag).unwrap();
            let khh = gntk_graph_pair(&ah, &ah).unwrap();
            prop_assert!(kgh.abs() <= (kgg * khh).sqrt() + 1e-9);
            prop_assert!((gntk_graph_pair(&ah, &ag).unwrap() - kgh).abs() < 1e-12);
            let scaled = aggregate_features(&g.with_features(g.features() * c).unwrap(), policy);
            prop_assert!((gntk_graph_pair(&scaled, &ah).unwrap() - c * kgh).abs() < 1e-9 * (1.0 + kgh.abs() * c));
            let n = g.num_nodes();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let relabeled = aggregate_features(&g.relabeled(&perm).unwrap(), policy);
            prop_assert!((gntk_graph_pair(&relabeled, &ah).unwrap() - kgh).abs() < 1e-9 * (1.0 + kgh.abs()));
        }

        #[test]
        fn analytic_grams_are_psd(g in arb_graph(), levels in 1usize..3, layers in 1usize..3) {
            let policy = SelfLoopPolicy::Include;
            let node = node_gntk(&g, policy, levels, layers, NodeGntkOptions::default()).unwrap();
            let k = node.kernel.matrix();
            prop_assert!(min_eig(k) >= -1e-8 * k.trace().max(1e-300));
            for i in 0..k.nrows() {
                for j in 0..k.nrows() {
                    prop_assert!(k[(i, j)].abs() <= (k[(i, i)] * k[(j, j)]).sqrt() * (1.0 + 1e-9) + 1e-12);
                }
            }
            let single = node_single_layer_gram(&g, policy).unwrap();
            prop_assert!(min_eig(single.matrix()) >= -1e-8 * single.trace().max(1e-300));
        }

        #[test]
        fn node_kernel_is_equivariant(g in arb_graph(), rot in 0usize..4) {
            let policy = SelfLoopPolicy::Include;
            let n = g.num_nodes();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let a = node_gntk(&g, policy, 2, 2, NodeGntkOptions::default()).unwrap().kernel;
            let b = node_gntk(&g.relabeled(&perm).unwrap(), policy, 2, 2, NodeGntkOptions::default()).unwrap().kernel;
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((a.get(i, j) - b.get(perm[i], perm[j])).abs() < 1e-6 * (1.0 + a.get(i, j).abs()));
                }
            }
        }

        #[test]
        fn moments_are_swap_symmetric(a in 0.0f64..3.0, b in 0.0f64..3.0, rho in -1.0f64..1.0) {
            let c = rho * (a * b).sqrt();
            let x = gauss_relu_moments([[a, c], [c, b]]).unwrap();
            let y = gauss_relu_moments([[b, c], [c, a]]).unwrap();
            prop_assert!((x.sigma - y.sigma).abs() < 1e-14);
            prop_assert_eq!(x.sigma_dot, y.sigma_dot);
        }
    }
}
