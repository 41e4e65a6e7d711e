//! One-hidden-layer graph networks: forward passes, gradients and
//! full-batch gradient descent on the first-layer weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::graph::{aggregate_features, AggregatedFeatures, Graph, GraphDataset, Mode, SelfLoopPolicy};
use crate::kernel::{indicator_gram, KernelMatrix, Provenance};
use crate::rng::{fill_standard_normal, keyed_rng, Role, StreamKey};
use crate::spectral::{lambda_extremes, PowerOptions};

/// Weights `W` (`d x m`), frozen output signs `a`, bias `b` and output multiplier `kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    w: DMatrix<f64>,
    a: Vec<f64>,
    bias: f64,
    kappa: f64,
}

impl GnnParams {
    pub fn new(w: DMatrix<f64>, a: Vec<f64>, bias: f64, kappa: f64) -> Result<Self> {
        if w.ncols() == 0 || w.nrows() == 0 {
            return Err(LabError::domain("d and m must be at least 1"));
        }
        if a.len() != w.ncols() {
            return Err(LabError::Dimension {
                context: "output signs",
                expected: w.ncols(),
                found: a.len(),
            });
        }
        if let Some(bad) = a.iter().find(|&&s| s != 1.0 && s != -1.0) {
            return Err(LabError::domain(format!("output sign {bad} is not +1 or -1")));
        }
        if !(bias >= 0.0) {
            return Err(LabError::domain(format!("bias must be >= 0, got {bias}")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(LabError::domain(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Self { w, a, bias, kappa })
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn with_w(&self, w: DMatrix<f64>) -> Result<Self> {
        Self::new(w, self.a.clone(), self.bias, self.kappa)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.d() {
            return Err(LabError::Dimension {
                context: "feature dimension vs weights",
                expected: self.d(),
                found: x.nrows(),
            });
        }
        Ok(())
    }
}

/// Gaussian weights and uniform signs from the `(seed, Init, m)` stream:
/// all of `W` column-major, then `a`.
pub fn init_params(d: usize, m: usize, bias: f64, kappa: f64, seed: u64) -> Result<GnnParams> {
    if d == 0 || m == 0 {
        return Err(LabError::domain("d and m must be at least 1"));
    }
    let mut rng = keyed_rng(seed, StreamKey::new(Role::Init, m as u64));
    let mut data = vec![0.0; d * m];
    fill_standard_normal(&mut rng, &mut data);
    let a = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    GnnParams::new(DMatrix::from_vec(d, m, data), a, bias, kappa)
}

#[inline]
fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// Per-column outputs `(1/sqrt m) sum_r a_r relu(w_r.x_l - b)`.
fn column_outputs(params: &GnnParams, x: &DMatrix<f64>) -> Vec<f64> {
    let z = params.w.tr_mul(x);
    let scale = 1.0 / (params.m() as f64).sqrt();
    z.column_iter()
        .map(|col| {
            col.iter()
                .zip(&params.a)
                .map(|(&zr, &ar)| ar * relu(zr - params.bias))
                .sum::<f64>()
                * scale
        })
        .collect()
}

/// Network output on a whole graph (node outputs summed).
pub fn forward_graph(params: &GnnParams, agg: &AggregatedFeatures) -> Result<f64> {
    params.check_input(agg.matrix())?;
    Ok(column_outputs(params, agg.matrix()).iter().sum())
}

/// Network output on one node.
pub fn forward_node(params: &GnnParams, agg: &AggregatedFeatures, node: usize) -> Result<f64> {
    params.check_input(agg.matrix())?;
    let single = agg.column_as_graph(node)?;
    Ok(column_outputs(params, single.matrix())[0])
}

/// `d x m` gradient of [`forward_graph`] with respect to `W`.
pub fn grad_graph(params: &GnnParams, agg: &AggregatedFeatures) -> Result<DMatrix<f64>> {
    params.check_input(agg.matrix())?;
    let x = agg.matrix();
    let z = params.w.tr_mul(x);
    let active = z.map(|v| if v >= params.bias { 1.0 } else { 0.0 });
    let mut g = x * active.transpose();
    let scale = 1.0 / (params.m() as f64).sqrt();
    for (r, mut col) in g.column_iter_mut().enumerate() {
        col *= params.a[r] * scale;
    }
    Ok(g)
}

/// Step size rule for [`train_gd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    /// `1 / (kappa^2 lambda_max(H(0)))` with `H(0)` the kernel at the initial weights.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub eta: StepSize,
    pub steps: usize,
    pub trace_every: usize,
    /// Record `H(t)` at every traced step.
    pub kernel_snapshots: bool,
}

impl TrainOptions {
    pub fn new(eta: StepSize, steps: usize) -> Self {
        Self {
            eta,
            steps,
            trace_every: steps.max(1),
            kernel_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub t: usize,
    pub loss: f64,
    pub u_train: DVector<f64>,
    pub u_test: Option<f64>,
    pub max_weight_move: f64,
    /// `|H(t) - H(0)|_F`.
    pub kernel_drift_frob: Option<f64>,
    pub kernel: Option<KernelMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<TrainRecord>,
    pub eta: f64,
    pub total_steps: usize,
    pub m: usize,
    pub kappa: f64,
    pub mode: Mode,
    /// Number of nodes in the largest training graph (1 in node mode).
    pub max_nodes: usize,
}

impl TrainTrace {
    pub fn last(&self) -> &TrainRecord {
        self.steps.last().expect("trace always holds the initial record")
    }

    pub fn initial_kernel(&self) -> Option<&KernelMatrix> {
        self.steps[0].kernel.as_ref()
    }
}

/// Training units: each is a set of aggregated columns with one label.
struct Design {
    units: Vec<AggregatedFeatures>,
    x: DMatrix<f64>,
    owner: Vec<usize>,
    labels: DVector<f64>,
    test: Option<DMatrix<f64>>,
    mode: Mode,
    max_nodes: usize,
}

impl Design {
    fn new(
        units: Vec<AggregatedFeatures>,
        labels: &[f64],
        test: Option<DMatrix<f64>>,
        mode: Mode,
        max_nodes: usize,
    ) -> Result<Self> {
        if units.len() != labels.len() {
            return Err(LabError::Dimension {
                context: "training labels",
                expected: units.len(),
                found: labels.len(),
            });
        }
        let d = units[0].dim();
        let total: usize = units.iter().map(|u| u.num_columns()).sum();
        let mut x = DMatrix::zeros(d, total);
        let mut owner = Vec::with_capacity(total);
        let mut c = 0;
        for (i, u) in units.iter().enumerate() {
            for col in u.matrix().column_iter() {
                x.set_column(c, &col);
                owner.push(i);
                c += 1;
            }
        }
        Ok(Self {
            units,
            x,
            owner,
            labels: DVector::from_column_slice(labels),
            test,
            mode,
            max_nodes,
        })
    }

    fn outputs(&self, params: &GnnParams) -> DVector<f64> {
        let cols = column_outputs(params, &self.x);
        let mut f = DVector::zeros(self.units.len());
        for (c, v) in cols.into_iter().enumerate() {
            f[self.owner[c]] += v;
        }
        f * params.kappa
    }

    fn test_output(&self, params: &GnnParams) -> Option<f64> {
        self.test
            .as_ref()
            .map(|t| params.kappa * column_outputs(params, t).iter().sum::<f64>())
    }

    fn kernel(&self, params: &GnnParams, t: usize) -> Result<KernelMatrix> {
        let (mean, _) = indicator_gram(&self.units, &params.w, params.bias)?;
        KernelMatrix::from_matrix(mean, Provenance::Dynamic { t })
    }
}

fn max_column_move(w: &DMatrix<f64>, w0: &DMatrix<f64>) -> f64 {
    (w - w0).column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max)
}

fn run_gd(params: &mut GnnParams, design: &Design, opts: &TrainOptions) -> Result<TrainTrace> {
    params.check_input(&design.x)?;
    if let Some(t) = &design.test {
        params.check_input(t)?;
    }
    let trace_every = opts.trace_every.max(1);
    let h0 = if opts.kernel_snapshots || opts.eta == StepSize::Auto {
        Some(design.kernel(params, 0)?)
    } else {
        None
    };
    let kappa = params.kappa;
    let eta = match opts.eta {
        StepSize::Fixed(e) if e > 0.0 && e.is_finite() => e,
        StepSize::Fixed(e) => return Err(LabError::Config(format!("step size must be positive, got {e}"))),
        StepSize::Auto => {
            let top = lambda_extremes(h0.as_ref().expect("computed above"), PowerOptions::default().tol)?.lambda_max;
            if !(top > 0.0) {
                return Err(LabError::Config(
                    "automatic step size needs a nonzero initial kernel".into(),
                ));
            }
            1.0 / (kappa * kappa * top)
        }
    };
    let w0 = params.w.clone();
    let sqrt_m = (params.m() as f64).sqrt();
    let mut records = Vec::new();
    for t in 0..=opts.steps {
        let u = design.outputs(params);
        let resid = &design.labels - &u;
        let loss = 0.5 * resid.norm_squared();
        if !loss.is_finite() {
            return Err(LabError::Divergence { step: t, loss });
        }
        if t % trace_every == 0 || t == opts.steps {
            let kernel = if opts.kernel_snapshots {
                Some(if t == 0 {
                    h0.clone().expect("computed above")
                } else {
                    design.kernel(params, t)?
                })
            } else {
                None
            };
            let drift = match (&kernel, &h0) {
                (Some(k), Some(h0)) if opts.kernel_snapshots => Some((k.matrix() - h0.matrix()).norm()),
                _ => None,
            };
            records.push(TrainRecord {
                t,
                loss,
                u_train: u.clone(),
                u_test: design.test_output(params),
                max_weight_move: max_column_move(&params.w, &w0),
                kernel_drift_frob: drift,
                kernel,
            });
        }
        if t == opts.steps {
            break;
        }
        // W += eta kappa sum_i (y_i - u_i) df_i/dW
        let z = params.w.tr_mul(&design.x);
        let mut coef = z.map(|v| if v >= params.bias { 1.0 } else { 0.0 });
        for (c, mut col) in coef.column_iter_mut().enumerate() {
            col *= resid[design.owner[c]];
        }
        let mut step = &design.x * coef.transpose();
        let base = eta * kappa / sqrt_m;
        for (r, mut col) in step.column_iter_mut().enumerate() {
            col *= base * params.a[r];
        }
        params.w += step;
    }
    Ok(TrainTrace {
        steps: records,
        eta,
        total_steps: opts.steps,
        m: params.m(),
        kappa,
        mode: design.mode,
        max_nodes: design.max_nodes,
    })
}

/// Gradient descent on `1/2 |Y - kappa f(W, G)|^2` over the training graphs.
pub fn train_gd(
    params: &mut GnnParams,
    dataset: &GraphDataset,
    policy: SelfLoopPolicy,
    opts: &TrainOptions,
    test_graph: Option<&Graph>,
) -> Result<TrainTrace> {
    if dataset.mode() != Mode::Graph {
        return Err(LabError::Config(
            "train_gd expects a graph-mode dataset; use train_gd_node".into(),
        ));
    }
    let test = test_graph.map(|g| aggregate_features(g, policy).matrix().clone());
    let design = Design::new(
        dataset.aggregated(policy),
        dataset.labels(),
        test,
        Mode::Graph,
        dataset.max_nodes(),
    )?;
    run_gd(params, &design, opts)
}

/// Gradient descent on the node outputs of `train_nodes` of one graph; the
/// optional test node is only evaluated.
pub fn train_gd_node(
    params: &mut GnnParams,
    graph: &Graph,
    labels: &[f64],
    train_nodes: &[usize],
    test_node: Option<usize>,
    policy: SelfLoopPolicy,
    opts: &TrainOptions,
) -> Result<TrainTrace> {
    let agg = aggregate_features(graph, policy);
    if train_nodes.is_empty() {
        return Err(LabError::Config(
            "node training needs at least one training node".into(),
        ));
    }
    let units = train_nodes
        .iter()
        .map(|&u| agg.column_as_graph(u))
        .collect::<Result<Vec<_>>>()?;
    let test = test_node
        .map(|u| agg.column_as_graph(u).map(|a| a.matrix().clone()))
        .transpose()?;
    let design = Design::new(units, labels, test, Mode::Node, 1)?;
    run_gd(params, &design, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_separated_dataset, GeneratorSpec};
    use proptest::prelude::*;

    fn agg_of(cols: &[&[f64]]) -> AggregatedFeatures {
        let d = cols[0].len();
        let data: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        AggregatedFeatures::from_matrix(DMatrix::from_vec(d, cols.len(), data), SelfLoopPolicy::Include)
    }

    fn params(w: &[f64], d: usize, a: &[f64]) -> GnnParams {
        GnnParams::new(DMatrix::from_column_slice(d, a.len(), w), a.to_vec(), 0.0, 1.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_balanced() {
        let p = init_params(3, 8, 0.0, 0.5, 1).unwrap();
        assert_eq!(p, init_params(3, 8, 0.0, 0.5, 1).unwrap());
        assert_ne!(p, init_params(3, 8, 0.0, 0.5, 2).unwrap());
        let big = init_params(1, 100_000, 0.0, 1.0, 3).unwrap();
        let mean = big.w().mean();
        let plus = big.a().iter().filter(|&&s| s > 0.0).count() as f64 / 1e5;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((plus - 0.5).abs() < 0.01, "{plus}");
    }

    #[test]
    fn init_weights_match_monte_carlo_draws() {
        let p = init_params(4, 33, 0.0, 1.0, 12).unwrap();
        assert_eq!(p.w(), &crate::kernel::draw_weights(4, 33, 12));
    }

    #[test]
    fn forward_examples() {
        let x = agg_of(&[&[1.0, 0.0]]);
        assert_eq!(forward_graph(&params(&[2.0, 0.0], 2, &[1.0]), &x).unwrap(), 2.0);
        assert_eq!(forward_graph(&params(&[-2.0, 0.0], 2, &[-1.0]), &x).unwrap(), 0.0);
        let x = agg_of(&[&[0.3, -1.0], &[2.0, 0.1]]);
        assert_eq!(
            forward_graph(&params(&[1.0, 2.0, 1.0, 2.0], 2, &[1.0, -1.0]), &x).unwrap(),
            0.0
        );
        let x = agg_of(&[&[5.0, 0.0]]);
        assert_eq!(forward_node(&params(&[0.0, 1.0], 2, &[1.0]), &x, 0).unwrap(), 0.0);
        assert!(forward_node(&params(&[0.0, 1.0], 2, &[1.0]), &x, 1).is_err());
        assert!(forward_graph(&params(&[1.0], 1, &[1.0]), &x).is_err());
    }

    #[test]
    fn grad_examples() {
        let x = agg_of(&[&[1.0, 0.0]]);
        let g = grad_graph(&params(&[2.0, 0.0], 2, &[1.0]), &x).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
        let dead = GnnParams::new(DMatrix::from_column_slice(2, 1, &[2.0, 0.0]), vec![1.0], 5.0, 1.0).unwrap();
        assert!(grad_graph(&dead, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let g = Graph::singleton_nodes(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let ds = GraphDataset::new(Mode::Graph, vec![g], vec![0.0]).unwrap();
        let mut p = GnnParams::new(
            DMatrix::from_column_slice(2, 2, &[-1.0, 0.0, -2.0, 3.0]),
            vec![1.0, -1.0],
            0.0,
            1.0,
        )
        .unwrap();
        let before = p.clone();
        let trace = train_gd(
            &mut p,
            &ds,
            SelfLoopPolicy::Include,
            &TrainOptions::new(StepSize::Fixed(0.1), 20),
            None,
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(trace.last().max_weight_move, 0.0);
    }

    #[test]
    fn zero_steps_gives_single_record() {
        let ds = generate_separated_dataset(&GeneratorSpec::graph_mode(2, 2, 3, 0.2, 0.5, 1)).unwrap();
        let mut p = init_params(3, 16, 0.0, 1.0, 0).unwrap();
        let trace = train_gd(
            &mut p,
            &ds,
            SelfLoopPolicy::Include,
            &TrainOptions::new(StepSize::Fixed(0.1), 0),
            None,
        )
        .unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].t, 0);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = generate_separated_dataset(&GeneratorSpec::graph_mode(2, 2, 3, 0.2, 0.5, 1)).unwrap();
        let mut p = init_params(3, 16, 0.0, 1.0, 0).unwrap();
        let err = train_gd(
            &mut p,
            &ds,
            SelfLoopPolicy::Include,
            &TrainOptions::new(StepSize::Fixed(1e200), 50),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, LabError::Divergence { .. }));
    }

    #[test]
    fn training_tracks_linearized_dynamics() {
        // two singleton graphs; predictor-space oracle u <- u + eta kappa^2 H(0) (Y - u)
        let f = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let g = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let ds = GraphDataset::new(
            Mode::Graph,
            vec![Graph::singleton_nodes(f).unwrap(), Graph::singleton_nodes(g).unwrap()],
            vec![0.7, -0.4],
        )
        .unwrap();
        let mut p = init_params(2, 512, 0.0, 1.0, 5).unwrap();
        let h0 = crate::dynamics::dynamic_gram(&p, &ds, SelfLoopPolicy::Include).unwrap();
        let opts = TrainOptions {
            trace_every: 1,
            ..TrainOptions::new(StepSize::Auto, 200)
        };
        let trace = train_gd(&mut p, &ds, SelfLoopPolicy::Include, &opts, None).unwrap();
        assert!(trace.last().loss <= 1e-3 * trace.steps[0].loss);
        for w in trace.steps.windows(2) {
            assert!(
                w[1].loss <= w[0].loss * (1.0 + 1e-9) + 1e-24,
                "t={} {} -> {}",
                w[1].t,
                w[0].loss,
                w[1].loss
            );
        }
        let y = DVector::from_column_slice(ds.labels());
        let mut u = trace.steps[0].u_train.clone();
        let step = trace.eta * h0.matrix();
        for rec in trace.steps.iter().take(20).skip(1) {
            u = &u + &step * (&y - &u);
            let err0 = (&trace.steps[0].u_train - &y).norm();
            let gap = (&rec.u_train - &u).norm();
            assert!(gap <= 0.1 * err0, "t={} gap={gap}", rec.t);
        }
    }

    #[test]
    fn node_training_reduces_loss() {
        let ds = generate_separated_dataset(&GeneratorSpec::node_mode(5, 3, 0.2, 0.5, 2)).unwrap();
        let g = &ds.graphs()[0];
        let mut p = init_params(3, 256, 0.0, 0.5, 1).unwrap();
        let train = [0, 1, 2, 3];
        let labels: Vec<f64> = train.iter().map(|&u| ds.labels()[u]).collect();
        let trace = train_gd_node(
            &mut p,
            g,
            &labels,
            &train,
            Some(4),
            SelfLoopPolicy::Include,
            &TrainOptions::new(StepSize::Auto, 300),
        )
        .unwrap();
        assert!(trace.last().loss < 0.1 * trace.steps[0].loss);
        assert!(trace.last().u_test.is_some());
    }

    fn kink_free(p: &GnnParams, x: &DMatrix<f64>) -> bool {
        p.w().tr_mul(x).iter().all(|z| (z - p.bias()).abs() >= 1e-4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_identities(seed in any::<u64>(), c in 0.1f64..5.0) {
            let ds = generate_separated_dataset(&GeneratorSpec::graph_mode(1, 4, 3, 0.1, 0.5, seed % 1000)).unwrap();
            let agg = aggregate_features(&ds.graphs()[0], SelfLoopPolicy::Include);
            let p = init_params(3, 32, 0.0, 1.0, seed).unwrap();
            let f = forward_graph(&p, &agg).unwrap();
            let nodes: f64 = (0..4).map(|u| forward_node(&p, &agg, u).unwrap()).sum();
            prop_assert!((f - nodes).abs() < 1e-12);
            let scaled = p.with_w(p.w() * c).unwrap();
            prop_assert!((forward_graph(&scaled, &agg).unwrap() - c * f).abs() < 1e-10 * (1.0 + f.abs() * c));
        }

        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>(), bias in 0.0f64..0.5) {
            let ds = generate_separated_dataset(&GeneratorSpec::graph_mode(1, 3, 3, 0.1, 0.6, seed % 1000)).unwrap();
            let agg = aggregate_features(&ds.graphs()[0], SelfLoopPolicy::Include);
            let p0 = init_params(3, 6, 0.0, 1.0, seed).unwrap();
            let p = GnnParams::new(p0.w().clone(), p0.a().to_vec(), bias, 1.0).unwrap();
            prop_assume!(kink_free(&p, agg.matrix()));
            let g = grad_graph(&p, &agg).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(3, 6);
            for k in 0..18 {
                let mut wp = p.w().clone();
                wp[k] += h;
                let mut wm = p.w().clone();
                wm[k] -= h;
                fd[k] = (forward_graph(&p.with_w(wp).unwrap(), &agg).unwrap()
                    - forward_graph(&p.with_w(wm).unwrap(), &agg).unwrap()) / (2.0 * h);
            }
            let rel = (&fd - &g).norm() / g.norm().max(1e-12);
            prop_assert!(rel <= 1e-5, "rel {rel}");
        }
    }
}
