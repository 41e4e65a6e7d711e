//! Multi-level, multi-layer node networks at initialization and their
//! empirical tangent kernel.

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};
use crate::graph::{aggregate_columns, aggregate_features, Graph, SelfLoopPolicy};
use crate::kernel::{KernelMatrix, Provenance};
use crate::rng::{fill_standard_normal, keyed_rng, Role, StreamKey};

pub const C_SIGMA: f64 = 2.0;

/// `L` levels of `R` ReLU layers of width `m`, plus a Gaussian readout used
/// only by the empirical kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiNet {
    d: usize,
    m: usize,
    // weights[l][r]; weights[0][0] is m x d, all others m x m
    weights: Vec<Vec<DMatrix<f64>>>,
    readout: DVector<f64>,
}

impl MultiNet {
    /// Standard Gaussian entries from the `(seed, MultiNet, m)` stream: each
    /// matrix column-major, level by level and layer by layer, then the readout.
    pub fn init(d: usize, m: usize, levels: usize, layers: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 || levels == 0 || layers == 0 {
            return Err(LabError::domain("MultiNet needs d, m, L, R >= 1"));
        }
        let mut rng = keyed_rng(seed, StreamKey::new(Role::MultiNet, m as u64));
        let mut weights = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut level = Vec::with_capacity(layers);
            for r in 0..layers {
                let cols = if l == 0 && r == 0 { d } else { m };
                let mut data = vec![0.0; m * cols];
                fill_standard_normal(&mut rng, &mut data);
                level.push(DMatrix::from_vec(m, cols, data));
            }
            weights.push(level);
        }
        let mut v = vec![0.0; m];
        fill_standard_normal(&mut rng, &mut v);
        Ok(Self {
            d,
            m,
            weights,
            readout: DVector::from_vec(v),
        })
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn layers(&self) -> usize {
        self.weights[0].len()
    }

    pub fn width(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn weight(&self, level: usize, layer: usize) -> &DMatrix<f64> {
        &self.weights[level][layer]
    }

    fn scale(&self) -> f64 {
        (C_SIGMA / self.m as f64).sqrt()
    }
}

/// Intermediate values of one forward pass. `inputs[l][r]` is the input of
/// layer `r` of level `l` (so `inputs[l][0]` is the aggregated level input)
/// and `preacts[l][r] = W inputs[l][r]`.
#[derive(Debug, Clone)]
pub struct MultiNetPass {
    pub inputs: Vec<Vec<DMatrix<f64>>>,
    pub preacts: Vec<Vec<DMatrix<f64>>>,
    pub output: DMatrix<f64>,
}

pub fn forward_multilayer_pass(net: &MultiNet, graph: &Graph, policy: SelfLoopPolicy) -> Result<MultiNetPass> {
    if graph.dim() != net.d {
        return Err(LabError::Dimension {
            context: "MultiNet input",
            expected: net.d,
            found: graph.dim(),
        });
    }
    let s = net.scale();
    let mut inputs = Vec::with_capacity(net.levels());
    let mut preacts = Vec::with_capacity(net.levels());
    let mut g = aggregate_features(graph, policy).matrix().clone();
    for (l, level) in net.weights.iter().enumerate() {
        if l > 0 {
            g = aggregate_columns(graph, policy, &g);
        }
        let mut ins = Vec::with_capacity(level.len());
        let mut pre = Vec::with_capacity(level.len());
        for w in level {
            let z = w * &g;
            let next = z.map(|v| s * v.max(0.0));
            ins.push(std::mem::replace(&mut g, next));
            pre.push(z);
        }
        inputs.push(ins);
        preacts.push(pre);
    }
    Ok(MultiNetPass {
        inputs,
        preacts,
        output: g,
    })
}

/// `m x N` matrix whose column `u` is the last layer's output at node `u`.
pub fn forward_multilayer(net: &MultiNet, graph: &Graph, policy: SelfLoopPolicy) -> Result<DMatrix<f64>> {
    Ok(forward_multilayer_pass(net, graph, policy)?.output)
}

/// `w^T x` computed only for the `live` columns of `x`; the rest are zero.
fn tr_mul_live(w: &DMatrix<f64>, x: &DMatrix<f64>, live: &[bool]) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..x.ncols()).filter(|&c| live[c]).collect();
    let prod = w.tr_mul(&x.select_columns(&idx));
    let mut out = DMatrix::zeros(w.ncols(), x.ncols());
    for (k, &c) in idx.iter().enumerate() {
        out.set_column(c, &prod.column(k));
    }
    out
}

/// Finite-width tangent kernel of `F(u) = v . f(u)` with respect to every
/// weight matrix and the readout `v`:
/// `<dF(u)/dTheta, dF(u')/dTheta> + <f(u), f(u')>`. Over the Gaussian
/// readout this averages to `sum_k <df_k(u)/dTheta, df_k(u')/dTheta> + <f(u), f(u')>`.
pub fn empirical_ntk_node(net: &MultiNet, graph: &Graph, policy: SelfLoopPolicy) -> Result<KernelMatrix> {
    let pass = forward_multilayer_pass(net, graph, policy)?;
    let n = graph.num_nodes();
    let m = net.m;
    let s = net.scale();
    // adjoint block u (columns u*n..u*n+n) holds dF(u)/d(current layer output)
    let mut adj = DMatrix::zeros(m, n * n);
    for u in 0..n {
        adj.column_mut(u * n + u).copy_from(&net.readout);
    }
    // adjoint columns that can be nonzero: (u, v) with v reachable from u
    let mut live: Vec<bool> = (0..n * n).map(|c| c / n == c % n).collect();
    let mut kernel = pass.output.tr_mul(&pass.output);
    for l in (0..net.levels()).rev() {
        for r in (0..net.layers()).rev() {
            let z = &pass.preacts[l][r];
            let mut dz = adj;
            for u in 0..n {
                for v in 0..n {
                    let mut col = dz.column_mut(u * n + v);
                    for (x, &zz) in col.iter_mut().zip(z.column(v).iter()) {
                        *x *= if zz >= 0.0 { s } else { 0.0 };
                    }
                }
            }
            let g = &pass.inputs[l][r];
            let gg = g.tr_mul(g);
            let q = dz.tr_mul(&dz);
            for u in 0..n {
                for w in u..n {
                    let mut acc = 0.0;
                    for v in 0..n {
                        for v2 in 0..n {
                            acc += q[(u * n + v, w * n + v2)] * gg[(v, v2)];
                        }
                    }
                    kernel[(u, w)] += acc;
                }
            }
            if l == 0 && r == 0 {
                adj = DMatrix::zeros(0, 0);
                break;
            }
            adj = tr_mul_live(&net.weights[l][r], &dz, &live);
            if r == 0 {
                live = (0..n * n)
                    .map(|c| graph.members(c % n, policy).iter().any(|&w| live[c / n * n + w]))
                    .collect();
                // back through the neighbor sum between levels
                for u in 0..n {
                    let block = adj.columns(u * n, n).into_owned();
                    adj.columns_mut(u * n, n)
                        .copy_from(&aggregate_columns(graph, policy, &block));
                }
            }
        }
    }
    drop(adj);
    KernelMatrix::from_matrix(kernel, Provenance::MonteCarlo { m, seed: 0, bias: 0.0 })
}
