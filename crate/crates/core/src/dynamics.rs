//! The kernel at the current weights and its drift during training.

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::gnn::{GnnParams, TrainTrace};
use crate::graph::{AggregatedFeatures, GraphDataset, Mode, SelfLoopPolicy};
use crate::kernel::{indicator_gram, KernelMatrix, Provenance};

/// `<df(W, G)/dW, df(W, H)/dW>` written as the explicit double sum over node
/// pairs and hidden units.
pub fn dynamic_kernel_pair(params: &GnnParams, g: &AggregatedFeatures, h: &AggregatedFeatures) -> Result<f64> {
    for x in [g, h] {
        if x.dim() != params.d() {
            return Err(LabError::Dimension {
                context: "dynamic kernel inputs",
                expected: params.d(),
                found: x.dim(),
            });
        }
    }
    let w = params.w();
    let b = params.bias();
    let mut total = 0.0;
    for r in 0..params.m() {
        let wr = w.column(r);
        for xg in g.matrix().column_iter() {
            if wr.dot(&xg) < b {
                continue;
            }
            for xh in h.matrix().column_iter() {
                if wr.dot(&xh) >= b {
                    total += xg.dot(&xh);
                }
            }
        }
    }
    Ok(total / params.m() as f64)
}

/// `H(t)` over aggregated training inputs.
pub fn dynamic_gram_of(params: &GnnParams, aggs: &[AggregatedFeatures], t: usize) -> Result<KernelMatrix> {
    let (mean, _) = indicator_gram(aggs, params.w(), params.bias())?;
    KernelMatrix::from_matrix(mean, Provenance::Dynamic { t })
}

/// `H` at the given weights (tagged as step 0).
pub fn dynamic_gram(params: &GnnParams, dataset: &GraphDataset, policy: SelfLoopPolicy) -> Result<KernelMatrix> {
    dynamic_gram_of(params, &dataset.aggregated(policy), 0)
}

/// `4 N n sqrt(log(n / delta) / m)`
pub fn concentration_bound(max_nodes: usize, n: usize, delta: f64, m: usize) -> f64 {
    let (nn, n) = (max_nodes as f64, n as f64);
    4.0 * nn * n * ((n / delta).ln().max(0.0) / m as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSample {
    pub t: usize,
    pub ht_vs_h0_frob: f64,
    pub max_weight_move: f64,
    /// `2 N n` times the weight movement at `t`.
    pub bound_drift: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub m: usize,
    pub n: usize,
    pub max_nodes: usize,
    pub h0_vs_cts_frob: f64,
    pub bound_h0: f64,
    pub delta_used: f64,
    pub samples: Vec<DriftSample>,
}

impl DriftReport {
    pub fn violations(&self) -> usize {
        self.samples.iter().filter(|s| s.violation).count()
    }

    pub fn final_drift(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.ht_vs_h0_frob)
    }

    /// Columns `t, ht_vs_h0_frob, max_weight_move, bound_drift`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,ht_vs_h0_frob,max_weight_move,bound_drift\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.t, s.ht_vs_h0_frob, s.max_weight_move, s.bound_drift
            ));
        }
        out
    }
}

/// Drift series of a trace recorded with kernel snapshots, next to the
/// initialization and movement bounds.
pub fn drift_report(
    trace: &TrainTrace,
    dataset: &GraphDataset,
    h_cts: &KernelMatrix,
    delta: f64,
) -> Result<DriftReport> {
    let h0 = trace
        .initial_kernel()
        .ok_or_else(|| LabError::Config("drift report needs a trace recorded with kernel snapshots".into()))?;
    if h0.size() != h_cts.size() {
        return Err(LabError::Dimension {
            context: "drift report kernels",
            expected: h_cts.size(),
            found: h0.size(),
        });
    }
    let n = h0.size();
    if trace.mode == Mode::Graph && dataset.len() != n {
        return Err(LabError::Dimension {
            context: "drift report dataset",
            expected: n,
            found: dataset.len(),
        });
    }
    let max_nodes = trace.max_nodes;
    let scale = 2.0 * max_nodes as f64 * n as f64;
    let mut samples = Vec::with_capacity(trace.steps.len());
    for rec in &trace.steps {
        let k = rec
            .kernel
            .as_ref()
            .ok_or_else(|| LabError::Config(format!("trace record t={} lacks a kernel snapshot", rec.t)))?;
        let drift = (k.matrix() - h0.matrix()).norm();
        let bound = scale * rec.max_weight_move;
        samples.push(DriftSample {
            t: rec.t,
            ht_vs_h0_frob: drift,
            max_weight_move: rec.max_weight_move,
            bound_drift: bound,
            // no movement means no drift; the strict relation only applies once weights move
            violation: if rec.max_weight_move == 0.0 {
                drift > 0.0
            } else {
                drift >= bound
            },
        });
    }
    Ok(DriftReport {
        m: trace.m,
        n,
        max_nodes,
        h0_vs_cts_frob: (h0.matrix() - h_cts.matrix()).norm(),
        bound_h0: concentration_bound(max_nodes, n, delta, trace.m),
        delta_used: delta,
        samples,
    })
}
