//! Kernel regression: the exact interpolating solve and the gradient-flow
//! iteration simulated on the predictors.

use nalgebra::{Cholesky, DVector};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::kernel::KernelMatrix;
use crate::spectral::{lambda_extremes, PowerOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub h: KernelMatrix,
    pub k_test: DVector<f64>,
    pub y: DVector<f64>,
    pub kappa: f64,
    pub eta: f64,
    pub steps: usize,
}

impl RegressionProblem {
    fn validate(&self) -> Result<()> {
        let n = self.h.size();
        if self.y.len() != n {
            return Err(LabError::Dimension {
                context: "labels vs kernel",
                expected: n,
                found: self.y.len(),
            });
        }
        if self.k_test.len() != n {
            return Err(LabError::Dimension {
                context: "test kernel vs kernel",
                expected: n,
                found: self.k_test.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactSolution {
    /// `k_test^T H^{-1} Y`
    pub u_test: f64,
    /// The training predictor at the optimum, which interpolates: `u* = Y`.
    pub u_train: Vec<f64>,
    pub lambda_min: f64,
}

/// `k_test^T H^{-1} Y` through a Cholesky factorization. Refuses kernels with
/// `lambda_min <= floor` (default `1e-10 trace(H)`).
pub fn solve_exact(
    h: &KernelMatrix,
    k_test: &DVector<f64>,
    y: &DVector<f64>,
    lambda_floor: Option<f64>,
) -> Result<ExactSolution> {
    let n = h.size();
    if y.len() != n || k_test.len() != n {
        return Err(LabError::Dimension {
            context: "regression inputs",
            expected: n,
            found: if y.len() != n { y.len() } else { k_test.len() },
        });
    }
    let floor = lambda_floor.unwrap_or(1e-10 * h.trace());
    let lambda_min = lambda_extremes(h, PowerOptions::default().tol)?.lambda_min;
    if lambda_min <= floor {
        return Err(LabError::SingularKernel { lambda_min, floor });
    }
    let chol = Cholesky::new(h.matrix().clone()).ok_or(LabError::SingularKernel { lambda_min, floor })?;
    let alpha = chol.solve(y);
    Ok(ExactSolution {
        u_test: k_test.dot(&alpha),
        u_train: y.iter().copied().collect(),
        lambda_min,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTrace {
    /// `u(t)` for `t = 0..=T`.
    pub u: Vec<DVector<f64>>,
    pub u_test: Vec<f64>,
}

/// `u(t+1) = u + eta kappa^2 H (Y - u)`, `u_test(t+1) = u_test + eta kappa^2 k^T (Y - u)`
/// from `u(0) = 0`, `u_test(0) = 0`.
pub fn iterate_regression(problem: &RegressionProblem) -> Result<RegressionTrace> {
    problem.validate()?;
    let rate = problem.eta * problem.kappa * problem.kappa;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(LabError::Config(format!("eta kappa^2 must be positive, got {rate}")));
    }
    let top = lambda_extremes(&problem.h, PowerOptions::default().tol)?.lambda_max;
    if rate * top >= 2.0 {
        return Err(LabError::Config(format!(
            "unstable step: eta kappa^2 lambda_max = {} >= 2",
            rate * top
        )));
    }
    let n = problem.h.size();
    let mut u = DVector::zeros(n);
    let mut u_test = 0.0;
    let mut trace = RegressionTrace {
        u: Vec::with_capacity(problem.steps + 1),
        u_test: Vec::with_capacity(problem.steps + 1),
    };
    trace.u.push(u.clone());
    trace.u_test.push(u_test);
    for _ in 0..problem.steps {
        let resid = &problem.y - &u;
        u_test += rate * problem.k_test.dot(&resid);
        u += problem.h.matrix() * resid * rate;
        trace.u.push(u.clone());
        trace.u_test.push(u_test);
    }
    Ok(trace)
}

/// `|u_test(T) - k^T H^{-1} Y|`
pub fn regression_gap(problem: &RegressionProblem) -> Result<f64> {
    let exact = solve_exact(&problem.h, &problem.k_test, &problem.y, None)?;
    let trace = iterate_regression(problem)?;
    Ok((trace.u_test.last().expect("trace has t = 0") - exact.u_test).abs())
}
