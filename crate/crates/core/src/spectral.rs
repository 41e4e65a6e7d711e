//! Extreme eigenvalues of small symmetric matrices by shifted power
//! iteration, and the eigenvalue-bound checks built on them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::kernel::KernelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralResult {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub iterations: usize,
    /// `max |Mv - lambda v| / |M|_F` over the two eigenpairs.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 100_000,
        }
    }
}

fn start_vector(n: usize, attempt: usize) -> DVector<f64> {
    // all-ones plus a small deterministic wobble, changed on every restart
    let v = DVector::from_fn(n, |k, _| {
        1.0 + 0.1 * ((k as f64 + 1.0) * (1.0 + attempt as f64) * 0.618_033_988_749_895).sin()
    });
    let norm = v.norm();
    v / norm
}

struct Eigenpair {
    value: f64,
    residual: f64,
    iterations: usize,
}

/// Dominant eigenpair of the PSD matrix `b`, returning the Rayleigh quotient
/// of `m` at the converged vector (`b` is a shift of `m`).
fn dominant(b: &DMatrix<f64>, m: &DMatrix<f64>, frob: f64, opts: PowerOptions) -> Result<Eigenpair> {
    let n = m.nrows();
    let mut attempt = 0;
    let mut v = start_vector(n, attempt);
    let mut best = Eigenpair {
        value: f64::NAN,
        residual: f64::INFINITY,
        iterations: 0,
    };
    let scale = b.norm();
    if scale <= 1e-14 * frob {
        // b vanishes, so m is a multiple of the identity
        let mv = m * &v;
        let value = v.dot(&mv);
        return Ok(Eigenpair {
            value,
            residual: (mv - &v * value).norm() / frob,
            iterations: 0,
        });
    }
    for it in 1..=opts.max_iterations {
        let w = b * &v;
        let norm = w.norm();
        if norm <= 1e-14 * scale {
            // start vector lies in the null space of the shifted matrix
            attempt += 1;
            v = start_vector(n, attempt);
            continue;
        }
        v = w / norm;
        let mv = m * &v;
        let value = v.dot(&mv);
        let residual = (mv - &v * value).norm() / frob;
        if residual < best.residual {
            best = Eigenpair {
                value,
                residual,
                iterations: it,
            };
        }
        if residual <= opts.tol {
            return Ok(Eigenpair {
                value,
                residual,
                iterations: it,
            });
        }
    }
    Err(LabError::Convergence {
        iterations: opts.max_iterations,
        best: Box::new(SpectralResult {
            lambda_min: best.value,
            lambda_max: best.value,
            iterations: best.iterations,
            residual: best.residual,
        }),
    })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn lambda_extremes_of(m: &DMatrix<f64>, opts: PowerOptions) -> Result<SpectralResult> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(LabError::domain("spectral input must be a non-empty square matrix"));
    }
    if !(opts.tol > 0.0) {
        return Err(LabError::domain("tolerance must be positive"));
    }
    let frob = m.norm();
    if !frob.is_finite() {
        return Err(LabError::domain("spectral input has non-finite entries"));
    }
    let n = m.nrows();
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
        .fold(0.0_f64, f64::max);
    if asym > 1e-10 * frob {
        return Err(LabError::domain(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if frob == 0.0 {
        return Ok(SpectralResult {
            lambda_min: 0.0,
            lambda_max: 0.0,
            iterations: 0,
            residual: 0.0,
        });
    }
    // Gershgorin lower bound; shifting by it makes the top eigenvalue dominant
    let lower = (0..n)
        .map(|i| m[(i, i)] - (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let shift = (-lower).max(0.0);
    let top = dominant(&(m + DMatrix::identity(n, n) * shift), m, frob, opts)?;
    let bottom = dominant(&(DMatrix::identity(n, n) * top.value - m), m, frob, opts)?;
    let lambda_min = bottom.value.min(top.value);
    Ok(SpectralResult {
        lambda_min,
        lambda_max: top.value,
        iterations: top.iterations + bottom.iterations,
        residual: top.residual.max(bottom.residual),
    })
}

pub fn lambda_extremes(kernel: &KernelMatrix, tol: f64) -> Result<SpectralResult> {
    lambda_extremes_of(
        kernel.matrix(),
        PowerOptions {
            tol,
            ..PowerOptions::default()
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationCheck {
    pub lambda_min: f64,
    pub bound: f64,
    pub holds: bool,
    pub delta: f64,
    pub n: usize,
    /// Caller's statement that the Gram was built from unit-norm aggregated columns.
    pub unit_norm_attested: bool,
    pub warning: Option<String>,
}

/// Checks `lambda_min(H) >= delta / (100 n^2)`.
pub fn check_separation_bound(
    h: &KernelMatrix,
    delta: f64,
    n: usize,
    unit_norm_attested: bool,
) -> Result<SeparationCheck> {
    if n == 0 || !(delta >= 0.0) {
        return Err(LabError::domain("separation check needs n >= 1 and delta >= 0"));
    }
    let spec = lambda_extremes(h, PowerOptions::default().tol)?;
    let bound = delta / (100.0 * (n * n) as f64);
    let mut warning = None;
    if delta == 0.0 {
        warning = Some("degenerate separation: delta = 0 makes the bound trivial".to_string());
    } else if !unit_norm_attested {
        warning = Some("bound assumes unit-norm aggregated columns; not attested".to_string());
    }
    Ok(SeparationCheck {
        lambda_min: spec.lambda_min,
        bound,
        holds: spec.lambda_min >= bound,
        delta,
        n,
        unit_norm_attested,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftedBoundsCheck {
    pub bias: f64,
    pub lambda_min: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub mc_stderr: f64,
    /// `lambda_min - (lower_bound - 3 stderr)`; nonnegative when the lower bound holds.
    pub lower_margin: f64,
    /// `(upper_bound + 3 stderr) - lambda_min`; nonnegative when the upper bound holds.
    pub upper_margin: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
}

/// Checks `exp(-b^2/2) delta/(100 n^2) <= lambda_min <= exp(-b^2/2)`, each
/// side relaxed by three Monte Carlo standard errors.
pub fn check_shifted_bounds(
    h_shift: &KernelMatrix,
    bias: f64,
    delta: f64,
    n: usize,
    mc_stderr: f64,
) -> Result<ShiftedBoundsCheck> {
    if n == 0 || !(delta >= 0.0) || !(bias >= 0.0) || !(mc_stderr >= 0.0) {
        return Err(LabError::domain(
            "shifted check needs n >= 1, delta >= 0, b >= 0, stderr >= 0",
        ));
    }
    let spec = lambda_extremes(h_shift, PowerOptions::default().tol)?;
    let damp = (-bias * bias / 2.0).exp();
    let lower_bound = damp * delta / (100.0 * (n * n) as f64);
    let upper_bound = damp;
    let lower_margin = spec.lambda_min - (lower_bound - 3.0 * mc_stderr);
    let upper_margin = upper_bound + 3.0 * mc_stderr - spec.lambda_min;
    Ok(ShiftedBoundsCheck {
        bias,
        lambda_min: spec.lambda_min,
        lower_bound,
        upper_bound,
        mc_stderr,
        lower_margin,
        upper_margin,
        lower_holds: lower_margin >= 0.0,
        upper_holds: upper_margin >= 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Provenance;
    use proptest::prelude::*;

    fn km(m: DMatrix<f64>) -> KernelMatrix {
        KernelMatrix::from_matrix(m, Provenance::Analytic).unwrap()
    }

    #[test]
    fn textbook_spectra() {
        let r = lambda_extremes(&km(DMatrix::identity(3, 3)), 1e-8).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-10 && (r.lambda_max - 1.0).abs() < 1e-10);
        let r = lambda_extremes(
            &km(DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 2.0, 9.0]))),
            1e-8,
        )
        .unwrap();
        assert!((r.lambda_min - 2.0).abs() < 1e-7 && (r.lambda_max - 9.0).abs() < 1e-7);
        let r = lambda_extremes(&km(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])), 1e-8).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-7 && (r.lambda_max - 3.0).abs() < 1e-7);
        assert!(r.residual <= 1e-8);
    }

    #[test]
    fn indefinite_and_constant_matrices() {
        let r = lambda_extremes_of(
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            PowerOptions::default(),
        )
        .unwrap();
        assert!((r.lambda_min + 1.0).abs() < 1e-7 && (r.lambda_max - 1.0).abs() < 1e-7);
        let r = lambda_extremes_of(&DMatrix::from_element(4, 4, 0.5), PowerOptions::default()).unwrap();
        assert!(r.lambda_min.abs() < 1e-7 && (r.lambda_max - 2.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            lambda_extremes_of(&m, PowerOptions::default()),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn reports_iteration_cap() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.999_999, 0.5]));
        let err = lambda_extremes_of(
            &m,
            PowerOptions {
                tol: 1e-14,
                max_iterations: 10,
            },
        )
        .unwrap_err();
        assert!(matches!(err, LabError::Convergence { iterations: 10, .. }));
    }

    #[test]
    fn separation_checks() {
        let one = km(DMatrix::from_element(1, 1, 0.5));
        let c = check_separation_bound(&one, 2f64.sqrt(), 1, true).unwrap();
        assert!(c.holds && c.warning.is_none());
        let repeated = km(DMatrix::from_element(2, 2, 0.5));
        let c = check_separation_bound(&repeated, 0.0, 2, true).unwrap();
        assert!(c.holds && c.bound == 0.0);
        assert!(c.warning.unwrap().contains("degenerate"));
    }

    #[test]
    fn shifted_checks_on_singleton() {
        let p2 = 0.022_750_131_948_179;
        let c = check_shifted_bounds(&km(DMatrix::from_element(1, 1, p2)), 2.0, 1.0, 1, 1e-4).unwrap();
        assert!(c.upper_holds && c.lower_holds);
        assert!((c.upper_bound - (-2f64).exp()).abs() < 1e-15);
        let c = check_shifted_bounds(&km(DMatrix::from_element(1, 1, 0.5)), 0.0, 1.0, 1, 0.0).unwrap();
        assert!(c.upper_holds && c.lower_holds && c.upper_bound == 1.0);
    }

    proptest! {
        #[test]
        fn matches_dense_eigensolver(raw in proptest::collection::vec(-1.0f64..1.0, 16), c in 0.1f64..10.0, rot in 0usize..4) {
            let a = DMatrix::from_vec(4, 4, raw);
            let m = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let eig = m.clone().symmetric_eigen().eigenvalues;
            let r = lambda_extremes_of(&m, PowerOptions::default()).unwrap();
            let tol = 1e-6 * m.norm();
            prop_assert!((r.lambda_min - eig.min()).abs() <= tol);
            prop_assert!((r.lambda_max - eig.max()).abs() <= tol);
            prop_assert!(r.residual <= 1e-8);
            let scaled = lambda_extremes_of(&(&m * c), PowerOptions::default()).unwrap();
            prop_assert!((scaled.lambda_min - c * r.lambda_min).abs() <= c * tol);
            let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
            let pm = DMatrix::from_fn(4, 4, |i, j| m[(perm[i], perm[j])]);
            let p = lambda_extremes_of(&pm, PowerOptions::default()).unwrap();
            prop_assert!((p.lambda_min - r.lambda_min).abs() <= tol);
            prop_assert!((p.lambda_max - r.lambda_max).abs() <= tol);
        }
    }
}
