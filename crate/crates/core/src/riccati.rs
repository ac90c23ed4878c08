//! Exact solution of the linear-quadratic example through its Riccati equation
//!
//! ```text
//! dK/dt = K^2/2 - 2K,   K(T) = Q,   y_t = -K_t x_t,   z_t = 0
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::q_matrix;

/// The diffusion feedback of the exact solution is identically zero, so the
/// optimal `v = 2z` vanishes too.
pub const DIFFUSION_FEEDBACK: f64 = 0.0;

/// Steps used by [`benchmark_y0`] when it has to integrate.
pub const DEFAULT_RK4_STEPS: usize = 10_000;

const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiMethod {
    Rk4,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub k0: DMatrix<f64>,
    /// `K(t_i)` on the uniform integration grid, from `t = 0` to `t = T`.
    pub trajectory: Option<Vec<DMatrix<f64>>>,
    pub method: RiccatiMethod,
}

/// Classical RK4 on `dK/ds = 2K - K^2/2`, `s = T - t`, from `K = Q` at `s = 0`.
pub fn solve_riccati_rk4(
    q: &DMatrix<f64>,
    horizon: f64,
    steps: usize,
    keep_trajectory: bool,
) -> Result<RiccatiSolution> {
    if !q.is_square() {
        return Err(Error::config("q", "terminal weight must be square"));
    }
    if steps == 0 {
        return Err(Error::config("steps", "need at least one RK4 step"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config("horizon", format!("must be finite and >= 0, got {horizon}")));
    }
    let rhs = |k: &DMatrix<f64>| k * 2.0 - (k * k) * 0.5;
    let h = horizon / steps as f64;
    let mut k = q.clone();
    let mut backward = keep_trajectory.then(|| vec![k.clone()]);
    for step in 0..steps {
        let k1 = rhs(&k);
        let k2 = rhs(&(&k + &k1 * (h / 2.0)));
        let k3 = rhs(&(&k + &k2 * (h / 2.0)));
        let k4 = rhs(&(&k + &k3 * h));
        k += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let norm = k.amax();
        if !(norm <= DIVERGENCE_BOUND) {
            return Err(Error::RiccatiDivergence {
                norm,
                step: step + 1,
            });
        }
        if let Some(tr) = backward.as_mut() {
            tr.push(k.clone());
        }
    }
    Ok(RiccatiSolution {
        k0: k,
        trajectory: backward.map(|mut tr| {
            tr.reverse();
            tr
        }),
        method: RiccatiMethod::Rk4,
    })
}

/// `k_0 = 4 / (1 - ((q - 4)/q) e^{-2T})`, the exact scalar solution with `k(T) = q`.
pub fn riccati_closed_form_scalar(q: f64, horizon: f64) -> Result<f64> {
    if q == 0.0 {
        return Err(Error::config(
            "q",
            "terminal value 0 is degenerate for the closed form (the solution is k = 0)",
        ));
    }
    let denom = 1.0 - ((q - 4.0) / q) * (-2.0 * horizon).exp();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::config("q", format!("closed form has no finite value at q = {q}")));
    }
    Ok(4.0 / denom)
}

/// Closed form extended to `q = 0`, where the solution stays at zero.
fn scalar_flow(q: f64, horizon: f64) -> Result<f64> {
    if q == 0.0 {
        Ok(0.0)
    } else {
        riccati_closed_form_scalar(q, horizon)
    }
}

/// `K_0` for a symmetric `Q` through its eigendecomposition.
pub fn riccati_closed_form(q: &DMatrix<f64>, horizon: f64) -> Result<RiccatiSolution> {
    if !q.is_square() {
        return Err(Error::config("q", "terminal weight must be square"));
    }
    let eig = SymmetricEigen::new(q.clone());
    let flowed = eig
        .eigenvalues
        .iter()
        .map(|&l| scalar_flow(l, horizon))
        .collect::<Result<Vec<_>>>()?;
    let v = &eig.eigenvectors;
    let k0 = v * DMatrix::from_diagonal(&DVector::from_vec(flowed)) * v.transpose();
    Ok(RiccatiSolution {
        k0,
        trajectory: None,
        method: RiccatiMethod::ClosedForm,
    })
}

/// The terminal weight `Q = (1 - lambda) I + lambda 11^T`.
pub fn terminal_weight(n: usize, lambda: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, &q_matrix(n, lambda))
}

/// Eigenvalues of `Q`: `1 + (n-1) lambda` along the all-ones direction and
/// `1 - lambda` on its orthogonal complement.
pub fn q_eigenvalues(n: usize, lambda: f64) -> (f64, f64) {
    (1.0 + (n as f64 - 1.0) * lambda, 1.0 - lambda)
}

/// `y_0 = -K_0 a`.
///
/// When `a` is a multiple of the all-ones vector it is an eigenvector of
/// every `K_t`, and the scalar closed form suffices. Otherwise the matrix
/// equation is integrated with RK4.
pub fn benchmark_y0(n: usize, lambda: f64, a: &[f64], horizon: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("n", "state dimension must be at least 1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    if a.len() != n {
        return Err(Error::Dimension {
            context: "benchmark initial state",
            expected: n,
            got: a.len(),
        });
    }
    let parallel = a.iter().all(|&ai| ai == a[0]);
    if parallel {
        let k = scalar_flow(q_eigenvalues(n, lambda).0, horizon)?;
        return Ok(a.iter().map(|ai| -k * ai).collect());
    }
    let sol = solve_riccati_rk4(&terminal_weight(n, lambda), horizon, DEFAULT_RK4_STEPS, false)?;
    let y = -(sol.k0 * DVector::from_column_slice(a));
    Ok(y.as_slice().to_vec())
}
