//! Hamiltonian systems and their control reformulation.
//!
//! Every map works on batches: states and controls are `[M, n]`, scalar
//! quantities come back as `[M]`. Diffusion coefficients are stored as an
//! `[M, n]` tensor whose meaning depends on [`NoiseStructure`].

mod example1;
mod example2;
mod example3;
mod legendre;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

pub use example1::{q_matrix, Example1};
pub use example2::Example2;
pub use example3::Example3;
pub use legendre::{legendre_numeric, LegendreOptions, LegendreResult};

/// How the `[M, n]` diffusion tensor acts on the Brownian increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStructure {
    /// `d = 1`; the diffusion is an `n x 1` column multiplying a scalar increment.
    Column,
    /// `d = n`; the diffusion is a diagonal matrix acting componentwise.
    Diagonal,
}

impl NoiseStructure {
    pub fn brownian_dim(self, n: usize) -> usize {
        match self {
            NoiseStructure::Column => 1,
            NoiseStructure::Diagonal => n,
        }
    }

    /// `sigma . dB` for `sigma[M, n]` and `dB[M, d]`.
    pub fn apply<'t>(self, sigma: Var<'t>, db: Var<'t>) -> Result<Var<'t>> {
        match self {
            NoiseStructure::Column => {
                let n = sigma.shape()[1];
                let db = db.reshape(&[db.shape()[0]])?.broadcast_last(n);
                Ok(sigma.mul(db)?)
            }
            NoiseStructure::Diagonal => Ok(sigma.mul(db)?),
        }
    }
}

/// Partial derivatives with respect to three arguments, each `[M, n]`.
#[derive(Debug, Clone, Copy)]
pub struct Partials<'t> {
    pub first: Var<'t>,
    pub second: Var<'t>,
    pub third: Var<'t>,
}

/// A stochastic Hamiltonian system
///
/// ```text
/// dx = H_y dt + H_z dB,   dy = -H_x dt + z dB,   x_0 = a,   y_T = -Phi_x(x_T)
/// ```
///
/// together with the controlled state equation `dx = b(t,x,u) dt + sigma(t,x,v) dB`
/// used to recast it as a control problem.
pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn noise(&self) -> NoiseStructure;
    fn horizon(&self) -> f64;
    fn initial_state(&self) -> &[f64];

    fn brownian_dim(&self) -> usize {
        self.noise().brownian_dim(self.dim())
    }

    fn hamiltonian<'t>(&self, t: f64, x: Var<'t>, y: Var<'t>, z: Var<'t>) -> Result<Var<'t>>;

    /// `(H_x, H_y, H_z)`.
    fn hamiltonian_grad<'t>(
        &self,
        t: f64,
        x: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
    ) -> Result<Partials<'t>>;

    fn terminal<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;
    fn terminal_grad<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;

    fn drift<'t>(&self, _t: f64, _x: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        Ok(u)
    }

    fn diffusion<'t>(&self, _t: f64, _x: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        Ok(v)
    }

    /// `b_x^T y + sigma_x^T z`, or `None` when neither coefficient depends on `x`.
    fn coefficient_vjp_x<'t>(
        &self,
        _t: f64,
        _x: Var<'t>,
        _u: Var<'t>,
        _v: Var<'t>,
        _y: Var<'t>,
        _z: Var<'t>,
    ) -> Result<Option<Var<'t>>> {
        Ok(None)
    }

    fn has_explicit_cost(&self) -> bool {
        false
    }

    /// The Legendre transform `f = max_{y,z} F`.
    fn running_cost<'t>(&self, _t: f64, _x: Var<'t>, _u: Var<'t>, _v: Var<'t>) -> Result<Var<'t>> {
        Err(Error::MissingExplicitCost(self.name().into()))
    }

    /// `(f_x, f_u, f_v)`.
    fn running_cost_grad<'t>(
        &self,
        _t: f64,
        _x: Var<'t>,
        _u: Var<'t>,
        _v: Var<'t>,
    ) -> Result<Partials<'t>> {
        Err(Error::MissingExplicitCost(self.name().into()))
    }

    /// Closed-form argmax `(y, z)` of `F` when known.
    fn maximizer<'t>(
        &self,
        _t: f64,
        _x: Var<'t>,
        _u: Var<'t>,
        _v: Var<'t>,
    ) -> Result<Option<(Var<'t>, Var<'t>)>> {
        Ok(None)
    }

    /// Drift `g` of the adjoint integral used with an explicit running cost,
    /// `y_0 = E[int g dt - Phi_x(x_T)]`.
    fn adjoint_drift<'t>(&self, t: f64, x: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        adjoint_drift_via_maximizer(self, t, x, u, v)
    }
}

/// `b_x^T y* + sigma_x^T z* - f_x`, which equals `H_x` at the maximizer.
pub fn adjoint_drift_via_maximizer<'t, P: Problem + ?Sized>(
    problem: &P,
    t: f64,
    x: Var<'t>,
    u: Var<'t>,
    v: Var<'t>,
) -> Result<Var<'t>> {
    let g = problem.running_cost_grad(t, x, u, v)?.first.neg();
    let (y, z) = match problem.maximizer(t, x, u, v)? {
        Some(yz) => yz,
        None => return Ok(g),
    };
    match problem.coefficient_vjp_x(t, x, u, v, y, z)? {
        Some(j) => Ok(g.add(j)?),
        None => Ok(g),
    }
}

/// `F = <y, b> + <z, sigma> - H`, shape `[M]`.
pub fn f_form<'t, P: Problem + ?Sized>(
    problem: &P,
    t: f64,
    x: Var<'t>,
    u: Var<'t>,
    v: Var<'t>,
    y: Var<'t>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let b = problem.drift(t, x, u)?;
    let s = problem.diffusion(t, x, v)?;
    let h = problem.hamiltonian(t, x, y, z)?;
    Ok(y.inner(b)?.add(z.inner(s)?)?.sub(h)?)
}

/// `(F_x, F_y, F_z)`.
pub fn f_form_grad<'t, P: Problem + ?Sized>(
    problem: &P,
    t: f64,
    x: Var<'t>,
    u: Var<'t>,
    v: Var<'t>,
    y: Var<'t>,
    z: Var<'t>,
) -> Result<Partials<'t>> {
    let hg = problem.hamiltonian_grad(t, x, y, z)?;
    let fx = match problem.coefficient_vjp_x(t, x, u, v, y, z)? {
        Some(j) => j.sub(hg.first)?,
        None => hg.first.neg(),
    };
    let fy = problem.drift(t, x, u)?.sub(hg.second)?;
    let fz = problem.diffusion(t, x, v)?.sub(hg.third)?;
    Ok(Partials {
        first: fx,
        second: fy,
        third: fz,
    })
}

/// Drift of the adjoint integral in the F-form: `b_x^T y + sigma_x^T z - F_x`.
///
/// This is `-F_x` whenever `b = u` and `sigma = v`.
pub fn adjoint_drift_f_form<'t, P: Problem + ?Sized>(
    problem: &P,
    t: f64,
    x: Var<'t>,
    u: Var<'t>,
    v: Var<'t>,
    y: Var<'t>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let fx = f_form_grad(problem, t, x, u, v, y, z)?.first;
    match problem.coefficient_vjp_x(t, x, u, v, y, z)? {
        Some(j) => Ok(j.sub(fx)?),
        None => Ok(fx.neg()),
    }
}

/// Problem selection as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Example1,
    Example2,
    Example3,
}

impl ProblemKind {
    pub fn default_horizon(self) -> f64 {
        match self {
            ProblemKind::Example1 | ProblemKind::Example2 => 0.1,
            ProblemKind::Example3 => 0.2,
        }
    }

    pub fn default_initial_value(self) -> f64 {
        match self {
            ProblemKind::Example1 | ProblemKind::Example2 => 1.0,
            ProblemKind::Example3 => 0.5,
        }
    }

    pub fn has_explicit_cost(self) -> bool {
        !matches!(self, ProblemKind::Example3)
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(ProblemKind::Example1),
            "example2" => Ok(ProblemKind::Example2),
            "example3" => Ok(ProblemKind::Example3),
            other => Err(Error::config(
                "problem",
                format!("unknown problem `{other}` (expected example1, example2 or example3)"),
            )),
        }
    }
}

/// Builds a problem; `horizon` and `initial_state` fall back to the defaults
/// of each example.
pub fn build_problem(
    kind: ProblemKind,
    n: usize,
    lambda: f64,
    horizon: Option<f64>,
    initial_state: Option<Vec<f64>>,
) -> Result<Box<dyn Problem>> {
    let setup = Setup::new(
        n,
        horizon.unwrap_or(kind.default_horizon()),
        initial_state.unwrap_or_else(|| vec![kind.default_initial_value(); n]),
    )?;
    Ok(match kind {
        ProblemKind::Example1 => Box::new(Example1::from_setup(setup, lambda)?),
        ProblemKind::Example2 => Box::new(Example2::from_setup(setup)),
        ProblemKind::Example3 => Box::new(Example3::from_setup(setup)),
    })
}

/// Dimension, horizon and initial state shared by every example.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub n: usize,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
}

impl Setup {
    pub fn new(n: usize, horizon: f64, initial_state: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n", "state dimension must be at least 1"));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::config("horizon", format!("must be finite and >= 0, got {horizon}")));
        }
        if initial_state.len() != n {
            return Err(Error::config(
                "initial_state",
                format!("expected {n} components, got {}", initial_state.len()),
            ));
        }
        if initial_state.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("initial_state", "components must be finite"));
        }
        Ok(Self {
            n,
            horizon,
            initial_state,
        })
    }
}

pub(crate) fn half_square_norm<'t>(x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.square_norm()?.scale(0.5))
}

/// Errors when any entry of `values` is within the guard of zero.
pub(crate) fn guard_nonzero(
    values: &Tensor,
    n: usize,
    map: &'static str,
    function: &'static str,
) -> Result<()> {
    const GUARD: f64 = 1e-8;
    match values.data().iter().position(|v| v.abs() < GUARD) {
        Some(i) => Err(Error::Singularity {
            map,
            function,
            component: i % n,
            value: values.data()[i],
        }),
        None => Ok(()),
    }
}
