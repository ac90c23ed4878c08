use super::{half_square_norm, NoiseStructure, Partials, Problem, Setup};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Linear-quadratic system
///
/// ```text
/// H = <x,y> + |y|^2/4 + |z|^2,   Phi = <Qx, x>/2,   Q = (1-lambda) I + lambda 11^T
/// ```
///
/// driven by a scalar Brownian motion. The running cost is
/// `f = |u - x|^2 + |v|^2/4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example1 {
    setup: Setup,
    lambda: f64,
}

impl Example1 {
    pub fn new(n: usize, lambda: f64) -> Result<Self> {
        Self::from_setup(Setup::new(n, 0.1, vec![1.0; n])?, lambda)
    }

    pub fn from_setup(setup: Setup, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { setup, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Dense terminal weight matrix, row-major.
    pub fn q_matrix(&self) -> Vec<f64> {
        q_matrix(self.setup.n, self.lambda)
    }

    fn apply_q<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let total = x.sum_last()?.broadcast_last(self.setup.n);
        Ok(x.scale(1.0 - self.lambda).add(total.scale(self.lambda))?)
    }
}

pub fn q_matrix(n: usize, lambda: f64) -> Vec<f64> {
    let mut q = vec![lambda; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    q
}

impl Problem for Example1 {
    fn name(&self) -> &'static str {
        "example1"
    }

    fn dim(&self) -> usize {
        self.setup.n
    }

    fn noise(&self) -> NoiseStructure {
        NoiseStructure::Column
    }

    fn horizon(&self) -> f64 {
        self.setup.horizon
    }

    fn initial_state(&self) -> &[f64] {
        &self.setup.initial_state
    }

    fn hamiltonian<'t>(&self, _t: f64, x: Var<'t>, y: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let xy = x.inner(y)?;
        let yy = y.square_norm()?.scale(0.25);
        let zz = z.square_norm()?;
        Ok(xy.add(yy)?.add(zz)?)
    }

    fn hamiltonian_grad<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
    ) -> Result<Partials<'t>> {
        Ok(Partials {
            first: y,
            second: x.add(y.scale(0.5))?,
            third: z.scale(2.0),
        })
    }

    fn terminal<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.apply_q(x)?.inner(x)?.scale(0.5))
    }

    fn terminal_grad<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.apply_q(x)
    }

    fn has_explicit_cost(&self) -> bool {
        true
    }

    fn running_cost<'t>(&self, _t: f64, x: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let gap = u.sub(x)?.square_norm()?;
        Ok(gap.add(half_square_norm(v)?.scale(0.5))?)
    }

    fn running_cost_grad<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        u: Var<'t>,
        v: Var<'t>,
    ) -> Result<Partials<'t>> {
        let fu = u.sub(x)?.scale(2.0);
        Ok(Partials {
            first: fu.neg(),
            second: fu,
            third: v.scale(0.5),
        })
    }

    fn maximizer<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        u: Var<'t>,
        v: Var<'t>,
    ) -> Result<Option<(Var<'t>, Var<'t>)>> {
        Ok(Some((u.sub(x)?.scale(2.0), v.scale(0.5))))
    }
}
