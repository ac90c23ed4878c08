use super::{half_square_norm, NoiseStructure, Partials, Problem, Setup};
use crate::autodiff::Var;
use crate::error::Result;

/// System with a log-sum-exp Hamiltonian
///
/// ```text
/// H = log sum_i exp(y_i) + |y|^2/2 + |z|^2 + <z, x> + |x|^2/5,   Phi = |x|^2/2
/// ```
///
/// Its Legendre transform has no closed form, so only the F-form is available.
#[derive(Debug, Clone, PartialEq)]
pub struct Example3 {
    setup: Setup,
}

impl Example3 {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Self::from_setup(Setup::new(n, 0.2, vec![0.5; n])?))
    }

    pub fn from_setup(setup: Setup) -> Self {
        Self { setup }
    }
}

impl Problem for Example3 {
    fn name(&self) -> &'static str {
        "example3"
    }

    fn dim(&self) -> usize {
        self.setup.n
    }

    fn noise(&self) -> NoiseStructure {
        NoiseStructure::Diagonal
    }

    fn horizon(&self) -> f64 {
        self.setup.horizon
    }

    fn initial_state(&self) -> &[f64] {
        &self.setup.initial_state
    }

    fn hamiltonian<'t>(&self, _t: f64, x: Var<'t>, y: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let lse = y.logsumexp_last()?;
        Ok(lse
            .add(half_square_norm(y)?)?
            .add(z.square_norm()?)?
            .add(z.inner(x)?)?
            .add(x.square_norm()?.scale(0.2))?)
    }

    fn hamiltonian_grad<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
    ) -> Result<Partials<'t>> {
        Ok(Partials {
            first: z.add(x.scale(0.4))?,
            second: y.softmax_last()?.add(y)?,
            third: z.scale(2.0).add(x)?,
        })
    }

    fn terminal<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        half_square_norm(x)
    }

    fn terminal_grad<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }
}
