use super::{guard_nonzero, half_square_norm, NoiseStructure, Partials, Problem, Setup};
use crate::autodiff::Var;
use crate::error::Result;

/// Trigonometric system with state-dependent coefficients
///
/// ```text
/// b = cos x o (u + 1),   sigma = diag(sin x o (v + 1)),
/// H = <y, y o cos^2 x>/2 + <z, z o sin^2 x>/2 + <y, cos x> + <z, sin x> - |x|^2/2
/// ```
///
/// with `f = (|x|^2 + |u|^2 + |v|^2)/2` and `Phi = |x|^2/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example2 {
    setup: Setup,
}

impl Example2 {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Self::from_setup(Setup::new(n, 0.1, vec![1.0; n])?))
    }

    pub fn from_setup(setup: Setup) -> Self {
        Self { setup }
    }
}

impl Problem for Example2 {
    fn name(&self) -> &'static str {
        "example2"
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
        let yc = y.mul(x.cos())?;
        let zs = z.mul(x.sin())?;
        let quad = half_square_norm(yc)?.add(half_square_norm(zs)?)?;
        let lin = yc.sum_last()?.add(zs.sum_last()?)?;
        Ok(quad.add(lin)?.sub(half_square_norm(x)?)?)
    }

    fn hamiltonian_grad<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
    ) -> Result<Partials<'t>> {
        let (c, s) = (x.cos(), x.sin());
        let yc1 = y.mul(c)?.add_scalar(1.0);
        let zs1 = z.mul(s)?.add_scalar(1.0);
        let hx = y.mul(s)?.mul(yc1)?.neg().add(z.mul(c)?.mul(zs1)?)?.sub(x)?;
        Ok(Partials {
            first: hx,
            second: c.mul(yc1)?,
            third: s.mul(zs1)?,
        })
    }

    fn terminal<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        half_square_norm(x)
    }

    fn terminal_grad<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }

    fn drift<'t>(&self, _t: f64, x: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        Ok(x.cos().mul(u.add_scalar(1.0))?)
    }

    fn diffusion<'t>(&self, _t: f64, x: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        Ok(x.sin().mul(v.add_scalar(1.0))?)
    }

    fn coefficient_vjp_x<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        u: Var<'t>,
        v: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
    ) -> Result<Option<Var<'t>>> {
        let by = x.sin().neg().mul(u.add_scalar(1.0))?.mul(y)?;
        let sz = x.cos().mul(v.add_scalar(1.0))?.mul(z)?;
        Ok(Some(by.add(sz)?))
    }

    fn has_explicit_cost(&self) -> bool {
        true
    }

    fn running_cost<'t>(&self, _t: f64, x: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        Ok(half_square_norm(x)?
            .add(half_square_norm(u)?)?
            .add(half_square_norm(v)?)?)
    }

    fn running_cost_grad<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        u: Var<'t>,
        v: Var<'t>,
    ) -> Result<Partials<'t>> {
        Ok(Partials {
            first: x,
            second: u,
            third: v,
        })
    }

    fn maximizer<'t>(
        &self,
        _t: f64,
        x: Var<'t>,
        u: Var<'t>,
        v: Var<'t>,
    ) -> Result<Option<(Var<'t>, Var<'t>)>> {
        let (c, s) = (x.cos(), x.sin());
        guard_nonzero(&c.value(), self.setup.n, "maximizer", "cos")?;
        guard_nonzero(&s.value(), self.setup.n, "maximizer", "sin")?;
        Ok(Some((u.mul(c.recip()?)?, v.mul(s.recip()?)?)))
    }

    /// `h_x = -u o tan x o (u + 1) + v o cot x o (v + 1) - x`.
    fn adjoint_drift<'t>(&self, _t: f64, x: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (c, s) = (x.cos(), x.sin());
        guard_nonzero(&c.value(), self.setup.n, "adjoint drift", "cos")?;
        guard_nonzero(&s.value(), self.setup.n, "adjoint drift", "sin")?;
        let tan = x.tan();
        let cot = c.mul(s.recip()?)?;
        let a = u.mul(tan)?.mul(u.add_scalar(1.0))?;
        let b = v.mul(cot)?.mul(v.add_scalar(1.0))?;
        Ok(b.sub(a)?.sub(x)?)
    }
}
