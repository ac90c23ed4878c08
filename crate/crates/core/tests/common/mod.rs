//! Finite-difference oracle and small helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use hamiltonian_control::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` with respect to every entry of every input.
pub fn central_diff(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = f(&work);
            work[k].data_mut()[j] = orig - h;
            let down = f(&work);
            work[k].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `|a - b| <= abs` or `|a - b| <= rel * max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

/// Largest relative error between two gradient lists, ignoring entries
/// whose absolute difference is below `abs`.
pub fn worst_rel(analytic: &[Tensor], numeric: &[Tensor], abs: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let d = (x - y).abs();
            if d > abs {
                worst = worst.max(d / x.abs().max(y.abs()));
            }
        }
    }
    worst
}

use hamiltonian_control::autodiff::Var;
use hamiltonian_control::problems::{NoiseStructure, Partials, Problem};
use hamiltonian_control::Result;

/// `H = |y|^2/4 + |z|^2`, `Phi = |x|^2/2`, `b = u`, `sigma = v`, with an
/// explicit running cost that is identically zero. Nothing depends on `x`
/// except the terminal cost, so `f_x = 0` and `F_x = 0`.
pub struct Quadratic {
    pub a: Vec<f64>,
    pub horizon: f64,
    pub noise: NoiseStructure,
}

impl Quadratic {
    pub fn new(a: Vec<f64>, horizon: f64, noise: NoiseStructure) -> Self {
        Self { a, horizon, noise }
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn noise(&self) -> NoiseStructure {
        self.noise
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn initial_state(&self) -> &[f64] {
        &self.a
    }
    fn hamiltonian<'t>(&self, _t: f64, _x: Var<'t>, y: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Ok(y.square_norm()?.scale(0.25).add(z.square_norm()?)?)
    }
    fn hamiltonian_grad<'t>(&self, _t: f64, x: Var<'t>, y: Var<'t>, z: Var<'t>) -> Result<Partials<'t>> {
        Ok(Partials {
            first: x.scale(0.0),
            second: y.scale(0.5),
            third: z.scale(2.0),
        })
    }
    fn terminal<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.square_norm()?.scale(0.5))
    }
    fn terminal_grad<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }
    fn has_explicit_cost(&self) -> bool {
        true
    }
    fn running_cost<'t>(&self, _t: f64, x: Var<'t>, _u: Var<'t>, _v: Var<'t>) -> Result<Var<'t>> {
        Ok(x.sum_last()?.scale(0.0))
    }
    fn running_cost_grad<'t>(&self, _t: f64, x: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Partials<'t>> {
        Ok(Partials {
            first: x.scale(0.0),
            second: u.scale(0.0),
            third: v.scale(0.0),
        })
    }
}
