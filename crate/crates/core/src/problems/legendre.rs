use nalgebra::{DMatrix, DVector};

use super::{f_form, Problem};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LegendreOptions {
    pub max_iter: usize,
    /// Stop once `max |(F_y, F_z)|` falls below this.
    pub tol: f64,
    /// Step for differencing the gradient into a Jacobian.
    pub jacobian_step: f64,
}

impl Default for LegendreOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-11,
            jacobian_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegendreResult {
    pub value: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `max_{y,z} F(t,x,u,v,y,z)` at a single point, found numerically.
///
/// Only `H` itself is used: the gradient comes from the tape, the Jacobian
/// from differencing that gradient. Newton steps are damped by backtracking
/// and replaced by gradient ascent when they fail to improve.
pub fn legendre_numeric<P: Problem + ?Sized>(
    problem: &P,
    t: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    opts: LegendreOptions,
) -> Result<LegendreResult> {
    let n = problem.dim();
    for (context, s) in [("legendre x", x), ("legendre u", u), ("legendre v", v)] {
        if s.len() != n {
            return Err(Error::Dimension {
                context,
                expected: n,
                got: s.len(),
            });
        }
    }

    let eval = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let row = |s: &[f64]| Tensor::repeat_row(s, 1);
        let (xv, uv, vv) = (
            tape.constant(row(x)),
            tape.constant(row(u)),
            tape.constant(row(v)),
        );
        let y = tape.param(row(&w[..n]));
        let z = tape.param(row(&w[n..]));
        let f = f_form(problem, t, xv, uv, vv, y, z)?.sum();
        let grads = tape.gradient(f, &[y, z])?;
        let mut g = grads[0].data().to_vec();
        g.extend_from_slice(grads[1].data());
        let value = f.value().item().unwrap_or(f64::NAN);
        Ok((value, g))
    };
    let sup = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut w = vec![0.0; 2 * n];
    let (mut value, mut grad) = eval(&w)?;
    let mut residual = sup(&grad);
    for iter in 0..opts.max_iter {
        if residual < opts.tol {
            return Ok(LegendreResult {
                value,
                y: w[..n].to_vec(),
                z: w[n..].to_vec(),
                iterations: iter,
                residual,
            });
        }

        let newton = newton_direction(&eval, &w, &grad, opts.jacobian_step)?;
        let ascent = |s: &[f64]| s.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>() > 0.0;
        let mut accepted = false;
        for dir in [newton.filter(|s| ascent(s)), Some(grad.clone())]
            .into_iter()
            .flatten()
        {
            let mut alpha = 1.0;
            for _ in 0..60 {
                let trial: Vec<f64> = w.iter().zip(&dir).map(|(a, s)| a + alpha * s).collect();
                let (tv, tg) = eval(&trial)?;
                let tr = sup(&tg);
                if tv.is_finite() && (tv > value || tr < residual) {
                    w = trial;
                    value = tv;
                    grad = tg;
                    residual = tr;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    if residual < opts.tol {
        return Ok(LegendreResult {
            value,
            y: w[..n].to_vec(),
            z: w[n..].to_vec(),
            iterations: opts.max_iter,
            residual,
        });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Solves `J s = -g` with `J` the central-difference Jacobian of the gradient.
fn newton_direction(
    eval: &impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    w: &[f64],
    grad: &[f64],
    h: f64,
) -> Result<Option<Vec<f64>>> {
    let m = w.len();
    let mut jac = DMatrix::zeros(m, m);
    let mut probe = w.to_vec();
    for j in 0..m {
        probe[j] = w[j] + h;
        let (_, gp) = eval(&probe)?;
        probe[j] = w[j] - h;
        let (_, gm) = eval(&probe)?;
        probe[j] = w[j];
        for i in 0..m {
            jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    // symmetrize: the exact Jacobian is a Hessian
    let jac = (&jac + jac.transpose()) * 0.5;
    let rhs = -DVector::from_column_slice(grad);
    Ok(jac
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .map(|s| s.as_slice().to_vec()))
}
