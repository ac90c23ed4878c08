//! F-form: four networks trained by alternating the control cost (`loss1`)
//! and the stationarity penalty `|F_y|^2 + |F_z|^2` (`loss2`).

use super::{
    adjoint_sums, at_iteration, check_loss, column_mean, monte_carlo_losses, monte_carlo_y, scalar, AltTrainConfig,
    Algorithm, Checkpoint, Clock, IterationRecord, Networks, RunReport, YEstimate, EVAL_STREAM,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::problems::{adjoint_drift_f_form, f_form, f_form_grad, Problem};
use crate::sde::{derive_seed, sample_increments, BrownianBatch, Rollout, StepControls, TimeGrid};

fn heads<'t>(c: &StepControls<'t>) -> Result<(Var<'t>, Var<'t>)> {
    match (c.y, c.z) {
        (Some(y), Some(z)) => Ok((y, z)),
        _ => Err(Error::config("networks", "the F-form needs y and z heads on every step")),
    }
}

/// `(1/M) sum_m [sum_i F(t_i, x_i, u_i, v_i, y_i, z_i) dt_i + Phi(x_N)]`.
pub fn loss1<'t, P: Problem + ?Sized>(
    problem: &P,
    path: &Rollout<'t>,
    grid: &TimeGrid,
) -> Result<Var<'t>> {
    let steps = grid.steps();
    let mut total = problem.terminal(path.x[steps])?;
    for i in 0..steps {
        let c = &path.controls[i];
        let (y, z) = heads(c)?;
        let f = f_form(problem, grid.t(i), path.x[i], c.u, c.v, y, z)?;
        total = total.add(f.scale(grid.dt(i)))?;
    }
    Ok(total.mean())
}

/// `(1/M) sum_m sum_i (|F_y|^2 + |F_z|^2)`, each step optionally weighted by `dt_i`.
pub fn loss2<'t, P: Problem + ?Sized>(
    problem: &P,
    path: &Rollout<'t>,
    grid: &TimeGrid,
    dt_weighted: bool,
) -> Result<Var<'t>> {
    let steps = grid.steps();
    let mut total: Option<Var<'t>> = None;
    for i in 0..steps {
        let c = &path.controls[i];
        let (y, z) = heads(c)?;
        let p = f_form_grad(problem, grid.t(i), path.x[i], c.u, c.v, y, z)?;
        let mut r = p.second.square_norm()?.add(p.third.square_norm()?)?;
        if dt_weighted {
            r = r.scale(grid.dt(i));
        }
        total = Some(match total {
            Some(acc) => acc.add(r)?,
            None => r,
        });
    }
    let total = total.expect("grid has at least one step");
    let m = total.shape()[0] as f64;
    Ok(total.sum().scale(1.0 / m))
}

/// `y_0` from the adjoint integral with drift `b_x^T y + sigma_x^T z - F_x`
/// evaluated on the learned `(y, z)`.
pub fn estimate_y<P: Problem + ?Sized>(
    problem: &P,
    nets: &Networks,
    grid: &TimeGrid,
    samples: usize,
    chunk: usize,
    seed: u64,
) -> Result<YEstimate> {
    if nets.y.is_none() || nets.z.is_none() {
        return Err(Error::config("networks", "the F-form estimator needs y and z networks"));
    }
    monte_carlo_y(problem, nets, grid, samples, chunk, seed, |p, t, x, c| {
        let (y, z) = heads(c)?;
        adjoint_drift_f_form(p, t, x, c.u, c.v, y, z)
    })
}

fn f_form_y0<'t, P: Problem + ?Sized>(problem: &P, path: &Rollout<'t>, grid: &TimeGrid) -> Result<Vec<f64>> {
    let sums = adjoint_sums(problem, path, grid, |t, x, c| {
        let (y, z) = heads(c)?;
        adjoint_drift_f_form(problem, t, x, c.u, c.v, y, z)
    })?;
    Ok(column_mean(&sums[0]))
}

/// One Adam step on `(u, v)` against `loss1` with `(y, z)` frozen.
pub(crate) fn control_step<P: Problem + ?Sized>(
    problem: &P,
    nets: &mut Networks,
    adam: &mut AdamState,
    grid: &TimeGrid,
    batch: &BrownianBatch,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = nets.bind(&tape, true, false);
    let path = bound.rollout(problem, &tape, grid, batch)?;
    let loss = loss1(problem, &path, grid)?;
    let value = scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let mut vars = bound.u.vars();
    vars.extend(bound.v.vars());
    let grads = tape.gradient(loss, &vars)?;
    let mut params = nets.u.tensors_mut();
    params.extend(nets.v.tensors_mut());
    adam.step(&mut params, &grads, lr)?;
    Ok(value)
}

/// One Adam step on `(y, z)` against `loss2` with `(u, v)` frozen. Returns
/// the loss and, when `read_y0`, the `y_0` read off this batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adjoint_step<P: Problem + ?Sized>(
    problem: &P,
    nets: &mut Networks,
    adam: &mut AdamState,
    grid: &TimeGrid,
    batch: &BrownianBatch,
    lr: f64,
    dt_weighted: bool,
    read_y0: bool,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let bound = nets.bind(&tape, false, true);
    let path = bound.rollout(problem, &tape, grid, batch)?;
    let loss = loss2(problem, &path, grid, dt_weighted)?;
    let value = scalar(loss);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let (by, bz) = match (&bound.y, &bound.z) {
        (Some(y), Some(z)) => (y, z),
        _ => return Err(Error::config("networks", "the F-form needs y and z networks")),
    };
    let mut vars = by.vars();
    vars.extend(bz.vars());
    let grads = tape.gradient(loss, &vars)?;
    let y0 = if read_y0 { f_form_y0(problem, &path, grid)? } else { Vec::new() };
    let (ny, nz) = (nets.y.as_mut().unwrap(), nets.z.as_mut().unwrap());
    let mut params = ny.tensors_mut();
    params.extend(nz.tensors_mut());
    adam.step(&mut params, &grads, lr)?;
    Ok((value, y0))
}

pub fn train_alg2<P: Problem + ?Sized>(problem: &P, config: &AltTrainConfig) -> Result<RunReport> {
    train_alg2_from(problem, config, None)
}

/// Continues training from `start` when given, otherwise from fresh networks.
pub fn train_alg2_from<P: Problem + ?Sized>(
    problem: &P,
    config: &AltTrainConfig,
    start: Option<Networks>,
) -> Result<RunReport> {
    config.validate()?;
    let tc = &config.train;
    let clock = Clock::new(tc.wall_clock);
    let grid = TimeGrid::uniform(problem.horizon(), tc.steps)?;
    let schedule = tc.schedule();
    let mut nets = match start {
        Some(nets) if nets.y.is_some() && nets.z.is_some() => nets,
        Some(_) => {
            return Err(Error::config("networks", "the F-form needs y and z networks"));
        }
        None => Networks::init(&tc.spec(problem.dim()), true, tc.seed)?,
    };
    let mut adam_uv = AdamState::new(nets.u.tensors().into_iter().chain(nets.v.tensors()), tc.adam);
    let mut adam_yz = AdamState::new(
        nets.y.iter().chain(&nets.z).flat_map(|p| p.tensors()),
        tc.adam,
    );

    let stride = config.kappa as u64 + 1;
    let mut history = Vec::with_capacity(tc.maxstep);
    let mut checkpoints = Vec::new();
    for l in 0..tc.maxstep {
        let lr = schedule.lr_at(l);
        let batch_for = |k: u64| {
            sample_increments(
                &grid,
                tc.batch_size,
                problem.brownian_dim(),
                derive_seed(tc.seed, l as u64 * stride + k),
            )
        };

        let loss1_value = control_step(problem, &mut nets, &mut adam_uv, &grid, &batch_for(0)?, lr)
            .map_err(at_iteration(l, Some(0)))?;
        check_loss(loss1_value, "loss1", l, Some(0))?;

        let mut loss2_value = f64::NAN;
        let mut y0 = Vec::new();
        for k in 1..=config.kappa {
            let (value, y) = adjoint_step(
                problem,
                &mut nets,
                &mut adam_yz,
                &grid,
                &batch_for(k as u64)?,
                lr,
                config.loss2_dt_weighted,
                k == config.kappa,
            )
            .map_err(at_iteration(l, Some(k)))?;
            check_loss(value, "loss2", l, Some(k))?;
            loss2_value = value;
            if k == config.kappa {
                y0 = y;
            }
        }

        if tc.record_every > 0 && l % tc.record_every == 0 {
            checkpoints.push(Checkpoint {
                iteration: l,
                y0: y0.clone(),
            });
        }
        history.push(IterationRecord {
            iteration: l,
            loss: loss1_value,
            loss2: Some(loss2_value),
            lr,
            y0_first: y0[0],
            elapsed_s: clock.elapsed(),
        });
    }

    let eval_seed = derive_seed(tc.seed, EVAL_STREAM);
    let estimate = estimate_y(problem, &nets, &grid, tc.eval_batch_size, tc.eval_chunk, eval_seed)?;
    let finals = monte_carlo_losses(
        problem,
        &nets,
        &grid,
        tc.eval_batch_size,
        tc.eval_chunk,
        eval_seed,
        |p, path| {
            Ok(vec![
                loss1(p, path, &grid)?,
                loss2(p, path, &grid, config.loss2_dt_weighted)?,
            ])
        },
    )?;
    Ok(RunReport {
        algorithm: Algorithm::Alg2,
        seed: tc.seed,
        final_loss: finals[0],
        final_loss2: Some(finals[1]),
        history,
        checkpoints,
        y0_readout: nets.y_readout(problem.initial_state())?,
        estimate,
        elapsed_s: clock.elapsed(),
        networks: nets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use crate::problems::Example1;
    use crate::sde::sample_increments;
    use crate::solver::TrainConfig;

    fn setup() -> (Example1, Networks, TimeGrid, BrownianBatch) {
        let p = Example1::new(3, 0.3).unwrap();
        let tc = TrainConfig::default();
        let nets = Networks::init(&tc.spec(3), true, 5).unwrap();
        let grid = TimeGrid::uniform(0.1, 5).unwrap();
        let batch = sample_increments(&grid, 16, 1, 1).unwrap();
        (p, nets, grid, batch)
    }

    #[test]
    fn control_step_leaves_adjoint_networks_untouched() {
        let (p, mut nets, grid, batch) = setup();
        let before = nets.clone();
        let mut adam = AdamState::new(nets.u.tensors().into_iter().chain(nets.v.tensors()), AdamConfig::default());
        control_step(&p, &mut nets, &mut adam, &grid, &batch, 1e-2).unwrap();
        assert_eq!((&nets.y, &nets.z), (&before.y, &before.z));
        assert_ne!(nets.u, before.u);
        assert_ne!(nets.v, before.v);
    }

    #[test]
    fn adjoint_step_leaves_control_networks_untouched() {
        let (p, mut nets, grid, batch) = setup();
        let before = nets.clone();
        let mut adam = AdamState::new(nets.y.iter().chain(&nets.z).flat_map(|q| q.tensors()), AdamConfig::default());
        adjoint_step(&p, &mut nets, &mut adam, &grid, &batch, 1e-2, false, true).unwrap();
        assert_eq!((&nets.u, &nets.v), (&before.u, &before.v));
        assert_ne!(nets.y, before.y);
        assert_ne!(nets.z, before.z);
    }
}
