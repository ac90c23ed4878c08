//! Explicit running cost: minimize `E[sum f dt + Phi(x_N)]` over `(u, v)`.

use super::{
    adjoint_sums, at_iteration, check_loss, column_mean, monte_carlo_losses, monte_carlo_y, scalar,
    Algorithm,
    Checkpoint, Clock, IterationRecord, Networks, RunReport, TrainConfig, YEstimate, EVAL_STREAM,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::problems::Problem;
use crate::sde::{derive_seed, sample_increments, Rollout, TimeGrid};

/// `(1/M) sum_m [sum_i f(t_i, x_i, u_i, v_i) dt_i + Phi(x_N)]`.
pub fn loss_alg1<'t, P: Problem + ?Sized>(
    problem: &P,
    path: &Rollout<'t>,
    grid: &TimeGrid,
) -> Result<Var<'t>> {
    if !problem.has_explicit_cost() {
        return Err(Error::MissingExplicitCost(problem.name().into()));
    }
    let steps = grid.steps();
    let mut total = problem.terminal(path.x[steps])?;
    for i in 0..steps {
        let c = &path.controls[i];
        let f = problem.running_cost(grid.t(i), path.x[i], c.u, c.v)?;
        total = total.add(f.scale(grid.dt(i)))?;
    }
    Ok(total.mean())
}

/// `y_0` from the adjoint integral of `g = problem.adjoint_drift`.
pub fn estimate_y<P: Problem + ?Sized>(
    problem: &P,
    nets: &Networks,
    grid: &TimeGrid,
    samples: usize,
    chunk: usize,
    seed: u64,
) -> Result<YEstimate> {
    monte_carlo_y(problem, nets, grid, samples, chunk, seed, |p, t, x, c| {
        p.adjoint_drift(t, x, c.u, c.v)
    })
}

pub fn train_alg1<P: Problem + ?Sized>(problem: &P, config: &TrainConfig) -> Result<RunReport> {
    train_alg1_from(problem, config, None)
}

/// Continues training from `start` when given, otherwise from fresh networks.
pub fn train_alg1_from<P: Problem + ?Sized>(
    problem: &P,
    config: &TrainConfig,
    start: Option<Networks>,
) -> Result<RunReport> {
    config.validate()?;
    if !problem.has_explicit_cost() {
        return Err(Error::MissingExplicitCost(problem.name().into()));
    }
    let clock = Clock::new(config.wall_clock);
    let grid = TimeGrid::uniform(problem.horizon(), config.steps)?;
    let schedule = config.schedule();
    let mut nets = match start {
        Some(nets) => nets,
        None => Networks::init(&config.spec(problem.dim()), false, config.seed)?,
    };
    let mut adam = AdamState::new(
        nets.u.tensors().into_iter().chain(nets.v.tensors()),
        config.adam,
    );

    let mut history = Vec::with_capacity(config.maxstep);
    let mut checkpoints = Vec::new();
    for l in 0..config.maxstep {
        let lr = schedule.lr_at(l);
        let batch = sample_increments(
            &grid,
            config.batch_size,
            problem.brownian_dim(),
            derive_seed(config.seed, l as u64),
        )?;
        let tape = Tape::new();
        let bound = nets.bind(&tape, true, false);
        let path = bound
            .rollout(problem, &tape, &grid, &batch)
            .map_err(at_iteration(l, None))?;
        let loss = loss_alg1(problem, &path, &grid)?;
        let loss_value = scalar(loss);
        check_loss(loss_value, "loss", l, None)?;

        let mut vars = bound.u.vars();
        vars.extend(bound.v.vars());
        let grads = tape.gradient(loss, &vars)?;

        let sums = adjoint_sums(problem, &path, &grid, |t, x, c| {
            problem.adjoint_drift(t, x, c.u, c.v)
        })?;
        let y0 = column_mean(&sums[0]);
        drop(path);
        drop(bound);
        drop(tape);

        let mut params: Vec<_> = nets.u.tensors_mut();
        params.extend(nets.v.tensors_mut());
        adam.step(&mut params, &grads, lr)
            .map_err(at_iteration(l, None))?;

        if config.record_every > 0 && l % config.record_every == 0 {
            checkpoints.push(Checkpoint {
                iteration: l,
                y0: y0.clone(),
            });
        }
        history.push(IterationRecord {
            iteration: l,
            loss: loss_value,
            loss2: None,
            lr,
            y0_first: y0[0],
            elapsed_s: clock.elapsed(),
        });
    }

    let eval_seed = derive_seed(config.seed, EVAL_STREAM);
    let estimate = estimate_y(
        problem,
        &nets,
        &grid,
        config.eval_batch_size,
        config.eval_chunk,
        eval_seed,
    )?;
    let final_loss = monte_carlo_losses(
        problem,
        &nets,
        &grid,
        config.eval_batch_size,
        config.eval_chunk,
        eval_seed,
        |p, path| Ok(vec![loss_alg1(p, path, &grid)?]),
    )?[0];
    Ok(RunReport {
        algorithm: Algorithm::Alg1,
        seed: config.seed,
        final_loss,
        final_loss2: None,
        history,
        checkpoints,
        estimate,
        y0_readout: None,
        elapsed_s: clock.elapsed(),
        networks: nets,
    })
}
