//! Training of the control networks and recovery of the adjoint `y_0`.

pub mod alg1;
pub mod alg2;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, BoundMlp, LrSchedule, MlpParams, MlpSpec};
use crate::problems::Problem;
use crate::sde::{derive_seed, rollout, sample_increments, BrownianBatch, Rollout, StepControls, TimeGrid};

/// Stream reserved for network initialization; training batches use the
/// streams `0, 1, 2, ...`.
const INIT_STREAM: u64 = u64::MAX;
/// Stream for the final evaluation batch.
pub(crate) const EVAL_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Explicit running cost, two networks.
    Alg1,
    /// F-form with stationarity penalty, four networks.
    Alg2,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(Algorithm::Alg1),
            "alg2" => Ok(Algorithm::Alg2),
            other => Err(Error::config(
                "algorithm",
                format!("unknown algorithm `{other}` (expected alg1 or alg2)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub maxstep: usize,
    /// Monte-Carlo paths per training iteration.
    pub batch_size: usize,
    /// Number of uniform time steps.
    pub steps: usize,
    /// `None` selects [`LrSchedule::default_for`] of `maxstep`.
    pub schedule: Option<LrSchedule>,
    pub seed: u64,
    /// Paths used by the final `y_0` estimate.
    pub eval_batch_size: usize,
    /// Paths simulated at once during evaluation.
    pub eval_chunk: usize,
    /// Interval between stored full `y_0` vectors; 0 disables them.
    pub record_every: usize,
    /// `None` selects three hidden layers of width `n + 10`.
    pub hidden: Option<Vec<usize>>,
    pub adam: AdamConfig,
    /// Record elapsed seconds in the history; off gives byte-identical reruns.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            maxstep: 3000,
            batch_size: 256,
            steps: 25,
            schedule: None,
            seed: 0,
            eval_batch_size: 4096,
            eval_chunk: 1024,
            record_every: 100,
            hidden: None,
            adam: AdamConfig::default(),
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("eval_batch_size", self.eval_batch_size),
            ("eval_chunk", self.eval_chunk),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| LrSchedule::default_for(self.maxstep))
    }

    pub(crate) fn spec(&self, n: usize) -> MlpSpec {
        let spec = MlpSpec::control(n, n);
        match &self.hidden {
            Some(h) => spec.with_hidden(h.clone()),
            None => spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Updates of the `(y, z)` networks per outer iteration.
    pub kappa: usize,
    /// Multiply each step of the stationarity penalty by its `dt`.
    pub loss2_dt_weighted: bool,
}

impl Default for AltTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            kappa: 5,
            loss2_dt_weighted: false,
        }
    }
}

impl AltTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.kappa == 0 {
            return Err(Error::config("kappa", "needs at least one inner update"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// The control cost; `loss1` for the F-form solver.
    pub loss: f64,
    /// Stationarity penalty of the last inner update.
    pub loss2: Option<f64>,
    pub lr: f64,
    /// First component of the `y_0` estimate on this iteration's paths.
    pub y0_first: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub y0: Vec<f64>,
}

/// The control networks, plus the `(y, z)` networks of the F-form solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub u: MlpParams,
    pub v: MlpParams,
    pub y: Option<MlpParams>,
    pub z: Option<MlpParams>,
}

impl Networks {
    /// Fresh networks for an `n`-dimensional problem.
    pub fn init(spec: &MlpSpec, with_adjoint: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
        let u = MlpParams::init(spec, &mut rng)?;
        let v = MlpParams::init(spec, &mut rng)?;
        let (y, z) = if with_adjoint {
            (
                Some(MlpParams::init(spec, &mut rng)?),
                Some(MlpParams::init(spec, &mut rng)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { u, v, y, z })
    }

    pub fn is_finite(&self) -> bool {
        [Some(&self.u), Some(&self.v), self.y.as_ref(), self.z.as_ref()]
            .into_iter()
            .flatten()
            .all(MlpParams::is_finite)
    }

    /// Readout of the `y` network at `(0, a)`.
    pub fn y_readout(&self, a: &[f64]) -> Result<Option<Vec<f64>>> {
        self.y.as_ref().map(|y| y.eval(0.0, a)).transpose()
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, train_uv: bool, train_yz: bool) -> BoundNetworks<'t> {
        BoundNetworks {
            u: self.u.bind(tape, train_uv),
            v: self.v.bind(tape, train_uv),
            y: self.y.as_ref().map(|p| p.bind(tape, train_yz)),
            z: self.z.as_ref().map(|p| p.bind(tape, train_yz)),
        }
    }
}

pub(crate) struct BoundNetworks<'t> {
    pub u: BoundMlp<'t>,
    pub v: BoundMlp<'t>,
    pub y: Option<BoundMlp<'t>>,
    pub z: Option<BoundMlp<'t>>,
}

impl<'t> BoundNetworks<'t> {
    fn controls(&self, t: f64, x: Var<'t>) -> Result<StepControls<'t>> {
        Ok(StepControls {
            u: self.u.forward(t, x)?,
            v: self.v.forward(t, x)?,
            y: self.y.as_ref().map(|n| n.forward(t, x)).transpose()?,
            z: self.z.as_ref().map(|n| n.forward(t, x)).transpose()?,
        })
    }

    pub fn rollout<P: Problem + ?Sized>(
        &self,
        problem: &P,
        tape: &'t Tape,
        grid: &TimeGrid,
        batch: &BrownianBatch,
    ) -> Result<Rollout<'t>> {
        rollout(problem, tape, grid, batch, |_, t, x| self.controls(t, x))
    }
}

/// Monte-Carlo estimate of the adjoint process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YEstimate {
    pub y0: Vec<f64>,
    /// Standard error of each `y_0` component.
    pub std_err: Vec<f64>,
    /// Path-averaged `y_{t_i}` for `i = 0..N`; only `i = 0` is a true
    /// conditional expectation.
    pub path_mean: Vec<Vec<f64>>,
    pub samples: usize,
    /// Mean Euclidean norm of `v` over all paths and steps.
    pub mean_v_norm: f64,
}

/// Per-path backward sums `Y_i = sum_{j >= i} g_j dt_j - Phi_x(x_N)`, `[M, n]` each.
pub(crate) fn adjoint_sums<'t, P, G>(
    problem: &P,
    path: &Rollout<'t>,
    grid: &TimeGrid,
    mut drift: G,
) -> Result<Vec<Tensor>>
where
    P: Problem + ?Sized,
    G: FnMut(f64, Var<'t>, &StepControls<'t>) -> Result<Var<'t>>,
{
    let steps = grid.steps();
    let mut sums = vec![Tensor::zeros(&[0]); steps + 1];
    let mut acc = problem.terminal_grad(path.x[steps])?.to_tensor().map(|v| -v);
    sums[steps] = acc.clone();
    for i in (0..steps).rev() {
        let g = drift(grid.t(i), path.x[i], &path.controls[i])?.to_tensor();
        let dt = grid.dt(i);
        for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += gv * dt;
        }
        sums[i] = acc.clone();
    }
    Ok(sums)
}

/// Mean over the sample axis of a `[M, n]` tensor.
pub(crate) fn column_mean(t: &Tensor) -> Vec<f64> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; n];
    for row in t.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// Chunked evaluation shared by both estimators.
pub(crate) fn monte_carlo_y<P, G>(
    problem: &P,
    nets: &Networks,
    grid: &TimeGrid,
    samples: usize,
    chunk: usize,
    seed: u64,
    drift: G,
) -> Result<YEstimate>
where
    P: Problem + ?Sized,
    G: for<'t> Fn(&P, f64, Var<'t>, &StepControls<'t>) -> Result<Var<'t>>,
{
    if samples == 0 || chunk == 0 {
        return Err(Error::config("eval_batch_size", "must be positive"));
    }
    let n = problem.dim();
    let steps = grid.steps();
    let mut sum = vec![vec![0.0; n]; steps + 1];
    let mut sq0 = vec![0.0; n];
    let mut v_total = 0.0;
    let mut done = 0;
    let mut index = 0u64;
    while done < samples {
        let m = chunk.min(samples - done);
        let batch = sample_increments(grid, m, problem.brownian_dim(), derive_seed(seed, index))?;
        let tape = Tape::new();
        let bound = nets.bind(&tape, false, false);
        let path = bound.rollout(problem, &tape, grid, &batch)?;
        let sums = adjoint_sums(problem, &path, grid, |t, x, c| drift(problem, t, x, c))?;
        for (acc, s) in sum.iter_mut().zip(&sums) {
            for row in s.data().chunks_exact(n) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        for row in sums[0].data().chunks_exact(n) {
            for (a, v) in sq0.iter_mut().zip(row) {
                *a += v * v;
            }
        }
        v_total += path.to_batch().mean_v_norm() * m as f64;
        done += m;
        index += 1;
    }
    let total = samples as f64;
    let path_mean: Vec<Vec<f64>> = sum
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / total).collect())
        .collect();
    let y0 = path_mean[0].clone();
    let std_err = y0
        .iter()
        .zip(&sq0)
        .map(|(mean, sq)| {
            if samples < 2 {
                return 0.0;
            }
            let var = (sq - total * mean * mean).max(0.0) / (total - 1.0);
            (var / total).sqrt()
        })
        .collect();
    Ok(YEstimate {
        y0,
        std_err,
        path_mean,
        samples,
        mean_v_norm: v_total / total,
    })
}

/// Path averages of the scalar losses returned by `losses`, over `samples`
/// paths simulated in chunks on the same streams as [`monte_carlo_y`].
pub(crate) fn monte_carlo_losses<P, L>(
    problem: &P,
    nets: &Networks,
    grid: &TimeGrid,
    samples: usize,
    chunk: usize,
    seed: u64,
    losses: L,
) -> Result<Vec<f64>>
where
    P: Problem + ?Sized,
    L: for<'t> Fn(&P, &Rollout<'t>) -> Result<Vec<Var<'t>>>,
{
    if samples == 0 || chunk == 0 {
        return Err(Error::config("eval_batch_size", "must be positive"));
    }
    let mut totals: Vec<f64> = Vec::new();
    let mut done = 0;
    let mut index = 0u64;
    while done < samples {
        let m = chunk.min(samples - done);
        let batch = sample_increments(grid, m, problem.brownian_dim(), derive_seed(seed, index))?;
        let tape = Tape::new();
        let bound = nets.bind(&tape, false, false);
        let path = bound.rollout(problem, &tape, grid, &batch)?;
        let values: Vec<f64> = losses(problem, &path)?.into_iter().map(scalar).collect();
        totals.resize(values.len(), 0.0);
        for (t, v) in totals.iter_mut().zip(values) {
            *t += v * m as f64;
        }
        done += m;
        index += 1;
    }
    Ok(totals.into_iter().map(|t| t / samples as f64).collect())
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub history: Vec<IterationRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub estimate: YEstimate,
    /// `phi_y(0, a)` for the F-form solver.
    pub y0_readout: Option<Vec<f64>>,
    /// Control cost of the final networks on the evaluation paths.
    pub final_loss: f64,
    /// Stationarity penalty of the final networks on the evaluation paths.
    pub final_loss2: Option<f64>,
    pub elapsed_s: f64,
    pub networks: Networks,
}

impl RunReport {
    pub fn y0(&self) -> &[f64] {
        &self.estimate.y0
    }

    pub fn y0_first(&self) -> f64 {
        self.estimate.y0[0]
    }
}

/// Scalar value of a rank-0 variable.
pub(crate) fn scalar(v: Var<'_>) -> f64 {
    v.value().item().unwrap_or(f64::NAN)
}

pub(crate) struct Clock {
    start: Option<Instant>,
}

impl Clock {
    pub fn new(enabled: bool) -> Self {
        Self {
            start: enabled.then(Instant::now),
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

/// Turns numerical blow-ups into training aborts carrying the position.
pub(crate) fn at_iteration(iteration: usize, inner_step: Option<usize>) -> impl Fn(Error) -> Error {
    move |e| {
        let what = match e {
            Error::NonFiniteGradient { .. } => "gradient",
            Error::NonFiniteState { .. } => "state",
            other => return other,
        };
        Error::Diverged {
            what,
            iteration,
            inner_step,
        }
    }
}

pub(crate) fn check_loss(value: f64, what: &'static str, iteration: usize, inner_step: Option<usize>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            what,
            iteration,
            inner_step,
        })
    }
}
