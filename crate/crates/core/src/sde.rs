//! Time grids, Brownian increments and Euler-Maruyama rollouts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::problems::Problem;

/// Partition `0 = t_0 <= t_1 <= ... <= t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps", "need at least one time step"));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::config("horizon", format!("must be finite and >= 0, got {horizon}")));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..steps).map(|i| i as f64 * dt).collect();
        times.push(horizon);
        Ok(Self { times })
    }

    /// Arbitrary partition; zero-length segments are allowed.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::config("times", "need at least two time points"));
        }
        if times[0] != 0.0 {
            return Err(Error::config("times", "must start at 0"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("times", "must be finite and non-decreasing"));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }
}

/// Independent seed for stream `stream` of a run seeded with `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Brownian increments for `M` paths over a grid, one `[M, d]` tensor per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    increments: Vec<Tensor>,
    seed: u64,
}

impl BrownianBatch {
    pub fn samples(&self) -> usize {
        self.increments.first().map_or(0, |t| t.shape()[0])
    }

    pub fn dim(&self) -> usize {
        self.increments.first().map_or(0, |t| t.shape()[1])
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[M, d]` increments over `[t_i, t_{i+1}]`.
    pub fn step(&self, i: usize) -> &Tensor {
        &self.increments[i]
    }

    /// Builds a batch from explicit per-step `[M, d]` increments.
    pub fn from_increments(increments: Vec<Tensor>) -> Result<Self> {
        let shape = increments
            .first()
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::config("increments", "need at least one step"))?;
        if shape.len() != 2 || increments.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::config("increments", "every step must share one [M, d] shape"));
        }
        Ok(Self {
            increments,
            seed: 0,
        })
    }

    /// All increments multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            increments: self.increments.iter().map(|t| t.map(|v| c * v)).collect(),
            seed: self.seed,
        }
    }
}

/// I.i.d. `N(0, dt_i)` increments, deterministic in `seed`.
pub fn sample_increments(grid: &TimeGrid, samples: usize, dim: usize, seed: u64) -> Result<BrownianBatch> {
    if samples == 0 {
        return Err(Error::config("batch_size", "need at least one sample"));
    }
    if dim == 0 {
        return Err(Error::config("brownian_dim", "need at least one component"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let increments = (0..grid.steps())
        .map(|i| {
            let sd = grid.dt(i).sqrt();
            let data = (0..samples * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            Tensor::new(vec![samples, dim], data).expect("increment size")
        })
        .collect();
    Ok(BrownianBatch { increments, seed })
}

/// Controls applied on one step; `y`, `z` are only present for the F-form solver.
#[derive(Debug, Clone, Copy)]
pub struct StepControls<'t> {
    pub u: Var<'t>,
    pub v: Var<'t>,
    pub y: Option<Var<'t>>,
    pub z: Option<Var<'t>>,
}

/// A rollout recorded on a tape.
#[derive(Debug, Clone)]
pub struct Rollout<'t> {
    /// `N + 1` states of shape `[M, n]`.
    pub x: Vec<Var<'t>>,
    pub controls: Vec<StepControls<'t>>,
}

impl Rollout<'_> {
    pub fn to_batch(&self) -> TrajectoryBatch {
        let collect = |f: &dyn Fn(&StepControls) -> Option<Tensor>| -> Option<Vec<Tensor>> {
            self.controls.iter().map(f).collect()
        };
        TrajectoryBatch {
            x: self.x.iter().map(|v| v.to_tensor()).collect(),
            u: self.controls.iter().map(|c| c.u.to_tensor()).collect(),
            v: self.controls.iter().map(|c| c.v.to_tensor()).collect(),
            y: collect(&|c| c.y.map(|y| y.to_tensor())),
            z: collect(&|c| c.z.map(|z| z.to_tensor())),
        }
    }
}

/// Euler-Maruyama for `dx = b(t,x,u) dt + sigma(t,x,v) dB` starting from the
/// problem's initial state, with controls chosen by `policy(i, t_i, x_i)`.
pub fn rollout<'t, P, F>(
    problem: &P,
    tape: &'t Tape,
    grid: &TimeGrid,
    batch: &BrownianBatch,
    mut policy: F,
) -> Result<Rollout<'t>>
where
    P: Problem + ?Sized,
    F: FnMut(usize, f64, Var<'t>) -> Result<StepControls<'t>>,
{
    if batch.steps() != grid.steps() {
        return Err(Error::Dimension {
            context: "brownian steps",
            expected: grid.steps(),
            got: batch.steps(),
        });
    }
    if batch.dim() != problem.brownian_dim() {
        return Err(Error::Dimension {
            context: "brownian dimension",
            expected: problem.brownian_dim(),
            got: batch.dim(),
        });
    }
    let m = batch.samples();
    let noise = problem.noise();
    let mut x = tape.constant(Tensor::repeat_row(problem.initial_state(), m));
    let mut xs = vec![x];
    let mut controls = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let c = policy(i, t, x)?;
        let b = problem.drift(t, x, c.u)?;
        let s = problem.diffusion(t, x, c.v)?;
        let db = tape.constant(batch.step(i).clone());
        x = x.add(b.scale(grid.dt(i)))?.add(noise.apply(s, db)?)?;
        if !x.value().is_finite() {
            return Err(Error::NonFiniteState { step: i + 1 });
        }
        xs.push(x);
        controls.push(c);
    }
    Ok(Rollout { x: xs, controls })
}

/// Plain-value copy of a rollout: per-step `[M, n]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub x: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub y: Option<Vec<Tensor>>,
    pub z: Option<Vec<Tensor>>,
}

impl TrajectoryBatch {
    /// Mean over paths and steps of the Euclidean norm of `v`.
    pub fn mean_v_norm(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for v in &self.v {
            let n = v.shape()[1];
            for row in v.data().chunks_exact(n) {
                total += row.iter().map(|a| a * a).sum::<f64>().sqrt();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Writes gzip-compressed CSV with one row per (sample, step).
    ///
    /// Columns: `run,sample,step,t,x_1..x_n,u_1..u_n,v_1..v_n` plus `y_*` and
    /// `z_*` when present. Controls are blank on the terminal row.
    pub fn write_csv_gz(&self, path: &Path, run: usize, grid: &TimeGrid) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(GzEncoder::new(file, Compression::default()));
        let n = self.x[0].shape()[1];
        let m = self.x[0].shape()[0];
        let mut heads: Vec<(&str, &Vec<Tensor>)> = vec![("u", &self.u), ("v", &self.v)];
        if let Some(y) = &self.y {
            heads.push(("y", y));
        }
        if let Some(z) = &self.z {
            heads.push(("z", z));
        }

        let mut header = vec!["run".to_string(), "sample".into(), "step".into(), "t".into()];
        for name in std::iter::once("x").chain(heads.iter().map(|h| h.0)) {
            header.extend((1..=n).map(|k| format!("{name}_{k}")));
        }
        writeln!(w, "{}", header.join(","))?;

        let steps = self.x.len() - 1;
        for s in 0..m {
            for i in 0..=steps {
                let mut row = vec![run.to_string(), s.to_string(), i.to_string(), grid.t(i).to_string()];
                row.extend(self.x[i].row(s).iter().map(f64::to_string));
                for (_, series) in &heads {
                    if i < steps {
                        row.extend(series[i].row(s).iter().map(f64::to_string));
                    } else {
                        row.extend(std::iter::repeat_n(String::new(), n));
                    }
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        w.into_inner()
            .map_err(|e| Error::Io(e.into_error()))?
            .finish()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid() {
        let g = TimeGrid::uniform(0.1, 25).unwrap();
        assert_eq!(g.steps(), 25);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 0.1);
        assert!((g.dt(3) - 0.004).abs() < 1e-15);
        assert!(TimeGrid::uniform(0.1, 0).is_err());
    }

    #[test]
    fn from_times_validation() {
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.4]).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.0, 0.3]).is_ok());
    }

    #[test]
    fn zero_length_segment_has_zero_increments() {
        let g = TimeGrid::from_times(vec![0.0, 0.1, 0.1, 0.2]).unwrap();
        let b = sample_increments(&g, 50, 3, 9).unwrap();
        assert!(b.step(1).data().iter().all(|&v| v == 0.0));
        assert!(b.step(0).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
