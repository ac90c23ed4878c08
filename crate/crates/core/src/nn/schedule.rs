use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate.
///
/// `values[k]` applies on `[boundaries[k-1], boundaries[k])`; a step equal to
/// a boundary belongs to the later piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    boundaries: Vec<usize>,
    values: Vec<f64>,
}

impl LrSchedule {
    pub fn new(boundaries: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != boundaries.len() + 1 {
            return Err(Error::config(
                "lr_values",
                format!(
                    "{} boundaries need {} rates, got {}",
                    boundaries.len(),
                    boundaries.len() + 1,
                    values.len()
                ),
            ));
        }
        if boundaries.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("lr_boundaries", "must be non-decreasing"));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("lr_values", "rates must be positive and finite"));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("lr_values", "rates must be non-increasing"));
        }
        Ok(Self { boundaries, values })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![rate])
    }

    /// 3e-3, 2e-3, 1e-3 with switches at 30% and 60% of `maxstep`.
    pub fn default_for(maxstep: usize) -> Self {
        let b1 = maxstep * 3 / 10;
        let b2 = maxstep * 6 / 10;
        Self::new(vec![b1, b2], vec![3e-3, 2e-3, 1e-3]).expect("default schedule is valid")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.values[self.boundaries.partition_point(|&b| b <= step)]
    }
}
