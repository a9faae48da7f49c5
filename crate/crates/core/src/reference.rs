//! Sampled reference trajectories and trajectory-to-trajectory error metrics.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("reference covers [{start}, {end}] s but {needed} s is required")]
    WindowTooShort { start: f64, end: f64, needed: f64 },
    #[error("empty trajectory")]
    Empty,
    #[error("malformed reference: {0}")]
    Malformed(String),
}

/// States and inputs sampled on an increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    pub fn new(times: Vec<f64>, states: Vec<DVector<f64>>, inputs: Vec<DVector<f64>>) -> Result<Self, ReferenceError> {
        if times.is_empty() {
            return Err(ReferenceError::Empty);
        }
        if states.len() != times.len() || inputs.len() != times.len() {
            return Err(ReferenceError::Malformed(format!(
                "{} times, {} states, {} inputs",
                times.len(),
                states.len(),
                inputs.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ReferenceError::Malformed("times must be strictly increasing".into()));
        }
        Ok(Self { times, states, inputs })
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let i = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        (i, ((t - t0) / (t1 - t0)).clamp(0.0, 1.0))
    }

    /// Linear interpolation of the state; `None` outside the covered window.
    pub fn state_at(&self, t: f64) -> Option<DVector<f64>> {
        let eps = 1e-9 * (1.0 + self.end().abs());
        if t < self.start() - eps || t > self.end() + eps {
            return None;
        }
        if self.times.len() == 1 {
            return Some(self.states[0].clone());
        }
        let (i, w) = self.bracket(t);
        Some(&self.states[i] * (1.0 - w) + &self.states[i + 1] * w)
    }

    pub fn input_at(&self, t: f64) -> Option<DVector<f64>> {
        if self.times.len() == 1 {
            return Some(self.inputs[0].clone());
        }
        self.state_at(t)?;
        let (i, w) = self.bracket(t);
        Some(&self.inputs[i] * (1.0 - w) + &self.inputs[i + 1] * w)
    }
}

/// Mean over samples and components of the squared state error, with the
/// reference linearly interpolated onto `times`.
pub fn mse_on_grid(times: &[f64], states: &[DVector<f64>], reference: &ReferenceTrajectory) -> Result<f64, ReferenceError> {
    if times.is_empty() || states.is_empty() {
        return Err(ReferenceError::Empty);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&t, x) in times.iter().zip(states) {
        let r = reference.state_at(t).ok_or(ReferenceError::WindowTooShort {
            start: reference.start(),
            end: reference.end(),
            needed: t,
        })?;
        total += (x - r).norm_squared();
        count += x.len();
    }
    Ok(total / count as f64)
}

/// Like [`mse_on_grid`] but only over the samples the reference covers.
pub fn mse_on_overlap(times: &[f64], states: &[DVector<f64>], reference: &ReferenceTrajectory) -> Result<f64, ReferenceError> {
    let (t, x): (Vec<f64>, Vec<DVector<f64>>) =
        times.iter().zip(states).filter(|(&t, _)| reference.state_at(t).is_some()).map(|(&t, x)| (t, x.clone())).unzip();
    mse_on_grid(&t, &x, reference)
}
