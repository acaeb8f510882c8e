use crate::error::{Error, Result};

pub const SIGMA_MAX: f32 = 10.0;
pub const SIGMA_MIN: f32 = 0.1;
/// Fewer steps would leave the tenth-of-n gating windows degenerate.
pub const MIN_STEPS: usize = 10;

/// Linear noise schedule walked by the deterministic sampler. Step 0 is the
/// noisiest.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub total_steps: usize,
    pub current: usize,
    sigmas: Vec<f32>,
}

impl SchedulerState {
    pub fn linear(total_steps: usize) -> Result<Self> {
        if total_steps < MIN_STEPS {
            return Err(Error::config(
                "steps",
                format!("must be at least {MIN_STEPS}, got {total_steps}"),
            ));
        }
        let span = (total_steps - 1) as f64;
        let sigmas = (0..total_steps)
            .map(|s| {
                let t = s as f64 / span;
                (f64::from(SIGMA_MAX) + (f64::from(SIGMA_MIN) - f64::from(SIGMA_MAX)) * t) as f32
            })
            .collect();
        Ok(Self {
            total_steps,
            current: 0,
            sigmas,
        })
    }

    pub fn sigmas(&self) -> &[f32] {
        &self.sigmas
    }

    pub fn sigma(&self, step: usize) -> f32 {
        self.sigmas[step]
    }

    /// Noise level after `step`; zero past the last step.
    pub fn next_sigma(&self, step: usize) -> f32 {
        self.sigmas.get(step + 1).copied().unwrap_or(0.0)
    }

    /// Diffusion timestep, counting down from `n - 1`.
    pub fn timestep(&self, step: usize) -> usize {
        self.total_steps - 1 - step
    }
}
