use rand::{Rng, RngCore};

use super::{apply_observation_mask, perturbation_update, LatentRegime, PerturbationState, PomdpMask, StepOutcome};
use crate::error::{ItapError, Result};

/// Point body in `dim` dimensions pushed along the first axis by the perturbation force.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Body {
    pub dim: usize,
    pub dt: f64,
    pub bound: f64,
    pub max_steps: usize,
    pub spawn_range: f64,
    pub f_scale: f64,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub goal: Vec<f64>,
    pub regime: LatentRegime,
    pub perturbation: PerturbationState,
    pub steps: usize,
    pub mask: PomdpMask,
}

impl Body {
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(3 * self.dim);
        obs.extend(&self.position);
        obs.extend(&self.velocity);
        obs.extend(&self.goal);
        obs
    }

    pub fn masked_observation(&self) -> Vec<f64> {
        apply_observation_mask(&self.observation(), &self.mask)
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let r = self.spawn_range;
        self.position = (0..self.dim).map(|_| rng.gen_range(-r..=r)).collect();
        self.velocity = vec![0.0; self.dim];
        self.goal = (0..self.dim).map(|_| rng.gen_range(-r..=r)).collect();
        let f = self.regime.f_max;
        self.perturbation.force = if f > 0.0 { rng.gen_range(-f..=f) } else { 0.0 };
        self.steps = 0;
        self.masked_observation()
    }

    /// Semi-implicit Euler step with the current force, then one random-walk update.
    pub fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<StepOutcome> {
        if action.len() != self.dim {
            return Err(ItapError::LengthMismatch {
                expected: self.dim,
                actual: action.len(),
            });
        }
        if self.steps >= self.max_steps {
            return Err(ItapError::invalid("episode is over; call reset"));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        for i in 0..self.dim {
            let push = if i == 0 { self.perturbation.force / self.f_scale } else { 0.0 };
            self.velocity[i] += self.dt * (a[i] + push);
            self.position[i] = (self.position[i] + self.dt * self.velocity[i]).clamp(-self.bound, self.bound);
        }
        let distance = self
            .position
            .iter()
            .zip(&self.goal)
            .map(|(p, g)| (p - g).powi(2))
            .sum::<f64>()
            .sqrt();
        let effort = a.iter().map(|v| v * v).sum::<f64>();
        self.perturbation = perturbation_update(self.perturbation, self.regime, rng);
        self.steps += 1;
        Ok(StepOutcome {
            observation: self.masked_observation(),
            reward: -distance - 0.01 * effort,
            done: self.steps >= self.max_steps,
        })
    }
}
