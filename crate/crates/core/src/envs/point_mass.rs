use rand::RngCore;

use super::body::Body;
use super::{Environment, LatentRegime, PerturbationState, PomdpMask, StepOutcome};
use crate::error::{ItapError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassConfig {
    pub dt: f64,
    /// Positions are clipped to `[−bound, bound]²`.
    pub bound: f64,
    pub max_steps: usize,
    /// Start and goal coordinates are drawn from `[−spawn_range, spawn_range]`.
    pub spawn_range: f64,
    /// Force-to-acceleration divisor, calibrated so the strongest training regime costs the
    /// expert about 30% of its return.
    pub f_scale: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig {
            dt: 0.1,
            bound: 2.0,
            max_steps: 60,
            spawn_range: 1.5,
            f_scale: PointMassEnv::CALIBRATED_F_SCALE,
        }
    }
}

impl PointMassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.bound > 0.0 && self.f_scale > 0.0) || self.max_steps == 0 {
            return Err(ItapError::invalid("dt, bound, f_scale and max_steps must be positive"));
        }
        if !(self.spawn_range >= 0.0 && self.spawn_range <= self.bound) {
            return Err(ItapError::invalid("spawn_range must lie within the bounds"));
        }
        Ok(())
    }
}

/// Planar point mass steered toward a goal; observation `[px, py, vx, vy, gx, gy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    body: Body,
}

impl PointMassEnv {
    pub const CALIBRATED_F_SCALE: f64 = 6.0;
    /// Goal coordinates in the observation vector.
    pub const GOAL_INDICES: [usize; 2] = [4, 5];

    pub fn new(config: PointMassConfig, regime: LatentRegime) -> Result<Self> {
        config.validate()?;
        Ok(PointMassEnv {
            body: Body {
                dim: 2,
                dt: config.dt,
                bound: config.bound,
                max_steps: config.max_steps,
                spawn_range: config.spawn_range,
                f_scale: config.f_scale,
                position: vec![0.0; 2],
                velocity: vec![0.0; 2],
                goal: vec![0.0; 2],
                regime,
                perturbation: PerturbationState::default(),
                steps: 0,
                mask: PomdpMask::default(),
            },
        })
    }

    /// Hide the goal from observations.
    pub fn with_goal_mask(mut self) -> Self {
        self.body.mask = PomdpMask::new(Self::GOAL_INDICES.to_vec(), 6).expect("goal indices are in range");
        self
    }

    pub fn set_mask(&mut self, mask: PomdpMask) {
        self.body.mask = mask;
    }

    /// Place the body explicitly; the force keeps its current value.
    pub fn set_state(&mut self, position: [f64; 2], velocity: [f64; 2], goal: [f64; 2]) {
        self.body.position = position.to_vec();
        self.body.velocity = velocity.to_vec();
        self.body.goal = goal.to_vec();
        self.body.steps = 0;
    }

    pub fn position(&self) -> &[f64] {
        &self.body.position
    }

    pub fn velocity(&self) -> &[f64] {
        &self.body.velocity
    }

    pub fn goal(&self) -> &[f64] {
        &self.body.goal
    }

    pub fn perturbation(&self) -> PerturbationState {
        self.body.perturbation
    }

    pub fn set_perturbation(&mut self, state: PerturbationState) {
        self.body.perturbation = state;
    }

    pub fn steps(&self) -> usize {
        self.body.steps
    }

    /// Worst possible per-step reward.
    pub fn reward_floor(&self) -> f64 {
        -(2.0 * self.body.bound * 2f64.sqrt() + 0.02)
    }
}

impl Environment for PointMassEnv {
    fn obs_dim(&self) -> usize {
        6
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.body.max_steps
    }

    fn regime(&self) -> LatentRegime {
        self.body.regime
    }

    fn set_regime(&mut self, regime: LatentRegime) {
        self.body.regime = regime;
        self.body.perturbation.force = self.body.perturbation.force.clamp(-regime.f_max, regime.f_max);
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.body.reset(rng)
    }

    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<StepOutcome> {
        self.body.step(action, rng)
    }

    fn full_observation(&self) -> Vec<f64> {
        self.body.observation()
    }
}
