use rand::RngCore;

use super::body::Body;
use super::{Environment, LatentRegime, PerturbationState, PomdpMask, StepOutcome};
use crate::error::{ItapError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PushChainConfig {
    pub dt: f64,
    pub bound: f64,
    pub max_steps: usize,
    pub spawn_range: f64,
    pub f_scale: f64,
}

impl Default for PushChainConfig {
    fn default() -> Self {
        PushChainConfig {
            dt: 0.1,
            bound: 2.0,
            max_steps: 30,
            spawn_range: 1.5,
            f_scale: 2.0,
        }
    }
}

/// One-dimensional body on a rail; observation `[x, v, goal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PushChainEnv {
    body: Body,
}

impl PushChainEnv {
    pub fn new(config: PushChainConfig, regime: LatentRegime) -> Result<Self> {
        if !(config.dt > 0.0 && config.bound > 0.0 && config.f_scale > 0.0) || config.max_steps == 0 {
            return Err(ItapError::invalid("dt, bound, f_scale and max_steps must be positive"));
        }
        Ok(PushChainEnv {
            body: Body {
                dim: 1,
                dt: config.dt,
                bound: config.bound,
                max_steps: config.max_steps,
                spawn_range: config.spawn_range.min(config.bound),
                f_scale: config.f_scale,
                position: vec![0.0],
                velocity: vec![0.0],
                goal: vec![0.0],
                regime,
                perturbation: PerturbationState::default(),
                steps: 0,
                mask: PomdpMask::default(),
            },
        })
    }

    pub fn with_goal_mask(mut self) -> Self {
        self.body.mask = PomdpMask::new(vec![2], 3).expect("goal index is in range");
        self
    }

    pub fn perturbation(&self) -> PerturbationState {
        self.body.perturbation
    }
}

impl Environment for PushChainEnv {
    fn obs_dim(&self) -> usize {
        3
    }

    fn act_dim(&self) -> usize {
        1
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
