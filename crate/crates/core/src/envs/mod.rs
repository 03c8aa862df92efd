//! Toy continuous-control environments with a hidden perturbation regime, observation
//! masking, scripted behavior policies and offline dataset generation.

mod body;
mod point_mass;
mod push_chain;

pub use point_mass::{PointMassConfig, PointMassEnv};
pub use push_chain::{PushChainConfig, PushChainEnv};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ItapError, Result};
use crate::trajectory::Episode;

/// Hidden task parameter of an episode: the largest perturbation force magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRegime {
    pub f_max: f64,
}

impl LatentRegime {
    pub fn new(f_max: f64) -> Result<Self> {
        if !f_max.is_finite() || f_max < 0.0 {
            return Err(ItapError::invalid(format!("f_max must be finite and non-negative, got {f_max}")));
        }
        Ok(LatentRegime { f_max })
    }
}

/// Current horizontal force.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerturbationState {
    pub force: f64,
}

/// One random-walk step: `f ← clip(f + Δf, −f_max, f_max)` with `Δf ~ U(−0.1 f_max, 0.1 f_max)`.
pub fn perturbation_update<R: Rng + ?Sized>(
    state: PerturbationState,
    regime: LatentRegime,
    rng: &mut R,
) -> PerturbationState {
    let delta = if regime.f_max > 0.0 {
        rng.gen_range(-0.1 * regime.f_max..=0.1 * regime.f_max)
    } else {
        0.0
    };
    step_force(state, regime, delta)
}

/// The deterministic part of [`perturbation_update`] for a given increment.
pub fn step_force(state: PerturbationState, regime: LatentRegime, delta: f64) -> PerturbationState {
    PerturbationState {
        force: (state.force + delta).clamp(-regime.f_max, regime.f_max),
    }
}

/// Observation coordinates hidden from the agent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PomdpMask {
    masked: Vec<usize>,
}

impl PomdpMask {
    pub fn new(mut masked: Vec<usize>, obs_dim: usize) -> Result<Self> {
        if let Some(&i) = masked.iter().find(|&&i| i >= obs_dim) {
            return Err(ItapError::IndexOutOfRange { index: i, size: obs_dim });
        }
        masked.sort_unstable();
        masked.dedup();
        Ok(PomdpMask { masked })
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

pub fn apply_observation_mask(obs: &[f64], mask: &PomdpMask) -> Vec<f64> {
    let mut out = obs.to_vec();
    for &i in &mask.masked {
        if let Some(v) = out.get_mut(i) {
            *v = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment driven by an external random stream.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn regime(&self) -> LatentRegime;
    fn set_regime(&mut self, regime: LatentRegime);
    /// Start a new episode; returns the (masked) first observation.
    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    /// Advance one step. Actions are clamped to `[−1, 1]`.
    fn step(&mut self, action: &[f64], rng: &mut dyn rand::RngCore) -> Result<StepOutcome>;
    /// Unmasked observation, used by the scripted behavior policies.
    fn full_observation(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    Expert,
    Medium,
    Random,
}

/// Scripted controller for data collection. Observations are laid out as
/// `[position, velocity, goal]` with equal block widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub noise_scale: f64,
    pub position_gain: f64,
    pub velocity_gain: f64,
}

impl BehaviorPolicy {
    pub const EXPERT_NOISE: f64 = 0.1;
    pub const POSITION_GAIN: f64 = 2.0;
    pub const VELOCITY_GAIN: f64 = 2.8;

    pub fn expert() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::Expert,
            noise_scale: Self::EXPERT_NOISE,
            position_gain: Self::POSITION_GAIN,
            velocity_gain: Self::VELOCITY_GAIN,
        }
    }

    /// Half the gains and three times the noise of the expert.
    pub fn medium() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::Medium,
            noise_scale: 3.0 * Self::EXPERT_NOISE,
            position_gain: 0.5 * Self::POSITION_GAIN,
            velocity_gain: 0.5 * Self::VELOCITY_GAIN,
        }
    }

    pub fn random() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::Random,
            noise_scale: 0.0,
            position_gain: 0.0,
            velocity_gain: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            BehaviorKind::Expert => "expert",
            BehaviorKind::Medium => "medium",
            BehaviorKind::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "expert" => Ok(Self::expert()),
            "medium" => Ok(Self::medium()),
            "random" => Ok(Self::random()),
            other => Err(ItapError::invalid(format!("unknown behavior tier '{other}'"))),
        }
    }
}

pub fn scripted_behavior_action<R: Rng + ?Sized>(policy: &BehaviorPolicy, obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if obs.is_empty() || obs.len() % 3 != 0 {
        return Err(ItapError::shape(
            "scripted_behavior_action",
            format!("observation of length {} is not [position, velocity, goal]", obs.len()),
        ));
    }
    let n = obs.len() / 3;
    if policy.kind == BehaviorKind::Random {
        return Ok((0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect());
    }
    if !(policy.noise_scale >= 0.0) {
        return Err(ItapError::invalid("noise_scale must be non-negative"));
    }
    let noise = Normal::new(0.0, policy.noise_scale).map_err(|e| ItapError::invalid(e.to_string()))?;
    Ok((0..n)
        .map(|i| {
            let drive = policy.position_gain * (obs[2 * n + i] - obs[i]) - policy.velocity_gain * obs[n + i];
            let a = drive.clamp(-1.0, 1.0);
            let eps = if policy.noise_scale > 0.0 { noise.sample(rng) } else { 0.0 };
            (a + eps).clamp(-1.0, 1.0)
        })
        .collect())
}

/// Roll out one episode of `policy` in `env`, recording the observations the agent sees.
pub fn rollout<E: Environment + ?Sized>(env: &mut E, policy: &BehaviorPolicy, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let mut obs = env.reset(rng);
    let mut observations = Vec::with_capacity(env.max_steps());
    let mut actions = Vec::with_capacity(env.max_steps());
    let mut rewards = Vec::with_capacity(env.max_steps());
    loop {
        let action = scripted_behavior_action(policy, &env.full_observation(), rng)?;
        let out = env.step(&action, rng)?;
        observations.push(obs);
        actions.push(action);
        rewards.push(out.reward);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Episode::new(observations, actions, rewards, env.regime().f_max)
}

/// Independent stream for cell `cell`, episode `episode` under `seed`.
pub fn episode_rng(seed: u64, cell: u64, episode: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((cell << 32) | episode);
    rng
}

/// Roll out every (regime, tier) cell for `episodes_per_cell` episodes, regimes outermost.
pub fn generate_offline_dataset<E: Environment + ?Sized>(
    env: &mut E,
    regimes: &[f64],
    tiers: &[BehaviorPolicy],
    episodes_per_cell: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if regimes.is_empty() || tiers.is_empty() || episodes_per_cell == 0 {
        return Err(ItapError::invalid("regimes, tiers and episodes per cell must be non-empty"));
    }
    let mut out = Vec::with_capacity(regimes.len() * tiers.len() * episodes_per_cell);
    for (ri, &f_max) in regimes.iter().enumerate() {
        env.set_regime(LatentRegime::new(f_max)?);
        for (ti, tier) in tiers.iter().enumerate() {
            let cell = (ri * tiers.len() + ti) as u64;
            for e in 0..episodes_per_cell {
                let mut rng = episode_rng(seed, cell, e as u64);
                out.push(rollout(env, tier, &mut rng)?);
            }
        }
    }
    Ok(out)
}
