//! End-to-end steps shared by the CLI and the acceptance suite.

use itap::envs::{episode_rng, generate_offline_dataset, rollout, BehaviorPolicy, LatentRegime, PointMassConfig, PointMassEnv};
use itap::trajectory::Episode;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::train::{train_prior, train_rqvae, LossRecord};

/// Offline point-mass data for every (regime, tier) cell of `config`.
pub fn generate_dataset(config: &RunConfig) -> Result<Dataset> {
    let policies: Vec<BehaviorPolicy> = config
        .tiers
        .iter()
        .map(|t| BehaviorPolicy::from_name(t))
        .collect::<itap::Result<_>>()?;
    let mut env = PointMassEnv::new(config.env_config(), LatentRegime::new(0.0)?)?;
    if config.pomdp {
        env = env.with_goal_mask();
    }
    let episodes = generate_offline_dataset(&mut env, &config.regimes, &policies, config.episodes_per_cell, config.seed)?;
    Dataset::new(6, 2, config.gamma, episodes)
}

pub struct TrainedPipeline {
    pub checkpoint: Checkpoint,
    pub rqvae_curve: Vec<LossRecord>,
    pub prior_curve: Vec<f64>,
}

/// Train the tokenizer, then the prior on its codes.
pub fn train_pipeline(config: &RunConfig, dataset: &Dataset) -> Result<TrainedPipeline> {
    let rq = train_rqvae(config, dataset)?;
    let pr = train_prior(config, dataset, &rq.model)?;
    Ok(TrainedPipeline {
        checkpoint: Checkpoint {
            config: config.clone(),
            rqvae: rq.model,
            prior: Some(pr.model),
        },
        rqvae_curve: rq.curve,
        prior_curve: pr.curve,
    })
}

fn expert_mean(config: &PointMassConfig, f_max: f64, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = PointMassEnv::new(config.clone(), LatentRegime::new(f_max)?)?;
    let policy = BehaviorPolicy::expert();
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = episode_rng(seed, 0, e as u64);
        let ep: Episode = rollout(&mut env, &policy, &mut rng)?;
        total += ep.undiscounted_return();
    }
    Ok(total / episodes as f64)
}

/// Relative drop of the expert's mean return from `f_max = 0` to `f_max`.
pub fn expert_return_drop(config: &PointMassConfig, f_max: f64, episodes: usize, seed: u64) -> Result<f64> {
    let base = expert_mean(config, 0.0, episodes, seed)?;
    let hard = expert_mean(config, f_max, episodes, seed)?;
    Ok((hard - base) / base)
}

/// Force scale at which the expert loses `target_drop` of its return at `f_max`, found by
/// bisection on a log scale. The drop shrinks as the scale grows.
pub fn calibrate_f_scale(
    base: &PointMassConfig,
    f_max: f64,
    target_drop: f64,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let drop_at = |s: f64| {
        let cfg = PointMassConfig {
            f_scale: s,
            ..base.clone()
        };
        expert_return_drop(&cfg, f_max, episodes, seed)
    };
    let (mut lo, mut hi) = (0.5_f64, 64.0_f64);
    if drop_at(lo)? < target_drop || drop_at(hi)? > target_drop {
        return Err(HarnessError::Numerical(format!(
            "target drop {target_drop} is not bracketed by f_scale in [{lo}, {hi}]"
        )));
    }
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        if drop_at(mid)? > target_drop {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}
