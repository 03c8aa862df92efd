//! Search over code stacks: a latent tree is pre-built from prior samples and decoded
//! tails, then P-UCT simulations pick the macro-action to execute.

mod agent;
mod build;
mod tree;

pub use agent::{plan_step, search_tree, Agent, ExecutionMode, ItapModel, PlanOutcome};
pub use build::{build_latent_tree, score_candidate};
pub use tree::{ActionEdge, DecisionNode, LatentSearchTree, NodeId, OutcomeSample};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ItapError, Result};
use crate::prior::{DepthQuery, DepthSchedule, PriorQuery};
use crate::rqvae::{CodeStack, DecodeRequest, DecodedTail};
use crate::trajectory::ContextEntry;

/// Dimensions the planner needs from the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub macro_len: usize,
    pub context_len: usize,
    pub codebook_size: usize,
    pub depth: usize,
}

/// Frozen tokenizer and prior as seen by the planner.
pub trait LatentModel {
    fn dims(&self) -> ModelDims;
    /// Code stacks for executed history, oldest first.
    fn encode_history(&self, history: &[ContextEntry]) -> Result<Vec<CodeStack>>;
    /// Prior trunk state for each query.
    fn prior_context(&self, queries: &[PriorQuery<'_>]) -> Result<Vec<Vec<f64>>>;
    /// Next-code logits for each query.
    fn depth_logits(&self, queries: &[DepthQuery<'_>]) -> Result<Vec<Vec<f64>>>;
    /// Decoded current tail and, when a successor is given, the successor tail.
    fn decode(&self, requests: &[DecodeRequest<'_>]) -> Result<Vec<(DecodedTail, Option<DecodedTail>)>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Depth-1 draws at the root (`M`).
    pub coarse_samples: usize,
    /// Residual completions per depth-1 draw (`J`).
    pub completions: usize,
    /// Successor draws used to score and cache each candidate (`N_look`).
    pub lookahead: usize,
    /// Proposals per interior node (`B`).
    pub proposals: usize,
    /// Tree depth in macro steps (`H`); 0 disables search.
    pub horizon: usize,
    pub keep_fraction: f64,
    /// Per-depth sampling temperatures; the last value repeats for deeper codes.
    pub temperatures: Vec<f64>,
    /// Per-depth top-k truncations; the last value repeats for deeper codes.
    pub truncations: Vec<usize>,
    pub c1: f64,
    pub c2: f64,
    pub prior_temperature: f64,
    pub iterations: usize,
    /// Cap on root candidates considered by selection; `None` keeps all.
    pub top_k: Option<usize>,
    pub gamma: f64,
    /// One child per cached outcome instead of a single averaged child.
    pub per_sample_children: bool,
    pub action_bound: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            coarse_samples: 16,
            completions: 2,
            lookahead: 4,
            proposals: 4,
            horizon: 2,
            keep_fraction: 0.5,
            temperatures: vec![2.0],
            truncations: vec![8],
            c1: 1.25,
            c2: 19652.0,
            prior_temperature: 2.0,
            iterations: 100,
            top_k: None,
            gamma: 0.99,
            per_sample_children: false,
            action_bound: 1.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("coarse_samples", self.coarse_samples),
            ("completions", self.completions),
            ("lookahead", self.lookahead),
            ("proposals", self.proposals),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ItapError::invalid(format!("{name} must be at least 1")));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(ItapError::invalid("keep_fraction must be in (0, 1]"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(ItapError::invalid("c1 and c2 must be positive"));
        }
        if !(self.prior_temperature > 0.0) {
            return Err(ItapError::invalid("prior_temperature must be positive"));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(ItapError::invalid("temperatures must be positive"));
        }
        if self.truncations.is_empty() || self.truncations.contains(&0) {
            return Err(ItapError::invalid("truncations must be at least 1"));
        }
        if self.top_k == Some(0) {
            return Err(ItapError::invalid("top_k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ItapError::invalid("gamma must be in [0, 1]"));
        }
        Ok(())
    }

    /// Sampling schedule for a `depth`-code stack over a `codebook_size` alphabet.
    pub fn schedule(&self, depth: usize, codebook_size: usize) -> DepthSchedule {
        let pick = |i: usize, v: &[f64]| v[i.min(v.len() - 1)];
        DepthSchedule {
            temperatures: (0..depth).map(|l| pick(l, &self.temperatures)).collect(),
            truncations: (0..depth)
                .map(|l| self.truncations[l.min(self.truncations.len() - 1)].min(codebook_size))
                .collect(),
        }
    }

    /// Number of children kept out of `n` proposals: `⌈κ·n⌉`, at least 1.
    pub fn kept(&self, n: usize) -> usize {
        ((self.keep_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for a (node path, purpose, index) triple under a master seed.
pub(crate) fn stream(master: u64, path: &[u32], purpose: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(master);
    for &p in path {
        h = splitmix64(h ^ (u64::from(p) + 1));
    }
    h = splitmix64(h ^ purpose.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    h = splitmix64(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn keep_count_rounds_up() {
        let cfg = PlannerConfig::default();
        assert_eq!(cfg.kept(32), 16);
        assert_eq!(cfg.kept(4), 2);
        assert_eq!(cfg.kept(3), 2);
        assert_eq!(cfg.kept(1), 1);
        let tenth = PlannerConfig {
            keep_fraction: 0.1,
            ..PlannerConfig::default()
        };
        assert_eq!(tenth.kept(4), 1);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream(1, &[0, 2], 3, 4).gen();
        let b: u64 = stream(1, &[0, 2], 3, 4).gen();
        let c: u64 = stream(1, &[0, 2], 3, 5).gen();
        let d: u64 = stream(1, &[2, 0], 3, 4).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn schedule_broadcasts_and_caps() {
        let cfg = PlannerConfig {
            temperatures: vec![1.0, 3.0],
            truncations: vec![40],
            ..PlannerConfig::default()
        };
        let s = cfg.schedule(3, 32);
        assert_eq!(s.temperatures, vec![1.0, 3.0, 3.0]);
        assert_eq!(s.truncations, vec![32, 32, 32]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            PlannerConfig {
                keep_fraction: 0.0,
                ..PlannerConfig::default()
            },
            PlannerConfig {
                lookahead: 0,
                ..PlannerConfig::default()
            },
            PlannerConfig {
                c2: -1.0,
                ..PlannerConfig::default()
            },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
        assert!(PlannerConfig::default().validate().is_ok());
    }
}
