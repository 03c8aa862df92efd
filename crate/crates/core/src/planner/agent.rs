use std::collections::VecDeque;

use rand::Rng;

use super::build::{build_latent_tree, root_node, root_proposals};
use super::tree::LatentSearchTree;
use super::{stream, LatentModel, ModelDims, PlannerConfig};
use crate::error::{ItapError, Result};
use crate::prior::{DepthQuery, PriorModel, PriorQuery};
use crate::rqvae::{CodeStack, DecodeRequest, DecodedTail, RqVaeModel};
use crate::trajectory::{compute_macro_return, ContextEntry};

const SEARCH: u64 = 5;
const DECISION: u64 = 6;

/// Trained tokenizer and prior used together for planning.
#[derive(Debug, Clone, Copy)]
pub struct ItapModel<'a> {
    rqvae: &'a RqVaeModel,
    prior: &'a PriorModel,
}

impl<'a> ItapModel<'a> {
    pub fn new(rqvae: &'a RqVaeModel, prior: &'a PriorModel) -> Result<Self> {
        let r = rqvae.config();
        let p = prior.config();
        let pairs = [
            ("codebook_size", r.codebook_size, p.codebook_size),
            ("depth", r.depth, p.depth),
            ("latent_dim", r.latent_dim, p.latent_dim),
            ("obs_dim", r.obs_dim, p.obs_dim),
            ("context_len", r.context_len, p.context_len),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(ItapError::shape("planner model", format!("{name}: tokenizer {a}, prior {b}")));
            }
        }
        Ok(ItapModel { rqvae, prior })
    }

    pub fn rqvae(&self) -> &RqVaeModel {
        self.rqvae
    }

    pub fn prior(&self) -> &PriorModel {
        self.prior
    }
}

impl LatentModel for ItapModel<'_> {
    fn dims(&self) -> ModelDims {
        let c = self.rqvae.config();
        ModelDims {
            obs_dim: c.obs_dim,
            act_dim: c.act_dim,
            macro_len: c.macro_len,
            context_len: c.context_len,
            codebook_size: c.codebook_size,
            depth: c.depth,
        }
    }

    fn encode_history(&self, history: &[ContextEntry]) -> Result<Vec<CodeStack>> {
        self.rqvae.encode_history_to_codes(history)
    }

    fn prior_context(&self, queries: &[PriorQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        self.prior.trunk_forward(queries)
    }

    fn depth_logits(&self, queries: &[DepthQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        self.prior.depth_logits_batch(queries)
    }

    fn decode(&self, requests: &[DecodeRequest<'_>]) -> Result<Vec<(DecodedTail, Option<DecodedTail>)>> {
        self.rqvae.decode_batch(requests)
    }
}

/// How much of each planned macro-action is executed before replanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    #[default]
    FullMacro,
    FirstAction,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub stack: CodeStack,
    /// `L × act_dim`, clamped to the action bound.
    pub macro_action: Vec<Vec<f64>>,
    /// The searched tree; `None` when planning is disabled.
    pub tree: Option<LatentSearchTree>,
}

fn clamp_macro(macro_action: &[Vec<f64>], bound: f64) -> Vec<Vec<f64>> {
    macro_action
        .iter()
        .map(|a| a.iter().map(|v| v.clamp(-bound, bound)).collect())
        .collect()
}

/// Choose the next macro-action for observation `observation` after `history`.
///
/// With a positive horizon this builds the latent tree, runs the configured number of
/// simulations and executes the most visited root edge. With `horizon == 0` the root
/// candidates are drawn the same way but the most probable one under the prior is decoded
/// directly.
pub fn plan_step<M: LatentModel + ?Sized>(
    model: &M,
    observation: &[f64],
    history: &[ContextEntry],
    config: &PlannerConfig,
    seed: u64,
) -> Result<PlanOutcome> {
    config.validate()?;
    if config.horizon == 0 {
        let root = root_node(model, observation, history)?;
        let proposals = root_proposals(model, &root, config, seed)?;
        let mut best = 0;
        for (i, p) in proposals.iter().enumerate().skip(1) {
            if p.log_prob > proposals[best].log_prob {
                best = i;
            }
        }
        let stack = proposals[best].stack.clone();
        let decoded = model.decode(&[DecodeRequest {
            context: &root.context,
            anchor_obs: &root.observation,
            current: &stack,
            next: None,
        }])?;
        let macro_action = clamp_macro(&decoded[0].0.macro_action, config.action_bound);
        return Ok(PlanOutcome {
            stack,
            macro_action,
            tree: None,
        });
    }
    let mut tree = build_latent_tree(model, observation, history, config, seed)?;
    let chosen = search_tree(&mut tree, seed)?;
    let edge = &tree.root().edges[chosen];
    let stack = edge.stack.clone();
    let macro_action = clamp_macro(&edge.macro_action, config.action_bound);
    Ok(PlanOutcome {
        stack,
        macro_action,
        tree: Some(tree),
    })
}

/// Run the configured number of simulations on `tree` and return the chosen root edge.
pub fn search_tree(tree: &mut LatentSearchTree, seed: u64) -> Result<usize> {
    let mut rng = stream(seed, &[], SEARCH, 0);
    tree.run_search(tree.config().iterations, &mut rng)?;
    tree.select_root_edge()
}

/// Closed-loop controller: keeps the executed transitions, rebuilds the macro-aligned
/// context window from them and replans when its action queue runs out.
pub struct Agent<'m, M: LatentModel + ?Sized> {
    model: &'m M,
    config: PlannerConfig,
    mode: ExecutionMode,
    seed: u64,
    decisions: u64,
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    pending: VecDeque<Vec<f64>>,
    last_tree: Option<LatentSearchTree>,
}

impl<'m, M: LatentModel + ?Sized> Agent<'m, M> {
    pub fn new(model: &'m M, config: PlannerConfig, mode: ExecutionMode, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Agent {
            model,
            config,
            mode,
            seed,
            decisions: 0,
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            pending: VecDeque::new(),
            last_tree: None,
        })
    }

    /// Forget the episode; the decision counter keeps advancing so seeds never repeat.
    pub fn reset(&mut self) {
        self.observations.clear();
        self.actions.clear();
        self.rewards.clear();
        self.pending.clear();
        self.last_tree = None;
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    pub fn last_tree(&self) -> Option<&LatentSearchTree> {
        self.last_tree.as_ref()
    }

    /// The last `C` complete macro steps ending at the current step, oldest first.
    pub fn history(&self) -> Result<Vec<ContextEntry>> {
        let dims = self.model.dims();
        let t = self.actions.len();
        let l = dims.macro_len;
        let n = (t / l).min(dims.context_len);
        let mut out = Vec::with_capacity(n);
        for j in (1..=n).rev() {
            let start = t - j * l;
            out.push(ContextEntry {
                macro_return: compute_macro_return(&self.rewards[start..start + l], l, self.config.gamma)?,
                observation: self.observations[start].clone(),
                macro_action: self.actions[start..start + l].to_vec(),
                stack: None,
            });
        }
        Ok(out)
    }

    /// Primitive action for `observation`, replanning when needed.
    pub fn act(&mut self, observation: &[f64]) -> Result<Vec<f64>> {
        if self.pending.is_empty() {
            let history = self.history()?;
            let seed: u64 = stream(self.seed, &[], DECISION, self.decisions).gen();
            self.decisions += 1;
            let outcome = plan_step(self.model, observation, &history, &self.config, seed)?;
            match self.mode {
                ExecutionMode::FullMacro => self.pending.extend(outcome.macro_action),
                ExecutionMode::FirstAction => self.pending.extend(outcome.macro_action.into_iter().take(1)),
            }
            self.last_tree = outcome.tree;
        }
        self.pending
            .pop_front()
            .ok_or_else(|| ItapError::invalid("planner returned an empty macro-action"))
    }

    /// Record the transition that followed `act`.
    pub fn observe(&mut self, observation: &[f64], action: &[f64], reward: f64) {
        self.observations.push(observation.to_vec());
        self.actions.push(action.to_vec());
        self.rewards.push(reward);
    }
}
