use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::tree::{ActionEdge, DecisionNode, LatentSearchTree, NodeId, OutcomeSample};
use super::{stream, LatentModel, ModelDims, PlannerConfig};
use crate::diffmath::log_sum_exp;
use crate::error::{ItapError, Result};
use crate::prior::{top_k_temperature_categorical, DepthQuery, DepthSchedule, PriorQuery};
use crate::rqvae::{CodeStack, DecodeRequest, DecodedTail};
use crate::trajectory::ContextEntry;

const COARSE: u64 = 1;
const COMPLETION: u64 = 2;
const PROPOSAL: u64 = 3;
const SUCCESSOR: u64 = 4;

/// Mean over lookahead draws of the candidate's decoded macro return plus the decoded
/// return-to-go of each successor tail.
pub fn score_candidate(macro_return: f64, successors: &[DecodedTail]) -> Result<f64> {
    if successors.is_empty() {
        return Err(ItapError::invalid("at least one successor tail is required"));
    }
    let total: f64 = successors.iter().map(|t| macro_return + t.rtg).sum();
    Ok(total / successors.len() as f64)
}

/// A stack being drawn code by code from one prior context.
struct Draw {
    context: usize,
    prefix: Vec<usize>,
    log_prob: f64,
    rng: ChaCha8Rng,
}

/// Extend every draw to `depth` codes. Draws sharing a context and prefix share one
/// logits query.
fn extend_draws<M: LatentModel + ?Sized>(
    model: &M,
    contexts: &[Vec<f64>],
    draws: &mut [Draw],
    schedule: &DepthSchedule,
    depth: usize,
) -> Result<()> {
    loop {
        let level = match draws.iter().map(|d| d.prefix.len()).filter(|&l| l < depth).min() {
            Some(l) => l,
            None => return Ok(()),
        };
        let mut keys: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut order: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut slot = vec![usize::MAX; draws.len()];
        for (i, d) in draws.iter().enumerate() {
            if d.prefix.len() != level {
                continue;
            }
            let key = (d.context, d.prefix.clone());
            let next = order.len();
            let idx = *keys.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                next
            });
            slot[i] = idx;
        }
        let queries: Vec<DepthQuery<'_>> = order
            .iter()
            .map(|(c, p)| DepthQuery {
                context: &contexts[*c],
                prefix: p,
            })
            .collect();
        let logits = model.depth_logits(&queries)?;
        for (i, d) in draws.iter_mut().enumerate() {
            if slot[i] == usize::MAX {
                continue;
            }
            let row = &logits[slot[i]];
            let k = top_k_temperature_categorical(
                row,
                schedule.temperatures[level],
                schedule.truncations[level],
                &mut d.rng,
            )?;
            d.log_prob += row[k] - log_sum_exp(row);
            d.prefix.push(k);
        }
    }
}

/// A distinct stack proposed at one node, with how many draws produced it.
#[derive(Debug, Clone)]
pub(crate) struct Proposal {
    pub stack: CodeStack,
    pub log_prob: f64,
    pub multiplicity: usize,
}

fn merge(draws: Vec<Draw>) -> Vec<Proposal> {
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut out: Vec<Proposal> = Vec::new();
    for d in draws {
        match seen.get(&d.prefix) {
            Some(&i) => out[i].multiplicity += 1,
            None => {
                seen.insert(d.prefix.clone(), out.len());
                out.push(Proposal {
                    stack: CodeStack::new(d.prefix),
                    log_prob: d.log_prob,
                    multiplicity: 1,
                });
            }
        }
    }
    out
}

pub(crate) fn slide(context: &[CodeStack], stack: &CodeStack, capacity: usize) -> Vec<CodeStack> {
    let mut out: Vec<CodeStack> = context.to_vec();
    out.push(stack.clone());
    let drop = out.len().saturating_sub(capacity);
    out.drain(..drop);
    out
}

fn check_dims(dims: &ModelDims, observation: &[f64], history: &[ContextEntry]) -> Result<()> {
    if observation.len() != dims.obs_dim {
        return Err(ItapError::shape(
            "plan",
            format!("observation has {} dims, model expects {}", observation.len(), dims.obs_dim),
        ));
    }
    if history.len() > dims.context_len {
        return Err(ItapError::invalid(format!(
            "history of {} entries exceeds context length {}",
            history.len(),
            dims.context_len
        )));
    }
    for entry in history {
        if entry.observation.len() != dims.obs_dim
            || entry.macro_action.len() != dims.macro_len
            || entry.macro_action.iter().any(|a| a.len() != dims.act_dim)
        {
            return Err(ItapError::shape("plan", "history entry does not match model dimensions"));
        }
    }
    Ok(())
}

/// Root of a fresh tree with the encoded history as context.
pub(crate) fn root_node<M: LatentModel + ?Sized>(
    model: &M,
    observation: &[f64],
    history: &[ContextEntry],
) -> Result<DecisionNode> {
    let dims = model.dims();
    check_dims(&dims, observation, history)?;
    let context = model.encode_history(history)?;
    Ok(DecisionNode::new(observation.to_vec(), context, 0, Vec::new()))
}

/// `M` depth-1 draws, each completed `J` times to full depth, merged.
pub(crate) fn root_proposals<M: LatentModel + ?Sized>(
    model: &M,
    root: &DecisionNode,
    config: &PlannerConfig,
    seed: u64,
) -> Result<Vec<Proposal>> {
    let dims = model.dims();
    let schedule = config.schedule(dims.depth, dims.codebook_size);
    let h = model.prior_context(&[PriorQuery {
        context: &root.context,
        observation: &root.observation,
    }])?;
    let mut coarse: Vec<Draw> = (0..config.coarse_samples)
        .map(|i| Draw {
            context: 0,
            prefix: Vec::new(),
            log_prob: 0.0,
            rng: stream(seed, &root.path, COARSE, i as u64),
        })
        .collect();
    extend_draws(model, &h, &mut coarse, &schedule, 1.min(dims.depth))?;
    let mut full: Vec<Draw> = Vec::with_capacity(coarse.len() * config.completions);
    for (i, c) in coarse.iter().enumerate() {
        for j in 0..config.completions {
            full.push(Draw {
                context: 0,
                prefix: c.prefix.clone(),
                log_prob: c.log_prob,
                rng: stream(seed, &root.path, COMPLETION, (i * config.completions + j) as u64),
            });
        }
    }
    extend_draws(model, &h, &mut full, &schedule, dims.depth)?;
    Ok(merge(full))
}

/// `B` full-depth draws at each node, merged per node.
fn node_proposals<M: LatentModel + ?Sized>(
    model: &M,
    nodes: &[&DecisionNode],
    config: &PlannerConfig,
    seed: u64,
) -> Result<Vec<Vec<Proposal>>> {
    let dims = model.dims();
    let schedule = config.schedule(dims.depth, dims.codebook_size);
    let queries: Vec<PriorQuery<'_>> = nodes
        .iter()
        .map(|n| PriorQuery {
            context: &n.context,
            observation: &n.observation,
        })
        .collect();
    let h = model.prior_context(&queries)?;
    let mut draws: Vec<Draw> = Vec::with_capacity(nodes.len() * config.proposals);
    for (ni, n) in nodes.iter().enumerate() {
        for b in 0..config.proposals {
            draws.push(Draw {
                context: ni,
                prefix: Vec::new(),
                log_prob: 0.0,
                rng: stream(seed, &n.path, PROPOSAL, b as u64),
            });
        }
    }
    extend_draws(model, &h, &mut draws, &schedule, dims.depth)?;
    let mut per_node: Vec<Vec<Draw>> = (0..nodes.len()).map(|_| Vec::new()).collect();
    for d in draws {
        per_node[d.context].push(d);
    }
    Ok(per_node.into_iter().map(merge).collect())
}

/// A scored proposal with its decoded current tail and cached outcomes.
struct Scored {
    proposal: Proposal,
    current: DecodedTail,
    outcomes: Vec<OutcomeSample>,
    score: f64,
}

/// Draw `N_look` successors per proposal draw and decode them against each node's context.
fn score_proposals<M: LatentModel + ?Sized>(
    model: &M,
    nodes: &[&DecisionNode],
    proposals: Vec<Vec<Proposal>>,
    config: &PlannerConfig,
    seed: u64,
) -> Result<Vec<Vec<Scored>>> {
    let dims = model.dims();
    let schedule = config.schedule(dims.depth, dims.codebook_size);
    let mut succ_contexts: Vec<Vec<CodeStack>> = Vec::new();
    let mut owners: Vec<(usize, usize)> = Vec::new();
    for (ni, (n, props)) in nodes.iter().zip(&proposals).enumerate() {
        for (pi, p) in props.iter().enumerate() {
            succ_contexts.push(slide(&n.context, &p.stack, dims.context_len));
            owners.push((ni, pi));
        }
    }
    let queries: Vec<PriorQuery<'_>> = succ_contexts
        .iter()
        .zip(&owners)
        .map(|(c, &(ni, _))| PriorQuery {
            context: c,
            observation: &nodes[ni].observation,
        })
        .collect();
    let h = model.prior_context(&queries)?;
    let mut draws: Vec<Draw> = Vec::new();
    for (ci, &(ni, pi)) in owners.iter().enumerate() {
        let count = proposals[ni][pi].multiplicity * config.lookahead;
        for s in 0..count {
            draws.push(Draw {
                context: ci,
                prefix: Vec::new(),
                log_prob: 0.0,
                rng: stream(seed, &nodes[ni].path, SUCCESSOR, ((pi as u64) << 32) | s as u64),
            });
        }
    }
    extend_draws(model, &h, &mut draws, &schedule, dims.depth)?;
    let successors: Vec<CodeStack> = draws.into_iter().map(|d| CodeStack::new(d.prefix)).collect();
    let mut draw_owner: Vec<usize> = Vec::with_capacity(successors.len());
    for (ci, &(ni, pi)) in owners.iter().enumerate() {
        draw_owner.extend(std::iter::repeat(ci).take(proposals[ni][pi].multiplicity * config.lookahead));
    }
    let requests: Vec<DecodeRequest<'_>> = successors
        .iter()
        .zip(&draw_owner)
        .map(|(next, &ci)| {
            let (ni, pi) = owners[ci];
            DecodeRequest {
                context: &nodes[ni].context,
                anchor_obs: &nodes[ni].observation,
                current: &proposals[ni][pi].stack,
                next: Some(next),
            }
        })
        .collect();
    let decoded = model.decode(&requests)?;

    let mut grouped: Vec<Vec<(DecodedTail, OutcomeSample)>> = (0..owners.len()).map(|_| Vec::new()).collect();
    for ((next, &ci), (current, tail)) in successors.into_iter().zip(&draw_owner).zip(decoded) {
        let tail = tail.ok_or_else(|| ItapError::invalid("decoder returned no successor tail"))?;
        grouped[ci].push((current, OutcomeSample { next_stack: next, tail }));
    }
    let mut out: Vec<Vec<Scored>> = (0..nodes.len()).map(|_| Vec::new()).collect();
    let mut props_iter: Vec<std::vec::IntoIter<Proposal>> = proposals.into_iter().map(|p| p.into_iter()).collect();
    for (group, &(ni, _)) in grouped.into_iter().zip(&owners) {
        let proposal = props_iter[ni].next().expect("one group per proposal");
        let current = group[0].0.clone();
        let outcomes: Vec<OutcomeSample> = group.into_iter().map(|(_, o)| o).collect();
        let tails: Vec<DecodedTail> = outcomes.iter().map(|o| o.tail.clone()).collect();
        let score = score_candidate(current.macro_return, &tails)?;
        out[ni].push(Scored {
            proposal,
            current,
            outcomes,
            score,
        });
    }
    Ok(out)
}

fn mean_observation(outcomes: &[OutcomeSample]) -> Vec<f64> {
    let dim = outcomes[0].tail.observation.len();
    let mut mean = vec![0.0; dim];
    for o in outcomes {
        for (m, v) in mean.iter_mut().zip(&o.tail.observation) {
            *m += v;
        }
    }
    let n = outcomes.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Keep the best-scoring proposals at `node` as edges and attach their children.
fn attach(
    tree: &mut LatentSearchTree,
    node: NodeId,
    mut scored: Vec<Scored>,
    drawn: usize,
    context_len: usize,
) -> Result<Vec<NodeId>> {
    let keep = tree.config().kept(drawn);
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score).then(a.cmp(&b)));
    order.truncate(keep);
    let per_sample = tree.config().per_sample_children;
    let (parent_ctx, parent_path, depth) = {
        let n = tree.node(node);
        (n.context.clone(), n.path.clone(), n.depth + 1)
    };
    let mut slots: Vec<Option<Scored>> = scored.drain(..).map(Some).collect();
    let mut children = Vec::new();
    for i in order {
        let s = slots[i].take().expect("each proposal kept once");
        let mut edge = ActionEdge::new(s.proposal.stack, s.proposal.log_prob, s.current.macro_return, s.outcomes);
        edge.score = s.score;
        edge.macro_action = s.current.macro_action;
        let context = slide(&parent_ctx, &edge.stack, context_len);
        let child_obs: Vec<Vec<f64>> = if per_sample {
            edge.outcomes.iter().map(|o| o.tail.observation.clone()).collect()
        } else {
            vec![mean_observation(&edge.outcomes)]
        };
        let e = tree.add_edge(node, edge)?;
        for (oi, obs) in child_obs.into_iter().enumerate() {
            let mut path = parent_path.clone();
            path.push(e as u32);
            if per_sample {
                path.push(oi as u32);
            }
            let id = tree.add_child(node, e, DecisionNode::new(obs, context.clone(), depth, path))?;
            children.push(id);
        }
    }
    Ok(children)
}

/// Build the latent search tree for one decision: root candidates from coarse draws and
/// residual completions, then `B` proposals per frontier node down to depth `H`. Every
/// kept candidate is scored with `N_look` decoded successor draws which stay cached on its
/// edge as chance outcomes.
pub fn build_latent_tree<M: LatentModel + ?Sized>(
    model: &M,
    observation: &[f64],
    history: &[ContextEntry],
    config: &PlannerConfig,
    seed: u64,
) -> Result<LatentSearchTree> {
    config.validate()?;
    if config.horizon == 0 {
        return Err(ItapError::invalid("tree construction needs horizon of at least 1"));
    }
    let dims = model.dims();
    let root = root_node(model, observation, history)?;
    let mut tree = LatentSearchTree::new(root, config.clone(), dims.macro_len, seed)?;

    let proposals = root_proposals(model, tree.root(), config, seed)?;
    let scored = score_proposals(model, &[tree.root()], vec![proposals], config, seed)?;
    let drawn = config.coarse_samples * config.completions;
    let mut frontier = attach(
        &mut tree,
        0,
        scored.into_iter().next().expect("one root group"),
        drawn,
        dims.context_len,
    )?;

    for _ in 2..=config.horizon {
        if frontier.is_empty() {
            break;
        }
        let nodes: Vec<&DecisionNode> = frontier.iter().map(|&id| tree.node(id)).collect();
        let proposals = node_proposals(model, &nodes, config, seed)?;
        let scored = score_proposals(model, &nodes, proposals, config, seed)?;
        let mut next = Vec::new();
        for (id, group) in frontier.clone().into_iter().zip(scored) {
            next.extend(attach(&mut tree, id, group, config.proposals, dims.context_len)?);
        }
        frontier = next;
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tail(rtg: f64) -> DecodedTail {
        DecodedTail {
            rtg,
            macro_return: 0.0,
            observation: vec![],
            macro_action: vec![],
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_candidate(2.0, &[tail(5.0)]).unwrap(), 7.0);
        assert_eq!(score_candidate(1.0, &[tail(3.0), tail(5.0)]).unwrap(), 5.0);
        let same = score_candidate(0.5, &vec![tail(1.5); 7]).unwrap();
        assert!((same - score_candidate(0.5, &[tail(1.5)]).unwrap()).abs() < 1e-12);
        assert!(score_candidate(1.0, &[]).is_err());
    }

    #[test]
    fn slide_caps_context() {
        let s = |k| CodeStack::new(vec![k]);
        assert_eq!(slide(&[s(0), s(1)], &s(2), 2), vec![s(1), s(2)]);
        assert_eq!(slide(&[], &s(2), 2), vec![s(2)]);
        assert_eq!(slide(&[s(0)], &s(2), 0), Vec::<CodeStack>::new());
    }
}
