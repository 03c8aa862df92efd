use itap::planner::{
    build_latent_tree, plan_step, search_tree, ActionEdge, Agent, DecisionNode, ExecutionMode, LatentModel,
    LatentSearchTree, ModelDims, OutcomeSample, PlannerConfig,
};
use itap::prior::{DepthQuery, PriorQuery};
use itap::rqvae::{CodeStack, DecodeRequest, DecodedTail};
use itap::trajectory::ContextEntry;
use itap::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic stand-in for the trained models. Logits are fixed per depth; decoded values
/// are simple functions of the codes so scores can be recomputed by hand.
struct TableModel {
    dims: ModelDims,
    logits: Vec<Vec<f64>>,
}

impl TableModel {
    fn uniform(codebook_size: usize, depth: usize) -> Self {
        TableModel {
            dims: ModelDims {
                obs_dim: 2,
                act_dim: 1,
                macro_len: 3,
                context_len: 2,
                codebook_size,
                depth,
            },
            logits: vec![vec![0.0; codebook_size]; depth],
        }
    }

    fn value(stack: &CodeStack) -> f64 {
        stack.indices().iter().enumerate().map(|(l, &k)| k as f64 / (l + 1) as f64).sum::<f64>() * 0.1
    }

    fn tail(&self, stack: &CodeStack, anchor: &[f64]) -> DecodedTail {
        let v = Self::value(stack);
        DecodedTail {
            rtg: 2.0 * v + anchor[0],
            macro_return: v,
            observation: anchor.iter().map(|a| a + v).collect(),
            macro_action: vec![vec![stack.get(0) as f64 - 1.5]; self.dims.macro_len],
        }
    }
}

impl LatentModel for TableModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn encode_history(&self, history: &[ContextEntry]) -> Result<Vec<CodeStack>> {
        Ok(history.iter().map(|_| CodeStack::new(vec![0; self.dims.depth])).collect())
    }

    fn prior_context(&self, queries: &[PriorQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        Ok(queries
            .iter()
            .map(|q| vec![q.observation[0], q.context.len() as f64])
            .collect())
    }

    fn depth_logits(&self, queries: &[DepthQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        Ok(queries.iter().map(|q| self.logits[q.prefix.len()].clone()).collect())
    }

    fn decode(&self, requests: &[DecodeRequest<'_>]) -> Result<Vec<(DecodedTail, Option<DecodedTail>)>> {
        Ok(requests
            .iter()
            .map(|r| {
                let current = self.tail(r.current, r.anchor_obs);
                let next = r.next.map(|n| self.tail(n, &current.observation));
                (current, next)
            })
            .collect())
    }
}

fn small_config(horizon: usize) -> PlannerConfig {
    PlannerConfig {
        coarse_samples: 4,
        completions: 2,
        lookahead: 3,
        proposals: 4,
        horizon,
        iterations: 30,
        ..PlannerConfig::default()
    }
}

#[test]
fn root_edge_count_and_single_level() {
    let model = TableModel::uniform(64, 2);
    let cfg = PlannerConfig {
        temperatures: vec![1.0],
        truncations: vec![64],
        ..small_config(1)
    };
    let tree = build_latent_tree(&model, &[0.1, -0.2], &[], &cfg, 3).unwrap();
    assert_eq!(tree.root().edges.len(), 4);
    assert_eq!(tree.max_depth(), 1);
    assert!(tree.nodes()[1..].iter().all(|n| n.edges.is_empty() && n.depth == 1));
}

#[test]
fn duplicates_merge_into_one_edge() {
    let mut model = TableModel::uniform(4, 2);
    model.logits = vec![vec![9.0, 0.0, 0.0, 0.0], vec![0.0, 9.0, 0.0, 0.0]];
    let cfg = PlannerConfig {
        truncations: vec![1],
        ..small_config(1)
    };
    let tree = build_latent_tree(&model, &[0.0, 0.0], &[], &cfg, 0).unwrap();
    let root = tree.root();
    assert_eq!(root.edges.len(), 1);
    assert_eq!(root.edges[0].stack, CodeStack::new(vec![0, 1]));
    assert_eq!(root.edges[0].outcomes.len(), 8 * 3);
}

#[test]
fn scores_and_children_follow_cached_outcomes() {
    let model = TableModel::uniform(8, 2);
    let tree = build_latent_tree(&model, &[0.3, 0.0], &[], &small_config(2), 11).unwrap();
    for node in tree.nodes() {
        for edge in &node.edges {
            assert_eq!(edge.outcomes.len() % 3, 0);
            let mean: f64 = edge.outcomes.iter().map(|o| o.tail.rtg).sum::<f64>() / edge.outcomes.len() as f64;
            assert!((edge.score - (edge.macro_return + mean)).abs() < 1e-12);
            assert!((edge.macro_return - TableModel::value(&edge.stack)).abs() < 1e-12);
            assert_eq!(edge.children.len(), 1);
            let child = tree.node(edge.children[0]);
            for (d, &o) in child.observation.iter().enumerate() {
                let m = edge.outcomes.iter().map(|x| x.tail.observation[d]).sum::<f64>() / edge.outcomes.len() as f64;
                assert!((o - m).abs() < 1e-12);
            }
            assert_eq!(child.context.last(), Some(&edge.stack));
            assert!(child.context.len() <= 2);
        }
        // Kept edges are ordered best first.
        assert!(node.edges.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn tree_shape_bounds() {
    let model = TableModel::uniform(8, 3);
    let cfg = PlannerConfig {
        horizon: 3,
        ..PlannerConfig::default()
    };
    let tree = build_latent_tree(&model, &[0.0, 1.0], &[], &cfg, 5).unwrap();
    assert!(tree.root().edges.len() <= 16);
    assert!(tree.max_depth() <= 3);
    let mut reached = vec![false; tree.len()];
    reached[0] = true;
    for (id, node) in tree.nodes().iter().enumerate() {
        if id > 0 && node.depth < 3 {
            assert!(node.edges.len() <= 2 && !node.edges.is_empty());
        }
        for e in &node.edges {
            for &c in &e.children {
                assert_eq!(tree.node(c).depth, node.depth + 1);
                reached[c] = true;
            }
        }
    }
    assert!(reached.iter().all(|&r| r));
}

#[test]
fn per_sample_children_variant() {
    let model = TableModel::uniform(8, 2);
    let cfg = PlannerConfig {
        per_sample_children: true,
        ..small_config(2)
    };
    let tree = build_latent_tree(&model, &[0.0, 0.0], &[], &cfg, 2).unwrap();
    for e in &tree.root().edges {
        assert_eq!(e.children.len(), e.outcomes.len());
        for (c, o) in e.children.iter().zip(&e.outcomes) {
            assert_eq!(tree.node(*c).observation, o.tail.observation);
        }
    }
}

#[test]
fn planning_is_deterministic() {
    let model = TableModel::uniform(8, 2);
    let cfg = small_config(2);
    let history = vec![ContextEntry {
        macro_return: 0.5,
        observation: vec![0.0, 0.0],
        macro_action: vec![vec![0.1]; 3],
        stack: None,
    }];
    let a = plan_step(&model, &[0.2, 0.1], &history, &cfg, 42).unwrap();
    let b = plan_step(&model, &[0.2, 0.1], &history, &cfg, 42).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.macro_action, b.macro_action);
    assert_eq!(a.tree, b.tree);
    let c = plan_step(&model, &[0.2, 0.1], &history, &cfg, 43).unwrap();
    assert_ne!(a.tree, c.tree);
}

#[test]
fn zero_horizon_takes_most_probable_candidate() {
    let mut model = TableModel::uniform(4, 2);
    model.logits = vec![vec![0.0, 0.0, 0.0, 3.0], vec![0.0, 2.0, 0.0, 0.0]];
    let cfg = small_config(0);
    let out = plan_step(&model, &[0.0, 0.0], &[], &cfg, 1).unwrap();
    assert!(out.tree.is_none());
    assert_eq!(out.stack, CodeStack::new(vec![3, 1]));
    assert_eq!(out.macro_action, vec![vec![1.0]; 3]);
}

#[test]
fn selected_macro_has_shape_and_bounds() {
    let model = TableModel::uniform(8, 2);
    let out = plan_step(&model, &[0.0, 0.0], &[], &small_config(2), 9).unwrap();
    assert_eq!(out.macro_action.len(), 3);
    assert!(out.macro_action.iter().all(|a| a.len() == 1 && a[0].abs() <= 1.0));
    let tree = out.tree.unwrap();
    assert_eq!(tree.root().visit_count, 30);
}

#[test]
fn dimension_errors() {
    let model = TableModel::uniform(8, 2);
    let cfg = small_config(1);
    assert!(plan_step(&model, &[0.0], &[], &cfg, 0).is_err());
    let entry = ContextEntry {
        macro_return: 0.0,
        observation: vec![0.0, 0.0],
        macro_action: vec![vec![0.0]; 3],
        stack: None,
    };
    assert!(plan_step(&model, &[0.0, 0.0], &vec![entry.clone(); 3], &cfg, 0).is_err());
    let mut bad = entry;
    bad.macro_action.pop();
    assert!(plan_step(&model, &[0.0, 0.0], &[bad], &cfg, 0).is_err());
}

#[test]
fn agent_replans_at_macro_boundaries() {
    let model = TableModel::uniform(8, 2);
    for (mode, expected) in [(ExecutionMode::FullMacro, 3), (ExecutionMode::FirstAction, 9)] {
        let mut agent = Agent::new(&model, small_config(1), mode, 7).unwrap();
        let mut obs = vec![0.0, 0.0];
        for t in 0..9 {
            let a = agent.act(&obs).unwrap();
            assert_eq!(a.len(), 1);
            agent.observe(&obs, &a, -0.1);
            obs[0] += 0.1 * t as f64;
        }
        assert_eq!(agent.decisions(), expected);
        let history = agent.history().unwrap();
        assert_eq!(history.len(), 2);
        let g = -0.1 * (1.0 + 0.99 + 0.99 * 0.99);
        assert!((history[1].macro_return - g).abs() < 1e-12);
    }
}

// Hand-built trees.

fn tail(rtg: f64) -> DecodedTail {
    DecodedTail {
        rtg,
        macro_return: 0.0,
        observation: vec![0.0],
        macro_action: vec![vec![0.0]],
    }
}

fn outcomes(rtgs: &[f64]) -> Vec<OutcomeSample> {
    rtgs.iter()
        .map(|&r| OutcomeSample {
            next_stack: CodeStack::new(vec![0]),
            tail: tail(r),
        })
        .collect()
}

fn leaf(depth: usize) -> DecisionNode {
    DecisionNode::new(vec![0.0], vec![], depth, vec![])
}

#[test]
fn two_edge_backup_example() {
    let cfg = PlannerConfig {
        gamma: 0.99,
        ..PlannerConfig::default()
    };
    let mut tree = LatentSearchTree::new(leaf(0), cfg, 3, 0).unwrap();
    tree.add_edge(0, ActionEdge::new(CodeStack::new(vec![0]), 0.0, 0.5, outcomes(&[0.0])))
        .unwrap();
    let child = tree.add_child(0, 0, leaf(1)).unwrap();
    tree.add_edge(child, ActionEdge::new(CodeStack::new(vec![1]), 0.0, 1.0, outcomes(&[2.0])))
        .unwrap();
    tree.backup(&[(0, 0), (child, 0)], 2.0).unwrap();
    let discount = 0.99f64.powi(3);
    assert!((discount - 0.970299).abs() < 1e-12);
    let leaf_edge = tree.node(child).edges[0].q_value;
    assert!((leaf_edge - 2.940598).abs() < 1e-9);
    assert!((tree.root().edges[0].q_value - (0.5 + discount * 2.940598)).abs() < 1e-9);
    assert_eq!((tree.root().visit_count, tree.node(child).visit_count), (1, 1));
}

/// Hand-built tree description: per node, edges of (prior logit, macro return, outcome rtgs,
/// child node index per outcome or a single shared child).
#[derive(Debug, Clone)]
struct TreeLayout {
    nodes: Vec<Vec<EdgeSpec>>,
}

#[derive(Debug, Clone)]
struct EdgeSpec {
    logit: f64,
    macro_return: f64,
    rtgs: Vec<f64>,
    children: Vec<usize>,
}

impl TreeLayout {
    /// Node `i` of the layout becomes node `i` of the tree; children must come after parents.
    fn build(&self, cfg: PlannerConfig) -> LatentSearchTree {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, edges) in self.nodes.iter().enumerate() {
            for e in edges {
                for &c in &e.children {
                    depth[c] = depth[i] + 1;
                }
            }
        }
        let mut tree = LatentSearchTree::new(leaf(0), cfg, 3, 0).unwrap();
        let mut pending: Vec<(usize, usize, usize)> = Vec::new();
        for (i, edges) in self.nodes.iter().enumerate() {
            for (j, e) in edges.iter().enumerate() {
                let edge = ActionEdge::new(CodeStack::new(vec![j]), e.logit, e.macro_return, outcomes(&e.rtgs));
                tree.add_edge(i, edge).unwrap();
                for &c in &e.children {
                    pending.push((i, j, c));
                }
            }
            // Attach children in id order so tree ids equal spec ids.
            while let Some(pos) = pending.iter().position(|&(_, _, c)| c == tree.len()) {
                let (p, j, c) = pending.remove(pos);
                tree.add_child(p, j, leaf(depth[c])).unwrap();
            }
        }
        assert!(pending.is_empty());
        tree
    }
}

/// Random tree of depth `horizon`; every outcome of an edge shares one rtg so the backed-up
/// value of a path is a function of the path alone.
fn random_spec(rng: &mut ChaCha8Rng, horizon: usize, per_sample: bool) -> TreeLayout {
    let mut nodes: Vec<Vec<EdgeSpec>> = vec![Vec::new()];
    let mut frontier = vec![(0usize, 0usize)];
    while let Some((id, depth)) = frontier.pop() {
        if depth == horizon {
            continue;
        }
        let n_edges = rng.gen_range(1..=4);
        for _ in 0..n_edges {
            let n_out = rng.gen_range(1..=3);
            let rtg = rng.gen_range(-2.0..2.0);
            let n_children = if per_sample { n_out } else { 1 };
            let mut children = Vec::new();
            for _ in 0..n_children {
                nodes.push(Vec::new());
                children.push(nodes.len() - 1);
                frontier.push((nodes.len() - 1, depth + 1));
            }
            nodes[id].push(EdgeSpec {
                logit: rng.gen_range(-2.0..2.0),
                macro_return: rng.gen_range(-1.0..1.0),
                rtgs: vec![rtg; n_out],
                children,
            });
        }
    }
    TreeLayout { nodes }
}

fn check_invariants(seed: u64, horizon: usize, per_sample: bool, iterations: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, horizon, per_sample);
    let cfg = PlannerConfig {
        horizon,
        per_sample_children: per_sample,
        ..PlannerConfig::default()
    };
    let mut tree = spec.build(cfg);
    let discount = tree.macro_discount();
    let mut history: Vec<Vec<Vec<f64>>> = spec.nodes.iter().map(|e| vec![Vec::new(); e.len()]).collect();
    for _ in 0..iterations {
        let path = tree.simulate_once(&mut rng).unwrap();
        assert!(path.len() <= horizon);
        let (ln, le) = *path.last().unwrap();
        let mut v = spec.nodes[ln][le].rtgs[0];
        for &(n, e) in path.iter().rev() {
            v = spec.nodes[n][e].macro_return + discount * v;
            history[n][e].push(v);
        }
        // Shifting every logit at a node leaves the selection unchanged.
        for (n, _) in &path {
            let before = tree.puct_select(*n).unwrap();
            let mut shifted = tree.clone();
            for e in &mut shifted.node_mut(*n).edges {
                e.prior_logit += 7.5;
            }
            assert_eq!(shifted.puct_select(*n).unwrap(), before);
        }
    }
    assert_eq!(tree.root().visit_count as usize, iterations);
    for (id, node) in tree.nodes().iter().enumerate() {
        assert!(node.depth <= horizon);
        if !node.edges.is_empty() {
            assert_eq!(node.visit_count, node.edges.iter().map(|e| e.visit_count).sum::<u64>());
        }
        for (j, e) in node.edges.iter().enumerate() {
            let vals = &history[id][j];
            assert_eq!(e.visit_count as usize, vals.len());
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((e.q_value - mean).abs() <= 1e-9 * mean.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn search_invariants_hold(seed in any::<u64>(), horizon in 1usize..4, per_sample in any::<bool>(), iterations in 1usize..120) {
        check_invariants(seed, horizon, per_sample, iterations);
    }
}

#[test]
fn single_iteration_visits_one_root_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = random_spec(&mut rng, 2, false);
    let mut tree = spec.build(PlannerConfig::default());
    tree.simulate_once(&mut rng).unwrap();
    let visited: Vec<u64> = tree.root().edges.iter().map(|e| e.visit_count).collect();
    assert_eq!(visited.iter().sum::<u64>(), 1);
}

/// Independent replay of the search on a spec: same selection formula, same random draws.
fn scripted_root_q(spec: &TreeLayout, cfg: &PlannerConfig, seed: u64, iterations: usize) -> Vec<f64> {
    let mut n_node = vec![0u64; spec.nodes.len()];
    let mut n_edge: Vec<Vec<u64>> = spec.nodes.iter().map(|e| vec![0; e.len()]).collect();
    let mut q: Vec<Vec<f64>> = spec.nodes.iter().map(|e| vec![0.0; e.len()]).collect();
    let discount = cfg.gamma.powi(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iterations {
        let mut node = 0;
        let mut path = Vec::new();
        let leaf_value = loop {
            let edges = &spec.nodes[node];
            let t = cfg.prior_temperature;
            let m = edges.iter().map(|e| e.logit / t).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = edges.iter().map(|e| (e.logit / t - m).exp()).sum();
            let pi: Vec<f64> = edges.iter().map(|e| (e.logit / t - m).exp() / z).collect();
            let big_n = n_node[node] as f64;
            let mut best = 0;
            let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..edges.len() {
                let u = (cfg.c1 + ((big_n + cfg.c2 + 1.0) / cfg.c2).ln()) * big_n.sqrt() / (1.0 + n_edge[node][j] as f64)
                    * pi[j];
                let key = (q[node][j] + u, pi[j]);
                if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
                    best = j;
                    best_key = key;
                }
            }
            path.push((node, best));
            let e = &edges[best];
            let o = rng.gen_range(0..e.rtgs.len());
            let child = match e.children.len() {
                0 => None,
                1 => Some(e.children[0]),
                _ => Some(e.children[o]),
            };
            match child {
                Some(c) if n_edge[node][best] > 0 && !spec.nodes[c].is_empty() => node = c,
                _ => break e.rtgs[o],
            }
        };
        let mut v = leaf_value;
        for &(n, j) in path.iter().rev() {
            v = spec.nodes[n][j].macro_return + discount * v;
            n_edge[n][j] += 1;
            n_node[n] += 1;
            q[n][j] += (v - q[n][j]) / n_edge[n][j] as f64;
        }
    }
    q[0].clone()
}

#[test]
fn search_matches_scripted_trace() {
    let spec = TreeLayout {
        nodes: vec![
            vec![
                EdgeSpec {
                    logit: 0.2,
                    macro_return: 0.3,
                    rtgs: vec![1.0, 0.0],
                    children: vec![1],
                },
                EdgeSpec {
                    logit: -0.1,
                    macro_return: 0.1,
                    rtgs: vec![0.5, 1.5],
                    children: vec![2],
                },
            ],
            vec![
                EdgeSpec {
                    logit: 0.0,
                    macro_return: 1.0,
                    rtgs: vec![0.2, 0.4],
                    children: vec![],
                },
                EdgeSpec {
                    logit: 0.5,
                    macro_return: -0.5,
                    rtgs: vec![2.0, 1.0],
                    children: vec![],
                },
            ],
            vec![EdgeSpec {
                logit: 0.0,
                macro_return: 0.0,
                rtgs: vec![3.0, -1.0],
                children: vec![],
            }],
        ],
    };
    let cfg = PlannerConfig {
        horizon: 2,
        ..PlannerConfig::default()
    };
    let mut tree = spec.build(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    tree.run_search(60, &mut rng).unwrap();
    let expected = scripted_root_q(&spec, &cfg, 77, 60);
    for (e, q) in tree.root().edges.iter().zip(expected) {
        assert!((e.q_value - q).abs() < 1e-12, "{} vs {q}", e.q_value);
    }
}

#[test]
fn visits_concentrate_on_best_edge() {
    let rtgs = [0.2, 1.0, 0.5, -0.3];
    let spec = TreeLayout {
        nodes: vec![rtgs
            .iter()
            .map(|&r| EdgeSpec {
                logit: 0.0,
                macro_return: 0.0,
                rtgs: vec![r],
                children: vec![],
            })
            .collect()],
    };
    let mut tree = spec.build(PlannerConfig {
        horizon: 1,
        ..PlannerConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    tree.run_search(1000, &mut rng).unwrap();
    let best = tree.root().edges[1].visit_count;
    assert!(best > 500, "best edge visits {best}");
}

#[test]
fn search_tree_uses_configured_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = random_spec(&mut rng, 2, false);
    let mut tree = spec.build(PlannerConfig {
        iterations: 37,
        ..PlannerConfig::default()
    });
    search_tree(&mut tree, 1).unwrap();
    assert_eq!(tree.root().visit_count, 37);
}

fn expectimax_edge_values(spec: &TreeLayout, node: usize, discount: f64) -> Vec<f64> {
    spec.nodes[node]
        .iter()
        .map(|e| {
            let tail: f64 = (0..e.rtgs.len())
                .map(|o| {
                    let child = match e.children.len() {
                        0 => None,
                        1 => Some(e.children[0]),
                        _ => Some(e.children[o]),
                    };
                    match child {
                        Some(c) if !spec.nodes[c].is_empty() => expectimax_edge_values(spec, c, discount)
                            .into_iter()
                            .fold(f64::NEG_INFINITY, f64::max),
                        _ => e.rtgs[o],
                    }
                })
                .sum::<f64>()
                / e.rtgs.len() as f64;
            e.macro_return + discount * tail
        })
        .collect()
}

fn edge(logit: f64, macro_return: f64, rtgs: Vec<f64>, children: Vec<usize>) -> EdgeSpec {
    EdgeSpec {
        logit,
        macro_return,
        rtgs,
        children,
    }
}

/// Two-state chance tree: the greedy first macro leads to the poor state, the patient one to
/// the rich state, and a gamble splits between them.
fn two_state_spec(logits: [f64; 3]) -> TreeLayout {
    let good = vec![edge(0.0, 2.0, vec![0.0], vec![]), edge(0.0, 0.5, vec![0.0], vec![])];
    let bad = vec![edge(0.0, 0.0, vec![0.0], vec![]), edge(0.0, 0.2, vec![0.0], vec![])];
    TreeLayout {
        nodes: vec![
            vec![
                edge(logits[0], 1.0, vec![1.0, 1.0], vec![1, 2]),
                edge(logits[1], 0.0, vec![1.0, 1.0], vec![3, 4]),
                edge(logits[2], 0.5, vec![1.0, 1.0], vec![5, 6]),
            ],
            bad.clone(),
            bad.clone(),
            good.clone(),
            good.clone(),
            good,
            bad,
        ],
    }
}

#[test]
fn search_agrees_with_expectimax() {
    let cfg = PlannerConfig {
        horizon: 2,
        iterations: 200,
        per_sample_children: true,
        ..PlannerConfig::default()
    };
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let spec = two_state_spec(logits);
        let values = expectimax_edge_values(&spec, 0, cfg.gamma.powi(3));
        let best = (0..values.len()).fold(0, |b, i| if values[i] > values[b] { i } else { b });
        assert_eq!(best, 1);
        let mut tree = spec.build(cfg.clone());
        if search_tree(&mut tree, seed).unwrap() == best {
            hits += 1;
        }
    }
    assert!(hits >= 90, "{hits}/100");
}
