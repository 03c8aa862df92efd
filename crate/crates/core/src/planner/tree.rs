use std::fmt::Write as _;

use rand::Rng;

use super::PlannerConfig;
use crate::diffmath::softmax_with_temperature;
use crate::error::{ItapError, Result};
use crate::rqvae::{CodeStack, DecodedTail};

pub type NodeId = usize;

/// One cached chance outcome of an edge: a successor stack drawn from the prior and the
/// tail decoded for it.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSample {
    pub next_stack: CodeStack,
    pub tail: DecodedTail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEdge {
    pub stack: CodeStack,
    /// `Σ_ℓ log p(k_ℓ | ·)` of the stack under the prior at unit temperature.
    pub prior_logit: f64,
    pub visit_count: u64,
    pub q_value: f64,
    /// Decoded short-horizon return of the edge's own macro step.
    pub macro_return: f64,
    /// Construction-time lookahead score.
    pub score: f64,
    /// Decoded macro-action for the edge, conditioned on the parent node.
    pub macro_action: Vec<Vec<f64>>,
    pub outcomes: Vec<OutcomeSample>,
    /// One averaged child, or one child per outcome; empty at the depth limit.
    pub children: Vec<NodeId>,
}

impl ActionEdge {
    pub fn new(stack: CodeStack, prior_logit: f64, macro_return: f64, outcomes: Vec<OutcomeSample>) -> Self {
        ActionEdge {
            stack,
            prior_logit,
            visit_count: 0,
            q_value: 0.0,
            macro_return,
            score: 0.0,
            macro_action: Vec::new(),
            outcomes,
            children: Vec::new(),
        }
    }

    /// Child reached through outcome `outcome`.
    pub fn child(&self, outcome: usize) -> Option<NodeId> {
        match self.children.len() {
            0 => None,
            1 => Some(self.children[0]),
            _ => self.children.get(outcome).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionNode {
    pub observation: Vec<f64>,
    pub context: Vec<CodeStack>,
    pub visit_count: u64,
    pub edges: Vec<ActionEdge>,
    pub depth: usize,
    /// Edge (and outcome) indices from the root; keys the node's random streams.
    pub path: Vec<u32>,
}

impl DecisionNode {
    pub fn new(observation: Vec<f64>, context: Vec<CodeStack>, depth: usize, path: Vec<u32>) -> Self {
        DecisionNode {
            observation,
            context,
            visit_count: 0,
            edges: Vec::new(),
            depth,
            path,
        }
    }
}

/// Arena of decision nodes; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSearchTree {
    nodes: Vec<DecisionNode>,
    config: PlannerConfig,
    macro_len: usize,
    seed: u64,
}

impl LatentSearchTree {
    pub fn new(root: DecisionNode, config: PlannerConfig, macro_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if macro_len == 0 {
            return Err(ItapError::invalid("macro_len must be at least 1"));
        }
        Ok(LatentSearchTree {
            nodes: vec![root],
            config,
            macro_len,
            seed,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn macro_len(&self) -> usize {
        self.macro_len
    }

    /// Discount applied across one macro step, `γ^L`.
    pub fn macro_discount(&self) -> f64 {
        self.config.gamma.powi(self.macro_len as i32)
    }

    pub fn root(&self) -> &DecisionNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &DecisionNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut DecisionNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[DecisionNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append `edge` to `parent`; returns the edge index.
    pub fn add_edge(&mut self, parent: NodeId, edge: ActionEdge) -> Result<usize> {
        let size = self.nodes.len();
        let node = self
            .nodes
            .get_mut(parent)
            .ok_or(ItapError::IndexOutOfRange { index: parent, size })?;
        node.edges.push(edge);
        Ok(node.edges.len() - 1)
    }

    /// Attach a new child node under `(parent, edge)`; returns its id.
    pub fn add_child(&mut self, parent: NodeId, edge: usize, child: DecisionNode) -> Result<NodeId> {
        let id = self.nodes.len();
        let node = self.nodes.get_mut(parent).ok_or(ItapError::IndexOutOfRange {
            index: parent,
            size: id,
        })?;
        let len = node.edges.len();
        let e = node
            .edges
            .get_mut(edge)
            .ok_or(ItapError::IndexOutOfRange { index: edge, size: len })?;
        e.children.push(id);
        self.nodes.push(child);
        Ok(id)
    }

    /// Deepest node depth present in the tree.
    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Selection prior of each edge at `node`: tempered softmax over the top-`K_top` edge
    /// logits, zero outside them.
    pub fn edge_priors(&self, node: NodeId) -> Result<Vec<f64>> {
        let edges = &self.nodes[node].edges;
        if edges.is_empty() {
            return Err(ItapError::invalid("node has no edges"));
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by(|&a, &b| edges[b].prior_logit.total_cmp(&edges[a].prior_logit).then(a.cmp(&b)));
        let keep = self.config.top_k.unwrap_or(edges.len()).min(edges.len());
        let kept: Vec<f64> = order[..keep].iter().map(|&i| edges[i].prior_logit).collect();
        let probs = softmax_with_temperature(&kept, self.config.prior_temperature)?;
        let mut pi = vec![0.0; edges.len()];
        for (&i, p) in order[..keep].iter().zip(probs) {
            pi[i] = p;
        }
        Ok(pi)
    }

    /// P-UCT scores of every edge at `node`.
    pub fn puct_scores(&self, node: NodeId) -> Result<Vec<f64>> {
        let pi = self.edge_priors(node)?;
        let n = &self.nodes[node];
        let parent = n.visit_count as f64;
        let weight = self.config.c1 + ((parent + self.config.c2 + 1.0) / self.config.c2).ln();
        Ok(n
            .edges
            .iter()
            .zip(&pi)
            .map(|(e, p)| e.q_value + weight * parent.sqrt() / (1.0 + e.visit_count as f64) * p)
            .collect())
    }

    /// Edge index maximizing the P-UCT score; ties go to the larger prior, then the lower index.
    pub fn puct_select(&self, node: NodeId) -> Result<usize> {
        let scores = self.puct_scores(node)?;
        let pi = self.edge_priors(node)?;
        let mut best = 0;
        for i in 1..scores.len() {
            let better = scores[i] > scores[best] || (scores[i] == scores[best] && pi[i] > pi[best]);
            if better {
                best = i;
            }
        }
        Ok(best)
    }

    /// Propagate `leaf_value` up `path` (root first). Each edge receives its own decoded
    /// macro return plus the discounted value of everything below it.
    pub fn backup(&mut self, path: &[(NodeId, usize)], leaf_value: f64) -> Result<()> {
        if path.is_empty() {
            return Err(ItapError::invalid("empty backup path"));
        }
        let discount = self.macro_discount();
        let mut value = leaf_value;
        for &(node, edge) in path.iter().rev() {
            let n = self.nodes.get_mut(node).ok_or(ItapError::IndexOutOfRange {
                index: node,
                size: 0,
            })?;
            let len = n.edges.len();
            let e = n
                .edges
                .get_mut(edge)
                .ok_or(ItapError::IndexOutOfRange { index: edge, size: len })?;
            value = e.macro_return + discount * value;
            e.visit_count += 1;
            e.q_value += (value - e.q_value) / e.visit_count as f64;
            n.visit_count += 1;
        }
        Ok(())
    }

    /// One simulation: descend by P-UCT, resample a cached outcome at each edge, stop at a
    /// fresh edge or the depth limit, and back up the decoded return-to-go of the reached tail.
    /// Returns the visited path.
    pub fn simulate_once<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<(NodeId, usize)>> {
        let mut path = Vec::new();
        let mut node = 0;
        let leaf_value = loop {
            let edge = self.puct_select(node)?;
            path.push((node, edge));
            let e = &self.nodes[node].edges[edge];
            if e.outcomes.is_empty() {
                return Err(ItapError::invalid("edge has no cached outcomes"));
            }
            let outcome = rng.gen_range(0..e.outcomes.len());
            let value = e.outcomes[outcome].tail.rtg;
            let fresh = e.visit_count == 0;
            match e.child(outcome) {
                Some(child) if !fresh && !self.nodes[child].edges.is_empty() => node = child,
                _ => break value,
            }
        };
        self.backup(&path, leaf_value)?;
        Ok(path)
    }

    pub fn run_search<R: Rng + ?Sized>(&mut self, iterations: usize, rng: &mut R) -> Result<()> {
        for _ in 0..iterations {
            self.simulate_once(rng)?;
        }
        Ok(())
    }

    /// Root edge with the most visits; ties go to the higher Q, then the lower index.
    pub fn select_root_edge(&self) -> Result<usize> {
        let edges = &self.root().edges;
        if edges.is_empty() {
            return Err(ItapError::invalid("root has no edges"));
        }
        let mut best = 0;
        for (i, e) in edges.iter().enumerate().skip(1) {
            let b = &edges[best];
            if e.visit_count > b.visit_count || (e.visit_count == b.visit_count && e.q_value > b.q_value) {
                best = i;
            }
        }
        Ok(best)
    }

    /// Text dump of the tree, one node or edge record per line.
    pub fn export_trace(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        for (id, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "node id={id} depth={} visits={} edges={} obs=[{}]",
                n.depth,
                n.visit_count,
                n.edges.len(),
                list(&n.observation)
            );
            for (j, e) in n.edges.iter().enumerate() {
                let stack = e.stack.indices().iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
                let children = e.children.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
                let _ = writeln!(
                    out,
                    "edge node={id} index={j} stack=[{stack}] prior_logit={:.6} visits={} q={:.6} macro_return={:.6} score={:.6} outcomes={} children=[{children}]",
                    e.prior_logit,
                    e.visit_count,
                    e.q_value,
                    e.macro_return,
                    e.score,
                    e.outcomes.len()
                );
            }
        }
        out
    }
}
