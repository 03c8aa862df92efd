//! Trajectory records, macro-step segmentation, token masking and context windows.
//!
//! An [`Episode`] holds primitive `(o_t, a_t, r_t)` steps. [`segment_episode`] cuts it at
//! macro boundaries `t = bL` into [`MacroToken`]s `(G_t, G^(L)_t, o_t, m_t)`, which are the
//! unit the tokenizer encodes. Training draws contiguous [`Chunk`]s of `c + 2` tokens: `c`
//! context tokens followed by the current and next macro step.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{ItapError, Result};
use crate::rqvae::CodeStack;

/// One offline episode of primitive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Perturbation level the episode was generated under. Diagnostics only.
    pub regime_label: f64,
}

impl Episode {
    pub fn new(
        observations: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        regime_label: f64,
    ) -> Result<Self> {
        let episode = Episode {
            observations,
            actions,
            rewards,
            regime_label,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        for len in [self.observations.len(), self.actions.len()] {
            if len != t {
                return Err(ItapError::LengthMismatch {
                    expected: t,
                    actual: len,
                });
            }
        }
        let finite = self
            .observations
            .iter()
            .chain(self.actions.iter())
            .flatten()
            .chain(self.rewards.iter())
            .all(|v| v.is_finite());
        if !finite || !self.regime_label.is_finite() {
            return Err(ItapError::invalid("episode contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Which fields of a token were hidden from the encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskFlags {
    pub rtg: bool,
    pub macro_return: bool,
    pub observation: bool,
    pub macro_action: bool,
}

impl MaskFlags {
    pub const ALL: MaskFlags = MaskFlags {
        rtg: true,
        macro_return: true,
        observation: true,
        macro_action: true,
    };

    /// Padding tokens are the only tokens with hidden observation and action.
    pub fn is_padding(&self) -> bool {
        self.observation && self.macro_action
    }
}

/// One macro-step record `(G_t, G^(L)_t, o_t, m_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroToken {
    pub rtg: f64,
    pub macro_return: f64,
    pub observation: Vec<f64>,
    /// `L` rows of primitive actions.
    pub macro_action: Vec<Vec<f64>>,
    pub mask: MaskFlags,
}

impl MacroToken {
    pub fn padding(obs_dim: usize, macro_len: usize, act_dim: usize) -> Self {
        MacroToken {
            rtg: 0.0,
            macro_return: 0.0,
            observation: vec![0.0; obs_dim],
            macro_action: vec![vec![0.0; act_dim]; macro_len],
            mask: MaskFlags::ALL,
        }
    }

    pub fn is_padding(&self) -> bool {
        self.mask.is_padding()
    }

    pub fn macro_len(&self) -> usize {
        self.macro_action.len()
    }

    /// Flat feature row `[G, G^(L), o..., m...]`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 + self.observation.len() + self.flat_action_len());
        out.push(self.rtg);
        out.push(self.macro_return);
        out.extend_from_slice(&self.observation);
        for row in &self.macro_action {
            out.extend_from_slice(row);
        }
        out
    }

    fn flat_action_len(&self) -> usize {
        self.macro_action.iter().map(Vec::len).sum()
    }

    pub fn flat_action(&self) -> Vec<f64> {
        self.macro_action.iter().flatten().copied().collect()
    }
}

/// Return masking rule applied to encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub mask_rtg_all: bool,
    /// Hide `G^(L)` at the current and next positions.
    pub mask_macro_return_tail: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            mask_rtg_all: true,
            mask_macro_return_tail: true,
        }
    }
}

impl MaskSpec {
    pub const NONE: MaskSpec = MaskSpec {
        mask_rtg_all: false,
        mask_macro_return_tail: false,
    };
}

/// `c` context tokens followed by the current and next macro step.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub tokens: Vec<MacroToken>,
    pub context_len: usize,
    /// Number of left-padded placeholder tokens.
    pub pad_count: usize,
}

impl Chunk {
    pub fn new(tokens: Vec<MacroToken>, context_len: usize, pad_count: usize) -> Result<Self> {
        if tokens.len() != context_len + 2 {
            return Err(ItapError::LengthMismatch {
                expected: context_len + 2,
                actual: tokens.len(),
            });
        }
        if pad_count > context_len {
            return Err(ItapError::invalid(format!(
                "pad_count {pad_count} exceeds context length {context_len}"
            )));
        }
        Ok(Chunk {
            tokens,
            context_len,
            pad_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the current macro step.
    pub fn current_index(&self) -> usize {
        self.context_len
    }

    pub fn is_tail(&self, position: usize) -> bool {
        position >= self.context_len
    }

    /// Replace all but the last `keep` context tokens with padding, mimicking a
    /// cold-start window.
    pub fn truncate_context(&self, keep: usize) -> Chunk {
        let keep = keep.min(self.context_len);
        let pad_count = self.pad_count.max(self.context_len - keep);
        let template = &self.tokens[self.context_len];
        let mut tokens = self.tokens.clone();
        for token in tokens.iter_mut().take(pad_count) {
            *token = MacroToken::padding(
                template.observation.len(),
                template.macro_len(),
                template.macro_action.first().map_or(0, Vec::len),
            );
        }
        Chunk {
            tokens,
            context_len: self.context_len,
            pad_count,
        }
    }
}

/// `G_t = Σ_{i≥t} γ^{i-t} r_i`, computed by backward recursion.
pub fn compute_return_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// `G^(L) = Σ_{i<L} γ^i r_i` over exactly `macro_len` rewards.
pub fn compute_macro_return(rewards: &[f64], macro_len: usize, gamma: f64) -> Result<f64> {
    if rewards.len() != macro_len {
        return Err(ItapError::LengthMismatch {
            expected: macro_len,
            actual: rewards.len(),
        });
    }
    let mut discount = 1.0;
    let mut total = 0.0;
    for &r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total)
}

/// Cut an episode into `⌊T/L⌋` macro tokens. A trailing remainder shorter than `L` is
/// dropped, and return-to-go is computed over the retained horizon only.
pub fn segment_episode(episode: &Episode, macro_len: usize, gamma: f64) -> Result<Vec<MacroToken>> {
    if macro_len == 0 {
        return Err(ItapError::invalid("macro length must be at least 1"));
    }
    let n = episode.len() / macro_len;
    let horizon = n * macro_len;
    let rtg = compute_return_to_go(&episode.rewards[..horizon], gamma);
    (0..n)
        .map(|b| {
            let start = b * macro_len;
            let end = start + macro_len;
            Ok(MacroToken {
                rtg: rtg[start],
                macro_return: compute_macro_return(&episode.rewards[start..end], macro_len, gamma)?,
                observation: episode.observations[start].clone(),
                macro_action: episode.actions[start..end].to_vec(),
                mask: MaskFlags::default(),
            })
        })
        .collect()
}

/// Zero and flag return fields hidden from the encoder. Observations and actions are
/// never touched.
pub fn apply_token_mask(chunk: &Chunk, spec: MaskSpec) -> Chunk {
    let mut out = chunk.clone();
    let n = out.tokens.len();
    for (i, token) in out.tokens.iter_mut().enumerate() {
        if spec.mask_rtg_all {
            token.rtg = 0.0;
            token.mask.rtg = true;
        }
        if spec.mask_macro_return_tail && i + 2 >= n {
            token.macro_return = 0.0;
            token.mask.macro_return = true;
        }
    }
    out
}

/// Uniformly sample a contiguous window of `c + 2` tokens. Episodes shorter than that
/// are left-padded with flagged zero tokens.
pub fn sample_training_chunk<R: Rng + ?Sized>(
    tokens: &[MacroToken],
    context_len: usize,
    rng: &mut R,
) -> Result<Chunk> {
    if tokens.len() < 2 {
        return Err(ItapError::InsufficientData(format!(
            "need at least 2 macro tokens, episode has {}",
            tokens.len()
        )));
    }
    let window = context_len + 2;
    if tokens.len() >= window {
        let start = rng.gen_range(0..=tokens.len() - window);
        return Chunk::new(tokens[start..start + window].to_vec(), context_len, 0);
    }
    let pad_count = window - tokens.len();
    let first = &tokens[0];
    let pad = MacroToken::padding(
        first.observation.len(),
        first.macro_len(),
        first.macro_action.first().map_or(0, Vec::len),
    );
    let mut out = vec![pad; pad_count];
    out.extend_from_slice(tokens);
    Chunk::new(out, context_len, pad_count)
}

/// One executed macro step as remembered by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEntry {
    pub macro_return: f64,
    pub observation: Vec<f64>,
    pub macro_action: Vec<Vec<f64>>,
    pub stack: Option<CodeStack>,
}

impl ContextEntry {
    pub fn from_token(token: &MacroToken, stack: Option<CodeStack>) -> Self {
        ContextEntry {
            macro_return: token.macro_return,
            observation: token.observation.clone(),
            macro_action: token.macro_action.clone(),
            stack,
        }
    }

    /// Token view with the return-to-go hidden, as seen at deployment.
    pub fn to_token(&self) -> MacroToken {
        MacroToken {
            rtg: 0.0,
            macro_return: self.macro_return,
            observation: self.observation.clone(),
            macro_action: self.macro_action.clone(),
            mask: MaskFlags {
                rtg: true,
                ..MaskFlags::default()
            },
        }
    }
}

/// Bounded FIFO of the most recent macro steps, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    capacity: usize,
    entries: VecDeque<ContextEntry>,
}

impl ContextWindow {
    pub fn new(capacity: usize) -> Self {
        ContextWindow {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ContextEntry> {
        self.entries.iter()
    }

    /// Append the newest entry, evicting the oldest when full.
    pub fn slide(&mut self, entry: ContextEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Functional form of [`ContextWindow::slide`].
pub fn slide_context(mut window: ContextWindow, entry: ContextEntry) -> ContextWindow {
    window.slide(entry);
    window
}
