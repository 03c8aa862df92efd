//! Depth-factorized autoregressive prior over code stacks.
//!
//! A causal trunk runs over macro positions, each position embedded as the sum of the
//! code embeddings of the previous step's stack. A shared depth head then produces the
//! distribution of code `ℓ` from the trunk state, a depth embedding and the partial sum of
//! the shallower codes at the same step.

mod model;

pub use model::{DepthQuery, PriorConfig, PriorModel, PriorQuery, PriorSample};

use rand::Rng;

use crate::diffmath::softmax_with_temperature;
use crate::error::{ItapError, Result};
use crate::rqvae::CodeStack;

/// Sample from `softmax(logits / temperature)` restricted to the `top_k` largest logits.
/// `top_k == 1` is the greedy argmax and ignores the temperature. Ties among equal logits
/// resolve to the lowest index.
pub fn top_k_temperature_categorical<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_k: usize,
    rng: &mut R,
) -> Result<usize> {
    let k = logits.len();
    if k == 0 {
        return Err(ItapError::invalid("empty logits"));
    }
    if top_k == 0 || top_k > k {
        return Err(ItapError::invalid(format!("top_k must be in [1, {k}], got {top_k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if top_k == 1 {
        return Ok(order[0]);
    }
    let kept = &order[..top_k];
    let kept_logits: Vec<f64> = kept.iter().map(|&i| logits[i]).collect();
    let probs = softmax_with_temperature(&kept_logits, temperature)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, &i) in probs.iter().zip(kept) {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(kept[top_k - 1])
}

/// Sampling schedule for one stack: temperature and truncation per depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSchedule {
    pub temperatures: Vec<f64>,
    pub truncations: Vec<usize>,
}

impl DepthSchedule {
    pub fn uniform(depth: usize, temperature: f64, truncation: usize) -> Self {
        DepthSchedule {
            temperatures: vec![temperature; depth],
            truncations: vec![truncation; depth],
        }
    }

    pub fn greedy(depth: usize) -> Self {
        DepthSchedule::uniform(depth, 1.0, 1)
    }
}

/// Draw a full stack depth by depth, each code conditioned on the shallower draws.
pub fn sample_stack<R: Rng + ?Sized>(
    model: &PriorModel,
    context: &[f64],
    schedule: &DepthSchedule,
    rng: &mut R,
) -> Result<CodeStack> {
    let depth = model.config().depth;
    if schedule.temperatures.len() != depth || schedule.truncations.len() != depth {
        return Err(ItapError::LengthMismatch {
            expected: depth,
            actual: schedule.temperatures.len().min(schedule.truncations.len()),
        });
    }
    let mut prefix = Vec::with_capacity(depth);
    for l in 0..depth {
        let logits = model.depth_logits(context, &prefix)?;
        let k = top_k_temperature_categorical(
            &logits,
            schedule.temperatures[l],
            schedule.truncations[l],
            rng,
        )?;
        prefix.push(k);
    }
    Ok(CodeStack::new(prefix))
}

/// `Σ_ℓ log p(k_ℓ | h, k_<ℓ)` at unit temperature.
pub fn stack_log_prob(model: &PriorModel, context: &[f64], stack: &CodeStack) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..stack.depth() {
        let logits = model.depth_logits(context, stack.prefix(l))?;
        let probs = softmax_with_temperature(&logits, 1.0)?;
        total += probs[stack.get(l)].ln();
    }
    Ok(total)
}
