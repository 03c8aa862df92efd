//! Small layer library on top of the tape: affine maps, layer norm and a pre-norm causal
//! transformer.

use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{AttnShape, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.add_constant(format!("{name}.bias"), &[out_dim], 0.0));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add_constant(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_constant(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln_ffn: LayerNorm,
    up: Linear,
    down: Linear,
}

/// Stack of pre-norm causal self-attention blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        config: TransformerConfig,
        rng: &mut R,
    ) -> Self {
        let w = config.width;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), w),
                    qkv: Linear::new(store, &format!("{p}.qkv"), w, 3 * w, true, rng),
                    proj: Linear::new(store, &format!("{p}.proj"), w, w, true, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), w),
                    up: Linear::new(store, &format!("{p}.up"), w, config.ffn, true, rng),
                    down: Linear::new(store, &format!("{p}.down"), config.ffn, w, true, rng),
                }
            })
            .collect();
        Transformer {
            config,
            blocks,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), w),
        }
    }

    pub fn config(&self) -> TransformerConfig {
        self.config
    }

    /// `x` is `[batch * seq, width]`. `valid` marks real (non-padding) rows; padding rows
    /// are never attended to by other positions.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        batch: usize,
        seq: usize,
        valid: Option<Vec<bool>>,
    ) -> Result<Var> {
        let w = self.config.width;
        let mut shape = AttnShape::new(batch, seq, self.config.heads);
        if let Some(v) = valid {
            shape = shape.with_valid(v);
        }
        let mut h = x;
        for block in &self.blocks {
            let n = block.ln_attn.forward(tape, h)?;
            let qkv = block.qkv.forward(tape, n)?;
            let q = tape.slice_cols(qkv, 0, w)?;
            let k = tape.slice_cols(qkv, w, w)?;
            let v = tape.slice_cols(qkv, 2 * w, w)?;
            let a = tape.causal_attention(q, k, v, shape.clone())?;
            let a = block.proj.forward(tape, a)?;
            h = tape.add(h, a)?;

            let n = block.ln_ffn.forward(tape, h)?;
            let u = block.up.forward(tape, n)?;
            let u = tape.gelu(u);
            let d = block.down.forward(tape, u)?;
            h = tape.add(h, d)?;
        }
        self.ln_final.forward(tape, h)
    }
}

/// Two-hidden-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }
}
