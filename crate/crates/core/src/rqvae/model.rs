use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{residual_quantize, stack_value, CodeStack, Codebook, QuantizationResult, Standardizer};
use crate::diffmath::nn::{Linear, Transformer, TransformerConfig};
use crate::diffmath::{AdamConfig, ParamGrads, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{ItapError, Result};
use crate::trajectory::{apply_token_mask, Chunk, ContextEntry, MacroToken, MaskSpec};

/// Loss weights: tail and context reconstruction, partial-sum commitment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_tail: f64,
    pub alpha_ctx: f64,
    pub beta_ps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_tail: 1.0,
            alpha_ctx: 0.1,
            beta_ps: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub macro_len: usize,
    pub context_len: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub weights: LossWeights,
    pub ema_decay: f64,
    pub dead_code_patience: u32,
}

impl RqVaeConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        RqVaeConfig {
            obs_dim,
            act_dim,
            macro_len: 3,
            context_len: 6,
            latent_dim: 16,
            codebook_size: 32,
            depth: 2,
            width: 64,
            heads: 4,
            layers: 2,
            ffn: 256,
            weights: LossWeights::default(),
            ema_decay: 0.99,
            dead_code_patience: 100,
        }
    }

    /// Width of a flat token row `[G, G^(L), o, m]`.
    pub fn feature_dim(&self) -> usize {
        2 + self.obs_dim + self.macro_len * self.act_dim
    }

    pub fn seq_len(&self) -> usize {
        self.context_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("obs_dim", self.obs_dim),
            ("act_dim", self.act_dim),
            ("macro_len", self.macro_len),
            ("latent_dim", self.latent_dim),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn", self.ffn),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ItapError::invalid(format!("{name} must be positive")));
        }
        if self.codebook_size < 2 {
            return Err(ItapError::invalid("codebook_size must be at least 2"));
        }
        if self.width % self.heads != 0 {
            return Err(ItapError::invalid("width must be divisible by heads"));
        }
        let w = self.weights;
        if w.alpha_tail < 0.0 || w.alpha_ctx < 0.0 || w.beta_ps < 0.0 {
            return Err(ItapError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Per-term loss values for one chunk or a batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_tail: f64,
    pub recon_ctx: f64,
    pub commit_per_depth: Vec<f64>,
}

impl LossBreakdown {
    fn combine(weights: &LossWeights, recon_tail: f64, recon_ctx: f64, commit_per_depth: Vec<f64>) -> Self {
        let depth = commit_per_depth.len().max(1) as f64;
        let total = weights.alpha_tail * recon_tail
            + weights.alpha_ctx * recon_ctx
            + weights.beta_ps / depth * commit_per_depth.iter().sum::<f64>();
        LossBreakdown {
            total,
            recon_tail,
            recon_ctx,
            commit_per_depth,
        }
    }

    fn mean(items: &[LossBreakdown], weights: &LossWeights) -> Self {
        let n = items.len().max(1) as f64;
        let depth = items.first().map_or(0, |b| b.commit_per_depth.len());
        let mut commit = vec![0.0; depth];
        for b in items {
            commit.iter_mut().zip(&b.commit_per_depth).for_each(|(a, c)| *a += c / n);
        }
        LossBreakdown::combine(
            weights,
            items.iter().map(|b| b.recon_tail).sum::<f64>() / n,
            items.iter().map(|b| b.recon_ctx).sum::<f64>() / n,
            commit,
        )
    }
}

/// Role of one chunk position in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Context,
    Tail,
    Padding,
}

impl TokenRole {
    pub fn for_chunk(chunk: &Chunk) -> Vec<TokenRole> {
        chunk
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.is_padding() {
                    TokenRole::Padding
                } else if chunk.is_tail(i) {
                    TokenRole::Tail
                } else {
                    TokenRole::Context
                }
            })
            .collect()
    }
}

/// Reconstruction plus partial-sum commitment for one chunk, evaluated on plain values.
///
/// `reconstructions` and `targets` are flat token rows, `z` the encoder features and
/// `quantized` their quantizations, all indexed by chunk position.
pub fn rqvae_loss(
    weights: &LossWeights,
    roles: &[TokenRole],
    reconstructions: &[Vec<f64>],
    targets: &[Vec<f64>],
    z: &[Vec<f64>],
    quantized: &[QuantizationResult],
) -> Result<LossBreakdown> {
    let n = roles.len();
    for len in [reconstructions.len(), targets.len(), z.len(), quantized.len()] {
        if len != n {
            return Err(ItapError::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let depth = quantized.first().map_or(0, |q| q.partial_sums.len());
    let mut tail = 0.0;
    let mut ctx = 0.0;
    let mut commit = vec![0.0; depth];
    for i in 0..n {
        if roles[i] == TokenRole::Padding {
            continue;
        }
        let err = sq_dist(&reconstructions[i], &targets[i]);
        match roles[i] {
            TokenRole::Tail => tail += err,
            _ => ctx += err,
        }
        for (l, ps) in quantized[i].partial_sums.iter().enumerate() {
            commit[l] += sq_dist(&z[i], ps);
        }
    }
    Ok(LossBreakdown::combine(weights, tail, ctx, commit))
}

/// Pass-through quantization on the tape: forward value `q`'s final partial sum, gradient
/// identity in `z`.
pub fn straight_through(tape: &mut Tape<'_>, z: Var, q: &QuantizationResult) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    let quantized = Tensor::new(shape, q.final_value().to_vec())?;
    tape.straight_through(z, quantized)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Decoded fields of one token, in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTail {
    pub rtg: f64,
    pub macro_return: f64,
    pub observation: Vec<f64>,
    pub macro_action: Vec<Vec<f64>>,
}

/// One decoder query: context stacks, the anchor observation, the current stack and an
/// optional successor stack.
#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest<'a> {
    pub context: &'a [CodeStack],
    pub anchor_obs: &'a [f64],
    pub current: &'a CodeStack,
    pub next: Option<&'a CodeStack>,
}

const FLAG_COUNT: usize = 4;

/// Row-major inputs for one batched encoder/decoder pass.
struct Prepared {
    batch: usize,
    seq: usize,
    features: Tensor,
    flags: Tensor,
    targets: Vec<Vec<f64>>,
    anchors: Tensor,
    positions: Vec<usize>,
    valid: Vec<bool>,
    roles: Vec<TokenRole>,
}

/// Residual-quantized autoencoder with causal transformer encoder and decoder.
#[derive(Debug, Clone)]
pub struct RqVaeModel {
    config: RqVaeConfig,
    params: ParameterStore,
    codebook: Codebook,
    scaler: Standardizer,
    enc_in: Linear,
    enc_flags: Linear,
    enc_pos: ParamId,
    encoder: Transformer,
    enc_out: Linear,
    dec_latent: Linear,
    dec_obs: Linear,
    dec_pos: ParamId,
    dec_pad: ParamId,
    decoder: Transformer,
    dec_out: Linear,
}

impl RqVaeModel {
    pub fn new(config: RqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let f = config.feature_dim();
        let w = config.width;
        let t = config.seq_len();
        let tcfg = TransformerConfig {
            width: w,
            heads: config.heads,
            layers: config.layers,
            ffn: config.ffn,
        };
        let enc_in = Linear::new(&mut params, "enc.in", f, w, true, &mut rng);
        let enc_flags = Linear::new(&mut params, "enc.flags", FLAG_COUNT, w, false, &mut rng);
        let enc_pos = params.add_uniform("enc.pos", &[t, w], w, &mut rng);
        let encoder = Transformer::new(&mut params, "enc.trunk", tcfg, &mut rng);
        let enc_out = Linear::new(&mut params, "enc.out", w, config.latent_dim, true, &mut rng);
        let dec_latent = Linear::new(&mut params, "dec.latent", config.latent_dim, w, true, &mut rng);
        let dec_obs = Linear::new(&mut params, "dec.obs", config.obs_dim, w, false, &mut rng);
        let dec_pos = params.add_uniform("dec.pos", &[t, w], w, &mut rng);
        let dec_pad = params.add_uniform("dec.pad", &[1, w], w, &mut rng);
        let decoder = Transformer::new(&mut params, "dec.trunk", tcfg, &mut rng);
        let dec_out = Linear::new(&mut params, "dec.out", w, f, true, &mut rng);
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, config.ema_decay)?;
        Ok(RqVaeModel {
            scaler: Standardizer::identity(f),
            config,
            params,
            codebook,
            enc_in,
            enc_flags,
            enc_pos,
            encoder,
            enc_out,
            dec_latent,
            dec_obs,
            dec_pos,
            dec_pad,
            decoder,
            dec_out,
        })
    }

    pub fn config(&self) -> &RqVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<()> {
        if codebook.size() != self.config.codebook_size || codebook.dim() != self.config.latent_dim {
            return Err(ItapError::shape(
                "set_codebook",
                format!("expected {}x{}", self.config.codebook_size, self.config.latent_dim),
            ));
        }
        self.codebook = codebook;
        Ok(())
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Standardizer) -> Result<()> {
        if scaler.width() != self.config.feature_dim() {
            return Err(ItapError::LengthMismatch {
                expected: self.config.feature_dim(),
                actual: scaler.width(),
            });
        }
        self.scaler = scaler;
        Ok(())
    }

    fn check_token(&self, token: &MacroToken) -> Result<()> {
        let c = &self.config;
        if token.observation.len() != c.obs_dim
            || token.macro_action.len() != c.macro_len
            || token.macro_action.iter().any(|r| r.len() != c.act_dim)
        {
            return Err(ItapError::shape(
                "rqvae token",
                format!(
                    "expected obs {} and {}x{} action",
                    c.obs_dim, c.macro_len, c.act_dim
                ),
            ));
        }
        Ok(())
    }

    /// Standardized feature row with masked fields zeroed, plus the flag row.
    fn token_inputs(&self, token: &MacroToken) -> (Vec<f64>, [f64; FLAG_COUNT]) {
        let mut x = self.scaler.apply(&token.features());
        let m = token.mask;
        let obs_end = 2 + self.config.obs_dim;
        if m.rtg {
            x[0] = 0.0;
        }
        if m.macro_return {
            x[1] = 0.0;
        }
        if m.observation {
            x[2..obs_end].iter_mut().for_each(|v| *v = 0.0);
        }
        if m.macro_action {
            x[obs_end..].iter_mut().for_each(|v| *v = 0.0);
        }
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        (
            x,
            [
                flag(m.rtg),
                flag(m.macro_return),
                flag(m.observation),
                flag(m.macro_action),
            ],
        )
    }

    fn prepare(&self, chunks: &[Chunk], mask: MaskSpec) -> Result<Prepared> {
        let seq = self.config.seq_len();
        let f = self.config.feature_dim();
        let obs = self.config.obs_dim;
        let rows = chunks.len() * seq;
        let mut features = Vec::with_capacity(rows * f);
        let mut flags = Vec::with_capacity(rows * FLAG_COUNT);
        let mut targets = Vec::with_capacity(rows);
        let mut anchors = Vec::with_capacity(rows * obs);
        let mut valid = Vec::with_capacity(rows);
        let mut roles = Vec::with_capacity(rows);
        for chunk in chunks {
            if chunk.len() != seq || chunk.context_len != self.config.context_len {
                return Err(ItapError::LengthMismatch {
                    expected: seq,
                    actual: chunk.len(),
                });
            }
            let masked = apply_token_mask(chunk, mask);
            let anchor = self.scaler.apply_range(&chunk.tokens[chunk.current_index()].observation, 2);
            for (token, raw) in masked.tokens.iter().zip(&chunk.tokens) {
                self.check_token(raw)?;
                let (x, fl) = self.token_inputs(token);
                features.extend_from_slice(&x);
                flags.extend_from_slice(&fl);
                targets.push(self.scaler.apply(&raw.features()));
                anchors.extend_from_slice(&anchor);
                valid.push(!raw.is_padding());
            }
            roles.extend(TokenRole::for_chunk(chunk));
        }
        Ok(Prepared {
            batch: chunks.len(),
            seq,
            features: Tensor::new(vec![rows, f], features)?,
            flags: Tensor::new(vec![rows, FLAG_COUNT], flags)?,
            targets,
            anchors: Tensor::new(vec![rows, obs], anchors)?,
            positions: (0..rows).map(|r| r % seq).collect(),
            valid,
            roles,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_graph(
        &self,
        tape: &mut Tape<'_>,
        features: Tensor,
        flags: Tensor,
        positions: &[usize],
        batch: usize,
        seq: usize,
        valid: Vec<bool>,
    ) -> Result<Var> {
        let x = tape.constant(features);
        let fl = tape.constant(flags);
        let h = self.enc_in.forward(tape, x)?;
        let hf = self.enc_flags.forward(tape, fl)?;
        let h = tape.add(h, hf)?;
        let pos_table = tape.param(self.enc_pos);
        let pos = tape.gather(pos_table, positions)?;
        let h = tape.add(h, pos)?;
        let h = self.encoder.forward(tape, h, batch, seq, Some(valid))?;
        self.enc_out.forward(tape, h)
    }

    /// `latent` must already be zero on padding rows.
    #[allow(clippy::too_many_arguments)]
    fn decoder_graph(
        &self,
        tape: &mut Tape<'_>,
        latent: Var,
        anchors: Tensor,
        positions: &[usize],
        batch: usize,
        seq: usize,
        valid: Vec<bool>,
    ) -> Result<Var> {
        let pad_col: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
        let pad_col = tape.constant(Tensor::new(vec![valid.len(), 1], pad_col)?);
        let a = tape.constant(anchors);
        let h = self.dec_latent.forward(tape, latent)?;
        let ho = self.dec_obs.forward(tape, a)?;
        let h = tape.add(h, ho)?;
        let pad_emb = tape.param(self.dec_pad);
        let pad = tape.matmul(pad_col, pad_emb)?;
        let h = tape.add(h, pad)?;
        let pos_table = tape.param(self.dec_pos);
        let pos = tape.gather(pos_table, positions)?;
        let h = tape.add(h, pos)?;
        let h = self.decoder.forward(tape, h, batch, seq, Some(valid))?;
        self.dec_out.forward(tape, h)
    }

    fn quantize_rows(&self, z: &Tensor, valid: &[bool]) -> Result<Vec<QuantizationResult>> {
        (0..z.rows())
            .map(|r| {
                if valid[r] {
                    residual_quantize(z.row(r), &self.codebook, self.config.depth)
                } else {
                    let zero = vec![0.0; self.config.latent_dim];
                    Ok(QuantizationResult {
                        stack: CodeStack::new(vec![0; self.config.depth]),
                        partial_sums: vec![zero.clone(); self.config.depth],
                        final_residual: zero,
                    })
                }
            })
            .collect()
    }

    /// Loss value and parameter gradients on a batch of unmasked chunks.
    pub fn loss_and_grads(&self, chunks: &[Chunk], mask: MaskSpec) -> Result<(LossBreakdown, ParamGrads)> {
        let (breakdown, grads, _) = self.forward_backward(chunks, mask)?;
        Ok((breakdown, grads))
    }

    #[allow(clippy::type_complexity)]
    fn forward_backward(
        &self,
        chunks: &[Chunk],
        mask: MaskSpec,
    ) -> Result<(LossBreakdown, ParamGrads, Vec<(Vec<f64>, QuantizationResult)>)> {
        if chunks.is_empty() {
            return Err(ItapError::InsufficientData("empty batch".into()));
        }
        if !self.codebook.is_initialized() {
            return Err(ItapError::invalid("codebook is not initialized"));
        }
        let p = self.prepare(chunks, mask)?;
        let rows = p.valid.len();
        let d = self.config.latent_dim;
        let mut tape = Tape::with_store(&self.params);
        let z = self.encoder_graph(
            &mut tape,
            p.features.clone(),
            p.flags.clone(),
            &p.positions,
            p.batch,
            p.seq,
            p.valid.clone(),
        )?;
        let z_val = tape.value(z).clone();
        let quantized = self.quantize_rows(&z_val, &p.valid)?;
        let mut qdata = Vec::with_capacity(rows * d);
        for q in &quantized {
            qdata.extend_from_slice(q.final_value());
        }
        let zq = tape.straight_through(z, Tensor::new(vec![rows, d], qdata)?)?;
        let keep: Vec<f64> = p
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(d))
            .collect();
        let keep = tape.constant(Tensor::new(vec![rows, d], keep)?);
        let zq = tape.mul(zq, keep)?;
        let recon = self.decoder_graph(
            &mut tape,
            zq,
            p.anchors.clone(),
            &p.positions,
            p.batch,
            p.seq,
            p.valid.clone(),
        )?;

        let b = p.batch as f64;
        let w = self.config.weights;
        let row_weights: Vec<f64> = p
            .roles
            .iter()
            .map(|r| match r {
                TokenRole::Tail => w.alpha_tail / b,
                TokenRole::Context => w.alpha_ctx / b,
                TokenRole::Padding => 0.0,
            })
            .collect();
        let target = Tensor::from_rows(&p.targets)?;
        let mut loss = tape.squared_error(recon, &target, &row_weights)?;
        let commit_w: Vec<f64> = p
            .valid
            .iter()
            .map(|&v| if v { w.beta_ps / (self.config.depth as f64 * b) } else { 0.0 })
            .collect();
        for l in 0..self.config.depth {
            let mut ps = Vec::with_capacity(rows * d);
            for q in &quantized {
                ps.extend_from_slice(&q.partial_sums[l]);
            }
            let term = tape.squared_error(z, &Tensor::new(vec![rows, d], ps)?, &commit_w)?;
            loss = tape.add(loss, term)?;
        }
        if !tape.value(loss).is_finite() {
            return Err(ItapError::Numerical("non-finite reconstruction loss".into()));
        }
        let grads = tape.backward(loss)?.into_params();

        let recon_val = tape.value(recon);
        let mut per_chunk = Vec::with_capacity(p.batch);
        for c in 0..p.batch {
            let range = c * p.seq..(c + 1) * p.seq;
            let recon_rows: Vec<Vec<f64>> = range.clone().map(|r| recon_val.row(r).to_vec()).collect();
            let z_rows: Vec<Vec<f64>> = range.clone().map(|r| z_val.row(r).to_vec()).collect();
            per_chunk.push(rqvae_loss(
                &w,
                &p.roles[range.clone()],
                &recon_rows,
                &p.targets[range.clone()],
                &z_rows,
                &quantized[range],
            )?);
        }
        let breakdown = LossBreakdown::mean(&per_chunk, &w);
        let assignments = (0..rows)
            .filter(|&r| p.valid[r])
            .map(|r| (z_val.row(r).to_vec(), quantized[r].clone()))
            .collect();
        Ok((breakdown, grads, assignments))
    }

    /// Seed the codebook from encoder outputs of a batch.
    pub fn initialize_codebook<R: Rng + ?Sized>(&mut self, chunks: &[Chunk], mask: MaskSpec, rng: &mut R) -> Result<()> {
        let p = self.prepare(chunks, mask)?;
        let z = {
            let mut tape = Tape::with_store(&self.params);
            let z = self.encoder_graph(&mut tape, p.features, p.flags, &p.positions, p.batch, p.seq, p.valid.clone())?;
            tape.value(z).clone()
        };
        let samples: Vec<Vec<f64>> = (0..z.rows()).filter(|&r| p.valid[r]).map(|r| z.row(r).to_vec()).collect();
        self.codebook.initialize_from(&samples, rng)
    }

    /// One optimizer step plus the codebook's EMA update. Returns the pre-update loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        chunks: &[Chunk],
        mask: MaskSpec,
        adam: &AdamConfig,
        max_grad_norm: f64,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        if !self.codebook.is_initialized() {
            self.initialize_codebook(chunks, mask, rng)?;
        }
        let (breakdown, mut grads, assignments) = self.forward_backward(chunks, mask)?;
        if !grads.is_finite() {
            return Err(ItapError::Numerical("non-finite gradient".into()));
        }
        if max_grad_norm > 0.0 {
            grads.clip_global_norm(max_grad_norm);
        }
        self.params.adam_step(&grads, adam);

        let mut assigned = Vec::with_capacity(assignments.len() * self.config.depth);
        for (z, q) in &assignments {
            for l in 0..self.config.depth {
                assigned.push((q.stack.get(l), q.residual_before(z, l)));
            }
        }
        self.codebook.ema_update(&assigned)?;
        let pool: Vec<Vec<f64>> = assignments.into_iter().map(|(z, _)| z).collect();
        self.codebook
            .reseed_dead_codes(&pool, self.config.dead_code_patience, rng);
        Ok(breakdown)
    }

    /// Mean loss over a batch without updating anything.
    pub fn evaluate(&self, chunks: &[Chunk], mask: MaskSpec) -> Result<LossBreakdown> {
        Ok(self.forward_backward(chunks, mask)?.0)
    }

    /// Encoder features for an already-masked chunk, one row per position.
    pub fn encode_chunk(&self, chunk: &Chunk) -> Result<Vec<Vec<f64>>> {
        let p = self.prepare(std::slice::from_ref(chunk), MaskSpec::NONE)?;
        let mut tape = Tape::with_store(&self.params);
        let z = self.encoder_graph(&mut tape, p.features, p.flags, &p.positions, 1, p.seq, p.valid)?;
        let z = tape.value(z);
        Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
    }

    /// Encode already-masked tokens placed at consecutive positions starting at
    /// `first_position`.
    pub fn encode_tokens(&self, tokens: &[MacroToken], first_position: usize) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if first_position + tokens.len() > self.config.seq_len() {
            return Err(ItapError::invalid(format!(
                "{} tokens from position {first_position} exceed sequence length {}",
                tokens.len(),
                self.config.seq_len()
            )));
        }
        let f = self.config.feature_dim();
        let mut features = Vec::with_capacity(tokens.len() * f);
        let mut flags = Vec::with_capacity(tokens.len() * FLAG_COUNT);
        for t in tokens {
            self.check_token(t)?;
            let (x, fl) = self.token_inputs(t);
            features.extend_from_slice(&x);
            flags.extend_from_slice(&fl);
        }
        let n = tokens.len();
        let positions: Vec<usize> = (first_position..first_position + n).collect();
        let valid = tokens.iter().map(|t| !t.is_padding()).collect();
        let mut tape = Tape::with_store(&self.params);
        let z = self.encoder_graph(
            &mut tape,
            Tensor::new(vec![n, f], features)?,
            Tensor::new(vec![n, FLAG_COUNT], flags)?,
            &positions,
            1,
            n,
            valid,
        )?;
        let z = tape.value(z);
        Ok((0..n).map(|r| z.row(r).to_vec()).collect())
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizationResult> {
        residual_quantize(z, &self.codebook, self.config.depth)
    }

    /// Code stacks for the most recent executed macro steps, oldest first. The history
    /// is encoded right-aligned against the current position with the return-to-go hidden.
    pub fn encode_history_to_codes(&self, history: &[ContextEntry]) -> Result<Vec<CodeStack>> {
        let c = self.config.context_len;
        if history.len() > c {
            return Err(ItapError::invalid(format!(
                "history of {} exceeds context length {c}",
                history.len()
            )));
        }
        let tokens: Vec<MacroToken> = history.iter().map(ContextEntry::to_token).collect();
        let z = self.encode_tokens(&tokens, c - history.len())?;
        z.iter().map(|row| Ok(self.quantize(row)?.stack)).collect()
    }

    /// Codes for every position of each chunk under `mask`; padding positions give `None`.
    pub fn extract_codes(&self, chunks: &[Chunk], mask: MaskSpec) -> Result<Vec<Vec<Option<CodeStack>>>> {
        if chunks.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.prepare(chunks, mask)?;
        let mut tape = Tape::with_store(&self.params);
        let z = self.encoder_graph(&mut tape, p.features, p.flags, &p.positions, p.batch, p.seq, p.valid.clone())?;
        let z = tape.value(z);
        let mut out = Vec::with_capacity(p.batch);
        for c in 0..p.batch {
            let mut codes = Vec::with_capacity(p.seq);
            for r in c * p.seq..(c + 1) * p.seq {
                codes.push(if p.valid[r] {
                    Some(self.quantize(z.row(r))?.stack)
                } else {
                    None
                });
            }
            out.push(codes);
        }
        Ok(out)
    }

    fn split_row(&self, scaled: &[f64]) -> DecodedTail {
        let raw = self.scaler.invert(scaled);
        let obs_end = 2 + self.config.obs_dim;
        DecodedTail {
            rtg: raw[0],
            macro_return: raw[1],
            observation: raw[2..obs_end].to_vec(),
            macro_action: raw[obs_end..]
                .chunks(self.config.act_dim)
                .map(<[f64]>::to_vec)
                .collect(),
        }
    }

    /// Decode a full chunk of quantized latents. `anchor_obs` is in raw units; rows with
    /// `valid[i] == false` are treated as padding.
    pub fn decode_chunk(&self, quantized: &[Vec<f64>], anchor_obs: &[f64], valid: &[bool]) -> Result<Vec<DecodedTail>> {
        let seq = self.config.seq_len();
        if quantized.len() != seq || valid.len() != seq {
            return Err(ItapError::LengthMismatch {
                expected: seq,
                actual: quantized.len().min(valid.len()),
            });
        }
        if anchor_obs.len() != self.config.obs_dim {
            return Err(ItapError::LengthMismatch {
                expected: self.config.obs_dim,
                actual: anchor_obs.len(),
            });
        }
        let d = self.config.latent_dim;
        let mut latent = Vec::with_capacity(seq * d);
        for (q, &v) in quantized.iter().zip(valid) {
            if q.len() != d {
                return Err(ItapError::LengthMismatch {
                    expected: d,
                    actual: q.len(),
                });
            }
            if v {
                latent.extend_from_slice(q);
            } else {
                latent.extend(std::iter::repeat(0.0).take(d));
            }
        }
        let anchor = self.scaler.apply_range(anchor_obs, 2);
        let anchors: Vec<f64> = (0..seq).flat_map(|_| anchor.iter().copied()).collect();
        let mut tape = Tape::with_store(&self.params);
        let lat = tape.constant(Tensor::new(vec![seq, d], latent)?);
        let out = self.decoder_graph(
            &mut tape,
            lat,
            Tensor::new(vec![seq, self.config.obs_dim], anchors)?,
            &(0..seq).collect::<Vec<_>>(),
            1,
            seq,
            valid.to_vec(),
        )?;
        let out = tape.value(out);
        Ok((0..seq).map(|r| self.split_row(out.row(r))).collect())
    }

    /// Batched decoding of current (and optionally successor) tails. Context stacks are
    /// right-aligned against the current position.
    pub fn decode_batch(&self, requests: &[DecodeRequest<'_>]) -> Result<Vec<(DecodedTail, Option<DecodedTail>)>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.config.context_len;
        let d = self.config.latent_dim;
        let obs = self.config.obs_dim;
        let longest = requests.iter().map(|r| r.context.len()).max().unwrap_or(0);
        if longest > c {
            return Err(ItapError::invalid(format!("context of {longest} exceeds {c}")));
        }
        let seq = longest + 2;
        let first_pos = c - longest;
        let rows = requests.len() * seq;
        let mut latent = vec![0.0; rows * d];
        let mut anchors = Vec::with_capacity(rows * obs);
        let mut valid = vec![false; rows];
        let positions: Vec<usize> = (0..rows).map(|r| first_pos + r % seq).collect();
        for (b, req) in requests.iter().enumerate() {
            if req.anchor_obs.len() != obs {
                return Err(ItapError::LengthMismatch {
                    expected: obs,
                    actual: req.anchor_obs.len(),
                });
            }
            let base = b * seq;
            let ctx_start = longest - req.context.len();
            let mut place = |slot: usize, stack: &CodeStack| -> Result<()> {
                let v = stack_value(stack, &self.codebook)?;
                latent[(base + slot) * d..(base + slot + 1) * d].copy_from_slice(&v);
                valid[base + slot] = true;
                Ok(())
            };
            for (i, s) in req.context.iter().enumerate() {
                place(ctx_start + i, s)?;
            }
            place(longest, req.current)?;
            if let Some(next) = req.next {
                place(longest + 1, next)?;
            }
            let anchor = self.scaler.apply_range(req.anchor_obs, 2);
            for _ in 0..seq {
                anchors.extend_from_slice(&anchor);
            }
        }
        let mut tape = Tape::with_store(&self.params);
        let lat = tape.constant(Tensor::new(vec![rows, d], latent)?);
        let out = self.decoder_graph(
            &mut tape,
            lat,
            Tensor::new(vec![rows, obs], anchors)?,
            &positions,
            requests.len(),
            seq,
            valid,
        )?;
        let out = tape.value(out);
        Ok(requests
            .iter()
            .enumerate()
            .map(|(b, req)| {
                let base = b * seq;
                let current = self.split_row(out.row(base + longest));
                let next = req.next.map(|_| self.split_row(out.row(base + longest + 1)));
                (current, next)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::MaskFlags;

    #[test]
    fn hand_evaluated_loss() {
        let w = LossWeights::default();
        let q = QuantizationResult {
            stack: CodeStack::new(vec![1]),
            partial_sums: vec![vec![0.2]],
            final_residual: vec![0.0],
        };
        let b = rqvae_loss(
            &w,
            &[TokenRole::Tail],
            &[vec![1.3]],
            &[vec![1.0]],
            &[vec![0.0]],
            &[q],
        )
        .unwrap();
        assert!((b.recon_tail - 0.09).abs() < 1e-12);
        assert!((b.commit_per_depth[0] - 0.04).abs() < 1e-12);
        assert!((b.total - 0.13).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_is_zero_and_padding_ignored() {
        let w = LossWeights::default();
        let q = |v: f64| QuantizationResult {
            stack: CodeStack::new(vec![0, 0]),
            partial_sums: vec![vec![v], vec![v]],
            final_residual: vec![0.0],
        };
        let b = rqvae_loss(
            &w,
            &[TokenRole::Padding, TokenRole::Context, TokenRole::Tail],
            &[vec![9.0], vec![1.0], vec![2.0]],
            &[vec![0.0], vec![1.0], vec![2.0]],
            &[vec![5.0], vec![0.5], vec![0.7]],
            &[q(0.0), q(0.5), q(0.7)],
        )
        .unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn token_masking_zeroes_inputs() {
        let mut cfg = RqVaeConfig::new(2, 1);
        cfg.macro_len = 1;
        let m = RqVaeModel::new(cfg, 0).unwrap();
        let token = MacroToken {
            rtg: 4.0,
            macro_return: 2.0,
            observation: vec![1.0, -1.0],
            macro_action: vec![vec![0.5]],
            mask: MaskFlags {
                rtg: true,
                ..MaskFlags::default()
            },
        };
        let (x, fl) = m.token_inputs(&token);
        assert_eq!(x, vec![0.0, 2.0, 1.0, -1.0, 0.5]);
        assert_eq!(fl, [1.0, 0.0, 0.0, 0.0]);
    }
}
