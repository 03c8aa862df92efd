use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::nn::{Linear, Mlp, Transformer, TransformerConfig};
use crate::diffmath::{AdamConfig, ParamGrads, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{ItapError, Result};
use crate::rqvae::{CodeStack, Standardizer};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub codebook_size: usize,
    pub depth: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub context_len: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub head_width: usize,
    pub head_layers: usize,
}

impl PriorConfig {
    pub fn new(codebook_size: usize, depth: usize, latent_dim: usize, obs_dim: usize, context_len: usize) -> Self {
        PriorConfig {
            codebook_size,
            depth,
            latent_dim,
            obs_dim,
            context_len,
            width: 64,
            heads: 4,
            layers: 2,
            ffn: 256,
            head_width: 128,
            head_layers: 2,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.context_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.depth == 0 || self.latent_dim == 0 || self.obs_dim == 0 {
            return Err(ItapError::invalid("prior dims must be positive and K >= 2"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(ItapError::invalid("width must be a positive multiple of heads"));
        }
        Ok(())
    }
}

/// One training sequence: code stacks and raw observations per chunk position. `None`
/// marks padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub codes: Vec<Option<CodeStack>>,
    pub observations: Vec<Vec<f64>>,
}

impl PriorSample {
    /// Keep only the last `keep + 2` positions (context plus current and next); older
    /// positions become padding.
    pub fn truncate_context(&self, keep: usize) -> PriorSample {
        let n = self.codes.len();
        let cut = n.saturating_sub(keep + 2);
        let mut out = self.clone();
        out.codes.iter_mut().take(cut).for_each(|c| *c = None);
        out
    }
}

/// Trunk query: context stacks (oldest first) and the observation at the query step.
#[derive(Debug, Clone, Copy)]
pub struct PriorQuery<'a> {
    pub context: &'a [CodeStack],
    pub observation: &'a [f64],
}

/// Depth-head query: trunk state and the shallower codes already chosen.
#[derive(Debug, Clone, Copy)]
pub struct DepthQuery<'a> {
    pub context: &'a [f64],
    pub prefix: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    config: PriorConfig,
    params: ParameterStore,
    obs_scaler: Standardizer,
    code_table: ParamId,
    code_proj: Linear,
    bos: ParamId,
    pos: ParamId,
    trunk: Transformer,
    obs_proj: Linear,
    depth_emb: ParamId,
    partial_proj: Linear,
    head: Mlp,
}

/// Trunk layout for a batch of sequences of equal length.
struct TrunkRows {
    batch: usize,
    seq: usize,
    /// `[rows, D]` code indices of the previous step's stack (0 where absent).
    prev_codes: Vec<Vec<usize>>,
    has_prev: Vec<bool>,
    is_bos: Vec<bool>,
    valid: Vec<bool>,
    positions: Vec<usize>,
    observations: Vec<f64>,
}

impl PriorModel {
    /// Fresh prior with the code table copied from `codebook_entries`.
    pub fn new(config: PriorConfig, codebook_entries: &[Vec<f64>], seed: u64) -> Result<Self> {
        config.validate()?;
        if codebook_entries.len() != config.codebook_size
            || codebook_entries.iter().any(|e| e.len() != config.latent_dim)
        {
            return Err(ItapError::shape(
                "prior code table",
                format!("expected {}x{}", config.codebook_size, config.latent_dim),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let w = config.width;
        let table = Tensor::from_rows(codebook_entries)?;
        let code_table = params.add("prior.codes", table);
        let code_proj = Linear::new(&mut params, "prior.code_proj", config.latent_dim, w, false, &mut rng);
        let bos = params.add_uniform("prior.bos", &[1, w], w, &mut rng);
        let pos = params.add_uniform("prior.pos", &[config.seq_len(), w], w, &mut rng);
        let trunk = Transformer::new(
            &mut params,
            "prior.trunk",
            TransformerConfig {
                width: w,
                heads: config.heads,
                layers: config.layers,
                ffn: config.ffn,
            },
            &mut rng,
        );
        let obs_proj = Linear::new(&mut params, "prior.obs", config.obs_dim, w, true, &mut rng);
        let depth_emb = params.add_uniform("prior.depth", &[config.depth, w], w, &mut rng);
        let partial_proj = Linear::new(&mut params, "prior.partial", config.latent_dim, w, false, &mut rng);
        let mut dims = vec![w];
        dims.extend(std::iter::repeat(config.head_width).take(config.head_layers));
        dims.push(config.codebook_size);
        let head = Mlp::new(&mut params, "prior.head", &dims, &mut rng);
        Ok(PriorModel {
            obs_scaler: Standardizer::identity(config.obs_dim),
            config,
            params,
            code_table,
            code_proj,
            bos,
            pos,
            trunk,
            obs_proj,
            depth_emb,
            partial_proj,
            head,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn obs_scaler(&self) -> &Standardizer {
        &self.obs_scaler
    }

    pub fn set_obs_scaler(&mut self, scaler: Standardizer) -> Result<()> {
        if scaler.width() != self.config.obs_dim {
            return Err(ItapError::LengthMismatch {
                expected: self.config.obs_dim,
                actual: scaler.width(),
            });
        }
        self.obs_scaler = scaler;
        Ok(())
    }

    fn check_stack(&self, stack: &CodeStack) -> Result<()> {
        if stack.depth() != self.config.depth {
            return Err(ItapError::LengthMismatch {
                expected: self.config.depth,
                actual: stack.depth(),
            });
        }
        if let Some(&k) = stack.indices().iter().find(|&&k| k >= self.config.codebook_size) {
            return Err(ItapError::IndexOutOfRange {
                index: k,
                size: self.config.codebook_size,
            });
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.config.obs_dim {
            return Err(ItapError::LengthMismatch {
                expected: self.config.obs_dim,
                actual: obs.len(),
            });
        }
        Ok(())
    }

    /// Trunk states `h` for every row.
    fn trunk_graph(&self, tape: &mut Tape<'_>, rows: &TrunkRows) -> Result<Var> {
        let n = rows.valid.len();
        let table = tape.param(self.code_table);
        let mut emb: Option<Var> = None;
        for j in 0..self.config.depth {
            let idx: Vec<usize> = rows.prev_codes.iter().map(|c| c[j]).collect();
            let e = tape.gather(table, &idx)?;
            emb = Some(match emb {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let d = self.config.latent_dim;
        let keep: Vec<f64> = rows
            .has_prev
            .iter()
            .flat_map(|&h| std::iter::repeat(if h { 1.0 } else { 0.0 }).take(d))
            .collect();
        let keep = tape.constant(Tensor::new(vec![n, d], keep)?);
        let emb = tape.mul(emb.expect("depth >= 1"), keep)?;
        let x = self.code_proj.forward(tape, emb)?;
        let bos_col: Vec<f64> = rows.is_bos.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let bos_col = tape.constant(Tensor::new(vec![n, 1], bos_col)?);
        let bos = tape.param(self.bos);
        let bos = tape.matmul(bos_col, bos)?;
        let x = tape.add(x, bos)?;
        let pos_table = tape.param(self.pos);
        let pos = tape.gather(pos_table, &rows.positions)?;
        let x = tape.add(x, pos)?;
        let h = self
            .trunk
            .forward(tape, x, rows.batch, rows.seq, Some(rows.valid.clone()))?;
        let o = tape.constant(Tensor::new(vec![n, self.config.obs_dim], rows.observations.clone())?);
        let o = self.obs_proj.forward(tape, o)?;
        tape.add(h, o)
    }

    /// Logits for the codes at depth `prefixes[i].len()` of each selected row.
    fn head_graph(&self, tape: &mut Tape<'_>, h: Var, prefixes: &[&[usize]]) -> Result<Var> {
        let n = prefixes.len();
        let d = self.config.latent_dim;
        let depth_idx: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        if let Some(&bad) = depth_idx.iter().find(|&&l| l >= self.config.depth) {
            return Err(ItapError::IndexOutOfRange {
                index: bad,
                size: self.config.depth,
            });
        }
        let depth_table = tape.param(self.depth_emb);
        let de = tape.gather(depth_table, &depth_idx)?;
        let x = tape.add(h, de)?;
        let max_prefix = depth_idx.iter().copied().max().unwrap_or(0);
        let x = if max_prefix == 0 {
            x
        } else {
            let table = tape.param(self.code_table);
            let mut partial: Option<Var> = None;
            for j in 0..max_prefix {
                let idx: Vec<usize> = prefixes.iter().map(|p| p.get(j).copied().unwrap_or(0)).collect();
                let e = tape.gather(table, &idx)?;
                let keep: Vec<f64> = prefixes
                    .iter()
                    .flat_map(|p| std::iter::repeat(if j < p.len() { 1.0 } else { 0.0 }).take(d))
                    .collect();
                let keep = tape.constant(Tensor::new(vec![n, d], keep)?);
                let e = tape.mul(e, keep)?;
                partial = Some(match partial {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
            let p = self.partial_proj.forward(tape, partial.expect("prefix"))?;
            tape.add(x, p)?
        };
        self.head.forward(tape, x)
    }

    fn training_rows(&self, batch: &[PriorSample]) -> Result<TrunkRows> {
        let seq = self.config.seq_len();
        let depth = self.config.depth;
        let n = batch.len() * seq;
        let mut rows = TrunkRows {
            batch: batch.len(),
            seq,
            prev_codes: Vec::with_capacity(n),
            has_prev: Vec::with_capacity(n),
            is_bos: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            positions: (0..n).map(|r| r % seq).collect(),
            observations: Vec::with_capacity(n * self.config.obs_dim),
        };
        for s in batch {
            if s.codes.len() != seq || s.observations.len() != seq {
                return Err(ItapError::LengthMismatch {
                    expected: seq,
                    actual: s.codes.len().min(s.observations.len()),
                });
            }
            for u in 0..seq {
                let real = s.codes[u].is_some();
                if let Some(stack) = &s.codes[u] {
                    self.check_stack(stack)?;
                }
                let prev = if u > 0 { s.codes[u - 1].as_ref() } else { None };
                rows.valid.push(real);
                rows.is_bos.push(real && prev.is_none());
                rows.has_prev.push(real && prev.is_some());
                rows.prev_codes.push(match prev {
                    Some(p) if real => p.indices().to_vec(),
                    _ => vec![0; depth],
                });
                self.check_obs(&s.observations[u])?;
                rows.observations.extend(self.obs_scaler.apply(&s.observations[u]));
            }
        }
        Ok(rows)
    }

    /// Teacher-forced NLL: mean over samples of the summed per-slot cross-entropy, or a
    /// per-row weighted sum when `slot_weights` is given.
    fn nll_graph(&self, tape: &mut Tape<'_>, batch: &[PriorSample], slot_weights: Option<&[f64]>) -> Result<Var> {
        let rows = self.training_rows(batch)?;
        let h = self.trunk_graph(tape, &rows)?;
        let real: Vec<usize> = (0..rows.valid.len()).filter(|&r| rows.valid[r]).collect();
        if real.is_empty() {
            return Err(ItapError::InsufficientData("batch has no real positions".into()));
        }
        let h_real = tape.gather(h, &real)?;
        let stacks: Vec<&CodeStack> = real
            .iter()
            .map(|&r| batch[r / rows.seq].codes[r % rows.seq].as_ref().expect("real row"))
            .collect();
        let b = batch.len() as f64;
        let mut loss: Option<Var> = None;
        for l in 0..self.config.depth {
            let prefixes: Vec<&[usize]> = stacks.iter().map(|s| s.prefix(l)).collect();
            let logits = self.head_graph(tape, h_real, &prefixes)?;
            let targets: Vec<usize> = stacks.iter().map(|s| s.get(l)).collect();
            let weights: Vec<f64> = match slot_weights {
                Some(w) => real.iter().map(|&r| w[r]).collect(),
                None => vec![1.0 / b; real.len()],
            };
            let ce = tape.cross_entropy(logits, &targets, &weights)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        Ok(loss.expect("depth >= 1"))
    }

    /// Mean over the batch of the summed per-slot negative log-likelihood.
    pub fn prior_nll(&self, batch: &[PriorSample]) -> Result<f64> {
        let mut tape = Tape::with_store(&self.params);
        let loss = self.nll_graph(&mut tape, batch, None)?;
        Ok(tape.value(loss).item())
    }

    /// Summed-over-depth NLL at each position of one sample (0 at padding).
    pub fn position_nll(&self, sample: &PriorSample) -> Result<Vec<f64>> {
        let seq = self.config.seq_len();
        (0..seq)
            .map(|u| {
                if sample.codes[u].is_none() {
                    return Ok(0.0);
                }
                let mut w = vec![0.0; seq];
                w[u] = 1.0;
                let mut tape = Tape::with_store(&self.params);
                let loss = self.nll_graph(&mut tape, std::slice::from_ref(sample), Some(&w))?;
                Ok(tape.value(loss).item())
            })
            .collect()
    }

    pub fn nll_and_grads(&self, batch: &[PriorSample]) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::with_store(&self.params);
        let loss = self.nll_graph(&mut tape, batch, None)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ItapError::Numerical("non-finite prior loss".into()));
        }
        Ok((value, tape.backward(loss)?.into_params()))
    }

    /// One optimizer step; returns the pre-update NLL.
    pub fn train_step(&mut self, batch: &[PriorSample], adam: &AdamConfig, max_grad_norm: f64) -> Result<f64> {
        let (nll, mut grads) = self.nll_and_grads(batch)?;
        if !grads.is_finite() {
            return Err(ItapError::Numerical("non-finite prior gradient".into()));
        }
        if max_grad_norm > 0.0 {
            grads.clip_global_norm(max_grad_norm);
        }
        self.params.adam_step(&grads, adam);
        Ok(nll)
    }

    /// Trunk state at the query step for each query. Context is right-aligned against the
    /// current position; an empty context leaves only the start embedding and observation.
    pub fn trunk_forward(&self, queries: &[PriorQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.config.context_len;
        let depth = self.config.depth;
        let longest = queries.iter().map(|q| q.context.len()).max().unwrap_or(0);
        if longest > c {
            return Err(ItapError::invalid(format!("context of {longest} exceeds {c}")));
        }
        let seq = longest + 1;
        let n = queries.len() * seq;
        let mut rows = TrunkRows {
            batch: queries.len(),
            seq,
            prev_codes: Vec::with_capacity(n),
            has_prev: Vec::with_capacity(n),
            is_bos: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            positions: (0..n).map(|r| c - longest + r % seq).collect(),
            observations: Vec::with_capacity(n * self.config.obs_dim),
        };
        for q in queries {
            self.check_obs(q.observation)?;
            let obs = self.obs_scaler.apply(q.observation);
            let start = longest - q.context.len();
            for i in 0..seq {
                let real = i >= start;
                let prev = (i > start).then(|| &q.context[i - start - 1]);
                if let Some(p) = prev {
                    self.check_stack(p)?;
                }
                rows.valid.push(real);
                rows.is_bos.push(i == start);
                rows.has_prev.push(prev.is_some());
                rows.prev_codes.push(prev.map_or_else(|| vec![0; depth], |p| p.indices().to_vec()));
                // Only the query row's state is read; it sees o_t.
                rows.observations.extend_from_slice(&obs);
            }
        }
        let mut tape = Tape::with_store(&self.params);
        let h = self.trunk_graph(&mut tape, &rows)?;
        let h = tape.value(h);
        Ok((0..queries.len()).map(|b| h.row(b * seq + longest).to_vec()).collect())
    }

    /// Logits for the next code of each query's stack.
    pub fn depth_logits_batch(&self, queries: &[DepthQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let w = self.config.width;
        let mut data = Vec::with_capacity(queries.len() * w);
        for q in queries {
            if q.context.len() != w {
                return Err(ItapError::LengthMismatch {
                    expected: w,
                    actual: q.context.len(),
                });
            }
            if let Some(&k) = q.prefix.iter().find(|&&k| k >= self.config.codebook_size) {
                return Err(ItapError::IndexOutOfRange {
                    index: k,
                    size: self.config.codebook_size,
                });
            }
            data.extend_from_slice(q.context);
        }
        let mut tape = Tape::with_store(&self.params);
        let h = tape.constant(Tensor::new(vec![queries.len(), w], data)?);
        let prefixes: Vec<&[usize]> = queries.iter().map(|q| q.prefix).collect();
        let logits = self.head_graph(&mut tape, h, &prefixes)?;
        let logits = tape.value(logits);
        Ok((0..queries.len()).map(|r| logits.row(r).to_vec()).collect())
    }

    /// Logits for code `prefix.len()` given trunk state `context`.
    pub fn depth_logits(&self, context: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .depth_logits_batch(&[DepthQuery { context, prefix }])?
            .pop()
            .expect("one query"))
    }
}
