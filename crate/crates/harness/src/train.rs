//! Fixed-step training loops for the tokenizer and the prior.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use itap::diffmath::AdamConfig;
use itap::prior::{PriorModel, PriorSample};
use itap::rqvae::{CodeStack, RqVaeModel, Standardizer};
use itap::trajectory::{segment_episode, Chunk, MacroToken, MaskSpec};
use itap::ItapError;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};

const RQVAE_STREAM: u64 = 11;
const PRIOR_STREAM: u64 = 12;
const CONTROL_STREAM: u64 = 13;

/// One row of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub recon_tail: f64,
    pub recon_ctx: f64,
    pub commit: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,total,recon_tail,recon_ctx,commit";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.total, self.recon_tail, self.recon_ctx, self.commit
        )
    }
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn numerical(stage: &str, step: usize, err: ItapError) -> HarnessError {
    match err {
        ItapError::Numerical(msg) => HarnessError::Numerical(format!("{stage} diverged at step {step}: {msg}")),
        other => other.into(),
    }
}

/// Macro tokens of every episode with at least two complete macro steps.
pub fn episode_tokens(dataset: &Dataset, macro_len: usize, gamma: f64) -> Result<Vec<Vec<MacroToken>>> {
    let mut out = Vec::with_capacity(dataset.episodes.len());
    for ep in &dataset.episodes {
        let tokens = segment_episode(ep, macro_len, gamma)?;
        if tokens.len() >= 2 {
            out.push(tokens);
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Format(format!(
            "dataset has no episode with at least {} steps",
            2 * macro_len
        )));
    }
    Ok(out)
}

/// Every `(c + 2)`-token window of every episode. Windows whose current step lies within
/// the first `c` steps are left-padded, matching what the agent sees early in an episode.
pub fn training_windows(episodes: &[Vec<MacroToken>], context_len: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for tokens in episodes {
        let template = &tokens[0];
        let pad = MacroToken::padding(
            template.observation.len(),
            template.macro_len(),
            template.macro_action.first().map_or(0, Vec::len),
        );
        for current in 0..tokens.len() - 1 {
            let first = current.saturating_sub(context_len);
            let pads = context_len - (current - first);
            let mut window = vec![pad.clone(); pads];
            window.extend_from_slice(&tokens[first..current + 2]);
            out.push(Chunk::new(window, context_len, pads)?);
        }
    }
    Ok(out)
}

/// Standardizer over the token feature rows of all episodes.
pub fn fit_feature_scaler(episodes: &[Vec<MacroToken>]) -> Result<Standardizer> {
    let rows: Vec<Vec<f64>> = episodes.iter().flatten().map(MacroToken::features).collect();
    Ok(Standardizer::fit(&rows)?)
}

fn fit_obs_scaler(episodes: &[Vec<MacroToken>]) -> Result<Standardizer> {
    let rows: Vec<Vec<f64>> = episodes.iter().flatten().map(|t| t.observation.clone()).collect();
    Ok(Standardizer::fit(&rows)?)
}

/// With probability `fraction`, hide all but a uniformly drawn number of context tokens.
fn cold_start<R: Rng + ?Sized>(chunk: &Chunk, fraction: f64, rng: &mut R) -> Chunk {
    if chunk.context_len > 0 && rng.gen::<f64>() < fraction {
        chunk.truncate_context(rng.gen_range(0..chunk.context_len))
    } else {
        chunk.clone()
    }
}

fn adam(config: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    }
}

pub struct RqVaeRun {
    pub model: RqVaeModel,
    pub curve: Vec<LossRecord>,
}

/// Train the tokenizer for `config.rqvae_steps` steps.
pub fn train_rqvae(config: &RunConfig, dataset: &Dataset) -> Result<RqVaeRun> {
    config.validate()?;
    let episodes = episode_tokens(dataset, config.macro_len, config.gamma)?;
    let windows = training_windows(&episodes, config.context_len)?;
    train_rqvae_on(config, &windows, fit_feature_scaler(&episodes)?)
}

/// Train the tokenizer on a fixed pool of windows.
pub fn train_rqvae_on(config: &RunConfig, windows: &[Chunk], scaler: Standardizer) -> Result<RqVaeRun> {
    if windows.is_empty() {
        return Err(HarnessError::Format("no training windows".into()));
    }
    let mut model = RqVaeModel::new(config.rqvae_config(), config.seed)?;
    model.set_scaler(scaler)?;
    let mut rng = rng_for(config.seed, RQVAE_STREAM);
    let adam = adam(config);
    let mask = MaskSpec::default();
    let mut curve = Vec::with_capacity(config.rqvae_steps);
    for step in 0..config.rqvae_steps {
        let batch: Vec<Chunk> = (0..config.batch_size)
            .map(|_| {
                let w = windows.choose(&mut rng).expect("non-empty");
                cold_start(w, config.cold_start_fraction, &mut rng)
            })
            .collect();
        let loss = model
            .train_step(&batch, mask, &adam, config.grad_clip, &mut rng)
            .map_err(|e| numerical("tokenizer training", step, e))?;
        if !loss.total.is_finite() {
            return Err(HarnessError::Numerical(format!(
                "tokenizer training diverged at step {step}: loss {}",
                loss.total
            )));
        }
        curve.push(LossRecord {
            step,
            total: loss.total,
            recon_tail: loss.recon_tail,
            recon_ctx: loss.recon_ctx,
            commit: loss.commit_per_depth.iter().sum(),
        });
    }
    Ok(RqVaeRun { model, curve })
}

/// Prior training sequences: frozen-tokenizer codes and raw observations per window.
pub fn prior_samples(rqvae: &RqVaeModel, windows: &[Chunk]) -> Result<Vec<PriorSample>> {
    let mut out = Vec::with_capacity(windows.len());
    for batch in windows.chunks(64) {
        let codes = rqvae.extract_codes(batch, MaskSpec::default())?;
        for (chunk, codes) in batch.iter().zip(codes) {
            out.push(PriorSample {
                codes,
                observations: chunk.tokens.iter().map(|t| t.observation.clone()).collect(),
            });
        }
    }
    Ok(out)
}

/// Same padding layout with every code replaced by a uniform draw.
pub fn shuffled_codes<R: Rng + ?Sized>(sample: &PriorSample, codebook_size: usize, rng: &mut R) -> PriorSample {
    let mut out = sample.clone();
    for c in out.codes.iter_mut().flatten() {
        *c = CodeStack::new((0..c.depth()).map(|_| rng.gen_range(0..codebook_size)).collect());
    }
    out
}

/// Mean negative log-likelihood per code slot (one slot per real position and depth).
pub fn per_slot_nll(prior: &PriorModel, samples: &[PriorSample]) -> Result<f64> {
    let depth = prior.config().depth as f64;
    let mut total = 0.0;
    let mut slots = 0.0;
    for batch in samples.chunks(64) {
        let real: usize = batch.iter().map(|s| s.codes.iter().filter(|c| c.is_some()).count()).sum();
        if real == 0 {
            continue;
        }
        total += prior.prior_nll(batch)? * batch.len() as f64;
        slots += real as f64 * depth;
    }
    if slots == 0.0 {
        return Err(HarnessError::Format("no real positions to score".into()));
    }
    Ok(total / slots)
}

pub struct PriorRun {
    pub model: PriorModel,
    /// Per-slot training NLL, one entry per step.
    pub curve: Vec<f64>,
    pub samples: Vec<PriorSample>,
}

/// Train the prior on codes extracted by the frozen tokenizer.
pub fn train_prior(config: &RunConfig, dataset: &Dataset, rqvae: &RqVaeModel) -> Result<PriorRun> {
    config.validate()?;
    let episodes = episode_tokens(dataset, config.macro_len, config.gamma)?;
    let windows = training_windows(&episodes, config.context_len)?;
    let samples = prior_samples(rqvae, &windows)?;
    let obs_scaler = fit_obs_scaler(&episodes)?;
    train_prior_on(config, rqvae, samples, obs_scaler, false)
}

/// Train the prior on a fixed pool. With `shuffle_control` every batch gets fresh uniform
/// codes, so no sequence structure is learnable.
pub fn train_prior_on(
    config: &RunConfig,
    rqvae: &RqVaeModel,
    samples: Vec<PriorSample>,
    obs_scaler: Standardizer,
    shuffle_control: bool,
) -> Result<PriorRun> {
    if samples.is_empty() {
        return Err(HarnessError::Format("no prior training samples".into()));
    }
    let mut model = PriorModel::new(config.prior_config(), rqvae.codebook().entries(), config.seed)?;
    model.set_obs_scaler(obs_scaler)?;
    let mut rng = rng_for(config.seed, if shuffle_control { CONTROL_STREAM } else { PRIOR_STREAM });
    let adam = adam(config);
    let k = config.codebook_size;
    let depth = config.depth as f64;
    let mut curve = Vec::with_capacity(config.prior_steps);
    for step in 0..config.prior_steps {
        let batch: Vec<PriorSample> = (0..config.batch_size)
            .map(|_| {
                let s = samples.choose(&mut rng).expect("non-empty");
                let s = if rng.gen::<f64>() < config.cold_start_fraction {
                    s.truncate_context(rng.gen_range(0..config.context_len.max(1)))
                } else {
                    s.clone()
                };
                if shuffle_control {
                    shuffled_codes(&s, k, &mut rng)
                } else {
                    s
                }
            })
            .collect();
        let real: usize = batch.iter().map(|s| s.codes.iter().filter(|c| c.is_some()).count()).sum();
        let nll = model
            .train_step(&batch, &adam, config.grad_clip)
            .map_err(|e| numerical("prior training", step, e))?;
        curve.push(nll * batch.len() as f64 / (real.max(1) as f64 * depth));
    }
    Ok(PriorRun { model, curve, samples })
}
