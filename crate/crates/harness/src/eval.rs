//! Closed-loop evaluation of the planner and the per-decision latency benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use itap::envs::{episode_rng, rollout, BehaviorPolicy, Environment, LatentRegime, PointMassEnv};
use itap::planner::{plan_step, Agent, ItapModel, LatentModel, ModelDims, PlannerConfig};
use itap::prior::{DepthQuery, PriorModel, PriorQuery};
use itap::rqvae::{CodeStack, DecodeRequest, DecodedTail, RqVaeModel};
use itap::trajectory::{segment_episode, ContextEntry};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Planner view of a model that only ever sees the most recent `cap` macro steps.
pub struct ContextCapped<'a, M: LatentModel + ?Sized> {
    inner: &'a M,
    cap: usize,
}

impl<'a, M: LatentModel + ?Sized> ContextCapped<'a, M> {
    pub fn new(inner: &'a M, cap: usize) -> Self {
        ContextCapped { inner, cap }
    }
}

impl<M: LatentModel + ?Sized> LatentModel for ContextCapped<'_, M> {
    fn dims(&self) -> ModelDims {
        let mut d = self.inner.dims();
        d.context_len = d.context_len.min(self.cap);
        d
    }

    fn encode_history(&self, history: &[ContextEntry]) -> itap::Result<Vec<CodeStack>> {
        let skip = history.len().saturating_sub(self.cap);
        self.inner.encode_history(&history[skip..])
    }

    fn prior_context(&self, queries: &[PriorQuery<'_>]) -> itap::Result<Vec<Vec<f64>>> {
        self.inner.prior_context(queries)
    }

    fn depth_logits(&self, queries: &[DepthQuery<'_>]) -> itap::Result<Vec<Vec<f64>>> {
        self.inner.depth_logits(queries)
    }

    fn decode(&self, requests: &[DecodeRequest<'_>]) -> itap::Result<Vec<(DecodedTail, Option<DecodedTail>)>> {
        self.inner.decode(requests)
    }
}

/// Evaluation protocol. Episode `e` of every seed runs under `regimes[e % regimes.len()]`,
/// so consecutive episodes switch the hidden regime.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub regimes: Vec<f64>,
    pub seeds: usize,
    pub episodes: usize,
    /// Hide all but this many executed macro steps from the planner.
    pub context_cap: Option<usize>,
}

impl EvalSpec {
    pub fn from_config(config: &RunConfig) -> Self {
        EvalSpec {
            regimes: config.eval_regimes.clone(),
            seeds: config.eval_seeds,
            episodes: config.eval_episodes,
            context_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSummary {
    pub f_max: f64,
    pub episodes: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Full resolved configuration the numbers came from.
    pub config_text: String,
    pub spec: EvalSpec,
    /// `returns[seed][episode]`, undiscounted.
    pub returns: Vec<Vec<f64>>,
    /// Regime of each episode index.
    pub episode_regimes: Vec<f64>,
    /// Wall-clock seconds of each planning call.
    pub latencies: Vec<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Standard error of the mean; needs at least two samples.
pub fn stderr(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

fn fmt_stderr(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    pub fn all_returns(&self) -> Vec<f64> {
        self.returns.iter().flatten().copied().collect()
    }

    pub fn episode_count(&self) -> usize {
        self.returns.iter().map(Vec::len).sum()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.all_returns())
    }

    pub fn stderr(&self) -> Option<f64> {
        stderr(&self.all_returns())
    }

    pub fn seed_means(&self) -> Vec<f64> {
        self.returns.iter().map(|r| mean(r)).collect()
    }

    pub fn per_regime(&self) -> Vec<RegimeSummary> {
        let mut out = Vec::new();
        for &f in &self.spec.regimes {
            if out.iter().any(|s: &RegimeSummary| s.f_max == f) {
                continue;
            }
            let xs: Vec<f64> = self
                .returns
                .iter()
                .flat_map(|r| r.iter().zip(&self.episode_regimes).filter(|(_, &g)| g == f).map(|(x, _)| *x))
                .collect();
            out.push(RegimeSummary {
                f_max: f,
                episodes: xs.len(),
                mean: mean(&xs),
                stderr: stderr(&xs),
            });
        }
        out
    }

    pub fn mean_latency(&self) -> f64 {
        mean(&self.latencies)
    }

    /// Deterministic report body; wall-clock figures are kept out so identical runs give
    /// identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "episodes: {} ({} seeds x {})",
            self.episode_count(),
            self.spec.seeds,
            self.spec.episodes
        );
        let cap = self.spec.context_cap.map_or_else(|| "none".to_string(), |c| c.to_string());
        let _ = writeln!(out, "context cap: {cap}");
        let _ = writeln!(out, "mean return: {:.4} +- {}", self.mean(), fmt_stderr(self.stderr()));
        for (i, m) in self.seed_means().iter().enumerate() {
            let _ = writeln!(out, "seed {i}: mean {m:.4}");
        }
        for r in self.per_regime() {
            let _ = writeln!(
                out,
                "regime f_max={}: {} episodes, mean {:.4} +- {}",
                r.f_max,
                r.episodes,
                r.mean,
                fmt_stderr(r.stderr)
            );
        }
        out.push_str("config:\n");
        out.push_str(&self.config_text);
        out
    }

    pub fn latency_text(&self) -> String {
        format!(
            "planning calls: {}\nmean decision latency: {:.6} s\n",
            self.latencies.len(),
            self.mean_latency()
        )
    }

    /// One row per episode: `seed,episode,f_max,return`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,episode,f_max,return\n");
        for (s, returns) in self.returns.iter().enumerate() {
            for (e, r) in returns.iter().enumerate() {
                let _ = writeln!(out, "{s},{e},{},{r}", self.episode_regimes[e]);
            }
        }
        out
    }
}

const EVAL_ENV_SALT: u64 = 0x6576_616c;
const EVAL_AGENT_SALT: u64 = 0x6167_656e;

pub fn make_env(config: &RunConfig, f_max: f64) -> Result<PointMassEnv> {
    let env = PointMassEnv::new(config.env_config(), LatentRegime::new(f_max)?)?;
    Ok(if config.pomdp { env.with_goal_mask() } else { env })
}

/// Run one episode with a fresh agent; returns the undiscounted return.
fn run_episode<M: LatentModel + ?Sized>(
    model: &M,
    planner: &PlannerConfig,
    config: &RunConfig,
    env: &mut PointMassEnv,
    env_rng: &mut ChaCha8Rng,
    agent_seed: u64,
    latencies: &mut Vec<f64>,
) -> Result<f64> {
    let mut agent = Agent::new(model, planner.clone(), config.execution, agent_seed)?;
    let mut obs = env.reset(env_rng);
    let mut total = 0.0;
    loop {
        let before = agent.decisions();
        let start = Instant::now();
        let action = agent.act(&obs)?;
        if agent.decisions() != before {
            latencies.push(start.elapsed().as_secs_f64());
        }
        let out = env.step(&action, env_rng)?;
        agent.observe(&obs, &action, out.reward);
        total += out.reward;
        obs = out.observation;
        if out.done {
            return Ok(total);
        }
    }
}

/// Evaluate `planner` with common random numbers: the environment stream of
/// (seed, episode) is identical across planner settings.
pub fn evaluate_policy(
    config: &RunConfig,
    rqvae: &RqVaeModel,
    prior: &PriorModel,
    planner: &PlannerConfig,
    spec: &EvalSpec,
) -> Result<MetricsReport> {
    if spec.regimes.is_empty() || spec.seeds == 0 || spec.episodes == 0 {
        return Err(HarnessError::Config("evaluation needs regimes, seeds and episodes".into()));
    }
    let model = ItapModel::new(rqvae, prior)?;
    let capped;
    let view: &dyn LatentModel = match spec.context_cap {
        Some(cap) => {
            capped = ContextCapped::new(&model, cap);
            &capped
        }
        None => &model,
    };
    let episode_regimes: Vec<f64> = (0..spec.episodes).map(|e| spec.regimes[e % spec.regimes.len()]).collect();
    let mut envs: Vec<PointMassEnv> = spec
        .regimes
        .iter()
        .map(|&f| make_env(config, f))
        .collect::<Result<_>>()?;
    let mut returns = Vec::with_capacity(spec.seeds);
    let mut latencies = Vec::new();
    for s in 0..spec.seeds {
        let mut row = Vec::with_capacity(spec.episodes);
        for e in 0..spec.episodes {
            let env = &mut envs[e % spec.regimes.len()];
            let mut env_rng = episode_rng(config.seed ^ EVAL_ENV_SALT, s as u64, e as u64);
            let agent_seed = episode_rng(config.seed ^ EVAL_AGENT_SALT, s as u64, e as u64).next_u64();
            row.push(run_episode(view, planner, config, env, &mut env_rng, agent_seed, &mut latencies)?);
        }
        returns.push(row);
    }
    Ok(MetricsReport {
        config_text: config.to_text(),
        spec: spec.clone(),
        returns,
        episode_regimes,
        latencies,
    })
}

/// Mean return of scripted `policy` under the evaluation protocol, for reference rows.
pub fn evaluate_behavior(config: &RunConfig, policy: &BehaviorPolicy, spec: &EvalSpec) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(spec.seeds);
    for s in 0..spec.seeds {
        let mut row = Vec::with_capacity(spec.episodes);
        for e in 0..spec.episodes {
            let mut env = make_env(config, spec.regimes[e % spec.regimes.len()])?;
            let mut rng = episode_rng(config.seed ^ EVAL_ENV_SALT, s as u64, e as u64);
            row.push(rollout(&mut env, policy, &mut rng)?.undiscounted_return());
        }
        out.push(row);
    }
    Ok(out)
}

/// One benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub context: usize,
    pub horizon: usize,
    pub candidates: usize,
    pub calls: usize,
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySpec {
    pub contexts: Vec<usize>,
    pub horizons: Vec<usize>,
    pub candidates: Vec<usize>,
    pub warmup: usize,
    pub calls: usize,
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec {
            contexts: vec![1, 3, 6, 12],
            horizons: vec![1, 3],
            candidates: vec![16],
            warmup: 5,
            calls: 30,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// A behaviour-policy history of `len` macro steps ending mid-episode, in regime `f_max`.
pub fn benchmark_history(config: &RunConfig, len: usize, f_max: f64) -> Result<(Vec<f64>, Vec<ContextEntry>)> {
    let mut cfg = config.env_config();
    cfg.max_steps = cfg.max_steps.max((len + 1) * config.macro_len);
    let mut env = PointMassEnv::new(cfg, LatentRegime::new(f_max)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let episode = rollout(&mut env, &BehaviorPolicy::expert(), &mut rng)?;
    let tokens = segment_episode(&episode, config.macro_len, config.gamma)?;
    let history = tokens[..len].iter().map(|t| ContextEntry::from_token(t, None)).collect();
    Ok((tokens[len].observation.clone(), history))
}

/// Time `plan_step` for every (context, horizon, candidates) cell. The model's context
/// window must cover the largest context size.
pub fn bench_latency(
    config: &RunConfig,
    rqvae: &RqVaeModel,
    prior: &PriorModel,
    spec: &LatencySpec,
) -> Result<Vec<LatencyRow>> {
    let model = ItapModel::new(rqvae, prior)?;
    let longest = spec.contexts.iter().copied().max().unwrap_or(0);
    if longest > rqvae.config().context_len {
        return Err(HarnessError::Config(format!(
            "context {longest} exceeds the model window {}",
            rqvae.config().context_len
        )));
    }
    if spec.calls == 0 {
        return Err(HarnessError::Config("benchmark needs at least one measured call".into()));
    }
    let (obs, full_history) = benchmark_history(config, longest, 2.5)?;
    let mut rows = Vec::new();
    for &c in &spec.contexts {
        let view = ContextCapped::new(&model, c);
        let history = &full_history[longest - c..];
        for &h in &spec.horizons {
            for &m in &spec.candidates {
                let planner = PlannerConfig {
                    horizon: h,
                    coarse_samples: m,
                    ..config.planner_config()
                };
                planner.validate()?;
                let mut times = Vec::with_capacity(spec.calls);
                for i in 0..spec.warmup + spec.calls {
                    let start = Instant::now();
                    plan_step(&view, &obs, history, &planner, config.seed.wrapping_add(i as u64))?;
                    if i >= spec.warmup {
                        times.push(start.elapsed().as_secs_f64());
                    }
                }
                let avg = mean(&times);
                times.sort_by(f64::total_cmp);
                rows.push(LatencyRow {
                    context: c,
                    horizon: h,
                    candidates: m,
                    calls: times.len(),
                    mean: avg,
                    p95: percentile(&times, 0.95),
                });
            }
        }
    }
    Ok(rows)
}

pub fn latency_table(rows: &[LatencyRow]) -> String {
    let mut out = format!(
        "{:>8} {:>8} {:>11} {:>6} {:>12} {:>12}\n",
        "context", "horizon", "candidates", "calls", "mean_s", "p95_s"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>11} {:>6} {:>12.6} {:>12.6}",
            r.context, r.horizon, r.candidates, r.calls, r.mean, r.p95
        );
    }
    out
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("context,horizon,candidates,calls,mean_s,p95_s\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.context, r.horizon, r.candidates, r.calls, r.mean, r.p95);
    }
    out
}
