//! Flat `key = value` run configuration with a typed schema.

use std::fmt::Write as _;
use std::path::Path;

use itap::planner::{ExecutionMode, PlannerConfig};
use itap::prior::PriorConfig;
use itap::rqvae::{LossWeights, RqVaeConfig};

use crate::error::{HarnessError, Result};

/// A value type that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse(text: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        text.parse().map_err(|_| format!("'{text}' is not a number"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

macro_rules! integer_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(text: &str) -> std::result::Result<Self, String> {
                text.parse().map_err(|_| format!("'{text}' is not a non-negative integer"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
integer_value!(usize, u32, u64);

impl ConfigValue for bool {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        match text {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("'{text}' is not true or false")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Option<usize> {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text == "none" {
            Ok(None)
        } else {
            usize::parse(text).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for String {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        if text.contains(',') || text.contains('\n') {
            return Err(format!("'{text}' contains a separator"));
        }
        Ok(text.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for ExecutionMode {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        match text {
            "full_macro" => Ok(ExecutionMode::FullMacro),
            "first_action" => Ok(ExecutionMode::FirstAction),
            _ => Err(format!("'{text}' is not full_macro or first_action")),
        }
    }
    fn render(&self) -> String {
        match self {
            ExecutionMode::FullMacro => "full_macro".into(),
            ExecutionMode::FirstAction => "first_action".into(),
        }
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a run. Serialized as one `key = value` line per field.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Set one key from its text form; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value)
                            .map_err(|e| HarnessError::Config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(HarnessError::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($field), ConfigValue::render(&self.$field)); )*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0,

    // Environment.
    f_scale: f64 = itap::envs::PointMassEnv::CALIBRATED_F_SCALE,
    max_steps: usize = 60,
    /// Hide the goal coordinates from observations.
    pomdp: bool = false,

    // Offline data.
    regimes: Vec<f64> = vec![0.0, 2.5, 5.0],
    tiers: Vec<String> = vec!["expert".into(), "medium".into()],
    episodes_per_cell: usize = 50,
    gamma: f64 = 0.99,

    // Tokenizer.
    macro_len: usize = 3,
    context_len: usize = 6,
    latent_dim: usize = 16,
    codebook_size: usize = 32,
    depth: usize = 2,
    width: usize = 64,
    heads: usize = 4,
    layers: usize = 2,
    ffn: usize = 256,
    ema_decay: f64 = 0.99,
    dead_code_patience: u32 = 100,
    alpha_tail: f64 = 1.0,
    alpha_ctx: f64 = 0.1,
    beta: f64 = 1.0,

    // Prior.
    prior_width: usize = 64,
    prior_heads: usize = 4,
    prior_layers: usize = 2,
    prior_ffn: usize = 256,
    head_width: usize = 128,
    head_layers: usize = 2,

    // Training. Batch 64 instead of 512 at desk scale.
    batch_size: usize = 64,
    rqvae_steps: usize = 1500,
    prior_steps: usize = 1500,
    learning_rate: f64 = 1e-3,
    grad_clip: f64 = 1.0,
    /// Fraction of training chunks whose context is cut to a random shorter length.
    cold_start_fraction: f64 = 0.25,

    // Planner.
    coarse_samples: usize = 16,
    completions: usize = 2,
    lookahead: usize = 4,
    proposals: usize = 4,
    horizon: usize = 2,
    keep_fraction: f64 = 0.5,
    temperatures: Vec<f64> = vec![2.0],
    truncations: Vec<usize> = vec![8],
    c1: f64 = 1.25,
    c2: f64 = 19652.0,
    prior_temperature: f64 = 2.0,
    iterations: usize = 100,
    top_k: Option<usize> = None,
    per_sample_children: bool = false,
    execution: ExecutionMode = ExecutionMode::FullMacro,

    // Evaluation.
    eval_regimes: Vec<f64> = vec![0.0, 2.5, 5.0],
    eval_seeds: usize = 5,
    eval_episodes: usize = 20,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.regimes.is_empty() || self.regimes.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return bad("regimes must be a non-empty list of non-negative numbers");
        }
        for t in &self.tiers {
            itap::envs::BehaviorPolicy::from_name(t).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.tiers.is_empty() {
            return bad("tiers must not be empty");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if self.max_steps < self.macro_len {
            return bad("max_steps must cover at least one macro step");
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return bad("cold_start_fraction must be in [0, 1]");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        self.rqvae_config().validate()?;
        self.prior_config().validate()?;
        self.planner_config().validate()?;
        Ok(())
    }

    pub fn rqvae_config(&self) -> RqVaeConfig {
        RqVaeConfig {
            obs_dim: 6,
            act_dim: 2,
            macro_len: self.macro_len,
            context_len: self.context_len,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
            weights: LossWeights {
                alpha_tail: self.alpha_tail,
                alpha_ctx: self.alpha_ctx,
                beta_ps: self.beta,
            },
            ema_decay: self.ema_decay,
            dead_code_patience: self.dead_code_patience,
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            width: self.prior_width,
            heads: self.prior_heads,
            layers: self.prior_layers,
            ffn: self.prior_ffn,
            head_width: self.head_width,
            head_layers: self.head_layers,
            ..PriorConfig::new(self.codebook_size, self.depth, self.latent_dim, 6, self.context_len)
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            coarse_samples: self.coarse_samples,
            completions: self.completions,
            lookahead: self.lookahead,
            proposals: self.proposals,
            horizon: self.horizon,
            keep_fraction: self.keep_fraction,
            temperatures: self.temperatures.clone(),
            truncations: self.truncations.clone(),
            c1: self.c1,
            c2: self.c2,
            prior_temperature: self.prior_temperature,
            iterations: self.iterations,
            top_k: self.top_k,
            gamma: self.gamma,
            per_sample_children: self.per_sample_children,
            action_bound: 1.0,
        }
    }

    pub fn env_config(&self) -> itap::envs::PointMassConfig {
        itap::envs::PointMassConfig {
            f_scale: self.f_scale,
            max_steps: self.max_steps,
            ..Default::default()
        }
    }
}
