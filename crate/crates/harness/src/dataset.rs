//! Offline dataset file: `ITAP` magic, version 1, little-endian 32-bit fields, trailing CRC32.
//!
//! ```text
//! "ITAP" | u32 version | u32 obs_dim | u32 act_dim | f32 gamma | u32 episodes
//! per episode: u32 length | f32 regime_label | length × (obs f32s, action f32s, reward f32)
//! u32 crc32 of all preceding bytes
//! ```

use std::path::Path;

use itap::trajectory::Episode;

use crate::binio::{verify_envelope, Reader, Writer};
use crate::error::{HarnessError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"ITAP";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub gamma: f64,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(obs_dim: usize, act_dim: usize, gamma: f64, episodes: Vec<Episode>) -> Result<Self> {
        let ds = Dataset {
            obs_dim,
            act_dim,
            gamma,
            episodes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ep) in self.episodes.iter().enumerate() {
            ep.validate()?;
            let widths_ok = ep.observations.iter().all(|o| o.len() == self.obs_dim)
                && ep.actions.iter().all(|a| a.len() == self.act_dim);
            if !widths_ok {
                return Err(HarnessError::Format(format!(
                    "episode {i} does not match dims obs {} act {}",
                    self.obs_dim, self.act_dim
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Copy with every value rounded to 32-bit precision, i.e. what a round trip returns.
    pub fn quantized_to_f32(&self) -> Dataset {
        let r = |v: &f64| *v as f32 as f64;
        Dataset {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            gamma: r(&self.gamma),
            episodes: self
                .episodes
                .iter()
                .map(|e| Episode {
                    observations: e.observations.iter().map(|o| o.iter().map(r).collect()).collect(),
                    actions: e.actions.iter().map(|a| a.iter().map(r).collect()).collect(),
                    rewards: e.rewards.iter().map(r).collect(),
                    regime_label: r(&e.regime_label),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(&DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.len_u32(self.obs_dim)?;
        w.len_u32(self.act_dim)?;
        w.f32(self.gamma);
        w.len_u32(self.episodes.len())?;
        for ep in &self.episodes {
            w.len_u32(ep.len())?;
            w.f32(ep.regime_label);
            for t in 0..ep.len() {
                w.f32s(&ep.observations[t]);
                w.f32s(&ep.actions[t]);
                w.f32(ep.rewards[t]);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verify_envelope(bytes, &DATASET_MAGIC, DATASET_VERSION)?;
        let mut r = Reader::new(body);
        r.take(8)?;
        let obs_dim = r.u32()? as usize;
        let act_dim = r.u32()? as usize;
        let gamma = r.f32()?;
        let count = r.u32()? as usize;
        let step_bytes = 4 * (obs_dim + act_dim + 1);
        let mut episodes = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let label = r.f32()?;
            if len.saturating_mul(step_bytes) > r.remaining() {
                return Err(HarnessError::Corrupt(format!(
                    "episode of {len} steps exceeds the remaining {} bytes",
                    r.remaining()
                )));
            }
            let mut ep = Episode {
                observations: Vec::with_capacity(len),
                actions: Vec::with_capacity(len),
                rewards: Vec::with_capacity(len),
                regime_label: label,
            };
            for _ in 0..len {
                ep.observations.push(r.f32s(obs_dim)?);
                ep.actions.push(r.f32s(act_dim)?);
                ep.rewards.push(r.f32()?);
            }
            episodes.push(ep);
        }
        if r.remaining() != 0 {
            return Err(HarnessError::Corrupt(format!(
                "{} trailing bytes after episode {count}",
                r.remaining()
            )));
        }
        let ds = Dataset {
            obs_dim,
            act_dim,
            gamma,
            episodes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable summary for `inspect`.
    pub fn summary(&self) -> String {
        let mut labels: Vec<f64> = self.episodes.iter().map(|e| e.regime_label).collect();
        labels.sort_by(f64::total_cmp);
        labels.dedup();
        let returns: Vec<f64> = self.episodes.iter().map(Episode::undiscounted_return).collect();
        let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        format!(
            "dataset: {} episodes, {} steps, obs_dim {}, act_dim {}, gamma {}\nregimes: {:?}\nmean return: {mean:.4}\n",
            self.episodes.len(),
            self.total_steps(),
            self.obs_dim,
            self.act_dim,
            self.gamma,
            labels,
        )
    }
}
