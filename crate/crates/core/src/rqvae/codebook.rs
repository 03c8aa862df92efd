use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ItapError, Result};

const LAPLACE_EPS: f64 = 1e-5;

/// Shared codebook with exponential-moving-average statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Vec<f64>>,
    ema_cluster_size: Vec<f64>,
    ema_embed_sum: Vec<Vec<f64>>,
    decay: f64,
    usage_counts: Vec<u64>,
    batches_unused: Vec<u32>,
    pin_zero: bool,
    initialized: bool,
}

/// Raw codebook state, used for persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookState {
    pub entries: Vec<Vec<f64>>,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sum: Vec<Vec<f64>>,
    pub decay: f64,
    pub usage_counts: Vec<u64>,
    pub batches_unused: Vec<u32>,
    pub pin_zero: bool,
    pub initialized: bool,
}

impl Codebook {
    /// Uninitialized codebook of `size` zero vectors; call [`Codebook::initialize_from`]
    /// with the first batch of encoder outputs.
    pub fn new(size: usize, dim: usize, decay: f64) -> Result<Self> {
        if size < 2 {
            return Err(ItapError::invalid(format!("codebook needs K >= 2, got {size}")));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(ItapError::invalid(format!("decay must be in [0,1), got {decay}")));
        }
        Ok(Codebook {
            entries: vec![vec![0.0; dim]; size],
            ema_cluster_size: vec![0.0; size],
            ema_embed_sum: vec![vec![0.0; dim]; size],
            decay,
            usage_counts: vec![0; size],
            batches_unused: vec![0; size],
            pin_zero: true,
            initialized: false,
        })
    }

    /// Codebook with the given entries and unit running statistics. No entry is pinned.
    pub fn from_entries(entries: Vec<Vec<f64>>, decay: f64) -> Result<Self> {
        let dim = entries.first().map_or(0, Vec::len);
        if entries.iter().any(|e| e.len() != dim) {
            return Err(ItapError::shape("codebook", "entries have different widths"));
        }
        let mut book = Codebook::new(entries.len(), dim, decay)?;
        book.ema_cluster_size = vec![1.0; entries.len()];
        book.ema_embed_sum = entries.clone();
        book.entries = entries;
        book.pin_zero = false;
        book.initialized = true;
        Ok(book)
    }

    pub fn from_state(state: CodebookState) -> Result<Self> {
        let k = state.entries.len();
        let dim = state.entries.first().map_or(0, Vec::len);
        if k < 2
            || state.ema_cluster_size.len() != k
            || state.ema_embed_sum.len() != k
            || state.usage_counts.len() != k
            || state.batches_unused.len() != k
            || state
                .entries
                .iter()
                .chain(&state.ema_embed_sum)
                .any(|e| e.len() != dim)
        {
            return Err(ItapError::shape("codebook", "inconsistent codebook state"));
        }
        Ok(Codebook {
            entries: state.entries,
            ema_cluster_size: state.ema_cluster_size,
            ema_embed_sum: state.ema_embed_sum,
            decay: state.decay,
            usage_counts: state.usage_counts,
            batches_unused: state.batches_unused,
            pin_zero: state.pin_zero,
            initialized: state.initialized,
        })
    }

    pub fn state(&self) -> CodebookState {
        CodebookState {
            entries: self.entries.clone(),
            ema_cluster_size: self.ema_cluster_size.clone(),
            ema_embed_sum: self.ema_embed_sum.clone(),
            decay: self.decay,
            usage_counts: self.usage_counts.clone(),
            batches_unused: self.batches_unused.clone(),
            pin_zero: self.pin_zero,
            initialized: self.initialized,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].len()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k]
    }

    pub fn ema_cluster_size(&self) -> &[f64] {
        &self.ema_cluster_size
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Nearest entry by squared distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.iter().enumerate() {
            let d: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Seed entries from encoder outputs. Entry 0 is the zero vector; the rest are drawn
    /// without replacement from `samples`, cycling with small jitter if there are fewer
    /// samples than entries.
    pub fn initialize_from<R: Rng + ?Sized>(&mut self, samples: &[Vec<f64>], rng: &mut R) -> Result<()> {
        if samples.is_empty() {
            return Err(ItapError::InsufficientData("no samples to seed codebook".into()));
        }
        let dim = self.dim();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let start = usize::from(self.pin_zero);
        for (i, k) in (start..self.size()).enumerate() {
            let src = &samples[order[i % order.len()]];
            if src.len() != dim {
                return Err(ItapError::LengthMismatch {
                    expected: dim,
                    actual: src.len(),
                });
            }
            let jitter = if i >= order.len() { 1e-3 } else { 0.0 };
            self.entries[k] = src.iter().map(|v| v + jitter * rng.gen_range(-1.0..1.0)).collect();
        }
        if self.pin_zero {
            self.entries[0] = vec![0.0; dim];
        }
        self.ema_cluster_size = vec![1.0; self.size()];
        self.ema_embed_sum = self.entries.clone();
        self.batches_unused = vec![0; self.size()];
        self.initialized = true;
        Ok(())
    }

    /// One EMA step from `(code, residual)` assignments collected over a batch.
    pub fn ema_update(&mut self, assigned: &[(usize, Vec<f64>)]) -> Result<()> {
        let k_total = self.size();
        let dim = self.dim();
        let mut counts = vec![0.0; k_total];
        let mut sums = vec![vec![0.0; dim]; k_total];
        for (k, v) in assigned {
            if *k >= k_total {
                return Err(ItapError::IndexOutOfRange {
                    index: *k,
                    size: k_total,
                });
            }
            if v.len() != dim {
                return Err(ItapError::LengthMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            counts[*k] += 1.0;
            sums[*k].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        let d = self.decay;
        for k in 0..k_total {
            self.ema_cluster_size[k] = d * self.ema_cluster_size[k] + (1.0 - d) * counts[k];
            for (e, s) in self.ema_embed_sum[k].iter_mut().zip(&sums[k]) {
                *e = d * *e + (1.0 - d) * s;
            }
            self.usage_counts[k] += counts[k] as u64;
            if counts[k] > 0.0 {
                self.batches_unused[k] = 0;
            } else {
                self.batches_unused[k] = self.batches_unused[k].saturating_add(1);
            }
        }
        let n: f64 = self.ema_cluster_size.iter().sum();
        for k in 0..k_total {
            if self.pin_zero && k == 0 {
                continue;
            }
            let smoothed = (self.ema_cluster_size[k] + LAPLACE_EPS) / (n + k_total as f64 * LAPLACE_EPS) * n;
            let denom = smoothed.max(LAPLACE_EPS);
            for (e, s) in self.entries[k].iter_mut().zip(&self.ema_embed_sum[k]) {
                *e = s / denom;
            }
        }
        Ok(())
    }

    /// Re-seed every code unused for at least `patience` consecutive batches to a random
    /// vector from `pool`. Returns the re-seeded indices.
    pub fn reseed_dead_codes<R: Rng + ?Sized>(
        &mut self,
        pool: &[Vec<f64>],
        patience: u32,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut reseeded = Vec::new();
        if pool.is_empty() {
            return reseeded;
        }
        for k in 0..self.size() {
            if (self.pin_zero && k == 0) || self.batches_unused[k] < patience {
                continue;
            }
            let v = pool[rng.gen_range(0..pool.len())].clone();
            self.ema_embed_sum[k] = v.clone();
            self.ema_cluster_size[k] = 1.0;
            self.entries[k] = v;
            self.batches_unused[k] = 0;
            reseeded.push(k);
        }
        reseeded
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_breaks_ties_low() {
        let book = Codebook::from_entries(vec![vec![-1.0], vec![1.0], vec![3.0]], 0.9).unwrap();
        assert_eq!(book.nearest(&[0.0]), 0);
        assert_eq!(book.nearest(&[2.0]), 1);
        assert_eq!(book.nearest(&[2.2]), 2);
    }

    #[test]
    fn full_replacement_with_zero_decay() {
        let mut book = Codebook::from_entries(vec![vec![0.0, 0.0], vec![5.0, 5.0]], 0.0).unwrap();
        book.ema_update(&[(1, vec![0.25, -3.0])]).unwrap();
        assert!((book.entry(1)[0] - 0.25).abs() < 1e-4);
        assert!((book.entry(1)[1] + 3.0).abs() < 1e-4);
    }

    #[test]
    fn hand_evaluated_decay_step() {
        let mut book = Codebook::from_entries(vec![vec![0.0], vec![7.0]], 0.99).unwrap();
        book.ema_update(&[(0, vec![1.0])]).unwrap();
        let expected = (0.99 * 0.0 + 0.01 * 1.0) / (0.99 * 1.0 + 0.01 * 1.0);
        assert!((book.entry(0)[0] - expected).abs() < 1e-4);
        assert!((book.entry(0)[0] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn unassigned_entry_stays_put() {
        let mut book = Codebook::from_entries(vec![vec![0.3], vec![-2.0]], 0.9).unwrap();
        for _ in 0..5 {
            book.ema_update(&[(0, vec![0.3])]).unwrap();
        }
        assert!((book.entry(1)[0] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn data_init_pins_zero_and_dead_codes_reseed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut book = Codebook::new(4, 2, 0.99).unwrap();
        let samples: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 + 1.0, 1.0]).collect();
        book.initialize_from(&samples, &mut rng).unwrap();
        assert_eq!(book.entry(0), &[0.0, 0.0]);
        assert!(book.entries()[1..].iter().all(|e| samples.contains(e)));
        for _ in 0..100 {
            book.ema_update(&[(1, book.entry(1).to_vec())]).unwrap();
        }
        assert_eq!(book.entry(0), &[0.0, 0.0]);
        let pool = vec![vec![42.0, 42.0]];
        let reseeded = book.reseed_dead_codes(&pool, 100, &mut rng);
        assert_eq!(reseeded, vec![2, 3]);
        assert_eq!(book.entry(2), &[42.0, 42.0]);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(Codebook::new(1, 3, 0.9).is_err());
        assert!(Codebook::new(4, 3, 1.0).is_err());
    }
}
