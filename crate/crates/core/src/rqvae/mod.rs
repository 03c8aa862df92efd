//! Residual-quantized autoencoder over masked macro-token chunks.
//!
//! Each token's encoder feature `z` is quantized coarse-to-fine: depth `ℓ` picks the code
//! nearest to the running residual, so the partial sums `ẑ^(1..D)` refine one another and
//! `D` codes from a shared `K`-entry codebook address up to `K^D` latents.

mod codebook;
mod model;
mod scaler;

pub use codebook::{Codebook, CodebookState};
pub use model::{
    rqvae_loss, straight_through, DecodeRequest, DecodedTail, LossBreakdown, LossWeights, RqVaeConfig,
    RqVaeModel,
};
pub use scaler::Standardizer;

use crate::error::{ItapError, Result};

/// Depth-ordered code indices for one macro step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeStack(Vec<usize>);

impl CodeStack {
    pub fn new(indices: Vec<usize>) -> Self {
        CodeStack(indices)
    }

    /// Build a stack, checking every index against the codebook size.
    pub fn checked(indices: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= codebook_size) {
            return Err(ItapError::IndexOutOfRange {
                index: bad,
                size: codebook_size,
            });
        }
        Ok(CodeStack(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, depth: usize) -> usize {
        self.0[depth]
    }

    pub fn prefix(&self, depth: usize) -> &[usize] {
        &self.0[..depth]
    }
}

impl From<Vec<usize>> for CodeStack {
    fn from(v: Vec<usize>) -> Self {
        CodeStack(v)
    }
}

/// Output of quantizing one vector to depth `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub stack: CodeStack,
    /// `partial_sums[ℓ]` is `ẑ^(ℓ+1)`.
    pub partial_sums: Vec<Vec<f64>>,
    pub final_residual: Vec<f64>,
}

impl QuantizationResult {
    pub fn final_value(&self) -> &[f64] {
        self.partial_sums.last().map_or(&[], Vec::as_slice)
    }

    /// Residual entering depth `ℓ` (0-based): `z − ẑ^(ℓ)`, with `ẑ^(0) = 0`.
    pub fn residual_before(&self, z: &[f64], depth: usize) -> Vec<f64> {
        match depth {
            0 => z.to_vec(),
            d => z.iter().zip(&self.partial_sums[d - 1]).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Greedy coarse-to-fine quantization of `z` against a shared codebook.
pub fn residual_quantize(z: &[f64], codebook: &Codebook, depth: usize) -> Result<QuantizationResult> {
    if z.len() != codebook.dim() {
        return Err(ItapError::LengthMismatch {
            expected: codebook.dim(),
            actual: z.len(),
        });
    }
    if depth == 0 {
        return Err(ItapError::invalid("quantization depth must be at least 1"));
    }
    let mut residual = z.to_vec();
    let mut acc = vec![0.0; z.len()];
    let mut indices = Vec::with_capacity(depth);
    let mut partial_sums = Vec::with_capacity(depth);
    for _ in 0..depth {
        let k = codebook.nearest(&residual);
        let e = codebook.entry(k);
        for i in 0..acc.len() {
            acc[i] += e[i];
            residual[i] -= e[i];
        }
        indices.push(k);
        partial_sums.push(acc.clone());
    }
    Ok(QuantizationResult {
        stack: CodeStack(indices),
        partial_sums,
        final_residual: residual,
    })
}

/// Sum of the codebook entries addressed by a stack.
pub fn stack_value(stack: &CodeStack, codebook: &Codebook) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; codebook.dim()];
    for &k in stack.indices() {
        if k >= codebook.size() {
            return Err(ItapError::IndexOutOfRange {
                index: k,
                size: codebook.size(),
            });
        }
        acc.iter_mut().zip(codebook.entry(k)).for_each(|(a, e)| *a += e);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn scalar_book(values: &[f64]) -> Codebook {
        Codebook::from_entries(values.iter().map(|&v| vec![v]).collect(), 0.99).unwrap()
    }

    /// Per-depth nearest neighbour by exhaustive scan, written independently of
    /// `Codebook::nearest`.
    fn oracle(z: &[f64], entries: &[Vec<f64>], depth: usize) -> (Vec<usize>, Vec<f64>) {
        let mut r = z.to_vec();
        let mut picks = Vec::new();
        for _ in 0..depth {
            let dists: Vec<f64> = entries
                .iter()
                .map(|e| e.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let k = dists.iter().position(|&d| d == min).unwrap();
            r = r.iter().zip(&entries[k]).map(|(a, b)| a - b).collect();
            picks.push(k);
        }
        (picks, r)
    }

    #[test]
    fn scalar_example() {
        let book = scalar_book(&[-1.0, 0.0, 1.0]);
        let q = residual_quantize(&[0.7], &book, 2).unwrap();
        assert_eq!(q.stack.indices(), &[2, 1]);
        assert_eq!(q.partial_sums, vec![vec![1.0], vec![1.0]]);
        assert!((q.final_residual[0] + 0.3).abs() < 1e-12);
        assert_eq!(oracle(&[0.7], book.entries(), 2).0, vec![2, 1]);
    }

    #[test]
    fn exact_entry_match() {
        let book = Codebook::from_entries(vec![vec![0.0, 0.0], vec![1.5, -2.0], vec![3.0, 1.0]], 0.9).unwrap();
        let q = residual_quantize(&[1.5, -2.0], &book, 1).unwrap();
        assert_eq!(q.stack.indices(), &[1]);
        assert_eq!(q.final_residual, vec![0.0, 0.0]);
        assert_eq!(q.final_value(), &[1.5, -2.0]);

        let q = residual_quantize(&[3.0, 1.0], &book, 3).unwrap();
        assert_eq!(q.stack.indices(), &[2, 0, 0]);
        assert_eq!(q.final_value(), &[3.0, 1.0]);
    }

    #[test]
    fn capacity_reaches_k_to_the_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 2..=4usize {
            for d in 1..=3usize {
                // Generic codebook with incommensurate scales so every stack is reachable.
                let entries: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let book = Codebook::from_entries(entries.clone(), 0.9).unwrap();
                let mut finals = HashSet::new();
                let mut paths = HashSet::new();
                let total = k.pow(d as u32);
                for code in 0..total {
                    let mut c = code;
                    let stack: Vec<usize> = (0..d)
                        .map(|_| {
                            let i = c % k;
                            c /= k;
                            i
                        })
                        .collect();
                    let mut acc = vec![0.0; 2];
                    let mut path = Vec::new();
                    for &i in &stack {
                        acc.iter_mut().zip(&entries[i]).for_each(|(a, e)| *a += e);
                        path.extend(acc.iter().map(|x| x.to_bits()));
                    }
                    paths.insert(path);
                    let v = stack_value(&CodeStack::new(stack), &book).unwrap();
                    finals.insert(v.iter().map(|x| (x * 1e9).round() as i64).collect::<Vec<_>>());
                }
                // Every stack yields its own sequence of partial sums.
                assert_eq!(paths.len(), total, "k={k} d={d}");
                // Sums are order-independent, so distinct multisets bound the count.
                let multisets = binomial(k + d - 1, d);
                assert_eq!(finals.len(), multisets, "k={k} d={d}");
                assert!(multisets <= total);
            }
        }
    }

    fn binomial(n: usize, r: usize) -> usize {
        (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn depth_monotonicity_on_fixed_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries = vec![vec![0.0; 3]];
        entries.extend((1..16).map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect()));
        let book = Codebook::from_entries(entries, 0.9).unwrap();
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut prev = f64::INFINITY;
        for d in 1..=5 {
            let mse = data
                .iter()
                .map(|z| {
                    let q = residual_quantize(z, &book, d).unwrap();
                    q.final_residual.iter().map(|r| r * r).sum::<f64>()
                })
                .sum::<f64>()
                / data.len() as f64;
            assert!(mse <= prev + 1e-12, "depth {d}: {mse} > {prev}");
            prev = mse;
        }
    }

    #[test]
    fn wrong_dim_rejected() {
        let book = scalar_book(&[0.0, 1.0]);
        assert!(matches!(
            residual_quantize(&[0.0, 1.0], &book, 1),
            Err(ItapError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn partial_sums_are_exact_and_residual_shrinks(
            entries in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 1..6),
            z in proptest::collection::vec(-3.0f64..3.0, 2),
            depth in 1usize..5,
        ) {
            let mut all = vec![vec![0.0, 0.0]];
            all.extend(entries);
            let book = Codebook::from_entries(all.clone(), 0.9).unwrap();
            let q = residual_quantize(&z, &book, depth).unwrap();
            let (picks, residual) = oracle(&z, &all, depth);
            prop_assert_eq!(q.stack.indices(), picks.as_slice());
            prop_assert_eq!(&q.final_residual, &residual);
            let mut prev = vec![0.0, 0.0];
            let mut prev_norm = z.iter().map(|v| v * v).sum::<f64>();
            for (l, ps) in q.partial_sums.iter().enumerate() {
                let e = book.entry(q.stack.get(l));
                let expect: Vec<f64> = prev.iter().zip(e).map(|(a, b)| a + b).collect();
                prop_assert_eq!(ps, &expect);
                let r = q.residual_before(&z, l + 1);
                let norm = r.iter().map(|v| v * v).sum::<f64>();
                prop_assert!(norm <= prev_norm + 1e-12);
                prev_norm = norm;
                prev = ps.clone();
            }
        }
    }
}
