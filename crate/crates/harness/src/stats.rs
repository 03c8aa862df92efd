//! Paired comparison of seed means.

use statrs::distribution::{Binomial, DiscreteCDF};

#[derive(Debug, Clone, PartialEq)]
pub struct SignTest {
    /// Pairs where the treatment beat the baseline.
    pub wins: usize,
    /// Pairs with a nonzero difference.
    pub trials: usize,
    /// One-sided `P(X >= wins)` under `X ~ Binomial(trials, 1/2)`.
    pub p_value: f64,
}

/// One-sided sign test that `treatment` exceeds `baseline`, pairing entries by index.
/// Ties are dropped.
pub fn sign_test(treatment: &[f64], baseline: &[f64]) -> SignTest {
    let diffs: Vec<f64> = treatment
        .iter()
        .zip(baseline)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let trials = diffs.len();
    let p_value = if trials == 0 || wins == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, trials as u64).expect("valid binomial");
        1.0 - dist.cdf(wins as u64 - 1)
    };
    SignTest { wins, trials, p_value }
}
