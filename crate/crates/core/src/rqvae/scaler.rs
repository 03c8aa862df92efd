use crate::error::{ItapError, Result};

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-6;

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Fit from feature rows. Constant features keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| ItapError::InsufficientData("no rows to fit standardizer".into()))?;
        let width = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            if r.len() != width {
                return Err(ItapError::LengthMismatch {
                    expected: width,
                    actual: r.len(),
                });
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; width];
        for r in rows {
            for j in 0..width {
                var[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() < MIN_STD { 1.0 } else { v.sqrt() })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }

    /// Standardize a range of features starting at `offset`.
    pub fn apply_range(&self, values: &[f64], offset: usize) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[offset + i]) / self.std[offset + i])
            .collect()
    }

    /// Map a range of features, starting at `offset`, back to raw units.
    pub fn invert_range(&self, values: &[f64], offset: usize) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.std[offset + i] + self.mean[offset + i])
            .collect()
    }
}
