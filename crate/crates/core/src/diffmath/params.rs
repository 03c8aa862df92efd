use rand::Rng;

use super::tensor::Tensor;
use crate::error::{ItapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named trainable tensors plus the optimizer's moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    step: u64,
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(count: usize) -> Self {
        ParamGrads {
            grads: vec![None; count],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64], shape: &[usize]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(t) => t
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, g)| *a += g),
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), grad.to_vec()).expect("grad shape"))
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.grads.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![value; n]).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrite values from `(name, tensor)` pairs, checking names and shapes.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, tensor) in values {
            let id = self
                .find(name)
                .ok_or_else(|| ItapError::invalid(format!("unknown parameter {name}")))?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != tensor.shape() {
                return Err(ItapError::shape(
                    "load_values",
                    format!(
                        "{name}: expected {:?}, got {:?}",
                        entry.value.shape(),
                        tensor.shape()
                    ),
                ));
            }
            entry.value = tensor.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ItapError::invalid(format!(
                "missing parameter {}",
                self.entries[missing].name
            )));
        }
        Ok(())
    }

    /// One bias-corrected adaptive-moment update. Parameters without a gradient are left
    /// untouched.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, entry) in self.entries.iter_mut().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let m = entry.first_moment.data_mut();
            let v = entry.second_moment.data_mut();
            let p = entry.value.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Free-function form of [`ParameterStore::adam_step`].
pub fn adam_step(store: &mut ParameterStore, grads: &ParamGrads, cfg: &AdamConfig) {
    store.adam_step(grads, cfg);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = s.add_uniform("w", &[3, 2], 3, &mut rng);
        (s, id)
    }

    fn grads_of(id: ParamId, g: Vec<f64>) -> ParamGrads {
        let mut grads = ParamGrads::empty(1);
        grads.accumulate(id, &g, &[3, 2]);
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        s.adam_step(&grads_of(id, vec![0.0; 6]), &AdamConfig::default());
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        s.adam_step(&grads_of(id, vec![0.37, -2.0, 5.0, 0.1, -0.2, 1.0]), &cfg);
        for (a, b) in s.value(id).data().iter().zip(before.data()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_steps_reproduce() {
        let (mut a, id) = store();
        let mut b = a.clone();
        let g = grads_of(id, vec![0.5, -0.1, 0.2, 0.3, -0.9, 0.0]);
        for _ in 0..2 {
            a.adam_step(&g, &AdamConfig::default());
            b.adam_step(&g, &AdamConfig::default());
        }
        assert_eq!(a, b);
        assert_eq!(a.step(), 2);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let (s, id) = store();
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn clipping_bounds_norm() {
        let (_, id) = store();
        let mut g = grads_of(id, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
