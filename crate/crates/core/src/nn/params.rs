use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Contiguous range of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    #[inline]
    pub fn of<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, values: &'a mut [f64]) -> &'a mut [f64] {
        &mut values[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Buffers (batch-norm running statistics) are stored and checkpointed
    /// but never touched by the optimiser.
    #[serde(default = "default_trainable")]
    pub trainable: bool,
}

fn default_trainable() -> bool {
    true
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with Adam moments, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            manifest: Vec::new(),
            values: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, name: &str, shape: &[usize], trainable: bool, values: Vec<f64>) -> Span {
        let span = Span {
            offset: self.values.len(),
            len: values.len(),
        };
        self.manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            trainable,
        });
        self.values.extend(values);
        self.adam_m.resize(self.values.len(), 0.0);
        self.adam_v.resize(self.values.len(), 0.0);
        span
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Span {
        let n = shape.iter().product();
        self.push(name, shape, true, vec![value; n])
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Span {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        self.push(name, shape, true, values)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Span {
        let n = shape.iter().product();
        self.push(name, shape, false, vec![value; n])
    }

    pub fn span(&self, name: &str) -> Option<Span> {
        let mut offset = 0;
        for e in &self.manifest {
            if e.name == name {
                return Some(Span {
                    offset,
                    len: e.len(),
                });
            }
            offset += e.len();
        }
        None
    }

    /// Spans of trainable entries.
    pub fn trainable_spans(&self) -> Vec<Span> {
        let mut offset = 0;
        let mut out = Vec::new();
        for e in &self.manifest {
            if e.trainable {
                out.push(Span {
                    offset,
                    len: e.len(),
                });
            }
            offset += e.len();
        }
        out
    }

    /// Flat indices of trainable entries.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.trainable_spans()
            .iter()
            .flat_map(|s| s.offset..s.offset + s.len)
            .collect()
    }

    /// Values of trainable entries only, in manifest order.
    pub fn trainable_values(&self) -> Vec<f64> {
        self.trainable_spans()
            .iter()
            .flat_map(|s| s.of(&self.values).iter().copied())
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Replaces values from a checkpoint with a matching manifest.
    pub fn load_values(&mut self, manifest: &[ManifestEntry], values: Vec<f64>) -> Result<()> {
        let same = manifest.len() == self.manifest.len()
            && manifest
                .iter()
                .zip(&self.manifest)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same || values.len() != self.values.len() {
            return Err(Error::shape(
                "checkpoint manifest does not match the network layout",
            ));
        }
        self.values = values;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every trainable entry.
pub fn adam_step(store: &mut ParamStore, grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for span in store.trainable_spans() {
        for i in span.offset..span.offset + span.len {
            let g = grads[i];
            let m = cfg.beta1 * store.adam_m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * store.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            store.adam_m[i] = m;
            store.adam_v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            store.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut r = rng::seeded(1, 1);
        s.add_normal("w", &[2, 3], 1.0, &mut r);
        s.add_buffer("running", &[2], 0.5);
        s.add_constant("b", &[2], 0.0);
        s
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = store();
        let before = s.values.clone();
        let zeros = vec![0.0; s.len()];
        adam_step(&mut s, &zeros, &AdamConfig::default()).unwrap();
        assert_eq!(s.values, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn single_step_matches_scalar_oracle() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        s.add_constant("x", &[1], 0.0);
        let g = 0.37;
        adam_step(&mut s, &[g], &cfg).unwrap();
        // m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let expected =
            -cfg.lr * (m / (1.0 - cfg.beta1)) / ((v / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert!((s.values[0] - expected).abs() < 1e-15);
        assert!((s.values[0] + cfg.lr * g / (g + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_not_optimised() {
        let mut s = store();
        let grads = vec![1.0; s.len()];
        adam_step(&mut s, &grads, &AdamConfig::default()).unwrap();
        let running = s.span("running").unwrap();
        assert_eq!(running.of(&s.values), &[0.5, 0.5]);
        assert!(s.span("b").unwrap().of(&s.values).iter().all(|&v| v < 0.0));
    }

    #[test]
    fn identical_states_step_identically() {
        let mut a = store();
        let mut b = store();
        let grads: Vec<f64> = (0..a.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        adam_step(&mut a, &grads, &AdamConfig::default()).unwrap();
        adam_step(&mut b, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut s = store();
        assert!(matches!(
            adam_step(&mut s, &[0.0], &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
