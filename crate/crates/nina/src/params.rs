//! Trainable parameter storage, shared by every model in the crate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Post-step projection bounds (used for the PLU log-scale clamp).
    pub clamp: Option<(f64, f64)>,
}

/// Flat registry of all trainable tensors of one model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            clamp: None,
        });
        id
    }

    pub fn alloc_clamped(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        lo: f64,
        hi: f64,
    ) -> ParamId {
        let id = self.alloc(name, value);
        self.entries[id.0].clamp = Some((lo, hi));
        id
    }

    /// Zero-initialized parameter.
    pub fn alloc_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.alloc(name, Tensor::zeros(shape))
    }

    /// Gaussian init scaled by 1/sqrt(fan_in).
    pub fn alloc_gaussian(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..n).map(|_| gauss(rng) * std).collect();
        self.alloc(name, Tensor::new(shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn apply_clamps(&mut self) {
        for e in &mut self.entries {
            if let Some((lo, hi)) = e.clamp {
                for v in &mut e.value.data {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }
}

/// Box-Muller standard normal draw.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
