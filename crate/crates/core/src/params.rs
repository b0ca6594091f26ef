//! Named parameter storage with gradient buffers and seeded initialization.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

/// One named tensor with a gradient buffer of identical shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Non-trainable entries (batch-norm running statistics) are checkpointed
    /// but skipped by the optimizer and never receive gradients.
    pub trainable: bool,
}

/// Insertion-ordered parameter store. The order is part of the checkpoint
/// contract: serializing the same store twice yields identical bytes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Result<()> {
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::config(format!(
                "parameter {name}: shape {shape:?} needs {n} values, got {}",
                value.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            grad: vec![0.0; value.len()],
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::State(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::State(format!("unknown parameter: {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate named gradients produced by a backward pass. Repeated calls
    /// without [`ParamStore::zero_grads`] keep accumulating.
    pub fn accumulate_grads(&mut self, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if g.len() != p.grad.len() {
                return Err(Error::config(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.grad.len()
                )));
            }
            for (dst, src) in p.grad.iter_mut().zip(g.iter()) {
                *dst += src;
            }
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Seeded initializer handing out fan-in-scaled uniform draws.
///
/// Zero-initialized tensors consume no draws, so adding or removing
/// zero-initialized parameters (offset predictors) does not shift the values
/// assigned to every other parameter under the same seed.
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    /// Uniform in `(-a, a)` with `a = 1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        (0..n).map(|_| self.rng.gen_range(-a..a)).collect()
    }
}
