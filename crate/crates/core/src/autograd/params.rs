use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Values are kept representable in 32-bit floating point (see
/// [`quantize`]) so checkpoints round-trip bit-exactly while arithmetic runs
/// in 64-bit.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    frozen: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

/// Rounds to the nearest 32-bit float.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Values are quantized to 32-bit precision.
    ///
    /// Panics on duplicate names; names are fixed by model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.mapv(quantize));
        self.frozen.push(false);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    /// Replaces a tensor's value, checking its shape.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        if value.dim() != self.values[id.0].dim() {
            return Err(Error::shape(
                "model",
                format!("parameter {} expects {:?}, got {:?}", self.names[id.0], self.values[id.0].dim(), value.dim()),
            ));
        }
        self.values[id.0] = value.mapv(quantize);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes every parameter whose name does not satisfy `keep_trainable`.
    pub fn freeze_except(&mut self, keep_trainable: impl Fn(&str) -> bool) {
        for i in 0..self.values.len() {
            self.frozen[i] = !keep_trainable(&self.names[i]);
        }
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Order-sensitive FNV-1a digest over names and 32-bit value bits of the
    /// parameters selected by `filter`.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, value) in self.names.iter().zip(&self.values) {
            if !filter(name) {
                continue;
            }
            eat(name.as_bytes());
            for x in value.iter() {
                eat(&(*x as f32).to_le_bytes());
            }
        }
        h
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Samples from a normal distribution truncated to `[lo, hi]` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    assert!(lo < hi, "truncated_normal: empty interval");
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = mean + std * z;
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

pub fn truncated_normal_matrix(rng: &mut impl Rng, shape: (usize, usize), mean: f64, std: f64, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| truncated_normal(rng, mean, std, lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_are_quantized_on_insert() {
        let mut s = ParamStore::new();
        let id = s.add("w", Array2::from_elem((1, 1), 0.1));
        assert_eq!(s.value(id)[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = truncated_normal_matrix(&mut rng, (64, 64), 0.0, 0.02, -0.04, 0.04);
        assert!(m.iter().all(|x| (-0.04..=0.04).contains(x)));
    }

    #[test]
    fn digest_depends_on_selected_values_only() {
        let mut s = ParamStore::new();
        let a = s.add("saa.w", Array2::zeros((2, 2)));
        s.add("enc.w", Array2::zeros((2, 2)));
        let before = s.digest(|n| !n.starts_with("saa"));
        s.value_mut(a)[[0, 0]] = 1.0;
        assert_eq!(before, s.digest(|n| !n.starts_with("saa")));
        assert_ne!(s.digest(|_| true), {
            s.value_mut(a)[[0, 0]] = 0.0;
            s.digest(|_| true)
        });
    }
}
