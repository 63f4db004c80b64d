use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Array2<T>,
    /// Receives decoupled weight decay (linear weights only).
    pub decay: bool,
    /// Excluded from optimizer updates.
    pub frozen: bool,
}

/// Flat, ordered registry of every trainable tensor of a model.
///
/// Registration order is the canonical order used by checkpoints and the
/// optimizer. Vectors are stored as `1 × n` matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay, frozen: false });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform `in × out` weight matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || T::from_f64_lossy(rng.gen_range(-limit..limit)));
        self.add(name, w, true)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let w = Array2::from_shape_simple_fn((rows, cols), || T::from_f64_lossy(std * standard_normal(rng)));
        self.add(name, w, false)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), T::from_f64_lossy(value)), false)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads { values: self.entries.iter().map(|e| Array2::zeros(e.value.raw_dim())).collect() }
    }

    pub fn set_frozen(&mut self, ids: impl IntoIterator<Item = ParamId>, frozen: bool) {
        for id in ids {
            self.entries[id.0].frozen = frozen;
        }
    }
}

/// Gradient buffers laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Array2<T>>,
}

impl<T: Scalar> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
