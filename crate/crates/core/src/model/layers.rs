//! Dense building blocks with hand-written backward passes.
//!
//! Every layer reads its parameters from a [`ParamStore`] and accumulates
//! parameter gradients into a matching [`Grads`] buffer. Activations are
//! row-major `tokens × features` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng);
        let b = ps.add_const(format!("{name}.bias"), 1, out_dim, 0.0);
        Self { w, b, in_dim, out_dim }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(ps.get(self.w));
        y += ps.get(self.b);
        y
    }

    /// Accumulates dW, db and returns dx.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        self.backward_params(g, x, dy);
        dy.dot(&ps.get(self.w).t())
    }

    /// Accumulates dW, db only (input gradient not needed).
    pub fn backward_params<T: Scalar>(&self, g: &mut Grads<T>, x: &Array2<T>, dy: &Array2<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), g.get_mut(self.w));
        let gb = g.get_mut(self.b);
        gb.row_mut(0).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add_const(format!("{name}.gamma"), 1, dim, 1.0);
        let beta = ps.add_const(format!("{name}.beta"), 1, dim, 0.0);
        Self { gamma, beta, dim }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::from_usize_lossy(self.dim);
        let eps = lit::<T>(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut y = &xhat * ps.get(self.gamma);
        y += ps.get(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, cache: &LayerNormCache<T>, dy: &Array2<T>) -> Array2<T> {
        let gamma = ps.get(self.gamma);
        g.get_mut(self.gamma).row_mut(0).scaled_add(T::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
        g.get_mut(self.beta).row_mut(0).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
        let n = T::from_usize_lossy(self.dim);
        let mut dx = dy * gamma;
        for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let sum = row.sum();
            let dot = row.iter().zip(xh.iter()).fold(T::zero(), |a, (&d, &h)| a + d * h);
            Zip::from(&mut row).and(&xh).for_each(|d, &h| {
                *d = is * (*d - sum / n - h * dot / n);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let (c, k, half) = (lit::<T>(GELU_C), lit::<T>(GELU_K), lit::<T>(0.5));
    x.mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let (c, k, half, three) = (lit::<T>(GELU_C), lit::<T>(GELU_K), lit::<T>(0.5), lit::<T>(3.0));
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        let t = (c * (v + k * v * v * v)).tanh();
        let grad = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
        *d = *d * grad;
    });
    out
}

/// Two fully connected layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(ps, x);
        let act = gelu(&pre);
        let y = self.fc2.forward(ps, &act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, cache: &MlpCache<T>, dy: &Array2<T>) -> Array2<T> {
        let dact = self.fc2.backward(ps, g, &cache.act, dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(ps, g, &cache.x, &dpre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn numeric_check<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "coord {i}: numeric {num} analytic {a}");
        }
    }

    fn weights(rows: usize, cols: usize, salt: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| (((i * 31 + j * 17 + salt) % 23) as f64 - 11.0) / 9.0)
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        let x = weights(3, 5, 1);
        let w = weights(3, 5, 4);
        let loss = |x: &Array2<f64>| (gelu(x) * &w).sum();
        numeric_check(loss, &x, &gelu_backward(&x, &w));
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        ps.entries_mut()[0].value = weights(1, 6, 3);
        let x = weights(4, 6, 2);
        let w = weights(4, 6, 9);
        let loss = |x: &Array2<f64>| (ln.forward(&ps, x).0 * &w).sum();
        let (_, cache) = ln.forward(&ps, &x);
        let mut g = ps.zeros_like();
        let dx = ln.backward(&ps, &mut g, &cache, &w);
        numeric_check(loss, &x, &dx);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 8);
        let (y, _) = ln.forward(&ps, &weights(3, 8, 5));
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mlp_input_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = seed::rng(&[1]);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", 4, 7, 3);
        let x = weights(2, 4, 7);
        let w = weights(2, 3, 1);
        let loss = |x: &Array2<f64>| (mlp.forward(&ps, x).0 * &w).sum();
        let (_, cache) = mlp.forward(&ps, &x);
        let mut g = ps.zeros_like();
        let dx = mlp.backward(&ps, &mut g, &cache, &w);
        numeric_check(loss, &x, &dx);
    }
}
