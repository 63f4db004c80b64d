use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs. Self-attention passes the same matrix twice.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T> {
    q_in: Array2<T>,
    kv_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per head, `queries × keys` softmax weights.
    pub weights: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(ps, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, q_in: &Array2<T>, kv_in: &Array2<T>) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q.forward(ps, q_in);
        let k = self.k.forward(ps, kv_in);
        let v = self.v.forward(ps, kv_in);
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut ctx = Array2::zeros((q.nrows(), self.dim));
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            weights.push(scores);
        }
        let out = self.o.forward(ps, &ctx);
        (out, AttentionCache { q_in: q_in.clone(), kv_in: kv_in.clone(), q, k, v, weights, ctx })
    }

    /// Returns `(d q_in, d kv_in)`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &AttentionCache<T>,
        dout: &Array2<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dctx = self.o.backward(ps, g, &cache.ctx, dout);
        let dh = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            // softmax backward: ds = a * (da - rowsum(da * a))
            let row_dot = (&da * a).sum_axis(Axis(1));
            let mut ds = da;
            for ((mut row, arow), &rd) in ds.rows_mut().into_iter().zip(a.rows()).zip(row_dot.iter()) {
                row.zip_mut_with(&arow, |d, &w| *d = w * (*d - rd) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dq_in = self.q.backward(ps, g, &cache.q_in, &dq);
        let mut dkv_in = self.k.backward(ps, g, &cache.kv_in, &dk);
        dkv_in += &self.v.backward(ps, g, &cache.kv_in, &dv);
        (dq_in, dkv_in)
    }
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}
