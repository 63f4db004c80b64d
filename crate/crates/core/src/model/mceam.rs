//! Cross-attention fusion of the ROI embedding with context patch embeddings.
//!
//! Each context scale owns a stack of pre-norm blocks. A block lets the query
//! token (initialized to the ROI `[CLS]` embedding `g`) attend over that
//! scale's patch embeddings, then applies a feed-forward sublayer:
//!
//! ```text
//! h  = x + MHA(LN_q(x), LN_kv(p))
//! x' = h + FFN(LN_f(h))            FFN: D -> 4D -> D, GELU
//! ```
//!
//! The fused embedding is `z = Proj([g, a_1, ..., a_|C|])` with a two-layer
//! projection `(|C|+1)·D -> D_z -> D_z`. With no context scales the fusion
//! reduces to `Proj(g)`.

use ndarray::{concatenate, s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{LayerNorm, LayerNormCache, Mlp, MlpCache};
use super::params::{Grads, ParamStore};
use super::ModelError;
use crate::roi_context::ContextScale;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct CrossBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_f: LayerNorm,
    ffn: Mlp,
}

struct CrossBlockCache<T> {
    ln_q: LayerNormCache<T>,
    ln_kv: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln_f: LayerNormCache<T>,
    ffn: MlpCache<T>,
}

/// Stack of cross-attention blocks for one context scale.
#[derive(Debug, Clone)]
pub struct CrossAttentionStack {
    blocks: Vec<CrossBlock>,
    dim: usize,
}

pub struct StackCache<T> {
    blocks: Vec<CrossBlockCache<T>>,
}

impl<T: Scalar> StackCache<T> {
    /// `heads × patches` weights of the final block.
    pub fn final_weights(&self) -> Array2<T> {
        let w = &self.blocks.last().expect("stack has blocks").attn.weights;
        let rows: Vec<_> = w.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &rows).expect("equal widths")
    }
}

impl CrossAttentionStack {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize, blocks: usize, heads: usize) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let n = format!("{name}.{i}");
                CrossBlock {
                    ln_q: LayerNorm::new(ps, &format!("{n}.ln_q"), dim),
                    ln_kv: LayerNorm::new(ps, &format!("{n}.ln_kv"), dim),
                    attn: MultiHeadAttention::new(ps, rng, &format!("{n}.attn"), dim, heads),
                    ln_f: LayerNorm::new(ps, &format!("{n}.ln_f"), dim),
                    ffn: Mlp::new(ps, rng, &format!("{n}.ffn"), dim, 4 * dim, dim),
                }
            })
            .collect();
        Self { blocks, dim }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, g: &Array2<T>, p: &Array2<T>) -> Result<(Array2<T>, StackCache<T>), ModelError> {
        if g.dim() != (1, self.dim) || p.ncols() != self.dim || p.nrows() == 0 {
            return Err(ModelError::Shape(format!(
                "cross-attention expects g 1x{d} and p Nx{d}, got {:?} and {:?}",
                g.dim(),
                p.dim(),
                d = self.dim
            )));
        }
        let mut x = g.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (xq, ln_q) = b.ln_q.forward(ps, &x);
            let (pk, ln_kv) = b.ln_kv.forward(ps, p);
            let (a, attn) = b.attn.forward(ps, &xq, &pk);
            x += &a;
            let (hf, ln_f) = b.ln_f.forward(ps, &x);
            let (m, ffn) = b.ffn.forward(ps, &hf);
            x += &m;
            caches.push(CrossBlockCache { ln_q, ln_kv, attn, ln_f, ffn });
        }
        Ok((x, StackCache { blocks: caches }))
    }

    /// Returns `(dg, dp)` given the gradient of the final token state.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &StackCache<T>, dout: &Array2<T>, n_patches: usize) -> (Array2<T>, Array2<T>) {
        let mut dx = dout.clone();
        let mut dp = Array2::zeros((n_patches, self.dim));
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dhf = b.ffn.backward(ps, grads, &c.ffn, &dx);
            dx += &b.ln_f.backward(ps, grads, &c.ln_f, &dhf);
            let (dxq, dpk) = b.attn.backward(ps, grads, &c.attn, &dx);
            dx += &b.ln_q.backward(ps, grads, &c.ln_q, &dxq);
            dp += &b.ln_kv.backward(ps, grads, &c.ln_kv, &dpk);
        }
        (dx, dp)
    }
}

/// Per-scale cross-attention stacks plus the projection to `z`.
#[derive(Debug, Clone)]
pub struct Mceam {
    pub scales: Vec<ContextScale>,
    stacks: Vec<CrossAttentionStack>,
    proj: Mlp,
    dim: usize,
    fused_dim: usize,
}

pub struct FusionCache<T> {
    stacks: Vec<StackCache<T>>,
    proj: MlpCache<T>,
    patch_counts: Vec<usize>,
}

impl<T: Scalar> FusionCache<T> {
    /// Final-block attention (`heads × patches`) per scale.
    pub fn attention_maps(&self) -> Vec<Array2<T>> {
        self.stacks.iter().map(StackCache::final_weights).collect()
    }
}

impl Mceam {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        scales: &[ContextScale],
        dim: usize,
        blocks: usize,
        heads: usize,
        fused_dim: usize,
    ) -> Self {
        let stacks = scales
            .iter()
            .map(|s| CrossAttentionStack::new(ps, rng, &format!("mceam.{}", s.tag()), dim, blocks, heads))
            .collect();
        let proj = Mlp::new(ps, rng, "mceam.proj", (scales.len() + 1) * dim, fused_dim, fused_dim);
        Self { scales: scales.to_vec(), stacks, proj, dim, fused_dim }
    }

    /// Width of the concatenation fed to the projection.
    pub fn concat_dim(&self) -> usize {
        (self.scales.len() + 1) * self.dim
    }

    pub fn fused_dim(&self) -> usize {
        self.fused_dim
    }

    /// `contexts[i]` holds the patch embeddings of `self.scales[i]`.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, g: &Array2<T>, contexts: &[&Array2<T>]) -> Result<(Array2<T>, FusionCache<T>), ModelError> {
        if contexts.len() != self.scales.len() {
            return Err(ModelError::ScaleMismatch { expected: self.scales.clone(), got: contexts.len() });
        }
        let mut parts = vec![g.clone()];
        let mut stacks = Vec::with_capacity(contexts.len());
        for (stack, p) in self.stacks.iter().zip(contexts) {
            let (a, c) = stack.forward(ps, g, p)?;
            parts.push(a);
            stacks.push(c);
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("row vectors");
        let (z, proj) = self.proj.forward(ps, &concat);
        Ok((z, FusionCache { stacks, proj, patch_counts: contexts.iter().map(|p| p.nrows()).collect() }))
    }

    /// Returns `(dg, [dp_r])`.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &FusionCache<T>, dz: &Array2<T>) -> (Array2<T>, Vec<Array2<T>>) {
        let dconcat = self.proj.backward(ps, grads, &cache.proj, dz);
        let d = self.dim;
        let mut dg = dconcat.slice(s![.., 0..d]).to_owned();
        let mut dps = Vec::with_capacity(self.stacks.len());
        for (i, (stack, c)) in self.stacks.iter().zip(&cache.stacks).enumerate() {
            let da = dconcat.slice(s![.., (i + 1) * d..(i + 2) * d]).to_owned();
            let (dgi, dp) = stack.backward(ps, grads, c, &da, cache.patch_counts[i]);
            dg += &dgi;
            dps.push(dp);
        }
        (dg, dps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rand_mat(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = seed::rng(&[salt]);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn singleton_patch_gets_all_weight() {
        let mut ps = ParamStore::<f64>::new();
        let st = CrossAttentionStack::new(&mut ps, &mut seed::rng(&[1]), "s", 8, 4, 4);
        let (_, c) = st.forward(&ps, &rand_mat(1, 8, 2), &rand_mat(1, 8, 3)).unwrap();
        assert!(c.final_weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn identical_patches_get_uniform_weight() {
        let mut ps = ParamStore::<f64>::new();
        let st = CrossAttentionStack::new(&mut ps, &mut seed::rng(&[1]), "s", 8, 4, 4);
        let row = rand_mat(1, 8, 5);
        let p = Array2::from_shape_fn((6, 8), |(_, j)| row[[0, j]]);
        let (_, c) = st.forward(&ps, &rand_mat(1, 8, 2), &p).unwrap();
        let w = c.final_weights();
        assert_eq!(w.dim(), (4, 6));
        assert!(w.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn concat_width_follows_scale_count() {
        let mut ps = ParamStore::<f64>::new();
        let m = Mceam::new(&mut ps, &mut seed::rng(&[1]), &ContextScale::ALL, 64, 1, 4, 64);
        assert_eq!(m.concat_dim(), 256);
        let m1 = Mceam::new(&mut ps, &mut seed::rng(&[1]), &[ContextScale::X3], 64, 1, 4, 64);
        assert_eq!(m1.concat_dim(), 128);
    }

    #[test]
    fn patch_order_does_not_change_z() {
        let mut ps = ParamStore::<f64>::new();
        let m = Mceam::new(&mut ps, &mut seed::rng(&[4]), &[ContextScale::X3, ContextScale::Full], 16, 4, 4, 16);
        let g = rand_mat(1, 16, 9);
        let p1 = rand_mat(5, 16, 10);
        let p2 = rand_mat(7, 16, 11);
        let (z, _) = m.forward(&ps, &g, &[&p1, &p2]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let p1s = Array2::from_shape_fn((5, 16), |(i, j)| p1[[perm[i], j]]);
        let (zs, _) = m.forward(&ps, &g, &[&p1s, &p2]).unwrap();
        for (a, b) in z.iter().zip(zs.iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        assert!(m.forward(&ps, &g, &[&p1]).is_err());
    }
}
