use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
use super::params::{Grads, ParamId, ParamStore};
use super::ModelError;
use crate::roi_context::Image;
use crate::scalar::Scalar;

/// Patch-transformer encoder settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// One encoder per context scale instead of one shared context encoder.
    pub separate_context_encoders: bool,
    /// Keep encoder weights fixed during training.
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_side: 256, patch_size: 16, dim: 64, depth: 4, heads: 4, separate_context_encoders: false, freeze: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return Err(format!("image_side {} must be a positive multiple of patch_size {}", self.image_side, self.patch_size));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// `[CLS]` embedding and patch embeddings after the final block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub g: Array2<T>,
    pub p: Array2<T>,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

/// Pre-norm vision transformer over non-overlapping square patches.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    cfg: EncoderConfig,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    first_param: usize,
    end_param: usize,
}

pub struct EncoderCache<T> {
    patches: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl PatchEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let first_param = ps.len();
        let d = cfg.dim;
        let embed = Linear::new(ps, rng, &format!("{name}.patch_embed"), cfg.patch_len(), d);
        let cls = ps.add_normal(format!("{name}.cls_token"), 1, d, 0.02, rng);
        let pos = ps.add_normal(format!("{name}.pos_embed"), cfg.num_patches() + 1, d, 0.02, rng);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("{name}.blocks.{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(ps, &format!("{n}.ln1"), d),
                    attn: MultiHeadAttention::new(ps, rng, &format!("{n}.attn"), d, cfg.heads),
                    ln2: LayerNorm::new(ps, &format!("{n}.ln2"), d),
                    mlp: Mlp::new(ps, rng, &format!("{n}.mlp"), d, 4 * d, d),
                }
            })
            .collect();
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), d);
        Self { cfg: cfg.clone(), embed, cls, pos, blocks, norm, first_param, end_param: ps.len() }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Ids of every parameter owned by this encoder.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (self.first_param..self.end_param).map(ParamId)
    }

    /// Flattens the image into `num_patches × (patch² · 3)` rows, patches in
    /// row-major grid order, pixels in row-major order, channels innermost.
    pub fn patchify<T: Scalar>(&self, img: &Image<T>) -> Result<Array2<T>, ModelError> {
        let side = self.cfg.image_side;
        if img.width() != side || img.height() != side {
            return Err(ModelError::Shape(format!("encoder expects {side}x{side} input, got {}x{}", img.width(), img.height())));
        }
        let (p, grid) = (self.cfg.patch_size, self.cfg.grid());
        let data = img.data();
        let mut out = Array2::zeros((grid * grid, self.cfg.patch_len()));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(gy * grid + gx);
                let row = row.as_slice_mut().expect("contiguous row");
                for py in 0..p {
                    let src = ((gy * p + py) * side + gx * p) * 3;
                    row[py * p * 3..(py + 1) * p * 3].copy_from_slice(&data[src..src + p * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, img: &Image<T>) -> Result<(EncoderOutput<T>, EncoderCache<T>), ModelError> {
        let patches = self.patchify(img)?;
        let n = patches.nrows();
        let mut x = Array2::zeros((n + 1, self.cfg.dim));
        x.row_mut(0).assign(&ps.get(self.cls).row(0));
        x.slice_mut(s![1.., ..]).assign(&self.embed.forward(ps, &patches));
        x += ps.get(self.pos);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = b.ln1.forward(ps, &x);
            let (a, attn) = b.attn.forward(ps, &h1, &h1);
            x += &a;
            let (h2, ln2) = b.ln2.forward(ps, &x);
            let (m, mlp) = b.mlp.forward(ps, &h2);
            x += &m;
            caches.push(BlockCache { ln1, attn, ln2, mlp });
        }
        let (y, norm) = self.norm.forward(ps, &x);
        let out = EncoderOutput { g: y.slice(s![0..1, ..]).to_owned(), p: y.slice(s![1.., ..]).to_owned() };
        Ok((out, EncoderCache { patches, blocks: caches, norm }))
    }

    /// Backpropagates gradients w.r.t. `g` and `p` into the encoder parameters.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Grads<T>, cache: &EncoderCache<T>, dg: Option<&Array2<T>>, dp: Option<&Array2<T>>) {
        let n = cache.patches.nrows();
        let mut dy = Array2::zeros((n + 1, self.cfg.dim));
        if let Some(dg) = dg {
            dy.slice_mut(s![0..1, ..]).assign(dg);
        }
        if let Some(dp) = dp {
            dy.slice_mut(s![1.., ..]).assign(dp);
        }
        let mut dx = self.norm.backward(ps, g, &cache.norm, &dy);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dh2 = b.mlp.backward(ps, g, &c.mlp, &dx);
            dx += &b.ln2.backward(ps, g, &c.ln2, &dh2);
            let (dq, dkv) = b.attn.backward(ps, g, &c.attn, &dx);
            let dh1 = dq + dkv;
            dx += &b.ln1.backward(ps, g, &c.ln1, &dh1);
        }
        *g.get_mut(self.pos) += &dx;
        g.get_mut(self.cls).row_mut(0).scaled_add(T::one(), &dx.row(0));
        self.embed.backward_params(g, &cache.patches, &dx.slice(s![1.., ..]).to_owned());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn cfg() -> EncoderConfig {
        EncoderConfig { image_side: 16, patch_size: 8, dim: 8, depth: 1, heads: 2, ..EncoderConfig::default() }
    }

    #[test]
    fn patch_count_from_side_and_patch() {
        let c = EncoderConfig { image_side: 64, patch_size: 8, ..EncoderConfig::default() };
        assert_eq!(c.num_patches(), 64);
        assert!(EncoderConfig { image_side: 60, patch_size: 8, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { dim: 10, heads: 4, ..EncoderConfig::default() }.validate().is_err());
    }

    #[test]
    fn patchify_layout() {
        let mut ps = ParamStore::<f64>::new();
        let enc = PatchEncoder::new(&mut ps, &mut seed::rng(&[0]), "e", &cfg());
        let img = Image::from_fn(16, 16, |x, y, c| (y * 16 + x) as f64 * 3.0 + c as f64);
        let p = enc.patchify(&img).unwrap();
        assert_eq!(p.dim(), (4, 192));
        // second patch (grid x = 1), pixel (row 1, col 0), green channel
        assert_eq!(p[[1, 8 * 3 + 1]], img.get(8, 1, 1));
        assert!(enc.patchify(&Image::<f64>::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn deterministic_outputs() {
        let mut ps = ParamStore::<f64>::new();
        let enc = PatchEncoder::new(&mut ps, &mut seed::rng(&[0]), "e", &cfg());
        let img = Image::from_fn(16, 16, |x, y, c| ((x + 2 * y + c) % 5) as f64 / 4.0);
        let (a, _) = enc.forward(&ps, &img).unwrap();
        let (b, _) = enc.forward(&ps, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.g.dim(), (1, 8));
        assert_eq!(a.p.dim(), (4, 8));
    }
}
