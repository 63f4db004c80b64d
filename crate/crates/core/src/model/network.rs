use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderCache, EncoderConfig, EncoderOutput, PatchEncoder};
use super::layers::{Mlp, MlpCache};
use super::loss::{cross_entropy, total_loss};
use super::mceam::{FusionCache, Mceam};
use super::params::{Grads, ParamId, ParamStore};
use super::ModelError;
use crate::roi_context::{ContextScale, ContextSet, Image};
use crate::scalar::Scalar;
use crate::seed;

/// Architecture of a [`Matanet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Context scales in stream order. Empty selects the ROI-only baseline.
    pub scales: Vec<ContextScale>,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    /// Width of the fused embedding `z` (also the projection hidden width).
    pub fused_dim: usize,
    /// Size of the terminal label space.
    pub num_classes: usize,
    /// One auxiliary head per entry; empty disables the level heads.
    pub level_sizes: Vec<usize>,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        if self.fusion_blocks == 0 || self.fusion_heads == 0 || self.encoder.dim % self.fusion_heads != 0 {
            return Err(ModelError::Config(format!(
                "fusion needs >= 1 block and dim {} divisible by fusion_heads {}",
                self.encoder.dim, self.fusion_heads
            )));
        }
        if self.fused_dim == 0 || self.num_classes == 0 || self.level_sizes.contains(&0) {
            return Err(ModelError::Config("fused_dim, num_classes and level sizes must be positive".into()));
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.scales {
            return Err(ModelError::Config(format!("scales must be distinct and ordered 3, 5, full: {:?}", self.scales)));
        }
        Ok(())
    }
}

/// Which encoder an image goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Roi,
    Context(ContextScale),
}

/// Per-sample supervision: terminal class index plus one index per level head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub terminal: usize,
    pub levels: Vec<usize>,
}

/// Final-block cross-attention weights per context scale (`heads × patches`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub maps: Vec<(ContextScale, Array2<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Array1<T>,
    pub z: Array1<T>,
    pub attention: AttentionMaps<T>,
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub hier: f64,
    pub total: f64,
}

/// Fine-grained classifier fusing ROI and context embeddings.
#[derive(Debug, Clone)]
pub struct Matanet<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    roi_encoder: PatchEncoder,
    context_encoders: Vec<PatchEncoder>,
    mceam: Mceam,
    classifier: Mlp,
    level_heads: Vec<Mlp>,
}

struct SampleCache<T> {
    roi: EncoderCache<T>,
    contexts: Vec<EncoderCache<T>>,
    fusion: FusionCache<T>,
    classifier: MlpCache<T>,
    heads: Vec<MlpCache<T>>,
}

impl<T: Scalar> Matanet<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = seed::rng(&[cfg.init_seed, seed::purpose::INIT]);
        let enc = &cfg.encoder;
        let roi_encoder = PatchEncoder::new(&mut ps, &mut rng, "roi_encoder", enc);
        let context_encoders = if cfg.scales.is_empty() {
            Vec::new()
        } else if enc.separate_context_encoders {
            cfg.scales
                .iter()
                .map(|s| PatchEncoder::new(&mut ps, &mut rng, &format!("context_encoder.{}", s.tag()), enc))
                .collect()
        } else {
            vec![PatchEncoder::new(&mut ps, &mut rng, "context_encoder", enc)]
        };
        let mceam = Mceam::new(&mut ps, &mut rng, &cfg.scales, enc.dim, cfg.fusion_blocks, cfg.fusion_heads, cfg.fused_dim);
        let dz = cfg.fused_dim;
        let classifier = Mlp::new(&mut ps, &mut rng, "classifier", dz, dz, cfg.num_classes);
        let level_heads = cfg
            .level_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| Mlp::new(&mut ps, &mut rng, &format!("level_heads.{i}"), dz, dz, k))
            .collect();
        let mut model = Self { cfg, params: ps, roi_encoder, context_encoders, mceam, classifier, level_heads };
        let frozen = model.cfg.encoder.freeze;
        model.set_encoders_frozen(frozen);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.roi_encoder
            .param_ids()
            .chain(self.context_encoders.iter().flat_map(PatchEncoder::param_ids))
            .collect()
    }

    pub fn set_encoders_frozen(&mut self, frozen: bool) {
        let ids = self.encoder_param_ids();
        self.params.set_frozen(ids, frozen);
        self.cfg.encoder.freeze = frozen;
    }

    pub fn fusion(&self) -> &Mceam {
        &self.mceam
    }

    fn context_encoder(&self, i: usize) -> &PatchEncoder {
        if self.context_encoders.len() == 1 {
            &self.context_encoders[0]
        } else {
            &self.context_encoders[i]
        }
    }

    /// Runs one image through the ROI encoder or a context encoder.
    pub fn encode(&self, img: &Image<T>, stream: Stream) -> Result<EncoderOutput<T>, ModelError> {
        let enc = match stream {
            Stream::Roi => &self.roi_encoder,
            Stream::Context(scale) => {
                let i = self.cfg.scales.iter().position(|&s| s == scale).ok_or(ModelError::ScaleMismatch {
                    expected: self.cfg.scales.clone(),
                    got: 1,
                })?;
                self.context_encoder(i)
            }
        };
        Ok(enc.forward(&self.params, img)?.0)
    }

    fn check_scales(&self, cs: &ContextSet<T>) -> Result<(), ModelError> {
        if cs.scales() != self.cfg.scales {
            return Err(ModelError::ScaleMismatch { expected: self.cfg.scales.clone(), got: cs.contexts.len() });
        }
        Ok(())
    }

    /// Fused embedding from an ROI embedding and per-scale patch embeddings.
    pub fn fuse(&self, g: &Array2<T>, contexts: &[&Array2<T>]) -> Result<(Array2<T>, AttentionMaps<T>), ModelError> {
        let (z, cache) = self.mceam.forward(&self.params, g, contexts)?;
        Ok((z, self.attention_from(&cache)))
    }

    fn attention_from(&self, cache: &FusionCache<T>) -> AttentionMaps<T> {
        AttentionMaps { maps: self.cfg.scales.iter().copied().zip(cache.attention_maps()).collect() }
    }

    /// Terminal logits for a fused embedding.
    pub fn classify(&self, z: &Array2<T>) -> Array2<T> {
        self.classifier.forward(&self.params, z).0
    }

    /// Cross-entropy of every level head against its target.
    pub fn hslm_losses(&self, z: &Array2<T>, level_targets: &[usize]) -> Result<Vec<T>, ModelError> {
        if level_targets.len() != self.level_heads.len() {
            return Err(ModelError::LevelCount { expected: self.level_heads.len(), got: level_targets.len() });
        }
        self.level_heads
            .iter()
            .zip(level_targets)
            .map(|(h, &t)| cross_entropy(h.forward(&self.params, z).0.row(0), t).map(|(l, _)| l))
            .collect()
    }

    pub fn forward(&self, cs: &ContextSet<T>) -> Result<Prediction<T>, ModelError> {
        let (cache, z, logits) = self.forward_cached(cs)?;
        Ok(Prediction { logits: logits.row(0).to_owned(), z: z.row(0).to_owned(), attention: self.attention_from(&cache.fusion) })
    }

    /// Terminal logits for a batch, one row per sample.
    pub fn forward_batch(&self, batch: &[ContextSet<T>]) -> Result<Array2<T>, ModelError> {
        let mut out = Array2::zeros((batch.len(), self.cfg.num_classes));
        for (mut row, cs) in out.rows_mut().into_iter().zip(batch) {
            row.assign(&self.forward(cs)?.logits);
        }
        Ok(out)
    }

    fn forward_cached(&self, cs: &ContextSet<T>) -> Result<(SampleCache<T>, Array2<T>, Array2<T>), ModelError> {
        self.check_scales(cs)?;
        let ps = &self.params;
        let (roi_out, roi_cache) = self.roi_encoder.forward(ps, &cs.roi)?;
        let mut ctx_out = Vec::with_capacity(cs.contexts.len());
        let mut ctx_caches = Vec::with_capacity(cs.contexts.len());
        for (i, (_, im)) in cs.contexts.iter().enumerate() {
            let (o, c) = self.context_encoder(i).forward(ps, im)?;
            ctx_out.push(o.p);
            ctx_caches.push(c);
        }
        let refs: Vec<&Array2<T>> = ctx_out.iter().collect();
        let (z, fusion) = self.mceam.forward(ps, &roi_out.g, &refs)?;
        let (logits, classifier) = self.classifier.forward(ps, &z);
        let cache = SampleCache { roi: roi_cache, contexts: ctx_caches, fusion, classifier, heads: Vec::new() };
        Ok((cache, z, logits))
    }

    /// Batch-mean loss; the gradient of that mean is accumulated into `grads`.
    pub fn loss_and_grad(&self, batch: &[(&ContextSet<T>, &Targets)], grads: &mut Grads<T>) -> Result<LossBreakdown, ModelError> {
        let inv_b = T::one() / T::from_usize_lossy(batch.len().max(1));
        let (mut cls_sum, mut hier_sum) = (0.0f64, 0.0f64);
        for (cs, targets) in batch {
            let (cls, hier) = self.sample_loss_and_grad(cs, targets, inv_b, grads)?;
            cls_sum += cls;
            hier_sum += hier;
        }
        let n = batch.len().max(1) as f64;
        let (cls, hier) = (cls_sum / n, hier_sum / n);
        Ok(LossBreakdown { cls, hier, total: total_loss(cls, hier)? })
    }

    /// Batch-mean loss without gradients.
    pub fn loss(&self, batch: &[(&ContextSet<T>, &Targets)]) -> Result<LossBreakdown, ModelError> {
        let (mut cls_sum, mut hier_sum) = (0.0f64, 0.0f64);
        for (cs, targets) in batch {
            let (_, z, logits) = self.forward_cached(cs)?;
            cls_sum += cross_entropy(logits.row(0), targets.terminal)?.0.to_f64_lossy();
            hier_sum += self.hslm_losses(&z, &targets.levels)?.iter().map(|l| l.to_f64_lossy()).sum::<f64>();
        }
        let n = batch.len().max(1) as f64;
        let (cls, hier) = (cls_sum / n, hier_sum / n);
        Ok(LossBreakdown { cls, hier, total: total_loss(cls, hier)? })
    }

    fn sample_loss_and_grad(&self, cs: &ContextSet<T>, targets: &Targets, weight: T, grads: &mut Grads<T>) -> Result<(f64, f64), ModelError> {
        if targets.levels.len() != self.level_heads.len() {
            return Err(ModelError::LevelCount { expected: self.level_heads.len(), got: targets.levels.len() });
        }
        let ps = &self.params;
        let (mut cache, z, logits) = self.forward_cached(cs)?;
        let (cls_loss, dlogits) = cross_entropy(logits.row(0), targets.terminal)?;
        let mut hier = 0.0f64;
        let mut head_grads = Vec::with_capacity(self.level_heads.len());
        for (head, &t) in self.level_heads.iter().zip(&targets.levels) {
            let (hl, hc) = head.forward(ps, &z);
            let (l, d) = cross_entropy(hl.row(0), t)?;
            hier += l.to_f64_lossy();
            cache.heads.push(hc);
            head_grads.push(d);
        }

        let scaled = |d: Array1<T>| d.mapv(|v| v * weight).insert_axis(Axis(0));
        let mut dz = self.classifier.backward(ps, grads, &cache.classifier, &scaled(dlogits));
        for ((head, hc), d) in self.level_heads.iter().zip(&cache.heads).zip(head_grads) {
            dz += &head.backward(ps, grads, hc, &scaled(d));
        }
        let (dg, dps) = self.mceam.backward(ps, grads, &cache.fusion, &dz);
        if !self.cfg.encoder.freeze {
            self.roi_encoder.backward(ps, grads, &cache.roi, Some(&dg), None);
            for (i, (c, dp)) in cache.contexts.iter().zip(&dps).enumerate() {
                self.context_encoder(i).backward(ps, grads, c, None, Some(dp));
            }
        }
        Ok((cls_loss.to_f64_lossy(), hier))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi_context::Image;

    pub(crate) fn tiny_config(scales: Vec<ContextScale>, levels: Vec<usize>) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { image_side: 8, patch_size: 4, dim: 8, depth: 1, heads: 2, ..EncoderConfig::default() },
            scales,
            fusion_blocks: 2,
            fusion_heads: 2,
            fused_dim: 8,
            num_classes: 5,
            level_sizes: levels,
            init_seed: 3,
        }
    }

    fn sample(scales: &[ContextScale], salt: usize) -> ContextSet<f64> {
        let mk = |k: usize| Image::from_fn(8, 8, move |x, y, c| ((x * 5 + y * 3 + c * 7 + k + salt) % 13) as f64 / 12.0);
        ContextSet { roi: mk(0), contexts: scales.iter().enumerate().map(|(i, &s)| (s, mk(i + 1))).collect() }
    }

    #[test]
    fn batch_logits_shape_and_duplicate_rows() {
        let m = Matanet::<f64>::new(tiny_config(ContextScale::ALL.to_vec(), vec![2, 3])).unwrap();
        let a = sample(&ContextScale::ALL, 0);
        let b = sample(&ContextScale::ALL, 4);
        let logits = m.forward_batch(&[a.clone(), b, a]).unwrap();
        assert_eq!(logits.dim(), (3, 5));
        assert_eq!(logits.row(0), logits.row(2));
        assert_ne!(logits.row(0), logits.row(1));
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let m = Matanet::<f64>::new(tiny_config(vec![ContextScale::X3], vec![])).unwrap();
        assert!(matches!(m.forward(&sample(&ContextScale::ALL, 0)), Err(ModelError::ScaleMismatch { .. })));
    }

    #[test]
    fn roi_only_configuration_runs() {
        let m = Matanet::<f64>::new(tiny_config(vec![], vec![])).unwrap();
        let cs = sample(&[], 1);
        let p = m.forward(&cs).unwrap();
        assert!(p.attention.maps.is_empty());
        assert_eq!(m.fusion().concat_dim(), 8);
        let mut g = m.params().zeros_like();
        let t = Targets { terminal: 1, levels: vec![] };
        let l = m.loss_and_grad(&[(&cs, &t)], &mut g).unwrap();
        assert_eq!(l.hier, 0.0);
        assert_eq!(l.total, l.cls);
    }

    #[test]
    fn loss_decomposes_and_matches_gradient_free_path() {
        let m = Matanet::<f64>::new(tiny_config(ContextScale::ALL.to_vec(), vec![2, 3])).unwrap();
        let a = sample(&ContextScale::ALL, 2);
        let b = sample(&ContextScale::ALL, 6);
        let ta = Targets { terminal: 0, levels: vec![1, 2] };
        let tb = Targets { terminal: 4, levels: vec![0, 0] };
        let mut g = m.params().zeros_like();
        let l = m.loss_and_grad(&[(&a, &ta), (&b, &tb)], &mut g).unwrap();
        assert_eq!(l.total, l.cls + l.hier);
        let l2 = m.loss(&[(&a, &ta), (&b, &tb)]).unwrap();
        assert!((l.total - l2.total).abs() < 1e-12);
        assert!(g.all_finite());
        let bad = Targets { terminal: 5, levels: vec![0, 0] };
        assert!(m.loss_and_grad(&[(&a, &bad)], &mut g).is_err());
    }

    #[test]
    fn frozen_encoders_receive_no_gradient() {
        let mut cfg = tiny_config(vec![ContextScale::X3], vec![]);
        cfg.encoder.freeze = true;
        let m = Matanet::<f64>::new(cfg).unwrap();
        let cs = sample(&[ContextScale::X3], 0);
        let mut g = m.params().zeros_like();
        m.loss_and_grad(&[(&cs, &Targets { terminal: 2, levels: vec![] })], &mut g).unwrap();
        for id in m.encoder_param_ids() {
            assert!(g.get(id).iter().all(|&v| v == 0.0));
            assert!(m.params().entries()[id.0].frozen);
        }
    }
}
