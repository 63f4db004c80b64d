use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextSet, Image};
use crate::scalar::{lit, Scalar};
use crate::seed;

/// Train-time augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Probability of a non-zero right-angle rotation (90, 180 or 270 degrees).
    pub p_rotate: f64,
    pub p_jitter: f64,
    /// Brightness, contrast and saturation factors are drawn log-uniformly in
    /// `[1/jitter_max, jitter_max]` (default 1.25, i.e. `[0.8, 1.25]`).
    pub jitter_max: f64,
    /// Apply one draw to every stream (true) or draw per stream (false).
    pub consistent: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_hflip: 0.5, p_vflip: 0.5, p_rotate: 0.5, p_jitter: 0.8, jitter_max: 1.25, consistent: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { p_hflip: 0.0, p_vflip: 0.0, p_rotate: 0.0, p_jitter: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    hflip: bool,
    vflip: bool,
    quarter_turns: u8,
    jitter: Option<[f64; 3]>,
}

impl Draw {
    fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        // Every draw is consumed unconditionally so the stream layout is fixed.
        let hflip = rng.gen::<f64>() < cfg.p_hflip;
        let vflip = rng.gen::<f64>() < cfg.p_vflip;
        let rotate = rng.gen::<f64>() < cfg.p_rotate;
        let turns = rng.gen_range(1u8..4);
        let jitter = rng.gen::<f64>() < cfg.p_jitter;
        let span = cfg.jitter_max.max(1.0).ln();
        let factors = [0; 3].map(|_| (rng.gen::<f64>() * 2.0 * span - span).exp());
        Draw { hflip, vflip, quarter_turns: if rotate { turns } else { 0 }, jitter: jitter.then_some(factors) }
    }

    fn apply<T: Scalar>(&self, im: &Image<T>) -> Image<T> {
        let mut out = im.clone();
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        if self.quarter_turns != 0 {
            out = out.rotate90(self.quarter_turns);
        }
        if let Some([b, c, s]) = self.jitter {
            color_jitter(&mut out, b, c, s);
        }
        out
    }
}

fn color_jitter<T: Scalar>(im: &mut Image<T>, brightness: f64, contrast: f64, saturation: f64) {
    let (b, c, s) = (lit::<T>(brightness), lit::<T>(contrast), lit::<T>(saturation));
    let (wr, wg, wb) = (lit::<T>(0.299), lit::<T>(0.587), lit::<T>(0.114));
    let clip = |v: T| v.max(T::zero()).min(T::one());
    let data = im.data_mut();
    for v in data.iter_mut() {
        *v = clip(*v * b);
    }
    let n = T::from_usize_lossy(data.len() / 3);
    let mean = data.chunks(3).fold(T::zero(), |acc, p| acc + wr * p[0] + wg * p[1] + wb * p[2]) / n;
    for v in data.iter_mut() {
        *v = clip((*v - mean) * c + mean);
    }
    for p in data.chunks_mut(3) {
        let gray = wr * p[0] + wg * p[1] + wb * p[2];
        for v in p.iter_mut() {
            *v = clip((*v - gray) * s + gray);
        }
    }
}

/// Seeded augmentation of every stream. The draw depends only on
/// `(seed, sample_id, epoch)`.
pub fn augment<T: Scalar>(cs: &ContextSet<T>, cfg: &AugmentConfig, seed_value: u64, sample_id: i64, epoch: u64) -> ContextSet<T> {
    let mut rng = seed::rng(&[seed_value, seed::purpose::AUGMENT, sample_id as u64, epoch]);
    let shared = Draw::sample(cfg, &mut rng);
    let next = |rng: &mut ChaCha8Rng| if cfg.consistent { shared } else { Draw::sample(cfg, rng) };
    let roi = next(&mut rng).apply(&cs.roi);
    let contexts = cs.contexts.iter().map(|(s, im)| (*s, next(&mut rng).apply(im))).collect();
    ContextSet { roi, contexts }
}

#[cfg(test)]
mod tests {
    use super::super::ContextScale;
    use super::*;

    fn sample_set() -> ContextSet<f32> {
        let mk = |k: usize| Image::from_fn(8, 8, move |x, y, c| ((x * 3 + y * 5 + c + k) % 11) as f32 / 10.0);
        ContextSet { roi: mk(0), contexts: vec![(ContextScale::X3, mk(1)), (ContextScale::X5, mk(2)), (ContextScale::Full, mk(3))] }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let cs = sample_set();
        assert_eq!(augment(&cs, &AugmentConfig::none(), 1, 2, 3), cs);
    }

    #[test]
    fn reproducible_for_fixed_keys() {
        let cs = sample_set();
        let cfg = AugmentConfig::default();
        let a = augment(&cs, &cfg, 9, 17, 4);
        assert_eq!(a, augment(&cs, &cfg, 9, 17, 4));
        assert!(a.streams().all(|s| s.in_unit_range()));
    }

    #[test]
    fn geometric_transform_is_shared_across_streams() {
        // identical input streams must stay identical under consistent augmentation
        let base = sample_set().roi;
        let cs = ContextSet { roi: base.clone(), contexts: vec![(ContextScale::X3, base.clone()), (ContextScale::Full, base)] };
        for sample in 0..20 {
            let out = augment(&cs, &AugmentConfig::default(), 5, sample, 0);
            assert!(out.contexts.iter().all(|(_, im)| *im == out.roi));
        }
    }
}
