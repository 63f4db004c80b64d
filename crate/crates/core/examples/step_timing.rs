//! Times one forward+backward pass per sample for a few encoder shapes.

use std::time::Instant;

use matanet::model::{EncoderConfig, Matanet, ModelConfig, Targets};
use matanet::roi_context::{ContextScale, ContextSet, Image};

fn main() {
    for (patch, scales) in [(8, ContextScale::ALL.to_vec()), (16, ContextScale::ALL.to_vec()), (8, vec![])] {
        let cfg = ModelConfig {
            encoder: EncoderConfig { image_side: 64, patch_size: patch, dim: 64, depth: 4, heads: 4, ..EncoderConfig::default() },
            scales: scales.clone(),
            fusion_blocks: 4,
            fusion_heads: 4,
            fused_dim: 64,
            num_classes: 12,
            level_sizes: vec![3, 6],
            init_seed: 1,
        };
        let model = Matanet::<f32>::new(cfg).unwrap();
        let img = Image::from_fn(64, 64, |x, y, c| ((x * 3 + y * 7 + c) % 17) as f32 / 16.0);
        let cs = ContextSet { roi: img.clone(), contexts: scales.iter().map(|&s| (s, img.clone())).collect() };
        let t = Targets { terminal: 3, levels: vec![1, 2] };
        let mut g = model.params().zeros_like();
        let n = 32;
        let start = Instant::now();
        for _ in 0..n {
            model.loss_and_grad(&[(&cs, &t)], &mut g).unwrap();
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!("patch {patch} scales {}: {:.2} ms/sample, params {}", scales.len(), per * 1e3, model.params().numel());
    }
}
