//! Synthetic ablation runner: trains each configuration for each seed and
//! prints one JSON line of test metrics per run.
//!
//! usage: ablation DATA_DIR OUT_DIR EPOCHS SEEDS CONFIGS [TRAIN TEST [LR]]
//! CONFIGS is a comma list of roi, c3, full, hslm, random.

use std::path::PathBuf;
use std::time::Instant;

use matanet::model::EncoderConfig;
use matanet::roi_context::ContextScale;
use matanet::synthdata::{generate, load_split, SynthSpec};
use matanet::train_eval::{evaluate, export_embeddings, hierarchy_consistency_stat, train, HslmMode, TrainConfig, TrainedModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let out = PathBuf::from(&args[2]);
    let epochs: usize = args[3].parse().unwrap();
    let seeds: u64 = args[4].parse().unwrap();
    let configs: Vec<String> = args[5].split(',').map(str::to_string).collect();
    let train_n: usize = args.get(6).map_or(2000, |s| s.parse().unwrap());
    let test_n: usize = args.get(7).map_or(500, |s| s.parse().unwrap());
    let lr: f64 = args.get(8).map_or(TrainConfig::default().lr, |s| s.parse().unwrap());
    if !data.join("manifest.json").is_file() {
        let spec = SynthSpec { seed: 2024, alpha: 0.8, train_samples: train_n, test_samples: test_n, ..SynthSpec::default() };
        generate(&spec, &data).unwrap();
    }
    let tr = load_split(&data, "train").unwrap();
    let te = load_split(&data, "test").unwrap();
    for seed in 0..seeds {
        for name in &configs {
            let base = TrainConfig {
                epochs,
                seed,
                lr,
                encoder: EncoderConfig { image_side: 64, patch_size: 16, dim: 64, depth: 4, heads: 4, ..EncoderConfig::default() },
                ..TrainConfig::default()
            };
            let cfg = match name.as_str() {
                "roi" => TrainConfig { roi_only: true, scale_set: vec![], hslm: HslmMode::Off, ..base },
                "c3" => TrainConfig { scale_set: vec![ContextScale::X3], hslm: HslmMode::Off, ..base },
                "full" => TrainConfig { hslm: HslmMode::Off, ..base },
                "hslm" => TrainConfig { hslm: HslmMode::On, ..base },
                "random" => TrainConfig { hslm: HslmMode::Random, ..base },
                other => panic!("unknown config {other}"),
            };
            let dir = out.join(format!("{name}_s{seed}"));
            let t0 = Instant::now();
            let outcome = train::<f32>(&cfg, &tr, None, &dir, true, &mut |_| {}).unwrap();
            let tm = TrainedModel::<f32>::load(&outcome.final_checkpoint).unwrap();
            let (report, _) = evaluate(&tm, &te).unwrap();
            let stat = hierarchy_consistency_stat(&export_embeddings(&tm, &te).unwrap(), &te.tree).unwrap();
            let last = outcome.history.last().unwrap();
            println!(
                "{{\"config\":\"{name}\",\"seed\":{seed},\"acc\":{:.4},\"hd\":{:.4},\"levels\":{:?},\"ratio\":{:.4},\"rho\":{:.4},\"train_loss\":{:.4},\"cls\":{:.4},\"secs\":{:.0}}}",
                report.accuracy,
                report.hierarchical_distance,
                report.per_level_accuracy,
                stat.intra_inter_ratio,
                stat.rank_correlation,
                last.total,
                last.cls,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
