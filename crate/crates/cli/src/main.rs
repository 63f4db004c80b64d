//! Command-line entry point: synth, train, eval, hd, export-embed,
//! export-attn and rerun.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use matanet::cli_config::{exit, parse_override, resolve_config, ConfigError, EventLog, RunManifest};
use matanet::dataio::{DataError, Dataset};
use matanet::model::ModelError;
use matanet::scalar::Scalar;
use matanet::synthdata::{generate, SynthError, SynthSpec, RUN_MANIFEST};
use matanet::taxonomy::{hierarchical_distance, read_predictions, write_predictions, TaxonomyTree};
use matanet::train_eval::{
    evaluate, export_attention, export_embeddings, hierarchy_consistency_stat, train, Precision, TrainConfig, TrainError, TrainedModel,
};

#[derive(Parser)]
#[command(name = "matanet", version, about = "Context-fused taxonomy-aware classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Write JSON-lines events to this file instead of stderr.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (annotations.json, or a generator output with train/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional validation dataset for best-checkpoint selection.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from OUT/last.ckpt.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        dump: DumpCrops,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (annotations.json, or a generator output with test/).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        dump: DumpCrops,
    },
    /// Hierarchical distance of a prediction CSV.
    Hd {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Export fused embeddings as CSV and print the hierarchy consistency statistic.
    ExportEmbed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention heatmap overlays.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated annotation ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a synth or train command from its run manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the new run.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, `key=value` with dotted keys (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DumpCrops {
    /// Write the un-augmented crops of the first `--dump-limit` annotations here.
    #[arg(long)]
    dump_crops: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    dump_limit: usize,
}

enum Failure {
    Config(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => exit::CONFIG,
            Failure::Data(_) => exit::DATA,
            Failure::Divergence(_) => exit::DIVERGENCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Divergence(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Spec { .. } => Failure::Config(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } | TrainError::Model(ModelError::Config(_)) => Failure::Config(e.to_string()),
            TrainError::Divergence { .. } | TrainError::Model(ModelError::NonFinite { .. }) => Failure::Divergence(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut log = match &cli.log {
        Some(path) => match std::fs::File::create(path) {
            Ok(f) => EventLog::new(Box::new(f)),
            Err(e) => {
                eprintln!("cannot open log {}: {e}", path.display());
                return ExitCode::from(exit::DATA as u8);
            }
        },
        None => EventLog::stderr(),
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = run(cli.command, args, &mut log);
    match result {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(f) => {
            log.emit(json!({"event": "error", "exit_code": f.code(), "message": f.message()}));
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}

fn overrides(common: &Overrides) -> Result<Vec<(String, Value)>, Failure> {
    let mut out = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        out.push(("seed".into(), json!(seed)));
    }
    Ok(out)
}

/// `DIR/annotations.json`, falling back to `DIR/<split>/annotations.json`.
fn load_data(dir: &Path, split: &str) -> Result<Dataset, Failure> {
    let direct = dir.join("annotations.json");
    if direct.is_file() {
        return Ok(Dataset::load(&direct, dir)?);
    }
    let nested = dir.join(split);
    Ok(Dataset::load(&nested.join("annotations.json"), &nested)?)
}

fn dump_crops<T: Scalar>(ds: &Dataset, cfg: &TrainConfig, dump: &DumpCrops, manifest: &mut RunManifest) -> Outcome {
    let Some(dir) = &dump.dump_crops else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let scales = cfg.model_scales();
    for a in ds.annotations.iter().take(dump.dump_limit) {
        let img = ds.load_image::<T>(a.image_id)?;
        let cs = matanet::roi_context::build_context_set(&img, &a.bbox, &scales, cfg.encoder.image_side)
            .map_err(|e| Failure::Data(format!("annotation {}: {e}", a.id)))?;
        cs.dump_pngs(dir, a.id).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    manifest.artifacts.push(dir.clone());
    Ok(())
}

fn finish(mut manifest: RunManifest, path: &Path, log: &mut EventLog) -> Outcome {
    manifest.finish(path)?;
    log.emit(json!({"event": "run_manifest", "path": path}));
    Ok(())
}

fn run(command: Command, args: Vec<String>, log: &mut EventLog) -> Outcome {
    match command {
        Command::Synth { spec, out, common, alpha } => {
            let mut ov = overrides(&common)?;
            if let Some(a) = alpha {
                ov.push(("alpha".into(), json!(a)));
            }
            let (spec, resolved) = resolve_config::<SynthSpec>(spec.as_deref(), &ov)?;
            run_synth(spec, resolved, &out, args, log)
        }
        Command::Train { config, data, out, val, resume, common, epochs, dump } => {
            let mut ov = overrides(&common)?;
            if let Some(e) = epochs {
                ov.push(("epochs".into(), json!(e)));
            }
            let (cfg, resolved) = resolve_config::<TrainConfig>(config.as_deref(), &ov)?;
            run_train(cfg, resolved, &data, val.as_deref(), &out, resume, &dump, args, log)
        }
        Command::Eval { ckpt, data, report, pred, dump } => match precision_of(&ckpt)? {
            Precision::F32 => run_eval::<f32>(&ckpt, &data, &report, &pred, &dump, args, log),
            Precision::F64 => run_eval::<f64>(&ckpt, &data, &report, &pred, &dump, args, log),
        },
        Command::Hd { tree, pred } => {
            let tree = TaxonomyTree::from_json_file(&tree).map_err(|e| Failure::Data(e.to_string()))?;
            let records = read_predictions(&pred).map_err(|e| Failure::Data(format!("{}: {e}", pred.display())))?;
            let hd = hierarchical_distance(&tree, &records).map_err(|e| Failure::Data(e.to_string()))?;
            println!("{}", json!({"hierarchical_distance": hd, "samples": records.len()}));
            Ok(())
        }
        Command::ExportEmbed { ckpt, data, out } => match precision_of(&ckpt)? {
            Precision::F32 => run_export_embed::<f32>(&ckpt, &data, &out, args, log),
            Precision::F64 => run_export_embed::<f64>(&ckpt, &data, &out, args, log),
        },
        Command::ExportAttn { ckpt, data, ids, out } => match precision_of(&ckpt)? {
            Precision::F32 => run_export_attn::<f32>(&ckpt, &data, &ids, &out, args, log),
            Precision::F64 => run_export_attn::<f64>(&ckpt, &data, &ids, &out, args, log),
        },
        Command::Rerun { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            let mut ov: Vec<(String, Value)> = match &m.config {
                Value::Object(map) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                _ => return Err(Failure::Config("run manifest has no config object".into())),
            };
            ov.sort_by(|a, b| a.0.cmp(&b.0));
            match m.command.as_str() {
                "synth" => {
                    let (spec, resolved) = resolve_config::<SynthSpec>(None, &ov)?;
                    run_synth(spec, resolved, &out, args, log)
                }
                "train" => {
                    let (cfg, resolved) = resolve_config::<TrainConfig>(None, &ov)?;
                    let data = m.args.iter().position(|a| a == "--data").and_then(|i| m.args.get(i + 1)).map(PathBuf::from);
                    let data = data.ok_or_else(|| Failure::Config("run manifest does not name a --data directory".into()))?;
                    let val = m.args.iter().position(|a| a == "--val").and_then(|i| m.args.get(i + 1)).map(PathBuf::from);
                    let dump = DumpCrops { dump_crops: None, dump_limit: 0 };
                    run_train(cfg, resolved, &data, val.as_deref(), &out, false, &dump, args, log)
                }
                other => Err(Failure::Config(format!("cannot re-run a `{other}` manifest"))),
            }
        }
    }
}

fn precision_of(ckpt: &Path) -> Result<Precision, Failure> {
    match TrainedModel::<f32>::load(ckpt) {
        Ok(_) => Ok(Precision::F32),
        Err(TrainError::Checkpoint(matanet::model::checkpoint::CheckpointError::Scalar { .. })) => Ok(Precision::F64),
        Err(e) => Err(e.into()),
    }
}

fn run_synth(spec: SynthSpec, resolved: Value, out: &Path, args: Vec<String>, log: &mut EventLog) -> Outcome {
    let mut manifest = RunManifest::start("synth", args);
    manifest.config = resolved;
    manifest.seed = Some(spec.seed);
    log.emit(json!({"event": "synth_start", "out": out, "alpha": spec.alpha, "seed": spec.seed}));
    let m = generate(&spec, out)?;
    log.emit(json!({"event": "synth_end", "checksum": m.checksum, "counts": m.counts}));
    manifest.artifacts = vec![out.join("manifest.json"), out.join("taxonomy.json"), out.join("train"), out.join("test")];
    finish(manifest, &out.join(RUN_MANIFEST), log)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    cfg: TrainConfig,
    resolved: Value,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    resume: bool,
    dump: &DumpCrops,
    args: Vec<String>,
    log: &mut EventLog,
) -> Outcome {
    let mut manifest = RunManifest::start("train", args);
    manifest.config = resolved;
    manifest.seed = Some(cfg.seed);
    let ds = load_data(data, "train")?;
    let counts = ds.counts();
    log.emit(json!({"event": "dataset", "split": "train", "images": counts.images, "rois": counts.rois, "classes": counts.classes}));
    let val_ds = val.map(|v| load_data(v, "test")).transpose()?;
    let mut sink = |e: Value| log.emit(e);
    let outcome = match cfg.precision {
        Precision::F32 => {
            dump_crops::<f32>(&ds, &cfg, dump, &mut manifest)?;
            train::<f32>(&cfg, &ds, val_ds.as_ref(), out, resume, &mut sink)?
        }
        Precision::F64 => {
            dump_crops::<f64>(&ds, &cfg, dump, &mut manifest)?;
            train::<f64>(&cfg, &ds, val_ds.as_ref(), out, resume, &mut sink)?
        }
    };
    let losses = out.join("losses.json");
    std::fs::write(&losses, serde_json::to_vec_pretty(&outcome.history).unwrap_or_default()).map_err(|e| Failure::Data(format!("{}: {e}", losses.display())))?;
    manifest.artifacts.extend([outcome.final_checkpoint, outcome.best_checkpoint, outcome.last_checkpoint, losses]);
    finish(manifest, &out.join(RUN_MANIFEST), log)
}

fn run_eval<T: Scalar>(ckpt: &Path, data: &Path, report: &Path, pred: &Path, dump: &DumpCrops, args: Vec<String>, log: &mut EventLog) -> Outcome {
    let mut manifest = RunManifest::start("eval", args);
    let tm = TrainedModel::<T>::load(ckpt)?;
    manifest.config = serde_json::to_value(&tm.state.train_config).unwrap_or_default();
    manifest.seed = Some(tm.state.train_config.seed);
    let ds = load_data(data, "test")?;
    dump_crops::<T>(&ds, &tm.state.train_config, dump, &mut manifest)?;
    let (metrics, records) = evaluate(&tm, &ds)?;
    write_predictions(pred, &records).map_err(|e| Failure::Data(format!("{}: {e}", pred.display())))?;
    let text = serde_json::to_vec_pretty(&metrics).unwrap_or_default();
    std::fs::write(report, text).map_err(|e| Failure::Data(format!("{}: {e}", report.display())))?;
    log.emit(json!({"event": "eval", "accuracy": metrics.accuracy, "hierarchical_distance": metrics.hierarchical_distance, "samples": metrics.samples}));
    manifest.artifacts.extend([report.to_path_buf(), pred.to_path_buf()]);
    finish(manifest, &report.with_extension("run.json"), log)
}

fn run_export_embed<T: Scalar>(ckpt: &Path, data: &Path, out: &Path, args: Vec<String>, log: &mut EventLog) -> Outcome {
    let mut manifest = RunManifest::start("export-embed", args);
    let tm = TrainedModel::<T>::load(ckpt)?;
    let ds = load_data(data, "test")?;
    let table = export_embeddings(&tm, &ds)?;
    table.write_csv(out)?;
    match hierarchy_consistency_stat(&table, &ds.tree) {
        Ok(stat) => println!("{}", json!({"intra_inter_ratio": stat.intra_inter_ratio, "rank_correlation": stat.rank_correlation, "pairs": stat.pairs})),
        Err(TrainError::Degenerate(reason)) => {
            log.emit(json!({"event": "warning", "message": format!("consistency statistic undefined: {reason}")}));
            println!("{}", json!({"intra_inter_ratio": null, "rank_correlation": null, "pairs": 0}));
        }
        Err(e) => return Err(e.into()),
    }
    log.emit(json!({"event": "export_embed", "rows": table.rows.len(), "dim": table.dim()}));
    manifest.artifacts.push(out.to_path_buf());
    finish(manifest, &out.with_extension("run.json"), log)
}

fn run_export_attn<T: Scalar>(ckpt: &Path, data: &Path, ids: &[i64], out: &Path, args: Vec<String>, log: &mut EventLog) -> Outcome {
    let mut manifest = RunManifest::start("export-attn", args);
    let tm = TrainedModel::<T>::load(ckpt)?;
    let ds = load_data(data, "test")?;
    let written = export_attention(&tm, &ds, ids, out)?;
    log.emit(json!({"event": "export_attn", "files": written.len()}));
    manifest.artifacts.extend(written);
    finish(manifest, &out.join(RUN_MANIFEST), log)
}
