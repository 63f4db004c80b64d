use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{evaluate, plan_model, training_inputs, AdamW, RunState, TargetTable, TrainConfig, TrainError, TrainedModel};
use crate::dataio::{iterate_batches, Dataset};
use crate::model::{Matanet, ModelError, Targets};
use crate::scalar::Scalar;

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: u64,
    pub cls: f64,
    pub hier: f64,
    pub total: f64,
}

/// Sample-mean losses of one epoch (1-based), plus validation metrics when
/// they were computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub cls: f64,
    pub hier: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_hd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochLoss>,
    /// Steps run by this invocation (earlier epochs of a resumed run excluded).
    pub steps: Vec<StepLoss>,
    pub last_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
}

pub const LAST: &str = "last.ckpt";
pub const FINAL: &str = "final.ckpt";
pub const BEST: &str = "best.ckpt";

/// Trains on `ds`, writing `last.ckpt` (with optimizer state) after every
/// epoch and `final.ckpt` / `best.ckpt` under `out_dir`.
///
/// The best checkpoint minimizes validation HD when `val` is given and the
/// epoch is an evaluation epoch, otherwise the epoch-mean training loss. With
/// `resume`, training continues from `out_dir/last.ckpt`; batch order and
/// augmentation depend only on (seed, epoch, annotation id), so the resumed
/// trajectory equals the uninterrupted one.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    ds: &Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
    resume: bool,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TrainOutcome, TrainError> {
    let (spaces, model_cfg, shuffle) = plan_model(cfg, ds)?;
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let last_path = out_dir.join(LAST);
    let best_path = out_dir.join(BEST);
    let final_path = out_dir.join(FINAL);

    let (mut tm, mut opt) = if resume && last_path.is_file() {
        let (tm, moments) = TrainedModel::<T>::load_with_moments(&last_path)?;
        let mut stored = tm.state.train_config.clone();
        stored.epochs = cfg.epochs;
        if &stored != cfg {
            return Err(TrainError::Config { key: "resume".into(), reason: "checkpoint was trained with a different config".into() });
        }
        if tm.state.label_spaces != spaces || tm.model.config() != &model_cfg {
            return Err(TrainError::LabelSpace("resume checkpoint does not match the training set".into()));
        }
        let moments = moments.ok_or_else(|| TrainError::Config { key: "resume".into(), reason: "checkpoint has no optimizer state".into() })?;
        log(json!({"event": "resume", "epochs_completed": tm.state.epochs_completed, "step": moments.step}));
        (tm, AdamW::from_state(cfg.optimizer(), moments))
    } else {
        let model = Matanet::<T>::new(model_cfg)?;
        let opt = AdamW::new(cfg.optimizer(), model.params());
        let state = RunState {
            train_config: cfg.clone(),
            label_spaces: spaces.clone(),
            taxonomy: ds.tree.records().to_vec(),
            epochs_completed: 0,
            history: Vec::new(),
            best_epoch: None,
            best_score: None,
        };
        (TrainedModel { model, state, tree: ds.tree.clone() }, opt)
    };
    tm.state.train_config = cfg.clone();

    let table = TargetTable::build(ds, &spaces, cfg.hslm, shuffle.as_ref())?;
    let slot: std::collections::HashMap<i64, usize> = ds.annotations.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    log(json!({
        "event": "train_start",
        "samples": ds.annotations.len(),
        "classes": spaces.terminal_count(),
        "level_sizes": spaces.level_sizes(),
        "parameters": tm.model.params().numel(),
        "start_epoch": tm.state.epochs_completed,
    }));

    let mut steps = Vec::new();
    for epoch in tm.state.epochs_completed..cfg.epochs {
        let (mut cls_sum, mut hier_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in iterate_batches(ds, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets: Vec<&Targets> = Vec::with_capacity(batch.len());
            for id in &batch {
                let i = slot[id];
                inputs.push(training_inputs::<T>(ds, &ds.annotations[i], cfg, epoch)?);
                targets.push(&table.targets[i]);
            }
            let pairs: Vec<_> = inputs.iter().zip(targets.iter().copied()).collect();
            let mut grads = tm.model.params().zeros_like();
            let loss = match tm.model.loss_and_grad(&pairs, &mut grads) {
                Ok(l) => l,
                Err(ModelError::NonFinite { cls, hier }) => return Err(TrainError::Divergence { epoch: epoch + 1, batch, cls, hier }),
                Err(e) => return Err(e.into()),
            };
            if !grads.all_finite() {
                return Err(TrainError::Divergence { epoch: epoch + 1, batch, cls: loss.cls, hier: loss.hier });
            }
            opt.step(tm.model.params_mut(), &grads);
            let step = StepLoss { epoch: epoch + 1, step: opt.state.step, cls: loss.cls, hier: loss.hier, total: loss.total };
            log(json!({"event": "step", "epoch": step.epoch, "step": step.step, "batch_size": batch.len(), "cls": step.cls, "hier": step.hier, "total": step.total}));
            steps.push(step);
            let b = batch.len() as f64;
            cls_sum += loss.cls * b;
            hier_sum += loss.hier * b;
            total_sum += loss.total * b;
        }
        let n = ds.annotations.len() as f64;
        let mut record = EpochLoss { epoch: epoch + 1, cls: cls_sum / n, hier: hier_sum / n, total: total_sum / n, val_accuracy: None, val_hd: None };
        let is_eval_epoch = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let score = match val {
            Some(v) if is_eval_epoch => {
                let (report, _) = evaluate(&tm, v)?;
                record.val_accuracy = Some(report.accuracy);
                record.val_hd = Some(report.hierarchical_distance);
                Some(report.hierarchical_distance)
            }
            Some(_) => None,
            None => Some(record.total),
        };
        tm.state.history.push(record);
        tm.state.epochs_completed = epoch + 1;
        log(serde_json::to_value(record).map(|mut v| {
            v["event"] = json!("epoch");
            v
        }).unwrap_or_default());
        if let Some(s) = score {
            if tm.state.best_score.map_or(true, |b| s < b) {
                tm.state.best_score = Some(s);
                tm.state.best_epoch = Some(epoch + 1);
                tm.save(&best_path, None)?;
            }
        }
        tm.save(&last_path, Some(&opt.state))?;
    }
    if !best_path.is_file() {
        tm.save(&best_path, None)?;
    }
    tm.save(&final_path, None)?;
    log(json!({"event": "train_end", "epochs": tm.state.epochs_completed, "steps": opt.state.step, "best_epoch": tm.state.best_epoch}));
    Ok(TrainOutcome {
        history: tm.state.history.clone(),
        steps,
        last_checkpoint: last_path,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_epoch: tm.state.best_epoch,
    })
}
