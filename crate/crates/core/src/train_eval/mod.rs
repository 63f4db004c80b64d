//! Training loop, evaluation metrics and embedding / attention exports.

mod embed;
mod evaluate;
mod heatmap;
mod optim;
mod trainer;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{export_embeddings, hierarchy_consistency_stat, spearman, ConsistencyStat, EmbeddingRow, EmbeddingTable};
pub use evaluate::{evaluate, predict, MetricsReport};
pub use heatmap::{attention_heatmap, export_attention, overlay, HEATMAP_SIDE};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{train, EpochLoss, StepLoss, TrainOutcome};

use crate::dataio::{DataError, Dataset, RoiAnnotation};
use crate::model::checkpoint::{self, CheckpointError, Moments};
use crate::model::{EncoderConfig, Matanet, ModelConfig, ModelError, Targets};
use crate::roi_context::{augment, build_context_set, AugmentConfig, ContextScale, ContextSet, CropError};
use crate::scalar::Scalar;
use crate::taxonomy::{derive_hierarchical_label, shuffle_levels, LabelSpaces, LevelShuffle, TaxonId, TaxonNode, TaxonomyError, TaxonomyTree};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("annotation {id}: {source}")]
    Crop { id: i64, source: CropError },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch} (cls {cls}, hier {hier}); batch annotation ids {batch:?}")]
    Divergence { epoch: usize, batch: Vec<i64>, cls: f64, hier: f64 },
    #[error("label spaces disagree: {0}")]
    LabelSpace(String),
    #[error("unknown annotation id {0}")]
    UnknownId(i64),
    #[error("{0}")]
    Degenerate(String),
    #[error("I/O: {0}")]
    Io(String),
}

impl TrainError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        TrainError::Io(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HslmMode {
    Off,
    #[default]
    On,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_scales() -> Vec<ContextScale> {
    ContextScale::ALL.to_vec()
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    #[serde(default = "default_scales")]
    pub scale_set: Vec<ContextScale>,
    /// ROI-only baseline: no context streams, `z = Proj(g)`.
    pub roi_only: bool,
    pub hslm: HslmMode,
    /// Ranks that get an auxiliary head; `None` means every rank between the
    /// root and the leaves (`1..depth`).
    pub hslm_ranks: Option<Vec<usize>>,
    pub encoder: EncoderConfig,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    /// Width of `z`; `None` uses the encoder width.
    pub fused_dim: Option<usize>,
    pub augment: AugmentConfig,
    /// Evaluate the validation split every this many epochs (0 disables).
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            epochs: 30,
            batch_size: 32,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            seed: 0,
            scale_set: default_scales(),
            roi_only: false,
            hslm: HslmMode::On,
            hslm_ranks: None,
            encoder: EncoderConfig::default(),
            fusion_blocks: 4,
            fusion_heads: 4,
            fused_dim: None,
            augment: AugmentConfig::default(),
            eval_every: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, reason: &str| Err(TrainError::Config { key: key.to_string(), reason: reason.to_string() });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1", "moment decay rates must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.scale_set.is_empty() && !self.roi_only {
            return bad("scale_set", "must be non-empty unless roi_only is set");
        }
        let mut sorted = self.scale_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scale_set.len() {
            return bad("scale_set", "contains duplicates");
        }
        if let Err(reason) = self.encoder.validate() {
            return bad("encoder", &reason);
        }
        if self.fusion_blocks == 0 || self.fusion_heads == 0 || self.encoder.dim % self.fusion_heads != 0 {
            return bad("fusion_heads", "need >= 1 block and encoder.dim divisible by fusion_heads");
        }
        if self.fused_dim == Some(0) {
            return bad("fused_dim", "must be positive");
        }
        if matches!(&self.hslm_ranks, Some(r) if r.contains(&0)) {
            return bad("hslm_ranks", "rank 0 (the root) cannot have a head");
        }
        Ok(())
    }

    /// Context scales actually used by the model, in stream order.
    pub fn model_scales(&self) -> Vec<ContextScale> {
        if self.roi_only {
            return Vec::new();
        }
        let mut s = self.scale_set.clone();
        s.sort_unstable();
        s
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Auxiliary ranks for a tree of the given depth.
    pub fn aux_ranks(&self, depth: usize) -> Vec<usize> {
        match (self.hslm, &self.hslm_ranks) {
            (HslmMode::Off, _) => Vec::new(),
            (_, Some(r)) => r.clone(),
            (_, None) => (1..depth).collect(),
        }
    }
}

/// State stored next to the parameters in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub train_config: TrainConfig,
    pub label_spaces: LabelSpaces,
    pub taxonomy: Vec<TaxonNode>,
    pub epochs_completed: usize,
    pub history: Vec<EpochLoss>,
    /// Epoch (1-based) whose weights are stored in the best checkpoint.
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

/// A model plus everything needed to interpret its outputs.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub model: Matanet<T>,
    pub state: RunState,
    pub tree: TaxonomyTree,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(Self::load_with_moments(path)?.0)
    }

    pub(crate) fn load_with_moments(path: &Path) -> Result<(Self, Option<Moments<T>>), TrainError> {
        let ck = checkpoint::load::<T>(path)?;
        let mut state: RunState = serde_json::from_value(ck.meta).map_err(|e| TrainError::Checkpoint(CheckpointError::Header(e)))?;
        state.label_spaces = state.label_spaces.indexed();
        let tree = TaxonomyTree::build(state.taxonomy.clone())?;
        Ok((Self { model: ck.model, state, tree }, ck.moments))
    }

    pub fn save(&self, path: &Path, moments: Option<&Moments<T>>) -> Result<(), TrainError> {
        let meta = serde_json::to_value(&self.state).map_err(|e| TrainError::Checkpoint(CheckpointError::Header(e)))?;
        checkpoint::save(path, &self.model, moments, &meta)?;
        Ok(())
    }

    /// Checks that `ds` can be scored by this model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<(), TrainError> {
        if ds.tree.records() != self.tree.records() {
            return Err(TrainError::LabelSpace("dataset taxonomy differs from the checkpoint taxonomy".into()));
        }
        let k = self.model.config().num_classes;
        if self.state.label_spaces.terminal_count() != k {
            return Err(TrainError::LabelSpace(format!(
                "checkpoint terminal space has {} ids but the classifier has {k} outputs",
                self.state.label_spaces.terminal_count()
            )));
        }
        Ok(())
    }

    /// Un-augmented crops of one annotation at the encoder resolution.
    pub fn inputs(&self, ds: &Dataset, ann: &RoiAnnotation) -> Result<ContextSet<T>, TrainError> {
        sample_inputs(ds, ann, &self.model.config().scales, self.model.config().encoder.image_side)
    }

    pub fn terminal_of(&self, class: usize) -> TaxonId {
        self.state.label_spaces.terminal[class]
    }
}

pub(crate) fn sample_inputs<T: Scalar>(ds: &Dataset, ann: &RoiAnnotation, scales: &[ContextScale], side: usize) -> Result<ContextSet<T>, TrainError> {
    let img = ds.load_image::<T>(ann.image_id)?;
    build_context_set(&img, &ann.bbox, scales, side).map_err(|source| TrainError::Crop { id: ann.id, source })
}

/// Augmented training inputs for one annotation in one epoch.
pub(crate) fn training_inputs<T: Scalar>(
    ds: &Dataset,
    ann: &RoiAnnotation,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ContextSet<T>, TrainError> {
    let cs = sample_inputs(ds, ann, &cfg.model_scales(), cfg.encoder.image_side)?;
    Ok(augment(&cs, &cfg.augment, cfg.seed, ann.id, epoch as u64))
}

/// Supervision for every annotation, in annotation order.
pub(crate) struct TargetTable {
    pub targets: Vec<Targets>,
}

impl TargetTable {
    pub fn build(ds: &Dataset, spaces: &LabelSpaces, mode: HslmMode, shuffle: Option<&LevelShuffle>) -> Result<Self, TrainError> {
        let mut targets = Vec::with_capacity(ds.annotations.len());
        for a in &ds.annotations {
            let label = derive_hierarchical_label(&ds.tree, a.taxon_id)?;
            let terminal = spaces
                .terminal_index(a.taxon_id)
                .ok_or_else(|| TrainError::LabelSpace(format!("annotation {}: taxon {} not in the terminal space", a.id, a.taxon_id.0)))?;
            let level_label = match (mode, shuffle) {
                (HslmMode::Random, Some(s)) => s.shuffled_label(&ds.tree, &label)?,
                _ => label,
            };
            let levels = spaces
                .level_targets(&level_label)
                .ok_or_else(|| TrainError::LabelSpace(format!("annotation {}: level target outside the head label spaces", a.id)))?;
            targets.push(Targets { terminal, levels });
        }
        Ok(Self { targets })
    }
}

/// Label spaces and model architecture implied by a config and training set.
pub fn plan_model(cfg: &TrainConfig, ds: &Dataset) -> Result<(LabelSpaces, ModelConfig, Option<LevelShuffle>), TrainError> {
    cfg.validate()?;
    let terminals: Vec<TaxonId> = ds.annotations.iter().map(|a| a.taxon_id).collect();
    let ranks = cfg.aux_ranks(ds.tree.depth());
    let spaces = LabelSpaces::build(&ds.tree, &terminals, &ranks).map_err(|e| match e {
        TaxonomyError::RankOutOfRange { .. } => TrainError::Config { key: "hslm_ranks".into(), reason: e.to_string() },
        other => other.into(),
    })?;
    let model = ModelConfig {
        encoder: cfg.encoder.clone(),
        scales: cfg.model_scales(),
        fusion_blocks: cfg.fusion_blocks,
        fusion_heads: cfg.fusion_heads,
        fused_dim: cfg.fused_dim.unwrap_or(cfg.encoder.dim),
        num_classes: spaces.terminal_count(),
        level_sizes: spaces.level_sizes(),
        init_seed: cfg.seed,
    };
    let shuffle = (cfg.hslm == HslmMode::Random).then(|| shuffle_levels(&ds.tree, cfg.seed));
    Ok((spaces, model, shuffle))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| TrainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::synthdata::{generate, load_split, SynthSpec};

    /// Small synthetic train/test pair plus a tiny, fast config.
    pub fn tiny_run(dir: &Path, train: usize, test: usize) -> (Dataset, Dataset, TrainConfig) {
        let spec = SynthSpec { seed: 1, train_samples: train, test_samples: test, ..SynthSpec::default() };
        generate(&spec, dir).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            encoder: EncoderConfig { image_side: 16, patch_size: 8, dim: 8, depth: 1, heads: 2, ..EncoderConfig::default() },
            fusion_blocks: 1,
            fusion_heads: 2,
            ..TrainConfig::default()
        };
        (load_split(dir, "train").unwrap(), load_split(dir, "test").unwrap(), cfg)
    }
}
