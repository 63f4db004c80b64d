//! Annotated image datasets: JSON schema, validation and seeded batch order.
//!
//! ```text
//! {
//!   "images":      [{"id": 1, "file": "images/000001.png", "width": 192, "height": 192}],
//!   "annotations": [{"id": 1, "image_id": 1, "bbox": [x, y, w, h], "taxon_id": 17}],
//!   "taxonomy":    [{"id": 0, "name": "root", "rank": 0, "parent_id": null}, ...],
//!   "split":       "train"                      (optional)
//! }
//! ```
//!
//! Image paths are relative to the image root given at load time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roi_context::{BBox, Image};
use crate::scalar::Scalar;
use crate::seed;
use crate::taxonomy::{TaxonId, TaxonNode, TaxonomyError, TaxonomyTree};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("annotation file does not match the schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{kind} {id}: invalid `{field}`: {reason}")]
    Schema { kind: &'static str, id: i64, field: &'static str, reason: String },
    #[error("image {id}: file {path} not found")]
    MissingImage { id: i64, path: PathBuf },
    #[error("annotation {annotation}: unknown taxon_id {taxon}")]
    UnknownTaxon { annotation: i64, taxon: TaxonId },
    #[error("taxonomy: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("image {id}: decode failed: {reason}")]
    Decode { id: i64, reason: String },
    #[error("dataset has no annotations")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: i64,
    pub file: PathBuf,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiAnnotation {
    pub id: i64,
    pub image_id: i64,
    pub bbox: BBox,
    pub taxon_id: TaxonId,
}

/// On-disk form of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<RoiAnnotation>,
    pub taxonomy: Vec<TaxonNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub images: usize,
    pub rois: usize,
    pub classes: usize,
}

/// Validated, immutable dataset. Images and annotations are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<RoiAnnotation>,
    pub tree: TaxonomyTree,
    pub split: Option<String>,
    pub image_root: PathBuf,
    image_slot: BTreeMap<i64, usize>,
}

impl Dataset {
    /// Validates a parsed file against `image_root`.
    pub fn from_file(file: DatasetFile, image_root: &Path) -> Result<Self, DataError> {
        let tree = TaxonomyTree::build(file.taxonomy)?;
        let mut images = file.images;
        images.sort_by_key(|r| r.id);
        let mut image_slot = BTreeMap::new();
        for (i, im) in images.iter().enumerate() {
            if image_slot.insert(im.id, i).is_some() {
                return Err(schema("image", im.id, "id", "duplicate id"));
            }
            if im.width == 0 {
                return Err(schema("image", im.id, "width", "must be positive"));
            }
            if im.height == 0 {
                return Err(schema("image", im.id, "height", "must be positive"));
            }
            let path = image_root.join(&im.file);
            if !path.is_file() {
                return Err(DataError::MissingImage { id: im.id, path });
            }
        }
        let mut annotations = file.annotations;
        annotations.sort_by_key(|a| a.id);
        let mut seen = BTreeSet::new();
        for a in &annotations {
            if !seen.insert(a.id) {
                return Err(schema("annotation", a.id, "id", "duplicate id"));
            }
            let Some(&slot) = image_slot.get(&a.image_id) else {
                return Err(schema("annotation", a.id, "image_id", format!("image {} not found", a.image_id)));
            };
            let im = &images[slot];
            let b = a.bbox;
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(schema("annotation", a.id, "bbox", format!("width and height must be positive, got {} x {}", b.w, b.h)));
            }
            if !(b.x >= 0.0 && b.y >= 0.0) {
                return Err(schema("annotation", a.id, "bbox", format!("origin must be non-negative, got ({}, {})", b.x, b.y)));
            }
            if b.x >= im.width as f64 || b.y >= im.height as f64 {
                return Err(schema("annotation", a.id, "bbox", "does not intersect its image"));
            }
            if !tree.contains(a.taxon_id) {
                return Err(DataError::UnknownTaxon { annotation: a.id, taxon: a.taxon_id });
            }
        }
        Ok(Self { images, annotations, tree, split: file.split, image_root: image_root.to_path_buf(), image_slot })
    }

    pub fn load(annotation_file: &Path, image_root: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(annotation_file).map_err(|source| DataError::Io { path: annotation_file.to_path_buf(), source })?;
        Self::from_file(serde_json::from_str(&text)?, image_root)
    }

    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            images: self.images.clone(),
            annotations: self.annotations.clone(),
            taxonomy: self.tree.records().to_vec(),
            split: self.split.clone(),
        }
    }

    /// Writes the annotation JSON (images are not copied).
    pub fn save(&self, annotation_file: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(annotation_file, text).map_err(|source| DataError::Io { path: annotation_file.to_path_buf(), source })
    }

    pub fn counts(&self) -> DatasetCounts {
        let classes = self.annotations.iter().map(|a| a.taxon_id).collect::<BTreeSet<_>>().len();
        DatasetCounts { images: self.images.len(), rois: self.annotations.len(), classes }
    }

    pub fn image(&self, id: i64) -> Option<&ImageRecord> {
        self.image_slot.get(&id).map(|&i| &self.images[i])
    }

    pub fn annotation(&self, id: i64) -> Option<&RoiAnnotation> {
        self.annotations.binary_search_by_key(&id, |a| a.id).ok().map(|i| &self.annotations[i])
    }

    pub fn annotation_ids(&self) -> Vec<i64> {
        self.annotations.iter().map(|a| a.id).collect()
    }

    /// Decodes an image to `[0, 1]` RGB.
    pub fn load_image<T: Scalar>(&self, image_id: i64) -> Result<Image<T>, DataError> {
        let rec = self.image(image_id).ok_or_else(|| schema("image", image_id, "id", "not in dataset"))?;
        let im = Image::<T>::load_png(&self.image_root.join(&rec.file)).map_err(|e| DataError::Decode { id: image_id, reason: e.to_string() })?;
        if im.width() != rec.width || im.height() != rec.height {
            return Err(DataError::Decode {
                id: image_id,
                reason: format!("decoded {}x{}, annotation says {}x{}", im.width(), im.height(), rec.width, rec.height),
            });
        }
        Ok(im)
    }

    /// Copy with annotation taxa replaced through `relabel` (annotation id -> taxon).
    pub fn with_taxa(&self, relabel: &BTreeMap<i64, TaxonId>) -> Self {
        let mut out = self.clone();
        for a in &mut out.annotations {
            if let Some(&t) = relabel.get(&a.id) {
                a.taxon_id = t;
            }
        }
        out
    }
}

fn schema(kind: &'static str, id: i64, field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Schema { kind, id, field, reason: reason.into() }
}

/// Convenience wrapper for [`Dataset::load`].
pub fn load_dataset(annotation_file: &Path, image_root: &Path) -> Result<Dataset, DataError> {
    Dataset::load(annotation_file, image_root)
}

/// Annotation ids of one epoch: a permutation keyed by `(seed, epoch)`,
/// chunked into batches of at most `batch_size`.
pub fn iterate_batches(ds: &Dataset, batch_size: usize, seed_value: u64, epoch: u64) -> Result<Vec<Vec<i64>>, DataError> {
    if ds.annotations.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(epoch_order(&ds.annotation_ids(), seed_value, epoch).chunks(batch_size.max(1)).map(<[i64]>::to_vec).collect())
}

/// Seeded permutation of `ids` (given in ascending order).
pub fn epoch_order(ids: &[i64], seed_value: u64, epoch: u64) -> Vec<i64> {
    let mut order = ids.to_vec();
    order.shuffle(&mut seed::rng(&[seed_value, seed::purpose::BATCHES, epoch]));
    order
}
