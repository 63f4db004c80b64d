use serde::{Deserialize, Serialize};

use super::{EpochLoss, TrainError, TrainedModel};
use crate::dataio::Dataset;
use crate::scalar::Scalar;
use crate::taxonomy::{derive_hierarchical_label, hierarchical_distance, PredictionRecord, TaxonomyTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub hierarchical_distance: f64,
    /// Agreement of predicted and true taxa at ranks `1..=depth`, with labels
    /// shallower than a rank compared through their interpolated targets.
    pub per_level_accuracy: Vec<f64>,
    /// Training loss curve stored in the checkpoint.
    pub losses: Vec<EpochLoss>,
    pub samples: usize,
}

impl MetricsReport {
    /// Metrics of a prediction list against `tree`.
    pub fn from_predictions(tree: &TaxonomyTree, records: &[PredictionRecord], losses: Vec<EpochLoss>) -> Result<Self, TrainError> {
        let n = records.len();
        if n == 0 {
            return Err(TrainError::Degenerate("no predictions to score".into()));
        }
        let correct = records.iter().filter(|r| r.predicted == r.truth).count();
        let depth = tree.depth();
        let mut level_hits = vec![0usize; depth];
        for r in records {
            let p = derive_hierarchical_label(tree, r.predicted)?;
            let t = derive_hierarchical_label(tree, r.truth)?;
            for (hits, (a, b)) in level_hits.iter_mut().zip(p.targets().iter().zip(t.targets())) {
                if a.node == b.node {
                    *hits += 1;
                }
            }
        }
        Ok(Self {
            accuracy: correct as f64 / n as f64,
            hierarchical_distance: hierarchical_distance(tree, records)?,
            per_level_accuracy: level_hits.into_iter().map(|h| h as f64 / n as f64).collect(),
            losses,
            samples: n,
        })
    }
}

/// Argmax terminal prediction for every annotation of `ds`, in id order.
pub fn predict<T: Scalar>(tm: &TrainedModel<T>, ds: &Dataset) -> Result<Vec<PredictionRecord>, TrainError> {
    tm.check_dataset(ds)?;
    let mut out = Vec::with_capacity(ds.annotations.len());
    for a in &ds.annotations {
        let logits = tm.model.forward(&tm.inputs(ds, a)?)?.logits;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        out.push(PredictionRecord { annotation_id: a.id, predicted: tm.terminal_of(best), truth: a.taxon_id });
    }
    Ok(out)
}

/// Scores `tm` on `ds`. Pure: repeated calls give identical reports.
pub fn evaluate<T: Scalar>(tm: &TrainedModel<T>, ds: &Dataset) -> Result<(MetricsReport, Vec<PredictionRecord>), TrainError> {
    let records = predict(tm, ds)?;
    let report = MetricsReport::from_predictions(&ds.tree, &records, tm.state.history.clone())?;
    Ok((report, records))
}
