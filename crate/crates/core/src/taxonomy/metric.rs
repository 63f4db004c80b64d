use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TaxonId, TaxonomyError, TaxonomyTree};

/// One row of the prediction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub annotation_id: i64,
    #[serde(rename = "predicted_taxon_id")]
    pub predicted: TaxonId,
    #[serde(rename = "true_taxon_id")]
    pub truth: TaxonId,
}

/// Mean unit-edge path length between predicted and true nodes.
pub fn hierarchical_distance(tree: &TaxonomyTree, records: &[PredictionRecord]) -> Result<f64, TaxonomyError> {
    if records.is_empty() {
        return Err(TaxonomyError::EmptyRecords);
    }
    let mut total: u64 = 0;
    for r in records {
        total += u64::from(tree.node_distance(r.truth, r.predicted)?);
    }
    Ok(total as f64 / records.len() as f64)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::small_tree;
    use super::*;

    fn rec(id: i64, p: i64, t: i64) -> PredictionRecord {
        PredictionRecord { annotation_id: id, predicted: TaxonId(p), truth: TaxonId(t) }
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let t = small_tree();
        let rs = [rec(1, 4, 4), rec(2, 7, 7)];
        assert_eq!(hierarchical_distance(&t, &rs).unwrap(), 0.0);
    }

    #[test]
    fn mean_of_path_lengths() {
        let t = small_tree();
        // sibling pair (2) and cousin pair (4)
        let rs = [rec(1, 5, 4), rec(2, 7, 4)];
        assert_eq!(hierarchical_distance(&t, &rs).unwrap(), 3.0);
        assert_eq!(hierarchical_distance(&t, &[]), Err(TaxonomyError::EmptyRecords));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let rs = vec![rec(10, 5, 4), rec(11, 6, 6)];
        write_predictions(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("annotation_id,predicted_taxon_id,true_taxon_id\n"));
        assert_eq!(read_predictions(&path).unwrap(), rs);
    }
}
