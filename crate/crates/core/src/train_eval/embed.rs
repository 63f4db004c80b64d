use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TrainError, TrainedModel};
use crate::dataio::Dataset;
use crate::scalar::Scalar;
use crate::seed;
use crate::taxonomy::{derive_hierarchical_label, TaxonId, TaxonomyTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub annotation_id: i64,
    /// True taxon at ranks `1..=depth` (interpolated ranks repeat the label).
    pub taxa: Vec<TaxonId>,
    pub z: Vec<f64>,
}

impl EmbeddingRow {
    pub fn terminal(&self) -> TaxonId {
        *self.taxa.last().expect("at least one rank")
    }
}

/// Fused embeddings of a dataset, one row per ROI.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z.len())
    }

    /// CSV with header `annotation_id,rank_1..rank_L,z_0..z_{D-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::io(path, e))?;
        let depth = self.rows.first().map_or(0, |r| r.taxa.len());
        let header: Vec<String> = std::iter::once("annotation_id".to_string())
            .chain((1..=depth).map(|r| format!("rank_{r}")))
            .chain((0..self.dim()).map(|i| format!("z_{i}")))
            .collect();
        w.write_record(&header).map_err(|e| TrainError::io(path, e))?;
        for row in &self.rows {
            let fields: Vec<String> = std::iter::once(row.annotation_id.to_string())
                .chain(row.taxa.iter().map(|t| t.0.to_string()))
                .chain(row.z.iter().map(|v| format!("{v:e}")))
                .collect();
            w.write_record(&fields).map_err(|e| TrainError::io(path, e))?;
        }
        w.flush().map_err(|e| TrainError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::io(path, e))?;
        let header = r.headers().map_err(|e| TrainError::io(path, e))?.clone();
        let depth = header.iter().filter(|h| h.starts_with("rank_")).count();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| TrainError::io(path, e))?;
            let num = |i: usize| -> Result<f64, TrainError> {
                rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| TrainError::io(path, format!("bad field {i}")))
            };
            let annotation_id = num(0)? as i64;
            let taxa = (1..=depth).map(|i| num(i).map(|v| TaxonId(v as i64))).collect::<Result<_, _>>()?;
            let z = (depth + 1..rec.len()).map(num).collect::<Result<_, _>>()?;
            rows.push(EmbeddingRow { annotation_id, taxa, z });
        }
        Ok(Self { rows })
    }
}

/// Fused embedding `z` of every annotation of `ds`, in id order.
pub fn export_embeddings<T: Scalar>(tm: &TrainedModel<T>, ds: &Dataset) -> Result<EmbeddingTable, TrainError> {
    tm.check_dataset(ds)?;
    let mut rows = Vec::with_capacity(ds.annotations.len());
    for a in &ds.annotations {
        let z = tm.model.forward(&tm.inputs(ds, a)?)?.z;
        let label = derive_hierarchical_label(&ds.tree, a.taxon_id)?;
        rows.push(EmbeddingRow {
            annotation_id: a.id,
            taxa: label.targets().iter().map(|t| t.node).collect(),
            z: z.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }
    Ok(EmbeddingTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStat {
    /// Mean intra-class pairwise distance over mean inter-class distance.
    pub intra_inter_ratio: f64,
    /// Spearman correlation between embedding distance and tree distance.
    pub rank_correlation: f64,
    pub pairs: usize,
}

/// Pair budget; larger tables are subsampled with a fixed seed.
pub const MAX_PAIRS: usize = 200_000;

/// Clustering and hierarchy-alignment summary of an embedding table.
pub fn hierarchy_consistency_stat(table: &EmbeddingTable, tree: &TaxonomyTree) -> Result<ConsistencyStat, TrainError> {
    let rows = &table.rows;
    let n = rows.len();
    let mut classes: Vec<TaxonId> = rows.iter().map(EmbeddingRow::terminal).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(TrainError::Degenerate("hierarchy consistency needs at least two classes".into()));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= MAX_PAIRS {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = seed::rng(&[0, seed::purpose::PAIRS, n as u64]);
        (0..MAX_PAIRS)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let mut emb = Vec::with_capacity(pairs.len());
    let mut tdist = Vec::with_capacity(pairs.len());
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for &(i, j) in &pairs {
        let d = rows[i].z.iter().zip(&rows[j].z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (a, b) = (rows[i].terminal(), rows[j].terminal());
        if a == b {
            intra += d;
            n_intra += 1;
        } else {
            inter += d;
            n_inter += 1;
        }
        emb.push(d);
        tdist.push(f64::from(tree.node_distance(a, b)?));
    }
    if n_intra == 0 {
        return Err(TrainError::Degenerate("no two rows share a class".into()));
    }
    let inter_mean = inter / n_inter as f64;
    let ratio = if inter_mean > 0.0 { (intra / n_intra as f64) / inter_mean } else { f64::INFINITY };
    Ok(ConsistencyStat { intra_inter_ratio: ratio, rank_correlation: spearman(&emb, &tdist), pairs: pairs.len() })
}

/// Ranks with ties sharing their average rank (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}
