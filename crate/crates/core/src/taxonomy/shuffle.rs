use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{derive_hierarchical_label, HierarchicalLabel, TaxonId, TaxonomyError, TaxonomyTree};
use crate::seed;

/// One fixed permutation per rank, drawn once per run.
///
/// The shuffled-hierarchy control swaps each sample's terminal for its image
/// under the permutation of the terminal's own rank and derives every level
/// target from the swapped node. Level heads therefore see groupings that keep
/// their sizes but no longer follow visual or taxonomic similarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShuffle {
    /// `perms[rank][i]` is the position in `level_index[rank]` that position `i` maps to.
    perms: Vec<Vec<usize>>,
    #[serde(skip)]
    levels: Vec<HashMap<TaxonId, usize>>,
    #[serde(skip)]
    ids: Vec<Vec<TaxonId>>,
}

pub fn shuffle_levels(tree: &TaxonomyTree, seed_value: u64) -> LevelShuffle {
    let perms = (0..=tree.depth())
        .map(|rank| {
            let n = tree.level(rank).map(|l| l.len()).unwrap_or(0);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut seed::rng(&[seed_value, seed::purpose::SHUFFLE, rank as u64]));
            p
        })
        .collect();
    LevelShuffle { perms, levels: Vec::new(), ids: Vec::new() }.bind(tree)
}

impl LevelShuffle {
    /// Attaches id lookups for `tree` (needed after deserialization).
    pub fn bind(mut self, tree: &TaxonomyTree) -> Self {
        self.ids = (0..=tree.depth()).map(|r| tree.level(r).map(<[_]>::to_vec).unwrap_or_default()).collect();
        self.levels = self.ids.iter().map(|l| l.iter().enumerate().map(|(i, &t)| (t, i)).collect()).collect();
        self
    }

    pub fn permutation(&self, rank: usize) -> Option<&[usize]> {
        self.perms.get(rank).map(Vec::as_slice)
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                inv
            })
            .collect();
        Self { perms, levels: self.levels.clone(), ids: self.ids.clone() }
    }

    /// Image of `id` under its rank's permutation.
    pub fn apply(&self, id: TaxonId) -> Result<TaxonId, TaxonomyError> {
        for (rank, lookup) in self.levels.iter().enumerate() {
            if let Some(&i) = lookup.get(&id) {
                return Ok(self.ids[rank][self.perms[rank][i]]);
            }
        }
        Err(TaxonomyError::UnknownId(id))
    }

    /// Label whose level targets follow the permuted terminal.
    pub fn shuffled_label(&self, tree: &TaxonomyTree, label: &HierarchicalLabel) -> Result<HierarchicalLabel, TaxonomyError> {
        derive_hierarchical_label(tree, self.apply(label.terminal())?)
    }
}
