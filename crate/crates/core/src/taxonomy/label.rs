use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{TaxonId, TaxonomyError, TaxonomyTree};

/// Target at one rank of a hierarchical label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelTarget {
    pub node: TaxonId,
    /// Set when the sample's label stops above this rank and the deepest
    /// available ancestor stands in for the missing one.
    pub interpolated: bool,
}

/// Per-rank targets for ranks `1..=L` plus the terminal taxon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalLabel {
    targets: Vec<LevelTarget>,
    terminal: TaxonId,
}

impl HierarchicalLabel {
    pub fn terminal(&self) -> TaxonId {
        self.terminal
    }

    /// Target at `rank` (1-based; rank 0 is always the root and not stored).
    pub fn at(&self, rank: usize) -> Option<LevelTarget> {
        rank.checked_sub(1).and_then(|i| self.targets.get(i)).copied()
    }

    pub fn targets(&self) -> &[LevelTarget] {
        &self.targets
    }
}

/// Builds the per-rank target chain for a sample whose deepest known taxon is
/// `terminal`. Ranks deeper than the terminal repeat it with the interpolation
/// flag set.
pub fn derive_hierarchical_label(tree: &TaxonomyTree, terminal: TaxonId) -> Result<HierarchicalLabel, TaxonomyError> {
    let term_rank = tree.rank(terminal)?;
    let targets = (1..=tree.depth())
        .map(|r| {
            if r <= term_rank {
                tree.ancestor_at(terminal, r).map(|node| LevelTarget { node, interpolated: false })
            } else {
                Ok(LevelTarget { node: terminal, interpolated: true })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HierarchicalLabel { targets, terminal })
}

/// Size of the rank-`rank` label space given the terminals present in a
/// training set: the level's own nodes plus every shallower terminal that
/// appears as an interpolated target there.
pub fn level_class_count(tree: &TaxonomyTree, rank: usize, training_terminals: &[TaxonId]) -> Result<usize, TaxonomyError> {
    let own = tree.level(rank)?.len();
    let mut extra = BTreeSet::new();
    for &t in training_terminals {
        if tree.rank(t)? < rank {
            extra.insert(t);
        }
    }
    Ok(own + extra.len())
}

/// Class indexing of one auxiliary level head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpace {
    pub rank: usize,
    /// `level_index[rank]` ascending, followed by interpolated extras ascending.
    pub nodes: Vec<TaxonId>,
}

/// Label spaces of the terminal classifier and of every auxiliary level head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaces {
    /// Distinct training terminals, ascending.
    pub terminal: Vec<TaxonId>,
    pub levels: Vec<LevelSpace>,
    #[serde(skip)]
    lookup: Lookup,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Lookup {
    terminal: HashMap<TaxonId, usize>,
    levels: Vec<HashMap<TaxonId, usize>>,
}

impl LabelSpaces {
    /// `ranks` lists the auxiliary ranks (the set of hierarchy levels that get a
    /// head); an empty list means no auxiliary heads.
    pub fn build(tree: &TaxonomyTree, training_terminals: &[TaxonId], ranks: &[usize]) -> Result<Self, TaxonomyError> {
        let mut terminals: Vec<TaxonId> = training_terminals.to_vec();
        for &t in &terminals {
            tree.node(t)?;
        }
        terminals.sort_unstable();
        terminals.dedup();
        let mut levels = Vec::with_capacity(ranks.len());
        for &rank in ranks {
            if rank == 0 || rank > tree.depth() {
                return Err(TaxonomyError::RankOutOfRange { rank, depth: tree.depth() });
            }
            let mut nodes = tree.level(rank)?.to_vec();
            nodes.extend(terminals.iter().copied().filter(|&t| tree.rank(t).map(|r| r < rank).unwrap_or(false)));
            levels.push(LevelSpace { rank, nodes });
        }
        Ok(Self { terminal: terminals, levels, lookup: Lookup::default() }.indexed())
    }

    /// Rebuilds the id lookups (needed after deserialization).
    pub fn indexed(mut self) -> Self {
        self.lookup = Lookup {
            terminal: self.terminal.iter().enumerate().map(|(i, &t)| (t, i)).collect(),
            levels: self
                .levels
                .iter()
                .map(|l| l.nodes.iter().enumerate().map(|(i, &t)| (t, i)).collect())
                .collect(),
        };
        self
    }

    pub fn terminal_count(&self) -> usize {
        self.terminal.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.nodes.len()).collect()
    }

    pub fn terminal_index(&self, id: TaxonId) -> Option<usize> {
        self.lookup.terminal.get(&id).copied()
    }

    /// Index of `node` inside the `level`-th auxiliary space.
    pub fn level_index_of(&self, level: usize, node: TaxonId) -> Option<usize> {
        self.lookup.levels.get(level).and_then(|m| m.get(&node)).copied()
    }

    /// Auxiliary targets of `label`, one class index per level head.
    pub fn level_targets(&self, label: &HierarchicalLabel) -> Option<Vec<usize>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, l)| label.at(l.rank).and_then(|t| self.level_index_of(i, t.node)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    fn five_level() -> TaxonomyTree {
        // root -> kingdom -> class -> order -> genus -> species
        TaxonomyTree::build(vec![
            rec(0, 0, None),
            rec(1, 1, Some(0)),
            rec(2, 2, Some(1)),
            rec(3, 3, Some(2)),
            rec(4, 4, Some(3)),
            rec(5, 5, Some(4)),
            rec(6, 5, Some(4)),
        ])
        .unwrap()
    }

    #[test]
    fn full_depth_label_has_no_interpolation() {
        let t = small_tree();
        let l = derive_hierarchical_label(&t, TaxonId(6)).unwrap();
        assert_eq!(l.terminal(), TaxonId(6));
        assert_eq!(l.targets().len(), 2);
        assert!(l.targets().iter().all(|e| !e.interpolated));
        assert_eq!(l.at(1).unwrap().node, TaxonId(3));
        assert_eq!(l.at(2).unwrap().node, TaxonId(6));
    }

    #[test]
    fn genus_terminal_interpolates_species_level() {
        let t = five_level();
        let l = derive_hierarchical_label(&t, TaxonId(4)).unwrap();
        assert_eq!(l.at(5), Some(LevelTarget { node: TaxonId(4), interpolated: true }));
        assert_eq!(l.at(4), Some(LevelTarget { node: TaxonId(4), interpolated: false }));
        assert_eq!(l.at(1).unwrap().node, TaxonId(1));
    }

    #[test]
    fn root_terminal_interpolates_everything() {
        let t = small_tree();
        let l = derive_hierarchical_label(&t, TaxonId(1)).unwrap();
        assert!(l.targets().iter().all(|e| e.interpolated && e.node == TaxonId(1)));
        assert!(derive_hierarchical_label(&t, TaxonId(42)).is_err());
    }

    #[test]
    fn class_counts_with_and_without_interpolation() {
        let t = small_tree();
        assert_eq!(level_class_count(&t, 0, &[]).unwrap(), 1);
        assert_eq!(level_class_count(&t, 2, &[TaxonId(4), TaxonId(7)]).unwrap(), 4);
        // one genus-level (rank 1) terminal adds one class at rank 2
        let terms = [TaxonId(4), TaxonId(5), TaxonId(2), TaxonId(2)];
        assert_eq!(level_class_count(&t, 2, &terms).unwrap(), 5);
        assert_eq!(level_class_count(&t, 1, &terms).unwrap(), 2);
        assert!(level_class_count(&t, 3, &terms).is_err());
    }

    #[test]
    fn label_spaces_index_interpolated_targets() {
        let t = small_tree();
        let spaces = LabelSpaces::build(&t, &[TaxonId(5), TaxonId(2), TaxonId(7)], &[1, 2]).unwrap();
        assert_eq!(spaces.terminal, vec![TaxonId(2), TaxonId(5), TaxonId(7)]);
        assert_eq!(spaces.level_sizes(), vec![2, 5]);
        let l = derive_hierarchical_label(&t, TaxonId(2)).unwrap();
        assert_eq!(spaces.level_targets(&l).unwrap(), vec![0, 4]);
        let json = serde_json::to_string(&spaces).unwrap();
        let back: LabelSpaces = serde_json::from_str::<LabelSpaces>(&json).unwrap().indexed();
        assert_eq!(back, spaces);
    }
}
