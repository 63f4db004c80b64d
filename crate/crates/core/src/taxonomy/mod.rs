//! Rooted taxonomy trees, unit-edge path distances and hierarchical labels.

mod label;
mod metric;
mod shuffle;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use label::{derive_hierarchical_label, level_class_count, HierarchicalLabel, LabelSpaces, LevelTarget};
pub use metric::{hierarchical_distance, read_predictions, write_predictions, PredictionRecord};
pub use shuffle::{shuffle_levels, LevelShuffle};

/// Identifier of a taxon. Ids are arbitrary integers and need not be dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxonId(pub i64);

impl fmt::Display for TaxonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One record of the taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonNode {
    pub id: TaxonId,
    pub name: String,
    pub rank: usize,
    pub parent_id: Option<TaxonId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy has no records")]
    Empty,
    #[error("duplicate taxon id {0}")]
    DuplicateId(TaxonId),
    #[error("taxonomy must have exactly one root, found {found} (ids: {ids:?})")]
    RootCount { found: usize, ids: Vec<TaxonId> },
    #[error("taxon {id} references missing parent {parent}")]
    DanglingParent { id: TaxonId, parent: TaxonId },
    #[error("cycle detected through taxon {0}")]
    Cycle(TaxonId),
    #[error("taxon {id} has rank {rank} but its parent has rank {parent_rank}")]
    RankMismatch { id: TaxonId, rank: usize, parent_rank: usize },
    #[error("root taxon {id} must have rank 0, found {rank}")]
    RootRank { id: TaxonId, rank: usize },
    #[error("unknown taxon id {0}")]
    UnknownId(TaxonId),
    #[error("rank {rank} out of range (tree depth {depth})")]
    RankOutOfRange { rank: usize, depth: usize },
    #[error("empty prediction list")]
    EmptyRecords,
    #[error("taxonomy file: {0}")]
    Io(String),
}

/// Validated, immutable rooted tree.
///
/// Nodes are stored densely in ascending-id order; `level_index[r]` lists the
/// ids at rank `r`, ascending, and defines that level's class indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    nodes: Vec<TaxonNode>,
    slot: HashMap<TaxonId, usize>,
    parent: Vec<Option<usize>>,
    level_index: Vec<Vec<TaxonId>>,
    root: usize,
}

impl TaxonomyTree {
    /// Validates `records` and builds the tree. Insertion order is irrelevant.
    pub fn build(records: Vec<TaxonNode>) -> Result<Self, TaxonomyError> {
        if records.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut by_id: BTreeMap<TaxonId, TaxonNode> = BTreeMap::new();
        for rec in records {
            let id = rec.id;
            if by_id.insert(id, rec).is_some() {
                return Err(TaxonomyError::DuplicateId(id));
            }
        }
        let roots: Vec<TaxonId> = by_id.values().filter(|n| n.parent_id.is_none()).map(|n| n.id).collect();
        if roots.len() != 1 {
            return Err(TaxonomyError::RootCount { found: roots.len(), ids: roots });
        }
        for node in by_id.values() {
            if let Some(p) = node.parent_id {
                if !by_id.contains_key(&p) {
                    return Err(TaxonomyError::DanglingParent { id: node.id, parent: p });
                }
            }
        }

        let nodes: Vec<TaxonNode> = by_id.into_values().collect();
        let slot: HashMap<TaxonId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let parent: Vec<Option<usize>> = nodes.iter().map(|n| n.parent_id.map(|p| slot[&p])).collect();
        let root = parent.iter().position(Option::is_none).expect("one root");

        // Any node whose parent chain does not terminate within n steps is on a cycle.
        for start in 0..nodes.len() {
            let mut cur = start;
            let mut steps = 0usize;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > nodes.len() {
                    return Err(TaxonomyError::Cycle(nodes[start].id));
                }
            }
        }

        if nodes[root].rank != 0 {
            return Err(TaxonomyError::RootRank { id: nodes[root].id, rank: nodes[root].rank });
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Some(p) = parent[i] {
                if node.rank != nodes[p].rank + 1 {
                    return Err(TaxonomyError::RankMismatch {
                        id: node.id,
                        rank: node.rank,
                        parent_rank: nodes[p].rank,
                    });
                }
            }
        }

        let depth = nodes.iter().map(|n| n.rank).max().unwrap_or(0);
        let mut level_index = vec![Vec::new(); depth + 1];
        for node in &nodes {
            level_index[node.rank].push(node.id);
        }
        Ok(Self { nodes, slot, parent, level_index, root })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Io(format!("{}: {e}", path.display())))?;
        let records: Vec<TaxonNode> =
            serde_json::from_str(&text).map_err(|e| TaxonomyError::Io(format!("{}: {e}", path.display())))?;
        Self::build(records)
    }

    /// Node records in ascending-id order.
    pub fn records(&self) -> &[TaxonNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Maximum rank L.
    pub fn depth(&self) -> usize {
        self.level_index.len() - 1
    }

    pub fn root(&self) -> TaxonId {
        self.nodes[self.root].id
    }

    pub fn contains(&self, id: TaxonId) -> bool {
        self.slot.contains_key(&id)
    }

    pub fn node(&self, id: TaxonId) -> Result<&TaxonNode, TaxonomyError> {
        self.slot.get(&id).map(|&i| &self.nodes[i]).ok_or(TaxonomyError::UnknownId(id))
    }

    pub fn rank(&self, id: TaxonId) -> Result<usize, TaxonomyError> {
        Ok(self.node(id)?.rank)
    }

    pub fn parent(&self, id: TaxonId) -> Result<Option<TaxonId>, TaxonomyError> {
        Ok(self.node(id)?.parent_id)
    }

    /// Ids at `rank`, ascending.
    pub fn level(&self, rank: usize) -> Result<&[TaxonId], TaxonomyError> {
        self.level_index
            .get(rank)
            .map(Vec::as_slice)
            .ok_or(TaxonomyError::RankOutOfRange { rank, depth: self.depth() })
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_index.iter().map(Vec::len).collect()
    }

    /// Ids of the direct children of `id`, ascending.
    pub fn children(&self, id: TaxonId) -> Result<Vec<TaxonId>, TaxonomyError> {
        let i = self.index_of(id)?;
        Ok(self
            .parent
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Some(i))
            .map(|(c, _)| self.nodes[c].id)
            .collect())
    }

    /// Ancestor of `id` at `rank` (the node itself when ranks match).
    pub fn ancestor_at(&self, id: TaxonId, rank: usize) -> Result<TaxonId, TaxonomyError> {
        let mut cur = self.index_of(id)?;
        if rank > self.nodes[cur].rank {
            return Err(TaxonomyError::RankOutOfRange { rank, depth: self.nodes[cur].rank });
        }
        while self.nodes[cur].rank > rank {
            cur = self.parent[cur].expect("non-root has parent");
        }
        Ok(self.nodes[cur].id)
    }

    /// Proper ancestors of `id`, nearest first (parent, grandparent, ..., root).
    pub fn ancestors(&self, id: TaxonId) -> Result<Vec<TaxonId>, TaxonomyError> {
        let mut cur = self.index_of(id)?;
        let mut out = Vec::new();
        while let Some(p) = self.parent[cur] {
            out.push(self.nodes[p].id);
            cur = p;
        }
        Ok(out)
    }

    pub fn lowest_common_ancestor(&self, a: TaxonId, b: TaxonId) -> Result<TaxonId, TaxonomyError> {
        let (mut x, mut y) = (self.index_of(a)?, self.index_of(b)?);
        while self.nodes[x].rank > self.nodes[y].rank {
            x = self.parent[x].expect("non-root has parent");
        }
        while self.nodes[y].rank > self.nodes[x].rank {
            y = self.parent[y].expect("non-root has parent");
        }
        while x != y {
            x = self.parent[x].expect("non-root has parent");
            y = self.parent[y].expect("non-root has parent");
        }
        Ok(self.nodes[x].id)
    }

    /// Number of edges on the tree path between `a` and `b`.
    pub fn node_distance(&self, a: TaxonId, b: TaxonId) -> Result<u32, TaxonomyError> {
        let lca = self.lowest_common_ancestor(a, b)?;
        let (ra, rb, rl) = (self.rank(a)?, self.rank(b)?, self.rank(lca)?);
        Ok((ra + rb - 2 * rl) as u32)
    }

    fn index_of(&self, id: TaxonId) -> Result<usize, TaxonomyError> {
        self.slot.get(&id).copied().ok_or(TaxonomyError::UnknownId(id))
    }
}

/// Free-function form of [`TaxonomyTree::build`].
pub fn build_tree(records: Vec<TaxonNode>) -> Result<TaxonomyTree, TaxonomyError> {
    TaxonomyTree::build(records)
}

/// Free-function form of [`TaxonomyTree::node_distance`].
pub fn node_distance(tree: &TaxonomyTree, a: TaxonId, b: TaxonId) -> Result<u32, TaxonomyError> {
    tree.node_distance(a, b)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn rec(id: i64, rank: usize, parent: Option<i64>) -> TaxonNode {
        TaxonNode { id: TaxonId(id), name: format!("t{id}"), rank, parent_id: parent.map(TaxonId) }
    }

    /// root 1; children 2,3; grandchildren 4,5 (under 2) and 6,7 (under 3).
    pub fn small_tree() -> TaxonomyTree {
        TaxonomyTree::build(vec![
            rec(1, 0, None),
            rec(2, 1, Some(1)),
            rec(3, 1, Some(1)),
            rec(4, 2, Some(2)),
            rec(5, 2, Some(2)),
            rec(6, 2, Some(3)),
            rec(7, 2, Some(3)),
        ])
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn single_root_has_depth_zero() {
        let t = TaxonomyTree::build(vec![rec(9, 0, None)]).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.level_sizes(), vec![1]);
    }

    #[test]
    fn level_sizes_by_count() {
        let t = small_tree();
        assert_eq!(t.depth(), 2);
        assert_eq!(t.level_sizes(), vec![1, 2, 4]);
        assert_eq!(t.level(2).unwrap(), &[TaxonId(4), TaxonId(5), TaxonId(6), TaxonId(7)]);
    }

    #[test]
    fn build_errors_name_the_offender() {
        assert_eq!(TaxonomyTree::build(vec![]), Err(TaxonomyError::Empty));
        assert_eq!(
            TaxonomyTree::build(vec![rec(1, 0, None), rec(1, 1, Some(1))]),
            Err(TaxonomyError::DuplicateId(TaxonId(1)))
        );
        assert_eq!(
            TaxonomyTree::build(vec![rec(1, 0, None), rec(2, 1, Some(8))]),
            Err(TaxonomyError::DanglingParent { id: TaxonId(2), parent: TaxonId(8) })
        );
        assert_eq!(
            TaxonomyTree::build(vec![rec(1, 0, None), rec(2, 2, Some(1))]),
            Err(TaxonomyError::RankMismatch { id: TaxonId(2), rank: 2, parent_rank: 0 })
        );
        assert!(matches!(
            TaxonomyTree::build(vec![rec(1, 0, None), rec(2, 1, Some(3)), rec(3, 2, Some(2))]),
            Err(TaxonomyError::Cycle(_))
        ));
        assert!(matches!(
            TaxonomyTree::build(vec![rec(1, 0, None), rec(2, 0, None)]),
            Err(TaxonomyError::RootCount { found: 2, .. })
        ));
    }

    #[test]
    fn distances_on_small_tree() {
        let t = small_tree();
        assert_eq!(t.node_distance(TaxonId(4), TaxonId(4)).unwrap(), 0);
        assert_eq!(t.node_distance(TaxonId(4), TaxonId(5)).unwrap(), 2);
        assert_eq!(t.node_distance(TaxonId(4), TaxonId(7)).unwrap(), 4);
        assert_eq!(t.node_distance(TaxonId(4), TaxonId(3)).unwrap(), 3);
        assert_eq!(t.node_distance(TaxonId(1), TaxonId(6)).unwrap(), 2);
        assert_eq!(t.node_distance(TaxonId(1), TaxonId(99)), Err(TaxonomyError::UnknownId(TaxonId(99))));
    }

    #[test]
    fn ancestors_and_children() {
        let t = small_tree();
        assert_eq!(t.ancestors(TaxonId(6)).unwrap(), vec![TaxonId(3), TaxonId(1)]);
        assert_eq!(t.children(TaxonId(2)).unwrap(), vec![TaxonId(4), TaxonId(5)]);
        assert_eq!(t.ancestor_at(TaxonId(7), 1).unwrap(), TaxonId(3));
    }

    #[test]
    fn json_records_round_trip() {
        let t = small_tree();
        let text = serde_json::to_string(t.records()).unwrap();
        assert!(text.contains("\"parent_id\":null"));
        let back: Vec<TaxonNode> = serde_json::from_str(&text).unwrap();
        assert_eq!(TaxonomyTree::build(back).unwrap(), t);
    }
}
