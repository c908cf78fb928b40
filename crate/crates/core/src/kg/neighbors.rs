use super::KnowledgeGraph;
use crate::error::{Error, Result};

/// Per-entity `(neighbor, relation)` pairs from the training split, each list
/// starting with the entity's own self-loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    lists: Vec<Vec<(usize, usize)>>,
    self_loop: usize,
}

impl NeighborIndex {
    /// Builds the index from training triples only. The graph must already hold
    /// its inverse triples, so `(h,r,t)` contributes `(t,r)` to `h` and the
    /// augmented `(t,r⁻¹,h)` contributes `(h,r⁻¹)` to `t`.
    pub fn build(g: &KnowledgeGraph) -> Result<Self> {
        if !g.is_augmented() {
            return Err(Error::contract("neighbor index needs an augmented graph"));
        }
        let self_loop = g.self_loop_relation();
        let mut lists: Vec<Vec<(usize, usize)>> = (0..g.num_entities()).map(|i| vec![(i, self_loop)]).collect();
        for t in &g.train {
            lists[t.head].push((t.tail, t.relation));
        }
        Ok(Self { lists, self_loop })
    }

    /// Builds an index directly from lists; the self-loop pair is prepended to each.
    pub fn from_lists(lists: Vec<Vec<(usize, usize)>>, self_loop: usize) -> Self {
        let lists = lists
            .into_iter()
            .enumerate()
            .map(|(i, l)| std::iter::once((i, self_loop)).chain(l).collect())
            .collect();
        Self { lists, self_loop }
    }

    pub fn neighbors(&self, entity: usize) -> &[(usize, usize)] {
        &self.lists[entity]
    }

    pub fn num_entities(&self) -> usize {
        self.lists.len()
    }

    pub fn self_loop_relation(&self) -> usize {
        self.self_loop
    }

    /// Neighbor count excluding the self-loop.
    pub fn degree(&self, entity: usize) -> usize {
        self.lists[entity].len() - 1
    }

    pub fn total_pairs(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Flattened `(entity, neighbor, relation)` triples in index order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&(j, r)| (i, j, r)))
    }
}
