use std::collections::{BTreeSet, HashMap};

use super::KnowledgeGraph;

/// All known tails per `(head, relation)` over train ∪ valid ∪ test.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), BTreeSet<usize>>,
}

impl FilterIndex {
    pub fn build(g: &KnowledgeGraph) -> Self {
        let mut tails: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
        for t in g.all_triples() {
            tails.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        Self { tails }
    }

    /// Entities to exclude when ranking `gold` for `(head, relation, ?)`.
    pub fn exclusions(&self, head: usize, relation: usize, gold: usize) -> BTreeSet<usize> {
        self.tails
            .get(&(head, relation))
            .map(|s| s.iter().copied().filter(|&t| t != gold).collect())
            .unwrap_or_default()
    }
}
