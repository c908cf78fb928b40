use crate::error::{Error, Result};
use crate::kg::{tokenize, KnowledgeGraph, TokenVocab};

/// `[B] head [S] relation [S] [MASK] [S]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardTaskPrompt {
    pub ids: Vec<usize>,
    pub mask_position: usize,
}

impl HardTaskPrompt {
    /// Builds the prompt for a tail query. Head and relation text together keep at most
    /// `max_text` tokens; the head text is cut first so the relation stays whole.
    pub fn assemble(
        head: usize,
        relation: usize,
        graph: &KnowledgeGraph,
        vocab: &TokenVocab,
        max_text: usize,
    ) -> Result<Self> {
        if head >= graph.num_entities() {
            return Err(Error::index(format!("unknown entity {head}")));
        }
        if relation >= graph.num_relations() {
            return Err(Error::index(format!("unknown relation {relation}")));
        }
        let head_tokens = tokenize(&graph.entity_text(head), vocab, max_text);
        let rel_tokens = tokenize(graph.relation_text(relation), vocab, max_text);
        Ok(Self::from_tokens(&head_tokens, &rel_tokens, max_text))
    }

    /// Applies the `max_text` budget to already tokenized head and relation text.
    pub fn from_tokens(head: &[usize], relation: &[usize], max_text: usize) -> Self {
        let mut rel = &relation[..relation.len().min(max_text)];
        let mut budget = max_text - rel.len();
        if budget == 0 && !head.is_empty() && !rel.is_empty() {
            // keep at least one head token when the relation alone fills the budget
            rel = &rel[..rel.len() - 1];
            budget = 1;
        }
        Self::from_parts(&head[..head.len().min(budget)], rel)
    }

    pub fn from_parts(head: &[usize], relation: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(head.len() + relation.len() + 5);
        ids.push(TokenVocab::BEGIN);
        ids.extend_from_slice(head);
        ids.push(TokenVocab::SEP);
        ids.extend_from_slice(relation);
        ids.push(TokenVocab::SEP);
        let mask_position = ids.len();
        ids.push(TokenVocab::MASK);
        ids.push(TokenVocab::SEP);
        Self { ids, mask_position }
    }

    pub fn text_len(&self) -> usize {
        self.ids.len() - 5
    }
}
