//! Full model: graph learner → prefix projector → frozen encoder → two heads.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::encoder::{text_corpus, Encoder, HardTaskPrompt, PromptProjector, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::graph_learner::{AttentionView, EdgeLists, GraphLearner, GraphVars};
use crate::kg::{tokenize, KnowledgeGraph, NeighborIndex, TokenVocab, Triple};
use crate::predictors::{
    select_single_component, AblationMode, FusionWeights, Scorer, StructuralHead, StructuralOutput, TextualHead,
};
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub encoder: Encoder,
    pub learner: GraphLearner,
    pub projector: PromptProjector,
    pub textual: TextualHead,
    pub structural: StructuralHead,
    pub fusion: FusionWeights,
    pub neighbors: NeighborIndex,
    pub edges: EdgeLists,
    entity_tokens: Vec<Vec<usize>>,
    relation_tokens: Vec<Vec<usize>>,
}

/// Per-query tape handles.
#[derive(Clone, Debug)]
pub struct QueryVars {
    /// Graph components fed to the encoder, in prefix order.
    pub selected: Vec<usize>,
    pub prompt: HardTaskPrompt,
    /// `1 × H` state at the `[MASK]` position.
    pub mask_row: Var,
    /// `((K'+1)·n) × H` final prefix states.
    pub prompt_hidden: Var,
    pub structural: StructuralOutput,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub textual: Option<Var>,
    pub structural: Var,
    pub mi: Var,
}

/// Graph learner output detached from any tape, for read-only scoring.
#[derive(Clone, Debug)]
pub struct GraphSnapshot {
    pub entities: Tensor,
    pub relations: Tensor,
    pub attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryScores {
    pub head: usize,
    pub relation: usize,
    pub selected: Vec<usize>,
    pub beta: Vec<f64>,
    pub textual: Option<Vec<f64>>,
    pub structural: Vec<f64>,
    pub ensemble: Option<Vec<f64>>,
}

/// What [`Model::build`] did before the main training loop.
#[derive(Clone, Debug, Default)]
pub struct BuildLog {
    pub pretrain_losses: Vec<f64>,
    /// Checksum of the encoder right after it was frozen.
    pub encoder_checksum: String,
}

impl Model {
    /// Creates every parameter, pretrains and freezes the encoder (or loads a frozen one)
    /// and caches the entity text table. `graph` must be augmented.
    pub fn build<R: Rng + ?Sized>(
        cfg: &RunConfig,
        graph: &KnowledgeGraph,
        vocab: &TokenVocab,
        rng: &mut R,
    ) -> Result<(Self, ParamStore, BuildLog)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder(), vocab.len(), &mut store, rng)?;
        let mut log = BuildLog::default();
        match &cfg.frozen_encoder {
            Some(path) => {
                let ck = Checkpoint::read(path)?;
                let enc = Checkpoint {
                    meta: ck.meta.clone(),
                    entries: ck.entries.into_iter().filter(|e| e.name.starts_with(ENCODER_PREFIX)).collect(),
                };
                if enc.entries.is_empty() {
                    return Err(Error::Checkpoint(format!("{} holds no encoder parameters", path.display())));
                }
                enc.apply_to(&mut store)?;
                store.freeze_prefix(ENCODER_PREFIX);
            }
            None => {
                let corpus = text_corpus(graph, vocab, cfg.max_text_tokens);
                log.pretrain_losses = encoder.pretrain_and_freeze(
                    &mut store,
                    &corpus,
                    cfg.pretrain_steps,
                    cfg.pretrain_batch,
                    cfg.pretrain_lr,
                    rng,
                )?;
            }
        }
        log.encoder_checksum = store.checksum(ENCODER_PREFIX);
        let table = encoder.embed_entity_texts(&store, graph, vocab, cfg.max_text_tokens)?;
        if !table.is_finite() {
            return Err(Error::Numeric("entity text embeddings are not finite".into()));
        }
        let model = Self::assemble(cfg, graph, vocab, encoder, table, &mut store, rng)?;
        Ok((model, store, log))
    }

    /// Rebuilds the parameter layout for `cfg` and loads `ckpt` into it.
    pub fn from_checkpoint(
        cfg: &RunConfig,
        graph: &KnowledgeGraph,
        vocab: &TokenVocab,
        ckpt: &Checkpoint,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if let Some(arch) = ckpt.meta.get("architecture") {
            if *arch != cfg.architecture_hash() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint architecture {arch} does not match config {}",
                    cfg.architecture_hash()
                )));
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder(), vocab.len(), &mut store, &mut rng)?;
        store.freeze_prefix(ENCODER_PREFIX);
        let table = Tensor::zeros(&[graph.num_entities(), cfg.enc_hidden]);
        let model = Self::assemble(cfg, graph, vocab, encoder, table, &mut store, &mut rng)?;
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for n in &names {
            if ckpt.get(n).is_none() {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter {n}")));
            }
        }
        ckpt.apply_to(&mut store)?;
        Ok((model, store))
    }

    fn assemble<R: Rng + ?Sized>(
        cfg: &RunConfig,
        graph: &KnowledgeGraph,
        vocab: &TokenVocab,
        encoder: Encoder,
        table: Tensor,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if !graph.is_augmented() {
            return Err(Error::contract("the model needs an inverse-augmented graph"));
        }
        let neighbors = NeighborIndex::build(graph)?;
        let gcfg = cfg.graph();
        let edges = EdgeLists::new(&neighbors, gcfg.components);
        let learner = GraphLearner::new(gcfg, graph.num_entities(), graph.num_relations() + 1, store, rng)?;
        let projector = PromptProjector::new(
            cfg.dim,
            cfg.proj_hidden,
            cfg.enc_layers,
            cfg.enc_hidden,
            cfg.prompt_len,
            store,
            rng,
        )?;
        let textual = TextualHead::new(cfg.enc_hidden, table, store)?;
        let scorer = Scorer::new(cfg.scorer, cfg.dim, cfg.gamma, cfg.conve(), store, rng)?;
        let structural = StructuralHead::new(cfg.prompt_len, cfg.enc_hidden, cfg.dim, scorer, store, rng)?;
        let fusion = FusionWeights::new(store)?;
        let max = cfg.max_text_tokens;
        let entity_tokens = (0..graph.num_entities())
            .map(|e| tokenize(&graph.entity_text(e), vocab, max))
            .collect();
        let relation_tokens = (0..graph.num_relations())
            .map(|r| tokenize(graph.relation_text(r), vocab, max))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            learner,
            projector,
            textual,
            structural,
            fusion,
            neighbors,
            edges,
            entity_tokens,
            relation_tokens,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.learner.num_entities
    }

    pub fn num_query_relations(&self) -> usize {
        self.relation_tokens.len()
    }

    pub fn components(&self) -> usize {
        self.learner.cfg.components
    }

    pub fn mode(&self) -> AblationMode {
        self.cfg.mode
    }

    pub fn prompt(&self, head: usize, relation: usize) -> Result<HardTaskPrompt> {
        self.check_query(head, relation)?;
        Ok(HardTaskPrompt::from_tokens(
            &self.entity_tokens[head],
            &self.relation_tokens[relation],
            self.cfg.max_text_tokens,
        ))
    }

    fn check_query(&self, head: usize, relation: usize) -> Result<()> {
        if head >= self.num_entities() {
            return Err(Error::index(format!("unknown entity {head}")));
        }
        if relation >= self.num_query_relations() {
            return Err(Error::index(format!("unknown relation {relation}")));
        }
        Ok(())
    }

    /// `|E| × d` table of graph component `k` for every entity.
    pub fn component_tables(&self, tape: &mut Tape, entities: Var) -> Result<Vec<Var>> {
        let k = self.components();
        (0..k)
            .map(|c| {
                let idx: Vec<usize> = (0..self.num_entities()).map(|i| i * k + c).collect();
                tape.gather_rows(entities, &idx)
            })
            .collect()
    }

    /// Components of `head` that enter the encoder.
    pub fn select_components(&self, tape: &Tape, graph: &GraphVars, head: usize, relation: usize) -> Vec<usize> {
        let k = self.components();
        if self.cfg.mode != AblationMode::SingleComponent || k == 1 {
            return (0..k).collect();
        }
        let ent = tape.value(graph.entities);
        let rows: Vec<&[f64]> = (0..k).map(|c| ent.row(head * k + c)).collect();
        vec![select_single_component(&rows, tape.value(graph.relations).row(relation))]
    }

    /// Forward pass of one tail query `(head, relation, ?)`.
    pub fn query_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &GraphVars,
        tables: &[Var],
        head: usize,
        relation: usize,
    ) -> Result<QueryVars> {
        let prompt = self.prompt(head, relation)?;
        let k = self.components();
        let selected = self.select_components(tape, graph, head, relation);
        let rows: Vec<usize> = selected.iter().map(|&c| head * k + c).collect();
        let comps = tape.gather_rows(graph.entities, &rows)?;
        let rel = tape.gather_rows(graph.relations, &[relation])?;
        let inputs = tape.concat_rows(&[comps, rel])?;
        let blocks = self.projector.project(tape, store, inputs)?;
        let out = self.encoder.encode(tape, store, &prompt.ids, Some(&blocks))?;
        let prompt_hidden = out.prompt_hidden.expect("prefix was supplied");
        let mask_row = tape.slice_rows(out.hidden, prompt.mask_position, 1)?;
        let picked: Vec<Var> = selected.iter().map(|&c| tables[c]).collect();
        let structural = self.structural.forward(tape, store, prompt_hidden, &picked)?;
        Ok(QueryVars {
            selected,
            prompt,
            mask_row,
            prompt_hidden,
            structural,
        })
    }

    /// Joint training loss of a batch of tail queries.
    pub fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[Triple]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let gv = self.learner.forward(tape, store, &self.edges)?;
        let tables = self.component_tables(tape, gv.entities)?;
        let mut masks = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        for t in batch {
            let q = self.query_forward(tape, store, &gv, &tables, t.head, t.relation)?;
            masks.push(q.mask_row);
            rows.push(q.structural.scores);
        }
        let gold: Vec<usize> = batch.iter().map(|t| t.tail).collect();
        let eps = self.cfg.epsilon;
        let textual = if self.cfg.mode.has_textual() {
            let m = tape.concat_rows(&masks)?;
            let scores = self.textual.scores(tape, store, m)?;
            Some(tape.cross_entropy_smoothed(scores, &gold, eps)?)
        } else {
            None
        };
        let s = tape.concat_rows(&rows)?;
        let structural = tape.cross_entropy_smoothed(s, &gold, eps)?;
        let mut heads: Vec<usize> = batch.iter().map(|t| t.head).collect();
        heads.sort_unstable();
        heads.dedup();
        let mi = self.learner.mi_regularizer(tape, gv.entities, &heads)?;
        let total = self
            .fusion
            .total_loss(tape, store, textual, structural, mi, self.cfg.lambda)?;
        Ok(LossParts {
            total,
            textual,
            structural,
            mi,
        })
    }

    pub fn snapshot(&self, store: &ParamStore) -> Result<GraphSnapshot> {
        let mut tape = Tape::new();
        let gv = self.learner.forward(&mut tape, store, &self.edges)?;
        Ok(GraphSnapshot {
            entities: tape.value(gv.entities).clone(),
            relations: tape.value(gv.relations).clone(),
            attention: tape.value(gv.attention).data().to_vec(),
        })
    }

    pub fn attention_view<'a>(&'a self, snap: &'a GraphSnapshot) -> AttentionView<'a> {
        AttentionView {
            edges: &self.edges,
            index: &self.neighbors,
            weights: &snap.attention,
        }
    }

    /// Scores one query against every entity using a graph snapshot.
    pub fn score_query(&self, store: &ParamStore, snap: &GraphSnapshot, head: usize, relation: usize) -> Result<QueryScores> {
        let mut tape = Tape::new();
        let gv = GraphVars {
            entities: tape.constant(snap.entities.clone()),
            relations: tape.constant(snap.relations.clone()),
            attention: tape.constant(Tensor::vector(snap.attention.clone())),
        };
        let tables = self.component_tables(&mut tape, gv.entities)?;
        let q = self.query_forward(&mut tape, store, &gv, &tables, head, relation)?;
        let structural = tape.value(q.structural.scores).data().to_vec();
        let beta = tape.value(q.structural.beta).data().to_vec();
        let (textual, ensemble) = if self.cfg.mode.has_textual() {
            let s = self.textual.scores(&mut tape, store, q.mask_row)?;
            let t = tape.value(s).data().to_vec();
            let e = self.fusion.ensemble(store, &t, &structural)?;
            (Some(t), Some(e))
        } else {
            (None, None)
        };
        Ok(QueryScores {
            head,
            relation,
            selected: q.selected,
            beta,
            textual,
            structural,
            ensemble,
        })
    }

    /// Scores many queries in parallel; output order follows `queries`.
    pub fn score_queries(&self, store: &ParamStore, queries: &[(usize, usize)]) -> Result<Vec<QueryScores>> {
        let snap = self.snapshot(store)?;
        queries
            .par_iter()
            .map(|&(h, r)| self.score_query(store, &snap, h, r))
            .collect()
    }

    /// Checkpoint of every parameter with provenance metadata.
    pub fn checkpoint(&self, store: &ParamStore) -> Checkpoint {
        Checkpoint::from_store(store)
            .with_meta("config_hash", self.cfg.hash())
            .with_meta("seed", self.cfg.seed.to_string())
            .with_meta("architecture", self.cfg.architecture_hash())
    }
}
