//! Fixtures shared by the benchmarks.

use kgprompt_core::config::RunConfig;
use kgprompt_core::kg::toy::toy_graph;
use kgprompt_core::kg::{KnowledgeGraph, TokenVocab};
use kgprompt_core::model::Model;
use kgprompt_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Augmented toy graph and vocabulary.
pub fn toy() -> (KnowledgeGraph, TokenVocab) {
    let g = toy_graph().add_inverse_triples().expect("toy graph is raw");
    let v = TokenVocab::for_graph(&g);
    (g, v)
}

/// Untrained toy-preset model with a briefly pretrained encoder.
pub fn toy_model(cfg: &RunConfig) -> (Model, ParamStore, KnowledgeGraph) {
    let (g, vocab) = toy();
    let cfg = RunConfig {
        pretrain_steps: 2,
        ..cfg.clone()
    };
    let (m, s, _) = Model::build(&cfg, &g, &vocab, &mut rng(cfg.seed)).expect("toy model builds");
    (m, s, g)
}
