//! Deterministic toy knowledge graph used by tests and `prepare --make-toy`.
//!
//! Fifty entities in five guilds of ten. Six relations follow fixed rules
//! (guild leader, ring neighbor, symmetric partner, cross-guild alliance and
//! trade, mentoring two steps ahead), so held-out triples are predictable
//! from both the graph and the entity text.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Entity, KnowledgeGraph, Manifest, Relation, Triple};
use crate::error::Result;

pub const TOY_SEED: u64 = 2024;
pub const TOY_GROUPS: usize = 5;
pub const TOY_GROUP_SIZE: usize = 10;
pub const TOY_VALID: usize = 10;
pub const TOY_TEST: usize = 10;

const NOUNS: [&str; TOY_GROUPS] = ["falcon", "otter", "badger", "heron", "lynx"];
const COLORS: [&str; TOY_GROUPS] = ["red", "blue", "green", "amber", "violet"];
const PLACES: [&str; TOY_GROUPS] = ["harbor", "forest", "quarry", "marsh", "ridge"];
const ADJECTIVES: [&str; TOY_GROUP_SIZE] = [
    "ardent", "brisk", "calm", "daring", "eager", "fierce", "gentle", "hardy", "keen", "lucid",
];
const ROLES: [&str; 3] = ["scout", "smith", "scribe"];

const RELATIONS: [(&str, &str); 6] = [
    ("serves", "serves"),
    ("neighbor_of", "neighbor of"),
    ("partner_of", "partner of"),
    ("allied_with", "allied with"),
    ("trades_with", "trades with"),
    ("mentors", "mentors"),
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn id(g: usize, j: usize) -> usize {
    g * TOY_GROUP_SIZE + j
}

/// Raw (not augmented) toy graph.
pub fn toy_graph() -> KnowledgeGraph {
    let mut entities = Vec::new();
    for (g, noun) in NOUNS.iter().enumerate() {
        for (j, adj) in ADJECTIVES.iter().enumerate() {
            let role = if j == 0 { "leader" } else { ROLES[j % 3] };
            entities.push(Entity {
                key: format!("e{:02}", id(g, j)),
                name: format!("{} {}", capitalize(adj), capitalize(noun)),
                description: format!("{role} of the {} guild based in the {}", COLORS[g], PLACES[g]),
            });
        }
    }
    let relations = RELATIONS
        .iter()
        .map(|(k, n)| Relation {
            key: k.to_string(),
            name: n.to_string(),
        })
        .collect();

    let n = TOY_GROUP_SIZE;
    let mut triples = Vec::new();
    for g in 0..TOY_GROUPS {
        for j in 0..n {
            let h = id(g, j);
            if j != 0 {
                triples.push(Triple::new(h, 0, id(g, 0)));
            }
            triples.push(Triple::new(h, 1, id(g, (j + 1) % n)));
            triples.push(Triple::new(h, 2, id(g, j ^ 1)));
            triples.push(Triple::new(h, 3, id((g + 1) % TOY_GROUPS, j)));
            triples.push(Triple::new(h, 4, id((g + 2) % TOY_GROUPS, (j + 3) % n)));
            if j < n / 2 {
                triples.push(Triple::new(h, 4, id((g + 2) % TOY_GROUPS, (j + 7) % n)));
            }
            triples.push(Triple::new(h, 5, id(g, (j + 2) % n)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    triples.shuffle(&mut rng);
    let valid = triples[..TOY_VALID].to_vec();
    let test = triples[TOY_VALID..TOY_VALID + TOY_TEST].to_vec();
    let train = triples[TOY_VALID + TOY_TEST..].to_vec();
    KnowledgeGraph::from_parts(entities, relations, train, valid, test).expect("toy graph is well-formed")
}

pub fn toy_manifest(g: &KnowledgeGraph) -> Manifest {
    Manifest {
        generator_seed: Some(TOY_SEED),
        text_embedding_norm_range: Some((1e-6, 1e3)),
        ..g.manifest()
    }
}

/// Writes the raw toy dataset and its manifest into `dir`.
pub fn write_toy(dir: &Path) -> Result<Manifest> {
    let g = toy_graph();
    let m = toy_manifest(&g);
    g.write_dir(dir, &m)?;
    Ok(m)
}
