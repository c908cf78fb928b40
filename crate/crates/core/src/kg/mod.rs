//! Knowledge graph ingestion: TSV loading, inverse-triple augmentation,
//! neighbor index, tokenizer vocabulary and filtered-ranking exclusions.

mod filter;
mod neighbors;
pub mod toy;
mod vocab;

pub use filter::FilterIndex;
pub use neighbors::NeighborIndex;
pub use vocab::{tokenize, TokenVocab, MAX_TEXT_TOKENS};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REVERSE_PREFIX: &str = "reverse: ";
const REVERSE_KEY_SUFFIX: &str = "__reverse";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub key: String,
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub key: String,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other}"))),
        }
    }
}

/// Counts written next to a dataset dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub augmented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_seed: Option<u64>,
    /// Acceptable range of entity text-embedding row norms, when the dump carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding_norm_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    raw_relations: usize,
    augmented: bool,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

/// File locations of a dataset.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entities: PathBuf,
    pub relations: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            entities: dir.join("entities.tsv"),
            relations: dir.join("relations.tsv"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

impl KnowledgeGraph {
    /// Builds a graph from in-memory parts, checking referential integrity.
    pub fn from_parts(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let mut entity_ids = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if entity_ids.insert(e.key.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate entity id {}", e.key)));
            }
        }
        let mut relation_ids = HashMap::new();
        for (i, r) in relations.iter().enumerate() {
            if relation_ids.insert(r.key.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate relation id {}", r.key)));
            }
        }
        for t in train.iter().chain(&valid).chain(&test) {
            if t.head >= entities.len() || t.tail >= entities.len() || t.relation >= relations.len() {
                return Err(Error::Integrity(format!("triple {t:?} references a missing id")));
            }
        }
        Ok(Self {
            raw_relations: relations.len(),
            entities,
            relations,
            train,
            valid,
            test,
            augmented: false,
            entity_ids,
            relation_ids,
        })
    }

    /// Loads triples plus entity and relation text files.
    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        let ent_text = read(&paths.entities)?;
        let mut entities = Vec::new();
        for (ln, line) in lines(&ent_text) {
            let f: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&f.len()) || f[0].is_empty() {
                return Err(parse_err(&paths.entities, ln, "expected id<TAB>name<TAB>description"));
            }
            entities.push(Entity {
                key: f[0].to_string(),
                name: f[1].to_string(),
                description: f.get(2).unwrap_or(&"").to_string(),
            });
        }
        let rel_text = read(&paths.relations)?;
        let mut relations = Vec::new();
        for (ln, line) in lines(&rel_text) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 || f[0].is_empty() {
                return Err(parse_err(&paths.relations, ln, "expected id<TAB>name"));
            }
            relations.push(Relation {
                key: f[0].to_string(),
                name: f[1].to_string(),
            });
        }
        let mut g = Self::from_parts(entities, relations, vec![], vec![], vec![])?;
        g.train = g.parse_triples(&paths.train)?;
        g.valid = g.parse_triples(&paths.valid)?;
        g.test = g.parse_triples(&paths.test)?;
        Ok(g)
    }

    /// Loads `<dir>/{train,valid,test,entities,relations}.tsv`. When `manifest.json`
    /// marks the dump as augmented, the inverse relations are recognised instead of re-added.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut g = Self::load(&DatasetPaths::in_dir(dir))?;
        if let Some(m) = read_manifest(dir)? {
            if m.augmented {
                g.mark_augmented()?;
            }
        }
        Ok(g)
    }

    /// [`load_dir`](Self::load_dir), adding inverse triples unless the dump already has them.
    pub fn load_augmented(dir: &Path) -> Result<Self> {
        let g = Self::load_dir(dir)?;
        if g.is_augmented() {
            Ok(g)
        } else {
            g.add_inverse_triples()
        }
    }

    fn parse_triples(&self, path: &Path) -> Result<Vec<Triple>> {
        let text = read(path)?;
        let mut out = Vec::new();
        for (ln, line) in lines(&text) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(parse_err(path, ln, "expected head<TAB>relation<TAB>tail"));
            }
            let ent = |k: &str| {
                self.entity_ids.get(k).copied().ok_or_else(|| {
                    Error::Integrity(format!("{}:{ln}: unknown entity {k}", path.display()))
                })
            };
            let rel = self.relation_ids.get(f[1]).copied().ok_or_else(|| {
                Error::Integrity(format!("{}:{ln}: unknown relation {}", path.display(), f[1]))
            })?;
            out.push(Triple::new(ent(f[0])?, rel, ent(f[2])?));
        }
        Ok(out)
    }

    fn mark_augmented(&mut self) -> Result<()> {
        let n = self.relations.len();
        let half = n / 2;
        let paired = n.is_multiple_of(2)
            && (0..half).all(|r| {
                self.relations[r + half].name == format!("{REVERSE_PREFIX}{}", self.relations[r].name)
            });
        if !paired {
            return Err(Error::Integrity(
                "manifest says augmented but relations are not forward/reverse pairs".into(),
            ));
        }
        self.raw_relations = half;
        self.augmented = true;
        Ok(())
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including inverses once augmented; excludes the self-loop.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_raw_relations(&self) -> usize {
        self.raw_relations
    }

    /// Id of the self-connection relation used by the neighbor index (one past the last relation).
    pub fn self_loop_relation(&self) -> usize {
        self.relations.len()
    }

    pub fn inverse_of(&self, relation: usize) -> Option<usize> {
        if !self.augmented || relation >= self.relations.len() {
            return None;
        }
        Some(if relation < self.raw_relations {
            relation + self.raw_relations
        } else {
            relation - self.raw_relations
        })
    }

    pub fn entity_id(&self, key: &str) -> Option<usize> {
        self.entity_ids.get(key).copied()
    }

    pub fn relation_id(&self, key: &str) -> Option<usize> {
        self.relation_ids.get(key).copied()
    }

    /// Text fed to the encoder for an entity: `name: description`, or just the name.
    pub fn entity_text(&self, id: usize) -> String {
        let e = &self.entities[id];
        if e.description.trim().is_empty() {
            e.name.clone()
        } else {
            format!("{}: {}", e.name, e.description)
        }
    }

    pub fn relation_text(&self, id: usize) -> &str {
        &self.relations[id].name
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Adds `(t, r⁻¹, h)` for every triple of every split. The inverse of relation `r`
    /// gets id `r + R` and the name `"reverse: " + name(r)`.
    pub fn add_inverse_triples(mut self) -> Result<Self> {
        if self.augmented {
            return Err(Error::contract("graph already carries inverse triples"));
        }
        let r0 = self.relations.len();
        for r in 0..r0 {
            let rel = &self.relations[r];
            let inv = Relation {
                key: format!("{}{REVERSE_KEY_SUFFIX}", rel.key),
                name: format!("{REVERSE_PREFIX}{}", rel.name),
            };
            if self.relation_ids.insert(inv.key.clone(), r0 + r).is_some() {
                return Err(Error::Integrity(format!("relation id {} already exists", inv.key)));
            }
            self.relations.push(inv);
        }
        for split in [&mut self.train, &mut self.valid, &mut self.test] {
            let inv: Vec<Triple> = split
                .iter()
                .map(|t| Triple::new(t.tail, t.relation + r0, t.head))
                .collect();
            split.extend(inv);
        }
        self.raw_relations = r0;
        self.augmented = true;
        Ok(self)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            entities: self.entities.len(),
            relations: self.relations.len(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            augmented: self.augmented,
            generator_seed: None,
            text_embedding_norm_range: None,
        }
    }

    /// Writes the graph in the same TSV layout `load_dir` reads, plus `manifest.json`.
    pub fn write_dir(&self, dir: &Path, manifest: &Manifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        let mut ents = String::new();
        for e in &self.entities {
            ents.push_str(&format!("{}\t{}\t{}\n", e.key, e.name, e.description));
        }
        write("entities.tsv", ents)?;
        let mut rels = String::new();
        for r in &self.relations {
            rels.push_str(&format!("{}\t{}\n", r.key, r.name));
        }
        write("relations.tsv", rels)?;
        for (name, triples) in [("train.tsv", &self.train), ("valid.tsv", &self.valid), ("test.tsv", &self.test)] {
            let mut s = String::new();
            for t in triples {
                s.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.entities[t.head].key, self.relations[t.relation].key, self.entities[t.tail].key
                ));
            }
            write(name, s)?;
        }
        write("manifest.json", serde_json::to_string_pretty(manifest)? + "\n")
    }
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let p = dir.join("manifest.json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&read(&p)?)?))
}
