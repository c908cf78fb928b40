//! Training loop: encoder pretraining and freezing, then Adam over the trainable
//! parameters with per-epoch validation and best-checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::ENCODER_PREFIX;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::kg::{KnowledgeGraph, Split, TokenVocab};
use crate::model::{BuildLog, Model};
use crate::tensor::{Adam, Checkpoint, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub textual_loss: Option<f64>,
    pub structural_loss: f64,
    pub mi_loss: f64,
    pub valid_mrr: f64,
}

/// State at the moment a non-finite loss was observed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub textual_loss: Option<f64>,
    pub structural_loss: f64,
    pub mi_loss: f64,
    pub log_sigma: Vec<f64>,
    /// `(name, l2 norm, all finite)` of every parameter.
    pub parameters: Vec<(String, f64, bool)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters after the last epoch.
    pub store: ParamStore,
    pub build: BuildLog,
    pub initial_valid_mrr: f64,
    pub log: Vec<EpochLog>,
    /// 0 when no epoch improved on the initial model.
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
    pub best: Checkpoint,
}

#[derive(Debug)]
pub enum TrainError {
    Numeric(Box<Diagnostics>),
    Other(Error),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        Self::Other(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Other(e) => e,
            TrainError::Numeric(d) => Error::Numeric(format!(
                "non-finite loss {} at epoch {} batch {}",
                d.loss, d.epoch, d.batch
            )),
        }
    }
}

/// Validation MRR used for model selection: ensemble when available, structural otherwise.
pub fn selection_mrr(model: &Model, store: &ParamStore, graph: &KnowledgeGraph) -> Result<f64> {
    let (r, _) = evaluate(model, store, graph, Split::Valid, false)?;
    Ok(r.ensemble.as_ref().unwrap_or(&r.structural).mrr)
}

fn diagnostics(store: &ParamStore, model: &Model, epoch: usize, batch: usize, vals: [f64; 4], textual: bool) -> Diagnostics {
    Diagnostics {
        epoch,
        batch,
        loss: vals[0],
        textual_loss: textual.then_some(vals[1]),
        structural_loss: vals[2],
        mi_loss: vals[3],
        log_sigma: store.value(model.fusion.log_sigma).data().to_vec(),
        parameters: store
            .iter()
            .map(|(_, p)| {
                let n = p.value.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                (p.name.clone(), n, p.value.is_finite())
            })
            .collect(),
    }
}

/// Trains on the inverse-augmented `graph`. Everything random derives from `cfg.seed`.
pub fn train(cfg: &RunConfig, graph: &KnowledgeGraph, vocab: &TokenVocab) -> std::result::Result<TrainOutcome, TrainError> {
    train_with(cfg, graph, vocab, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    graph: &KnowledgeGraph,
    vocab: &TokenVocab,
    mut on_epoch: impl FnMut(&EpochLog),
) -> std::result::Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store, build) = Model::build(cfg, graph, vocab, &mut rng)?;
    let initial = selection_mrr(&model, &store, graph)?;
    let mut best = model.checkpoint(&store).with_meta("epoch", "0");
    let (mut best_epoch, mut best_mrr) = (0, initial);
    let mut opt = Adam::new(cfg.lr);
    let mut order = graph.train.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let parts = model.batch_loss(&mut tape, &store, batch)?;
            let vals = [
                tape.value(parts.total).item(),
                parts.textual.map_or(0.0, |v| tape.value(v).item()),
                tape.value(parts.structural).item(),
                tape.value(parts.mi).item(),
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                let d = diagnostics(&store, &model, epoch, b, vals, parts.textual.is_some());
                return Err(TrainError::Numeric(Box::new(d)));
            }
            tape.backward_into(parts.total, &mut store)?;
            opt.step(&mut store);
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let valid_mrr = selection_mrr(&model, &store, graph)?;
        let entry = EpochLog {
            epoch,
            loss: sums[0] / n,
            textual_loss: cfg.mode.has_textual().then_some(sums[1] / n),
            structural_loss: sums[2] / n,
            mi_loss: sums[3] / n,
            valid_mrr,
        };
        on_epoch(&entry);
        log::info!(
            "epoch {epoch}: loss {:.5} valid MRR {:.4}",
            entry.loss,
            entry.valid_mrr
        );
        if valid_mrr > best_mrr {
            best_mrr = valid_mrr;
            best_epoch = epoch;
            best = model.checkpoint(&store).with_meta("epoch", epoch.to_string());
        }
        log.push(entry);
    }
    debug_assert_eq!(store.checksum(ENCODER_PREFIX), build.encoder_checksum);
    Ok(TrainOutcome {
        model,
        store,
        build,
        initial_valid_mrr: initial,
        log,
        best_epoch,
        best_valid_mrr: best_mrr,
        best,
    })
}

#[derive(Serialize)]
struct StampedLog<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    entry: &'a EpochLog,
}

/// Training log as JSON lines, each stamped with the config hash and seed.
pub fn log_to_jsonl(log: &[EpochLog], config_hash: &str, seed: u64) -> Result<String> {
    let mut s = String::new();
    for entry in log {
        s.push_str(&serde_json::to_string(&StampedLog { config_hash, seed, entry })?);
        s.push('\n');
    }
    Ok(s)
}
