//! Text side: hard task prompt, structure-to-prefix projector and a small
//! post-LN transformer encoder that is pretrained by masked-token prediction
//! and then frozen.
//!
//! Prefix blocks are injected per layer. At every layer the block for that
//! layer is prepended to the key/value rows, so text positions attend over
//! prefix and text. Prefix rows are not carried between layers; only at the
//! last layer do they also run as queries, which yields their final states.

mod projector;
mod prompt;

pub use projector::PromptProjector;
pub use prompt::HardTaskPrompt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{tokenize, KnowledgeGraph, TokenVocab};
use crate::tensor::{Adam, ParamId, ParamStore, Tape, Tensor, Var};

pub const ENCODER_PREFIX: &str = "enc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_positions: 80,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    mlm_bias: ParamId,
    layers: Vec<LayerParams>,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Final text states, `T × H`.
    pub hidden: Var,
    /// Final states of the prefix rows, `P × H`, when a prefix was supplied.
    pub prompt_hidden: Option<Var>,
    /// Attention probabilities, `layers × heads` matrices of `queries × keys`.
    pub attention: Vec<Vec<Var>>,
}

/// One masked-token training example.
#[derive(Clone, Debug)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedSequence {
    /// Replaces ~15% of the non-special positions by `[MASK]` (at least one).
    pub fn sample<R: Rng + ?Sized>(seq: &[usize], rng: &mut R) -> Option<Self> {
        let candidates: Vec<usize> = (0..seq.len())
            .filter(|&i| seq[i] >= TokenVocab::SPECIALS.len())
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen_bool(0.15)).collect();
        if positions.is_empty() {
            positions.push(*candidates.choose(rng).expect("nonempty"));
        }
        let targets = positions.iter().map(|&p| seq[p]).collect();
        let mut ids = seq.to_vec();
        for &p in &positions {
            ids[p] = TokenVocab::MASK;
        }
        Some(Self { ids, positions, targets })
    }
}

fn uniform(store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Result<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.add(name, Tensor::uniform(shape, bound, rng))
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let p = ENCODER_PREFIX;
        let tok_emb = store.add(format!("{p}tok_emb"), Tensor::uniform(&[vocab_size, h], 1.0, rng))?;
        let pos_emb = store.add(format!("{p}pos_emb"), Tensor::uniform(&[cfg.max_positions, h], 0.5, rng))?;
        let emb_ln_g = store.add(format!("{p}emb_ln.g"), Tensor::filled(&[h], 1.0))?;
        let emb_ln_b = store.add(format!("{p}emb_ln.b"), Tensor::zeros(&[h]))?;
        let mlm_bias = store.add(format!("{p}mlm.b"), Tensor::zeros(&[vocab_size]))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("{p}l{l}.{s}");
            layers.push(LayerParams {
                wq: uniform(store, n("wq"), &[h, h], h, rng)?,
                bq: store.add(n("bq"), Tensor::zeros(&[h]))?,
                wk: uniform(store, n("wk"), &[h, h], h, rng)?,
                bk: store.add(n("bk"), Tensor::zeros(&[h]))?,
                wv: uniform(store, n("wv"), &[h, h], h, rng)?,
                bv: store.add(n("bv"), Tensor::zeros(&[h]))?,
                wo: uniform(store, n("wo"), &[h, h], h, rng)?,
                bo: store.add(n("bo"), Tensor::zeros(&[h]))?,
                ln1_g: store.add(n("ln1.g"), Tensor::filled(&[h], 1.0))?,
                ln1_b: store.add(n("ln1.b"), Tensor::zeros(&[h]))?,
                w1: uniform(store, n("ff1.w"), &[h, cfg.ffn], h, rng)?,
                b1: store.add(n("ff1.b"), Tensor::zeros(&[cfg.ffn]))?,
                w2: uniform(store, n("ff2.w"), &[cfg.ffn, h], cfg.ffn, rng)?,
                b2: store.add(n("ff2.b"), Tensor::zeros(&[h]))?,
                ln2_g: store.add(n("ln2.g"), Tensor::filled(&[h], 1.0))?,
                ln2_b: store.add(n("ln2.b"), Tensor::zeros(&[h]))?,
            });
        }
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            mlm_bias,
            layers,
        })
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .all(|(_, p)| p.frozen)
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(store, g);
        let b = tape.param(store, b);
        let n = tape.mul(n, g)?;
        tape.add(n, b)
    }

    fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Runs the encoder on `ids`. `prefix`, when given, holds one `P × H` block per layer.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], prefix: Option<&[Var]>) -> Result<EncodeOutput> {
        let t = ids.len();
        if t == 0 {
            return Err(Error::shape("cannot encode an empty sequence"));
        }
        if t > self.cfg.max_positions {
            return Err(Error::config(format!(
                "sequence of {t} tokens exceeds {} positions",
                self.cfg.max_positions
            )));
        }
        if let Some(p) = prefix {
            if p.len() != self.cfg.layers {
                return Err(Error::config(format!(
                    "prefix has {} layers, encoder has {}",
                    p.len(),
                    self.cfg.layers
                )));
            }
            for &b in p {
                if tape.shape(b).len() != 2 || tape.shape(b)[1] != self.cfg.hidden {
                    return Err(Error::config(format!("prefix block {:?} is not P × {}", tape.shape(b), self.cfg.hidden)));
                }
            }
        }
        let tok = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let x = tape.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let p = tape.gather_rows(pos, &positions)?;
        let x = tape.add(x, p)?;
        let mut x = self.norm(tape, store, x, self.emb_ln_g, self.emb_ln_b)?;

        let mut attention = Vec::with_capacity(self.cfg.layers);
        let mut prompt_hidden = None;
        let last = self.cfg.layers - 1;
        for (l, lp) in self.layers.iter().enumerate() {
            let block = prefix.map(|p| p[l]);
            let (out, probs) = self.layer(tape, store, lp, x, block, l == last)?;
            attention.push(probs);
            match (l == last, block) {
                (true, Some(b)) => {
                    let plen = tape.shape(b)[0];
                    prompt_hidden = Some(tape.slice_rows(out, 0, plen)?);
                    x = tape.slice_rows(out, plen, t)?;
                }
                _ => x = out,
            }
        }
        Ok(EncodeOutput {
            hidden: x,
            prompt_hidden,
            attention,
        })
    }

    fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lp: &LayerParams,
        x: Var,
        prefix: Option<Var>,
        prefix_queries: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.cfg.hidden;
        let heads = self.cfg.heads;
        let dh = h / heads;
        let full = match prefix {
            Some(p) => tape.concat_rows(&[p, x])?,
            None => x,
        };
        let queries = if prefix_queries { full } else { x };
        let q = Self::linear(tape, store, queries, lp.wq, lp.bq)?;
        let k = Self::linear(tape, store, full, lp.wk, lp.bk)?;
        let v = Self::linear(tape, store, full, lp.wv, lp.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s, 1)?;
            probs.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = Self::linear(tape, store, cat, lp.wo, lp.bo)?;
        let r1 = tape.add(queries, attn)?;
        let h1 = self.norm(tape, store, r1, lp.ln1_g, lp.ln1_b)?;
        let f = Self::linear(tape, store, h1, lp.w1, lp.b1)?;
        let f = tape.relu(f);
        let f = Self::linear(tape, store, f, lp.w2, lp.b2)?;
        let r2 = tape.add(h1, f)?;
        Ok((self.norm(tape, store, r2, lp.ln2_g, lp.ln2_b)?, probs))
    }

    /// Batch-mean masked-token cross entropy over `batch`.
    pub fn mlm_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[MaskedSequence]) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for ex in batch {
            let out = self.encode(tape, store, &ex.ids, None)?;
            rows.push(tape.gather_rows(out.hidden, &ex.positions)?);
            targets.extend_from_slice(&ex.targets);
        }
        let hidden = tape.concat_rows(&rows)?;
        let tok = tape.param(store, self.tok_emb);
        let tok_t = tape.transpose(tok)?;
        let logits = tape.matmul(hidden, tok_t)?;
        let bias = tape.param(store, self.mlm_bias);
        let logits = tape.add(logits, bias)?;
        tape.cross_entropy_smoothed(logits, &targets, 0.0)
    }

    /// Masked-token pretraining on `corpus` for `steps` Adam updates, then freezes every
    /// encoder parameter. Returns the per-step training loss.
    pub fn pretrain_and_freeze<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        corpus: &[Vec<usize>],
        steps: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if store
            .iter()
            .any(|(_, p)| p.name.starts_with(ENCODER_PREFIX) && p.frozen)
        {
            return Err(Error::contract("encoder is already frozen"));
        }
        let usable: Vec<&Vec<usize>> = corpus
            .iter()
            .filter(|s| s.iter().any(|&i| i >= TokenVocab::SPECIALS.len()))
            .collect();
        let mut opt = Adam::new(lr);
        let mut losses = Vec::with_capacity(steps);
        if !usable.is_empty() {
            for _ in 0..steps {
                let batch: Vec<MaskedSequence> = (0..batch_size.max(1))
                    .filter_map(|_| MaskedSequence::sample(usable[rng.gen_range(0..usable.len())], rng))
                    .collect();
                let mut tape = Tape::new();
                let loss = self.mlm_loss(&mut tape, store, &batch)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("pretraining loss {value}")));
                }
                losses.push(value);
                tape.backward_into(loss, store)?;
                opt.step(store);
            }
        }
        store.freeze_prefix(ENCODER_PREFIX);
        Ok(losses)
    }

    /// Mean-pooled final states of every entity's text, `|E| × H`. Needs a frozen encoder.
    pub fn embed_entity_texts(
        &self,
        store: &ParamStore,
        graph: &KnowledgeGraph,
        vocab: &TokenVocab,
        max_text: usize,
    ) -> Result<Tensor> {
        if !self.is_frozen(store) {
            return Err(Error::contract("entity text embeddings need a frozen encoder"));
        }
        let h = self.cfg.hidden;
        let mut data = Vec::with_capacity(graph.num_entities() * h);
        for e in 0..graph.num_entities() {
            let ids = text_sequence(&graph.entity_text(e), vocab, max_text);
            let mut tape = Tape::new();
            let out = self.encode(&mut tape, store, &ids, None)?;
            let pooled = tape.mean_rows(out.hidden)?;
            data.extend_from_slice(tape.value(pooled).data());
        }
        Tensor::matrix(graph.num_entities(), h, data)
    }
}

/// `[B] tokens [S]`
pub fn text_sequence(text: &str, vocab: &TokenVocab, max_text: usize) -> Vec<usize> {
    let mut ids = vec![TokenVocab::BEGIN];
    ids.extend(tokenize(text, vocab, max_text));
    ids.push(TokenVocab::SEP);
    ids
}

/// Pretraining corpus: every entity text and every relation text, wrapped in `[B] … [S]`.
pub fn text_corpus(graph: &KnowledgeGraph, vocab: &TokenVocab, max_text: usize) -> Vec<Vec<usize>> {
    (0..graph.num_entities())
        .map(|e| text_sequence(&graph.entity_text(e), vocab, max_text))
        .chain((0..graph.num_relations()).map(|r| text_sequence(graph.relation_text(r), vocab, max_text)))
        .collect()
}
