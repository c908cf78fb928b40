//! Test oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use kgprompt_core::config::RunConfig;
use kgprompt_core::graph_learner::mi_penalty;
use kgprompt_core::kg::toy::toy_graph;
use kgprompt_core::kg::{Entity, KnowledgeGraph, Relation, TokenVocab, Triple};
use kgprompt_core::model::{GraphSnapshot, Model};
use kgprompt_core::predictors::{component_attention, ConvEConfig, Scorer, ScorerKind};
use kgprompt_core::{ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// Uniform values with magnitude in `[lo, 1]`, random sign; keeps kinks and poles away.
pub fn away_from_zero(shape: &[usize], lo: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(lo..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a floor on the denominator.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

/// Fixed random weights turn any output into a scalar with a non-uniform gradient.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut rng(0xfeed));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Compares tape gradients of `f` against central differences, over every input element.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let l = probe(&mut tape, out).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = probe(&mut tape, out).unwrap();
    tape.backward(l).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

fn scorer_fixture(kind: ScorerKind, d: usize) -> (Scorer, ParamStore) {
    let mut store = ParamStore::new();
    let conve = ConvEConfig {
        rows: 2,
        kernels: 3,
        kernel_size: 2,
    };
    let s = Scorer::new(kind, d, 2.0, conve, &mut store, &mut rng(5)).unwrap();
    (s, store)
}

/// Relative gradient error of every differentiable operation and composite block.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let r = &mut rng(42);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, [$($t:expr),+], |$tape:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($t),+];
            out.push(($name, grad_check(&inputs, |$tape, $v| $body)));
        }};
    }
    check!("matmul", [uniform(&[3, 4], r), uniform(&[4, 2], r)], |t, v| t.matmul(v[0], v[1]));
    check!("transpose", [uniform(&[3, 4], r)], |t, v| t.transpose(v[0]));
    check!("add", [uniform(&[3, 4], r), uniform(&[4], r)], |t, v| t.add(v[0], v[1]));
    check!("sub", [uniform(&[3, 4], r), uniform(&[1, 4], r)], |t, v| t.sub(v[0], v[1]));
    check!("mul", [uniform(&[2, 3, 4], r), uniform(&[3, 4], r)], |t, v| t.mul(v[0], v[1]));
    check!("div", [uniform(&[3, 4], r), away_from_zero(&[3, 4], 0.5, r)], |t, v| t.div(v[0], v[1]));
    check!("relu", [away_from_zero(&[3, 4], 0.05, r)], |t, v| Ok(t.relu(v[0])));
    check!("tanh", [uniform(&[3, 4], r)], |t, v| Ok(t.tanh(v[0])));
    check!("exp", [uniform(&[3, 4], r)], |t, v| Ok(t.exp(v[0])));
    check!("scale", [uniform(&[3, 4], r)], |t, v| Ok(t.scale(v[0], -1.7)));
    check!("add_scalar", [uniform(&[3, 4], r)], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check!("sum", [uniform(&[3, 4], r)], |t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s)
    });
    check!("mean", [uniform(&[3, 4], r)], |t, v| {
        let s = t.mean(v[0]);
        Ok(t.exp(s))
    });
    check!("mean_rows", [uniform(&[5, 3], r)], |t, v| t.mean_rows(v[0]));
    check!("sum_last", [uniform(&[3, 4], r)], |t, v| Ok(t.sum_last(v[0])));
    check!("softmax_axis0", [uniform(&[3, 4], r)], |t, v| t.softmax(v[0], 0));
    check!("softmax_axis1", [uniform(&[3, 4], r)], |t, v| t.softmax(v[0], 1));
    check!("softmax_3d", [uniform(&[2, 3, 4], r)], |t, v| t.softmax(v[0], 1));
    check!("layer_norm", [uniform(&[3, 5], r)], |t, v| Ok(t.layer_norm(v[0])));
    check!("gather_rows", [uniform(&[4, 3], r)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
    check!("scatter_add_rows", [uniform(&[5, 3], r)], |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4));
    check!("segment_softmax", [uniform(&[6, 1], r)], |t, v| t.segment_softmax(v[0], &[0, 0, 1, 2, 2, 2], 3));
    check!("scale_rows", [uniform(&[4, 3], r), uniform(&[4, 1], r)], |t, v| t.scale_rows(v[0], v[1]));
    check!("slice_rows", [uniform(&[5, 3], r)], |t, v| t.slice_rows(v[0], 1, 3));
    check!("slice_cols", [uniform(&[3, 5], r)], |t, v| t.slice_cols(v[0], 2, 2));
    check!("concat_rows", [uniform(&[2, 3], r), uniform(&[1, 3], r)], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
    check!("concat_cols", [uniform(&[2, 3], r), uniform(&[2, 1], r)], |t, v| t.concat_cols(&[v[1], v[0]]));
    check!("reshape", [uniform(&[3, 4], r)], |t, v| {
        let x = t.reshape(v[0], &[2, 6])?;
        t.softmax(x, 1)
    });
    check!("pick", [uniform(&[3, 4], r)], |t, v| {
        let p = t.pick(v[0], 5)?;
        Ok(t.exp(p))
    });
    check!("conv2d", [uniform(&[2, 5, 6], r), uniform(&[3, 2, 2, 3], r)], |t, v| t.conv2d(v[0], v[1]));
    check!("cross_entropy_smoothed", [uniform(&[3, 5], r)], |t, v| t.cross_entropy_smoothed(v[0], &[4, 0, 2], 0.1));
    check!("mi_penalty", [uniform(&[6, 4], r)], |t, v| mi_penalty(t, v[0], &[0, 2], 2));
    check!("component_attention", [uniform(&[3, 4], r), uniform(&[1, 4], r)], |t, v| {
        component_attention(t, v[0], v[1])
    });
    for (name, kind) in [
        ("score_transe", ScorerKind::TransE),
        ("score_distmult", ScorerKind::DistMult),
        ("score_conve", ScorerKind::ConvE),
    ] {
        let (s, store) = scorer_fixture(kind, 4);
        let inputs = vec![uniform(&[1, 4], r), uniform(&[1, 4], r), uniform(&[5, 4], r)];
        out.push((name, grad_check(&inputs, |t, v| s.score_all(t, &store, v[0], v[1], v[2]))));
    }
    out
}

// -- fixtures ------------------------------------------------------------------------

fn vocab_for(g: &KnowledgeGraph) -> TokenVocab {
    TokenVocab::for_graph(g)
}

/// Augmented toy graph and its vocabulary.
pub fn toy() -> (KnowledgeGraph, TokenVocab) {
    let g = toy_graph().add_inverse_triples().unwrap();
    let v = vocab_for(&g);
    (g, v)
}

/// Five entities, two relations, six training triples; augmented.
pub fn five_entity_graph() -> (KnowledgeGraph, TokenVocab) {
    let names = ["red fox", "grey wolf", "brown bear", "old oak", "cold river"];
    let entities = names
        .iter()
        .enumerate()
        .map(|(i, n)| Entity {
            key: format!("x{i}"),
            name: n.to_string(),
            description: format!("a {n} of the north"),
        })
        .collect();
    let relations = vec![
        Relation {
            key: "near".into(),
            name: "lives near".into(),
        },
        Relation {
            key: "eats".into(),
            name: "eats".into(),
        },
    ];
    let t = Triple::new;
    let train = vec![t(0, 0, 3), t(1, 0, 4), t(2, 0, 3), t(0, 1, 1), t(2, 1, 0), t(1, 1, 0)];
    let g = KnowledgeGraph::from_parts(entities, relations, train, vec![t(2, 0, 4)], vec![t(1, 0, 3)])
        .unwrap()
        .add_inverse_triples()
        .unwrap();
    let v = vocab_for(&g);
    (g, v)
}

pub fn five_entity_cfg(scorer: ScorerKind) -> RunConfig {
    RunConfig {
        enc_layers: 1,
        enc_hidden: 8,
        enc_heads: 2,
        enc_ffn: 8,
        prompt_len: 2,
        proj_hidden: 6,
        components: 2,
        dim: 4,
        scorer,
        conve_rows: 2,
        conve_kernels: 2,
        conve_kernel_size: 2,
        pretrain_steps: 3,
        pretrain_batch: 4,
        ..RunConfig::default()
    }
}

/// Per-parameter relative error of `d(total_loss)/dθ` for every trainable parameter of a
/// five-entity model. Large tensors are probed at up to `max_coords` evenly spaced entries.
pub fn end_to_end_errors(scorer: ScorerKind, max_coords: usize) -> Vec<(String, f64)> {
    let (g, vocab) = five_entity_graph();
    let cfg = five_entity_cfg(scorer);
    let (model, mut store, _) = Model::build(&cfg, &g, &vocab, &mut rng(3)).unwrap();
    // move fusion weights off zero so both terms carry distinct weights
    let ls = model.fusion.log_sigma;
    store.get_mut(ls).value.data_mut().copy_from_slice(&[0.3, -0.2]);
    let batch: Vec<Triple> = g.train[..4].to_vec();
    let loss = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let parts = model.batch_loss(&mut tape, store, &batch).unwrap();
        tape.value(parts.total).item()
    };
    store.zero_grad();
    let mut tape = Tape::new();
    let parts = model.batch_loss(&mut tape, &store, &batch).unwrap();
    tape.backward_into(parts.total, &mut store).unwrap();
    let ids: Vec<_> = store.trainable().collect();
    let mut out = Vec::new();
    for id in ids {
        let p = store.get(id);
        let name = p.name.clone();
        let n = p.value.len();
        let grad = p.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_coords).max(1);
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = loss(&store);
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = loss(&store);
            store.get_mut(id).value.data_mut()[j] = orig;
            a.push(grad[j]);
            num.push((up - down) / (2.0 * FD_STEP));
        }
        out.push((name, rel_err(&a, &num)));
    }
    out
}

// -- structural oracle ---------------------------------------------------------------

/// Plain-loop triple score, written independently of the library scorer.
pub fn oracle_kge(store: &ParamStore, cfg: &RunConfig, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let d = h.len();
    match cfg.scorer {
        ScorerKind::TransE => {
            let mut dist = 0.0;
            for i in 0..d {
                let x = t[i] - (h[i] + r[i]);
                dist += x * x;
            }
            cfg.gamma - dist
        }
        ScorerKind::DistMult => {
            let mut s = 0.0;
            for i in 0..d {
                s += h[i] * r[i] * t[i];
            }
            s
        }
        ScorerKind::ConvE => {
            let q = oracle_conve_query(store, cfg, h, r);
            let mut s = 0.0;
            for i in 0..d {
                s += q[i] * t[i];
            }
            s
        }
    }
}

fn oracle_conve_query(store: &ParamStore, cfg: &RunConfig, h: &[f64], r: &[f64]) -> Vec<f64> {
    let d = h.len();
    let cols = d / cfg.conve_rows;
    let rows = 2 * cfg.conve_rows;
    let ks = cfg.conve_kernel_size;
    let kernels = store.by_name("conve.kernels").unwrap().value.data();
    let fc_w = store.by_name("conve.fc_w").unwrap().value.data();
    let fc_b = store.by_name("conve.fc_b").unwrap().value.data();
    let pixel = |i: usize, j: usize| if i < cfg.conve_rows { h[i * cols + j] } else { r[(i - cfg.conve_rows) * cols + j] };
    let mut feat = Vec::new();
    for f in 0..cfg.conve_kernels {
        for i in 0..=rows - ks {
            for j in 0..=cols - ks {
                let mut s = 0.0;
                for a in 0..ks {
                    for b in 0..ks {
                        s += kernels[f * ks * ks + a * ks + b] * pixel(i + a, j + b);
                    }
                }
                feat.push(if s > 0.0 { s } else { 0.0 });
            }
        }
    }
    (0..d)
        .map(|o| {
            let mut z = 0.0;
            for (i, x) in feat.iter().enumerate() {
                z += x * fc_w[i * d + o];
            }
            z += fc_b[o];
            if z > 0.0 {
                z
            } else {
                0.0
            }
        })
        .collect()
}

/// Brute-force structural scores of `(head, relation, ?)` from the model's final prompt states.
/// Only the encoder pass is shared with the library; mapping, attention and scoring are recomputed.
pub fn oracle_structural(model: &Model, store: &ParamStore, snap: &GraphSnapshot, head: usize, relation: usize) -> Vec<f64> {
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let gv = kgprompt_core::graph_learner::GraphVars {
        entities: tape.constant(snap.entities.clone()),
        relations: tape.constant(snap.relations.clone()),
        attention: tape.constant(Tensor::vector(snap.attention.clone())),
    };
    let tables = model.component_tables(&mut tape, gv.entities).unwrap();
    let q = model.query_forward(&mut tape, store, &gv, &tables, head, relation).unwrap();
    let ph = tape.value(q.prompt_hidden).data().to_vec();
    let (n, hid, d) = (cfg.prompt_len, cfg.enc_hidden, cfg.dim);
    let flat = n * hid;
    let w = store.value(model.structural.w_p2s).data();
    let blocks = ph.len() / flat;
    let mut mapped = vec![vec![0.0; d]; blocks];
    for (b, row) in mapped.iter_mut().enumerate() {
        for (o, m) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..flat {
                s += ph[b * flat + i] * w[i * d + o];
            }
            *m = s;
        }
    }
    let k = blocks - 1;
    let rel = &mapped[k];
    let logits: Vec<f64> = mapped[..k]
        .iter()
        .map(|c| {
            let mut s = 0.0;
            for i in 0..d {
                s += c[i] * rel[i];
            }
            s
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let beta: Vec<f64> = ex.iter().map(|e| e / z).collect();
    let kk = model.components();
    let ents = snap.entities.data();
    (0..model.num_entities())
        .map(|t| {
            let mut s = 0.0;
            for (c, &sel) in q.selected.iter().enumerate() {
                let row = &ents[(t * kk + sel) * d..(t * kk + sel + 1) * d];
                s += beta[c] * oracle_kge(store, cfg, &mapped[c], rel, row);
            }
            s
        })
        .collect()
}

/// Filtered rank with pessimistic ties, scanning every triple of every split.
pub fn oracle_rank(g: &KnowledgeGraph, scores: &[f64], head: usize, relation: usize, gold: usize) -> usize {
    let known: BTreeSet<usize> = g
        .all_triples()
        .filter(|t| t.head == head && t.relation == relation && t.tail != gold)
        .map(|t| t.tail)
        .collect();
    1 + (0..scores.len())
        .filter(|&e| e != gold && !known.contains(&e) && scores[e] >= scores[gold])
        .count()
}
