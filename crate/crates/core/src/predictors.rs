//! Textual and structural heads, KGE scorers, loss fusion and ablation modes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AblationMode {
    #[default]
    Full,
    /// Only the component most related to the query relation is projected into the encoder.
    SingleComponent,
    /// One component per entity.
    NoDisen,
    /// Structural head only.
    NoTextualPredictor,
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "single_component" => Ok(Self::SingleComponent),
            "no_disen" => Ok(Self::NoDisen),
            "no_textual_predictor" => Ok(Self::NoTextualPredictor),
            _ => Err(Error::config(format!("unknown ablation mode {s}"))),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::SingleComponent => "single_component",
            Self::NoDisen => "no_disen",
            Self::NoTextualPredictor => "no_textual_predictor",
        })
    }
}

impl AblationMode {
    pub fn has_textual(self) -> bool {
        self != Self::NoTextualPredictor
    }
}

// -- textual head ---------------------------------------------------------------

/// `Q_T = e_T · (W_o · m)` for the `[MASK]` state `m`.
#[derive(Clone, Debug)]
pub struct TextualHead {
    pub w_o: ParamId,
    /// Frozen `|E| × H` entity text table.
    pub table: ParamId,
}

impl TextualHead {
    /// `W_o` starts as the identity. `table` is registered frozen.
    pub fn new(hidden: usize, table: Tensor, store: &mut ParamStore) -> Result<Self> {
        if table.shape().len() != 2 || table.cols() != hidden {
            return Err(Error::config(format!(
                "entity text table {:?} does not have {hidden} columns",
                table.shape()
            )));
        }
        let w_o = store.add("text.w_o", Tensor::identity(hidden))?;
        let table = store.add("text.entity_table", table)?;
        store.freeze(table);
        Ok(Self { w_o, table })
    }

    /// Scores for a batch of mask states `B × H`, giving `B × |E|`.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, mask_rows: Var) -> Result<Var> {
        let w = tape.param(store, self.w_o);
        let wt = tape.transpose(w)?;
        let u = tape.matmul(mask_rows, wt)?;
        let e = tape.param(store, self.table);
        let et = tape.transpose(e)?;
        tape.matmul(u, et)
    }
}

// -- KGE scorers -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScorerKind {
    TransE,
    DistMult,
    #[default]
    ConvE,
}

impl FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(Self::TransE),
            "distmult" => Ok(Self::DistMult),
            "conve" => Ok(Self::ConvE),
            _ => Err(Error::config(format!("unknown scorer {s}"))),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TransE => "transe",
            Self::DistMult => "distmult",
            Self::ConvE => "conve",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvEConfig {
    /// Each of head and relation is reshaped to `rows × (d / rows)` and stacked.
    pub rows: usize,
    pub kernels: usize,
    pub kernel_size: usize,
}

impl Default for ConvEConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            kernels: 8,
            kernel_size: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    cfg: ConvEConfig,
    cols: usize,
    kernels: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ConvParams {
    fn feature_len(&self) -> usize {
        let (h, w) = (2 * self.cfg.rows, self.cols);
        let k = self.cfg.kernel_size;
        self.cfg.kernels * (h - k + 1) * (w - k + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub kind: ScorerKind,
    pub dim: usize,
    pub gamma: f64,
    conv: Option<ConvParams>,
}

impl Scorer {
    pub fn new<R: Rng + ?Sized>(
        kind: ScorerKind,
        dim: usize,
        gamma: f64,
        conve: ConvEConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = match kind {
            ScorerKind::ConvE => {
                let c = conve;
                if c.rows == 0 || !dim.is_multiple_of(c.rows) {
                    return Err(Error::config(format!("cannot reshape {dim} into {} rows", c.rows)));
                }
                let cols = dim / c.rows;
                if c.kernels == 0 || c.kernel_size == 0 || c.kernel_size > cols || c.kernel_size > 2 * c.rows {
                    return Err(Error::config(format!(
                        "{0}×{0} kernels do not fit a {1}×{cols} input",
                        c.kernel_size,
                        2 * c.rows
                    )));
                }
                let ks = c.kernel_size;
                let kb = 1.0 / ((ks * ks) as f64).sqrt();
                let kernels = store.add("conve.kernels", Tensor::uniform(&[c.kernels, 1, ks, ks], kb, rng))?;
                let mut p = ConvParams {
                    cfg: c,
                    cols,
                    kernels,
                    fc_w: kernels,
                    fc_b: kernels,
                };
                let flen = p.feature_len();
                let fb = 1.0 / (flen as f64).sqrt();
                p.fc_w = store.add("conve.fc_w", Tensor::uniform(&[flen, dim], fb, rng))?;
                p.fc_b = store.add("conve.fc_b", Tensor::zeros(&[dim]))?;
                Some(p)
            }
            _ => None,
        };
        Ok(Self { kind, dim, gamma, conv })
    }

    /// Scores every row of `table` (`N × d`) as the tail for one query `(head, rel)`, both `1 × d`.
    /// Returns `1 × N`.
    pub fn score_all(&self, tape: &mut Tape, store: &ParamStore, head: Var, rel: Var, table: Var) -> Result<Var> {
        let n = tape.shape(table)[0];
        match self.kind {
            ScorerKind::TransE => {
                let q = tape.add(head, rel)?;
                let diff = tape.sub(table, q)?;
                let sq = tape.mul(diff, diff)?;
                let dist = tape.sum_last(sq);
                let dist = tape.reshape(dist, &[1, n])?;
                let neg = tape.scale(dist, -1.0);
                Ok(tape.add_scalar(neg, self.gamma))
            }
            ScorerKind::DistMult => {
                let q = tape.mul(head, rel)?;
                let tt = tape.transpose(table)?;
                tape.matmul(q, tt)
            }
            ScorerKind::ConvE => {
                let q = self.conve_query(tape, store, head, rel)?;
                let tt = tape.transpose(table)?;
                tape.matmul(q, tt)
            }
        }
    }

    /// ConvE query vector `relu(W · flatten(relu(conv([h; r]))) + b)`, `1 × d`.
    fn conve_query(&self, tape: &mut Tape, store: &ParamStore, head: Var, rel: Var) -> Result<Var> {
        let p = self.conv.as_ref().expect("conve parameters");
        let (rows, cols) = (p.cfg.rows, p.cols);
        let h = tape.reshape(head, &[rows, cols])?;
        let r = tape.reshape(rel, &[rows, cols])?;
        let img = tape.concat_rows(&[h, r])?;
        let img = tape.reshape(img, &[1, 2 * rows, cols])?;
        let k = tape.param(store, p.kernels);
        let fmap = tape.conv2d(img, k)?;
        let fmap = tape.relu(fmap);
        let flat = tape.reshape(fmap, &[1, p.feature_len()])?;
        let w = tape.param(store, p.fc_w);
        let b = tape.param(store, p.fc_b);
        let z = tape.matmul(flat, w)?;
        let z = tape.add(z, b)?;
        Ok(tape.relu(z))
    }

    /// Scalar score of a single triple, computed without the tape.
    pub fn kge_score(&self, store: &ParamStore, h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
        let d = self.dim;
        if h.len() != d || r.len() != d || t.len() != d {
            return Err(Error::shape(format!("kge_score expects vectors of size {d}")));
        }
        Ok(match self.kind {
            ScorerKind::TransE => {
                let dist: f64 = (0..d).map(|i| (h[i] + r[i] - t[i]).powi(2)).sum();
                self.gamma - dist
            }
            ScorerKind::DistMult => (0..d).map(|i| h[i] * r[i] * t[i]).sum(),
            ScorerKind::ConvE => {
                let q = self.conve_query_plain(store, h, r);
                q.iter().zip(t).map(|(a, b)| a * b).sum()
            }
        })
    }

    fn conve_query_plain(&self, store: &ParamStore, h: &[f64], r: &[f64]) -> Vec<f64> {
        let p = self.conv.as_ref().expect("conve parameters");
        let (rows, cols, ks) = (2 * p.cfg.rows, p.cols, p.cfg.kernel_size);
        let img: Vec<f64> = h.iter().chain(r).copied().collect();
        let k = store.value(p.kernels).data();
        let (oh, ow) = (rows - ks + 1, cols - ks + 1);
        let mut feat = Vec::with_capacity(p.feature_len());
        for f in 0..p.cfg.kernels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for a in 0..ks {
                        for b in 0..ks {
                            s += k[(f * ks + a) * ks + b] * img[(i + a) * cols + j + b];
                        }
                    }
                    feat.push(s.max(0.0));
                }
            }
        }
        let w = store.value(p.fc_w).data();
        let bias = store.value(p.fc_b).data();
        (0..self.dim)
            .map(|o| {
                let z: f64 = feat.iter().enumerate().map(|(i, x)| x * w[i * self.dim + o]).sum::<f64>() + bias[o];
                z.max(0.0)
            })
            .collect()
    }
}

// -- structural head ---------------------------------------------------------------

/// Maps final prompt states back to the graph space and scores candidates.
#[derive(Clone, Debug)]
pub struct StructuralHead {
    /// `(n·H) × d`, applied on the right of a flattened `n × H` block.
    pub w_p2s: ParamId,
    pub prompt_len: usize,
    pub hidden: usize,
    pub dim: usize,
    pub scorer: Scorer,
}

/// Per-query structural outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StructuralOutput {
    /// `K' × d` mapped component prompts.
    pub components: Var,
    /// `1 × d` mapped relation prompt.
    pub relation: Var,
    /// `1 × K'` component attention.
    pub beta: Var,
    /// `1 × |E|` fused scores.
    pub scores: Var,
}

impl StructuralHead {
    pub fn new<R: Rng + ?Sized>(
        prompt_len: usize,
        hidden: usize,
        dim: usize,
        scorer: Scorer,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if scorer.dim != dim {
            return Err(Error::config("scorer and structural head disagree on d"));
        }
        let fan = prompt_len * hidden;
        let w_p2s = store.add("struct.w_p2s", Tensor::uniform(&[fan, dim], 1.0 / (fan as f64).sqrt(), rng))?;
        Ok(Self {
            w_p2s,
            prompt_len,
            hidden,
            dim,
            scorer,
        })
    }

    /// Maps a stack of `m` prompt blocks (`(m·n) × H`) to `m × d`.
    pub fn map_prompts(&self, tape: &mut Tape, store: &ParamStore, prompt_hidden: Var) -> Result<Var> {
        let shape = tape.shape(prompt_hidden).to_vec();
        let n = self.prompt_len;
        if shape.len() != 2 || shape[1] != self.hidden || !shape[0].is_multiple_of(n) || shape[0] == 0 {
            return Err(Error::config(format!(
                "prompt states {shape:?} are not blocks of {n} × {}",
                self.hidden
            )));
        }
        let m = shape[0] / n;
        let flat = tape.reshape(prompt_hidden, &[m, n * self.hidden])?;
        let w = tape.param(store, self.w_p2s);
        tape.matmul(flat, w)
    }

    /// Structural scores for one query. `prompt_hidden` holds `K'` component blocks then the
    /// relation block; `tables[k]` is the `|E| × d` table of graph component `k` matching block `k`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prompt_hidden: Var,
        tables: &[Var],
    ) -> Result<StructuralOutput> {
        let mapped = self.map_prompts(tape, store, prompt_hidden)?;
        let m = tape.shape(mapped)[0];
        let k = m - 1;
        if k == 0 || tables.len() != k {
            return Err(Error::config(format!(
                "{} component tables for {k} component prompts",
                tables.len()
            )));
        }
        let components = tape.slice_rows(mapped, 0, k)?;
        let relation = tape.slice_rows(mapped, k, 1)?;
        let beta = component_attention(tape, components, relation)?;
        let mut per = Vec::with_capacity(k);
        for (c, &table) in tables.iter().enumerate() {
            let head = tape.slice_rows(components, c, 1)?;
            per.push(self.scorer.score_all(tape, store, head, relation, table)?);
        }
        let stack = if k == 1 { per[0] } else { tape.concat_rows(&per)? };
        let scores = tape.matmul(beta, stack)?;
        Ok(StructuralOutput {
            components,
            relation,
            beta,
            scores,
        })
    }
}

/// `β = softmax_k(ṽ_k · r̃)` for `K' × d` components and a `1 × d` relation; returns `1 × K'`.
pub fn component_attention(tape: &mut Tape, components: Var, relation: Var) -> Result<Var> {
    let rt = tape.transpose(relation)?;
    let logits = tape.matmul(components, rt)?;
    let k = tape.shape(logits)[0];
    let logits = tape.reshape(logits, &[1, k])?;
    tape.softmax(logits, 1)
}

/// Index of the component with the largest dot product with `relation`; lowest index wins ties.
pub fn select_single_component(components: &[&[f64]], relation: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in components.iter().enumerate() {
        let s: f64 = c.iter().zip(relation).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

// -- fusion ------------------------------------------------------------------------

/// Learned log-variances `[s_T, s_S]` for uncertainty-weighted loss fusion.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub log_sigma: ParamId,
}

impl FusionWeights {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            log_sigma: store.add("fusion.log_sigma", Tensor::zeros(&[2]))?,
        })
    }

    /// `Σ_i exp(−s_i)·L_i + s_i + λ·L_mi`; the textual term is skipped when `lt` is `None`.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lt: Option<Var>,
        ls: Var,
        lmi: Var,
        lambda: f64,
    ) -> Result<Var> {
        let s = tape.param(store, self.log_sigma);
        let mut terms = Vec::new();
        for (i, l) in [(0, lt), (1, Some(ls))] {
            if let Some(l) = l {
                let si = tape.pick(s, i)?;
                let neg = tape.scale(si, -1.0);
                let w = tape.exp(neg);
                let wl = tape.mul(w, l)?;
                terms.push(tape.add(wl, si)?);
            }
        }
        let reg = tape.scale(lmi, lambda);
        let mut total = reg;
        for t in terms.into_iter().rev() {
            total = tape.add(t, total)?;
        }
        Ok(total)
    }

    /// Normalized inference weights `(w_T, w_S)`.
    pub fn weights(&self, store: &ParamStore) -> (f64, f64) {
        let s = store.value(self.log_sigma).data();
        let (a, b) = ((-s[0]).exp(), (-s[1]).exp());
        (a / (a + b), b / (a + b))
    }

    pub fn ensemble(&self, store: &ParamStore, qt: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
        ensemble_scores(qt, qs, self.weights(store))
    }
}

pub fn ensemble_scores(qt: &[f64], qs: &[f64], (wt, ws): (f64, f64)) -> Result<Vec<f64>> {
    if qt.len() != qs.len() {
        return Err(Error::shape(format!("{} textual vs {} structural scores", qt.len(), qs.len())));
    }
    Ok(qt.iter().zip(qs).map(|(t, s)| wt * t + ws * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn scorer(kind: ScorerKind, d: usize, gamma: f64, store: &mut ParamStore) -> Scorer {
        let conve = ConvEConfig {
            rows: 2,
            kernels: 2,
            kernel_size: 2,
        };
        Scorer::new(kind, d, gamma, conve, store, &mut rng()).unwrap()
    }

    fn score_one(s: &Scorer, store: &ParamStore, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let d = h.len();
        let hv = tape.constant(Tensor::matrix(1, d, h.to_vec()).unwrap());
        let rv = tape.constant(Tensor::matrix(1, d, r.to_vec()).unwrap());
        let tv = tape.constant(Tensor::matrix(1, d, t.to_vec()).unwrap());
        let out = s.score_all(&mut tape, store, hv, rv, tv).unwrap();
        tape.value(out).data()[0]
    }

    #[test]
    fn transe_examples() {
        let mut store = ParamStore::new();
        let s = scorer(ScorerKind::TransE, 2, 1.0, &mut store);
        assert_eq!(score_one(&s, &store, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]), 1.0);
        let s = scorer(ScorerKind::TransE, 2, 2.0, &mut store);
        assert_eq!(score_one(&s, &store, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), 2.0);
        assert_eq!(s.kge_score(&store, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn distmult_example() {
        let mut store = ParamStore::new();
        let s = scorer(ScorerKind::DistMult, 2, 0.0, &mut store);
        assert_eq!(score_one(&s, &store, &[1.0, 2.0], &[1.0, 1.0], &[3.0, 1.0]), 5.0);
    }

    #[test]
    fn conve_tape_matches_plain() {
        let mut store = ParamStore::new();
        let s = scorer(ScorerKind::ConvE, 6, 0.0, &mut store);
        let mut r = rng();
        for _ in 0..5 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
            let a = score_one(&s, &store, &v[0], &v[1], &v[2]);
            let b = s.kge_score(&store, &v[0], &v[1], &v[2]).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conve_reshape_mismatch() {
        let mut store = ParamStore::new();
        let c = ConvEConfig {
            rows: 4,
            kernels: 8,
            kernel_size: 3,
        };
        assert!(matches!(
            Scorer::new(ScorerKind::ConvE, 30, 0.0, c, &mut store, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn orthonormal_retrieval() {
        let mut store = ParamStore::new();
        let head = TextualHead::new(3, Tensor::identity(3), &mut store).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let s = head.scores(&mut tape, &store, m).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0, 0.0]);
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let s = head.scores(&mut tape, &store, z).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        assert!(store.get(head.table).frozen);
    }

    #[test]
    fn beta_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let r = tape.constant(Tensor::matrix(1, 2, vec![0.5, 2.0]).unwrap());
        let b = component_attention(&mut tape, c, r).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0]);
        let c = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let r = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = component_attention(&mut tape, c, r).unwrap();
        assert_eq!(tape.value(b).data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_component_choice() {
        assert_eq!(select_single_component(&[&[1.0, 0.0]], &[0.0, 2.0]), 0);
        assert_eq!(select_single_component(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 2.0]), 1);
        assert_eq!(select_single_component(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 200.0]), 1);
        assert_eq!(select_single_component(&[&[1.0, 1.0], &[1.0, 1.0]], &[1.0, 1.0]), 0);
    }

    #[test]
    fn total_loss_unit_weights() {
        let mut store = ParamStore::new();
        let f = FusionWeights::new(&mut store).unwrap();
        let mut tape = Tape::new();
        let lt = tape.constant(Tensor::scalar(1.5));
        let ls = tape.constant(Tensor::scalar(2.25));
        let lmi = tape.constant(Tensor::scalar(0.4));
        let l = f.total_loss(&mut tape, &store, Some(lt), ls, lmi, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 3.75);
        let l1 = f.total_loss(&mut tape, &store, Some(lt), ls, lmi, 0.1).unwrap();
        let l2 = f.total_loss(&mut tape, &store, Some(lt), ls, lmi, 0.2).unwrap();
        let (a, b) = (tape.value(l1).item() - 3.75, tape.value(l2).item() - 3.75);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn swapping_log_sigma_swaps_roles() {
        let mut store = ParamStore::new();
        let f = FusionWeights::new(&mut store).unwrap();
        let eval = |store: &ParamStore, lt: f64, ls: f64| {
            let mut tape = Tape::new();
            let lt = tape.constant(Tensor::scalar(lt));
            let ls = tape.constant(Tensor::scalar(ls));
            let z = tape.constant(Tensor::scalar(0.0));
            let l = f.total_loss(&mut tape, store, Some(lt), ls, z, 0.1).unwrap();
            tape.value(l).item()
        };
        store.get_mut(f.log_sigma).value = Tensor::vector(vec![0.3, -0.7]);
        let a = eval(&store, 1.2, 0.5);
        store.get_mut(f.log_sigma).value = Tensor::vector(vec![-0.7, 0.3]);
        let b = eval(&store, 0.5, 1.2);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ensemble_degenerate_weights() {
        let qt = [0.3, 0.9, 0.1];
        let qs = [0.8, 0.2, 0.5];
        assert_eq!(ensemble_scores(&qt, &qs, (1.0, 0.0)).unwrap(), qt.to_vec());
        assert_eq!(ensemble_scores(&qt, &qt, (0.5, 0.5)).unwrap(), qt.to_vec());
        let mut store = ParamStore::new();
        let f = FusionWeights::new(&mut store).unwrap();
        let (a, b) = f.weights(&store);
        assert_eq!((a, b), (0.5, 0.5));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            AblationMode::Full,
            AblationMode::SingleComponent,
            AblationMode::NoDisen,
            AblationMode::NoTextualPredictor,
        ] {
            assert_eq!(m.to_string().parse::<AblationMode>().unwrap(), m);
        }
        assert!("nope".parse::<AblationMode>().is_err());
    }
}
