//! Disentangled graph learner.
//!
//! Each entity carries `K` component vectors of size `d`. One aggregation layer
//! updates component `k` of entity `i` from its neighbor pairs `(j, r)`:
//!
//! ```text
//! α_k(i,r,j) = softmax over N(i) of ⟨v_i^k ∘ w_r, v_j^k ∘ w_r⟩
//! v_i^k     ← tanh( Σ α_k(i,r,j) · φ(v_j^k ∘ w_r, r) )
//! r         ← r · Θ_l
//! ```
//!
//! All components are processed at once by flattening the entity table to
//! `(|E|·K) × d` and expanding each neighbor pair into `K` edges.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::NeighborIndex;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// How a neighbor's projected component is fused with the relation embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Composition {
    /// `p ∘ r`
    #[default]
    Multiply,
    /// `p − r`
    Subtract,
    /// `p ∘ r + p`
    Crossover,
}

impl FromStr for Composition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(Self::Multiply),
            "subtract" => Ok(Self::Subtract),
            "crossover" => Ok(Self::Crossover),
            _ => Err(Error::config(format!("unknown composition {s}"))),
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Multiply => "multiply",
            Self::Subtract => "subtract",
            Self::Crossover => "crossover",
        })
    }
}

pub const SUPPORTED_COMPONENTS: [usize; 4] = [1, 2, 4, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphLearnerConfig {
    pub components: usize,
    pub dim: usize,
    pub layers: usize,
    pub composition: Composition,
}

impl Default for GraphLearnerConfig {
    fn default() -> Self {
        Self {
            components: 2,
            dim: 32,
            layers: 1,
            composition: Composition::Multiply,
        }
    }
}

impl GraphLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_COMPONENTS.contains(&self.components) {
            return Err(Error::config(format!(
                "component count {} not in {SUPPORTED_COMPONENTS:?}",
                self.components
            )));
        }
        if self.dim < 2 {
            return Err(Error::config("embedding size must be at least 2"));
        }
        if self.layers == 0 {
            return Err(Error::config("at least one aggregation layer is required"));
        }
        Ok(())
    }
}

/// Neighbor pairs expanded per component, in the flattened `(|E|·K)` row space.
#[derive(Clone, Debug)]
pub struct EdgeLists {
    pub src: Vec<usize>,
    pub nbr: Vec<usize>,
    pub rel: Vec<usize>,
    /// Start offset of each entity's edges; edges of entity `i` are
    /// `offsets[i]..offsets[i+1]`, ordered pair-major then component.
    pub offsets: Vec<usize>,
    pub components: usize,
}

impl EdgeLists {
    pub fn new(index: &NeighborIndex, components: usize) -> Self {
        let k = components;
        let mut e = Self {
            src: Vec::new(),
            nbr: Vec::new(),
            rel: Vec::new(),
            offsets: vec![0],
            components,
        };
        for i in 0..index.num_entities() {
            for &(j, r) in index.neighbors(i) {
                for c in 0..k {
                    e.src.push(i * k + c);
                    e.nbr.push(j * k + c);
                    e.rel.push(r);
                }
            }
            e.offsets.push(e.src.len());
        }
        e
    }
}

/// Learned tables; parameter names are `ent_comp`, `rel_emb`, `rel_proj`, `theta_<l>`.
#[derive(Clone, Debug)]
pub struct GraphLearner {
    pub cfg: GraphLearnerConfig,
    pub num_entities: usize,
    /// Rows in the relation tables, including the self-loop relation.
    pub num_relations: usize,
    pub ent_comp: ParamId,
    pub rel_emb: ParamId,
    pub rel_proj: ParamId,
    pub thetas: Vec<ParamId>,
}

/// Output of a forward pass, living on the tape it was computed on.
#[derive(Clone, Debug)]
pub struct GraphVars {
    /// `(|E|·K) × d`; row `i·K + k` is component `k` of entity `i`.
    pub entities: Var,
    /// `num_relations × d`.
    pub relations: Var,
    /// Attention of the last layer, one weight per edge of [`EdgeLists`].
    pub attention: Var,
}

impl GraphLearner {
    pub fn new<R: Rng + ?Sized>(
        cfg: GraphLearnerConfig,
        num_entities: usize,
        num_relations: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let ent_comp = store.add(
            "ent_comp",
            Tensor::uniform(&[num_entities, cfg.components, d], bound, rng),
        )?;
        let rel_emb = store.add("rel_emb", Tensor::uniform(&[num_relations, d], bound, rng))?;
        let rel_proj = store.add("rel_proj", Tensor::filled(&[num_relations, d], 1.0))?;
        let thetas = (0..cfg.layers)
            .map(|l| store.add(format!("theta_{l}"), Tensor::identity(d)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            num_entities,
            num_relations,
            ent_comp,
            rel_emb,
            rel_proj,
            thetas,
        })
    }

    fn compose(&self, tape: &mut Tape, projected: Var, rel: Var) -> Result<Var> {
        match self.cfg.composition {
            Composition::Multiply => tape.mul(projected, rel),
            Composition::Subtract => tape.sub(projected, rel),
            Composition::Crossover => {
                let m = tape.mul(projected, rel)?;
                tape.add(m, projected)
            }
        }
    }

    /// One aggregation layer. Returns updated entity rows, updated relations and the attention used.
    pub fn aggregate_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        edges: &EdgeLists,
        layer: usize,
        entities: Var,
        relations: Var,
    ) -> Result<(Var, Var, Var)> {
        if layer >= self.cfg.layers {
            return Err(Error::index(format!("layer {layer} of {}", self.cfg.layers)));
        }
        let rows = self.num_entities * self.cfg.components;
        let proj = tape.param(store, self.rel_proj);
        let w = tape.gather_rows(proj, &edges.rel)?;
        let xi = tape.gather_rows(entities, &edges.src)?;
        let xj = tape.gather_rows(entities, &edges.nbr)?;
        let pi = tape.mul(xi, w)?;
        let pj = tape.mul(xj, w)?;
        let sim = tape.mul(pi, pj)?;
        let logits = tape.sum_last(sim);
        let alpha = tape.segment_softmax(logits, &edges.src, rows)?;
        let r = tape.gather_rows(relations, &edges.rel)?;
        let phi = self.compose(tape, pj, r)?;
        let msg = tape.scale_rows(phi, alpha)?;
        let agg = tape.scatter_add_rows(msg, &edges.src, rows)?;
        let next = tape.tanh(agg);
        let theta = tape.param(store, self.thetas[layer]);
        let next_rel = tape.matmul(relations, theta)?;
        Ok((next, next_rel, alpha))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, edges: &EdgeLists) -> Result<GraphVars> {
        if edges.components != self.cfg.components {
            return Err(Error::config("edge lists built for a different component count"));
        }
        let table = tape.param(store, self.ent_comp);
        let mut entities = tape.reshape(
            table,
            &[self.num_entities * self.cfg.components, self.cfg.dim],
        )?;
        let mut relations = tape.param(store, self.rel_emb);
        let mut attention = None;
        for l in 0..self.cfg.layers {
            let (e, r, a) = self.aggregate_layer(tape, store, edges, l, entities, relations)?;
            entities = e;
            relations = r;
            attention = Some(a);
        }
        Ok(GraphVars {
            entities,
            relations,
            attention: attention.expect("at least one layer"),
        })
    }

    /// Independence penalty over the components of `batch` entities: mean squared
    /// cosine similarity over all component pairs `k < k'`. Zero when `K = 1`.
    pub fn mi_regularizer(&self, tape: &mut Tape, entities: Var, batch: &[usize]) -> Result<Var> {
        let k = self.cfg.components;
        mi_penalty(tape, entities, batch, k)
    }
}

/// Squared-cosine independence penalty for an `(n·K) × d` component table.
pub fn mi_penalty(tape: &mut Tape, entities: Var, batch: &[usize], k: usize) -> Result<Var> {
    if k < 2 || batch.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &e in batch {
        for a in 0..k {
            for b in a + 1..k {
                left.push(e * k + a);
                right.push(e * k + b);
            }
        }
    }
    let x = tape.gather_rows(entities, &left)?;
    let y = tape.gather_rows(entities, &right)?;
    let xy = tape.mul(x, y)?;
    let dot = tape.sum_last(xy);
    let xx = tape.mul(x, x)?;
    let nx = tape.sum_last(xx);
    let yy = tape.mul(y, y)?;
    let ny = tape.sum_last(yy);
    let num = tape.mul(dot, dot)?;
    let den = tape.mul(nx, ny)?;
    let den = tape.add_scalar(den, 1e-12);
    let cos2 = tape.div(num, den)?;
    Ok(tape.mean(cos2))
}

/// Hadamard projection of a component vector into a relation subspace.
pub fn relation_project(v: &[f64], projector: &[f64]) -> Vec<f64> {
    v.iter().zip(projector).map(|(a, b)| a * b).collect()
}

/// Read-only attention lookups over a finished forward pass.
#[derive(Clone, Debug)]
pub struct AttentionView<'a> {
    pub edges: &'a EdgeLists,
    pub index: &'a NeighborIndex,
    pub weights: &'a [f64],
}

impl AttentionView<'_> {
    /// `(neighbor, relation, α)` for every neighbor pair of `entity` under component `k`,
    /// in neighbor-index order.
    pub fn weights_for(&self, entity: usize, k: usize) -> Vec<(usize, usize, f64)> {
        let kk = self.edges.components;
        let start = self.edges.offsets[entity];
        self.index
            .neighbors(entity)
            .iter()
            .enumerate()
            .map(|(p, &(j, r))| (j, r, self.weights[start + p * kk + k]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, lists: Vec<Vec<(usize, usize)>>, rels: usize) -> (GraphLearner, ParamStore, NeighborIndex) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GraphLearnerConfig {
            components: k,
            dim: 4,
            layers: 1,
            composition: Composition::Multiply,
        };
        let n = lists.len();
        let index = NeighborIndex::from_lists(lists, rels);
        let gl = GraphLearner::new(cfg, n, rels + 1, &mut store, &mut rng).unwrap();
        (gl, store, index)
    }

    #[test]
    fn projection_cases() {
        let v = [0.5, -2.0, 3.0];
        assert_eq!(relation_project(&v, &[1.0; 3]), v.to_vec());
        assert_eq!(relation_project(&v, &[0.0; 3]), vec![0.0; 3]);
        assert_eq!(relation_project(&v, &[2.0, 0.5, -1.0]), vec![1.0, -1.0, -3.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = GraphLearnerConfig { layers: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c.layers = 1;
        c.components = 3;
        assert!(c.validate().is_err());
        c.components = 6;
        c.dim = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn self_loop_only_gets_full_attention() {
        let (gl, store, index) = setup(2, vec![vec![]], 1);
        let edges = EdgeLists::new(&index, 2);
        let mut tape = Tape::new();
        let out = gl.forward(&mut tape, &store, &edges).unwrap();
        assert_eq!(tape.value(out.attention).data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_projector_gives_zero_output() {
        let (gl, mut store, index) = setup(2, vec![vec![(1, 0)], vec![(0, 0)]], 1);
        store.get_mut(gl.rel_proj).value = Tensor::zeros(&[2, 4]);
        let edges = EdgeLists::new(&index, 2);
        let mut tape = Tape::new();
        let out = gl.forward(&mut tape, &store, &edges).unwrap();
        assert!(tape.value(out.entities).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mi_penalty_cases() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let p = mi_penalty(&mut tape, one, &[0], 1).unwrap();
        assert_eq!(tape.value(p).item(), 0.0);

        let ortho = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let p = mi_penalty(&mut tape, ortho, &[0], 2).unwrap();
        assert_eq!(tape.value(p).item(), 0.0);

        let same = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let p = mi_penalty(&mut tape, same, &[0], 2).unwrap();
        assert!((tape.value(p).item() - 1.0).abs() < 1e-9);
    }
}
