use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer feed-forward map from a structural vector to `L` prefix blocks of
/// `n` token vectors each: `out = W_out · relu(W_in · v + b_in) + b_out`.
#[derive(Clone, Debug)]
pub struct PromptProjector {
    pub layers: usize,
    pub hidden: usize,
    pub prompt_len: usize,
    pub proj_hidden: usize,
    pub dim: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl PromptProjector {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        proj_hidden: usize,
        layers: usize,
        hidden: usize,
        prompt_len: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || proj_hidden == 0 || layers == 0 || hidden == 0 || prompt_len == 0 {
            return Err(Error::config("projector dimensions must be positive"));
        }
        let out = layers * prompt_len * hidden;
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (proj_hidden as f64).sqrt();
        Ok(Self {
            layers,
            hidden,
            prompt_len,
            proj_hidden,
            dim,
            w_in: store.add("proj.w_in", Tensor::uniform(&[dim, proj_hidden], b1, rng))?,
            b_in: store.add("proj.b_in", Tensor::zeros(&[proj_hidden]))?,
            w_out: store.add("proj.w_out", Tensor::uniform(&[proj_hidden, out], b2, rng))?,
            b_out: store.add("proj.b_out", Tensor::zeros(&[out]))?,
        })
    }

    /// Projects `m` stacked structural vectors (`m × d`, ordered components then
    /// relation) to one prefix block per encoder layer, each `(m·n) × H` with the
    /// `n` rows of input 0 first.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(inputs).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::config(format!(
                "projector expects rows of size {}, got {shape:?}",
                self.dim
            )));
        }
        let m = shape[0];
        let (w_in, b_in) = (tape.param(store, self.w_in), tape.param(store, self.b_in));
        let (w_out, b_out) = (tape.param(store, self.w_out), tape.param(store, self.b_out));
        let h = tape.matmul(inputs, w_in)?;
        let h = tape.add(h, b_in)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w_out)?;
        let o = tape.add(o, b_out)?;
        // row c of `o` is laid out [layer][slot][hidden]
        let (l, n) = (self.layers, self.prompt_len);
        let tokens = tape.reshape(o, &[m * l * n, self.hidden])?;
        (0..l)
            .map(|layer| {
                let idx: Vec<usize> = (0..m)
                    .flat_map(|c| (0..n).map(move |t| c * l * n + layer * n + t))
                    .collect();
                tape.gather_rows(tokens, &idx)
            })
            .collect()
    }
}
