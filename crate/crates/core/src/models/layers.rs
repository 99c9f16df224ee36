use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EdgeList, ParamStore, Tape, Var};
use crate::error::Result;
use crate::linalg::DenseMatrix;

/// Inserts a two-layer MLP `d_in -> hidden -> d_out` under `prefix`, with
/// weights and biases uniform in `+-1/sqrt(fan_in)`.
pub(crate) fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    dims: [usize; 3],
    rng: &mut ChaCha8Rng,
) {
    let [d_in, hidden, d_out] = dims;
    for (layer, (fan_in, fan_out)) in [(d_in, hidden), (hidden, d_out)].into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            DenseMatrix::from_vec(rows, cols, data).unwrap()
        };
        let w = uniform(fan_in, fan_out);
        let b = uniform(1, fan_out);
        store.insert(format!("{prefix}.w{}", layer + 1), w);
        store.insert(format!("{prefix}.b{}", layer + 1), b);
    }
}

/// MLP parameters recorded on a tape once per forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundMlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundMlp {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(BoundMlp {
            w1: tape.param(store, &format!("{prefix}.w1"))?,
            b1: tape.param(store, &format!("{prefix}.b1"))?,
            w2: tape.param(store, &format!("{prefix}.w2"))?,
            b2: tape.param(store, &format!("{prefix}.b2"))?,
        })
    }

    /// `W2 swish(x W1 + b1) + b2`, row-wise.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.affine(x, self.w1, self.b1)?;
        let h = tape.swish(h);
        tape.affine(h, self.w2, self.b2)
    }
}

/// One GIN layer with `epsilon = 0`: the shared MLP applied to
/// `z_v + sum_{u -> v} A_uv z_u`, independently per `num_nodes` block.
pub(crate) fn gin_forward(
    tape: &mut Tape,
    mlp: &BoundMlp,
    x: Var,
    edges: &EdgeList,
    num_nodes: usize,
) -> Result<Var> {
    let agg = tape.aggregate(x, edges.clone(), num_nodes)?;
    mlp.forward(tape, agg)
}
