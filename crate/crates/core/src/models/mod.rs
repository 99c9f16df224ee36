//! Forecasters mapping a graph and query times to per-node probabilities.
//!
//! All three share the same parts: learned per-node rows of width
//! `hidden`, a two-layer Swish MLP, and a projection `pi: hidden -> 1`
//! applied to every node before a softmax across nodes.
//!
//! * [`ModelKind::Gopher`] integrates `dZ/dt = GIN(Z ++ t)` with fixed-step
//!   RK4 from learned initial rows and projects the state at each query.
//! * [`ModelKind::NaiveGnn`] applies one GIN layer to `embedding ++ t`.
//! * [`ModelKind::NaiveMlp`] applies a plain MLP to `embedding ++ t` and
//!   never looks at the edges.

mod layers;
mod ode;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::advection::ProbVector;
use crate::autodiff::{EdgeList, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{check_permutation, permute_rows, WeightedDigraph};
use crate::linalg::DenseMatrix;

use layers::{gin_forward, init_mlp, BoundMlp};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_AUGMENTED_DIMS: usize = 16;
pub const DEFAULT_ODE_STEPS_PER_UNIT_TIME: usize = 40;
pub const DEFAULT_INIT_STD: f64 = 0.1;

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gopher,
    NaiveGnn,
    NaiveMlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Gopher, ModelKind::NaiveGnn, ModelKind::NaiveMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gopher => "gopher",
            ModelKind::NaiveGnn => "naive-gnn",
            ModelKind::NaiveMlp => "naive-mlp",
        }
    }

    /// Whether outputs depend on the edge set.
    pub fn uses_edges(self) -> bool {
        self != ModelKind::NaiveMlp
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind '{s}'")))
    }
}

/// Architecture descriptor, stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_nodes: usize,
    /// Width of node rows and of every MLP hidden layer.
    pub hidden: usize,
    /// Trailing state dimensions that start at zero (ODE model only).
    pub augmented_dims: usize,
    pub ode_steps_per_unit_time: usize,
    /// Largest event time the model is trained on.
    pub horizon: f64,
    /// Node attribute width; when set, initial rows come from an encoder.
    #[serde(default)]
    pub attr_dim: Option<usize>,
    pub init_seed: u64,
    pub init_std: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, num_nodes: usize, horizon: f64) -> Self {
        ModelSpec {
            kind,
            num_nodes,
            hidden: DEFAULT_HIDDEN,
            augmented_dims: if kind == ModelKind::Gopher {
                DEFAULT_AUGMENTED_DIMS
            } else {
                0
            },
            ode_steps_per_unit_time: DEFAULT_ODE_STEPS_PER_UNIT_TIME,
            horizon,
            attr_dim: None,
            init_seed: 0,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.hidden == 0 {
            return Err(Error::invalid("num_nodes and hidden must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::invalid("init_std must be non-negative"));
        }
        match self.kind {
            ModelKind::Gopher => {
                if self.augmented_dims >= self.hidden {
                    return Err(Error::invalid("augmented_dims must be below hidden"));
                }
                if self.ode_steps_per_unit_time == 0 {
                    return Err(Error::invalid("ode_steps_per_unit_time must be positive"));
                }
                if self.attr_dim == Some(0) {
                    return Err(Error::invalid("attr_dim must be positive"));
                }
            }
            _ => {
                if self.augmented_dims != 0 || self.attr_dim.is_some() {
                    return Err(Error::invalid(format!(
                        "{} takes neither augmented dims nor attributes",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }

    fn free_dims(&self) -> usize {
        self.hidden - self.augmented_dims
    }
}

/// Anything that produces a probability vector per query time.
pub trait Forecaster {
    fn label(&self) -> String;

    fn forecast(&self, graph: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>>;
}

const Z0: &str = "z0";
const EMBEDDINGS: &str = "embeddings";
const ENCODER: &str = "encoder";
const DYNAMICS: &str = "dynamics";
const GIN: &str = "gin";
const MLP: &str = "mlp";
const PROJECTION: &str = "projection";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
}

impl Model {
    /// Fresh parameters: node rows i.i.d. `N(0, init_std^2)`, linear layers
    /// uniform in `+-1/sqrt(fan_in)`, all drawn from `init_seed`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let normal = Normal::new(0.0, spec.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let rows = |cols: usize, rng: &mut ChaCha8Rng| {
            let data = (0..spec.num_nodes * cols).map(|_| normal.sample(rng)).collect();
            DenseMatrix::from_vec(spec.num_nodes, cols, data).unwrap()
        };
        let h = spec.hidden;
        let mut params = ParamStore::new();
        match spec.kind {
            ModelKind::Gopher => {
                match spec.attr_dim {
                    None => params.insert(Z0, rows(spec.free_dims(), &mut rng)),
                    Some(a) => init_mlp(&mut params, ENCODER, [a, h, spec.free_dims()], &mut rng),
                }
                init_mlp(&mut params, DYNAMICS, [h + 1, h, h], &mut rng);
            }
            ModelKind::NaiveGnn | ModelKind::NaiveMlp => {
                params.insert(EMBEDDINGS, rows(h, &mut rng));
                let name = if spec.kind == ModelKind::NaiveGnn { GIN } else { MLP };
                init_mlp(&mut params, name, [h + 1, h, h], &mut rng);
            }
        }
        init_mlp(&mut params, PROJECTION, [h, h, 1], &mut rng);
        Ok(Model { spec, params })
    }

    /// Pairs a descriptor with stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let reference = Model::new(spec.clone())?;
        let expected: Vec<_> = reference.params.iter().map(|(k, p)| (k, p.value.shape())).collect();
        let got: Vec<_> = params.iter().map(|(k, p)| (k, p.value.shape())).collect();
        if expected != got {
            return Err(Error::invalid(format!(
                "checkpoint does not match a {} architecture",
                spec.kind
            )));
        }
        Ok(Model { spec, params })
    }

    /// Same architecture with `params` swapped in, unchecked.
    pub(crate) fn with_params(&self, params: ParamStore) -> Model {
        Model { spec: self.spec.clone(), params }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Writes the architecture descriptor and checkpoint into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::write_atomic(
            dir.join(ARCHITECTURE_FILE),
            serde_json::to_string_pretty(&self.spec)?.as_bytes(),
        )?;
        self.params.save(dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: ModelSpec =
            serde_json::from_str(&crate::io::read_artifact(dir.join(ARCHITECTURE_FILE))?)?;
        Model::from_parts(spec, ParamStore::load(dir.join(CHECKPOINT_FILE))?)
    }

    /// The same model with node-indexed parameters relabeled by `perm`
    /// (node `i` becomes `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Model> {
        check_permutation(perm, self.spec.num_nodes)?;
        let mut out = self.clone();
        for name in [Z0, EMBEDDINGS] {
            if let Some(m) = out.params.get_mut(name) {
                let rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
                let data = permute_rows(&rows, perm).concat();
                *m = DenseMatrix::from_vec(m.rows(), m.cols(), data)?;
            }
        }
        Ok(out)
    }

    fn check_graph(&self, graph: &WeightedDigraph) -> Result<EdgeList> {
        if graph.num_nodes() != self.spec.num_nodes {
            return Err(Error::shape(format!(
                "model has {} nodes, graph has {}",
                self.spec.num_nodes,
                graph.num_nodes()
            )));
        }
        Ok(edge_list(graph))
    }

    /// Row-wise log-probabilities `[times.len() x num_nodes]` recorded on
    /// `tape`. The ODE model needs `times` sorted ascending.
    pub fn log_probs(&self, tape: &mut Tape, graph: &WeightedDigraph, times: &[f64]) -> Result<Var> {
        let logits = self.logits(tape, graph, times)?;
        Ok(tape.log_softmax_rows(logits))
    }

    /// Probability vectors at `times`.
    pub fn predict(&self, graph: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, graph, times)?;
        let probs = tape.softmax_rows(logits);
        let probs = tape.value(probs);
        (0..probs.rows())
            .map(|i| ProbVector::new(probs.row(i).to_vec()))
            .collect()
    }

    fn logits(&self, tape: &mut Tape, graph: &WeightedDigraph, times: &[f64]) -> Result<Var> {
        let edges = self.check_graph(graph)?;
        check_times(times)?;
        let n = self.spec.num_nodes;
        let q = times.len();
        let features = match self.spec.kind {
            ModelKind::Gopher => {
                if times.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::invalid("query times must be sorted"));
                }
                let z0 = self.initial_state_var(tape, graph)?;
                let dynamics = BoundMlp::bind(tape, &self.params, DYNAMICS)?;
                let h = 1.0 / self.spec.ode_steps_per_unit_time as f64;
                let f = |tape: &mut Tape, z: Var, t: f64| {
                    let tcol = tape.constant(DenseMatrix::filled(n, 1, t));
                    let x = tape.concat_cols(z, tcol)?;
                    gin_forward(tape, &dynamics, x, &edges, n)
                };
                ode::integrate_and_read(tape, z0, h, times, f)?
            }
            ModelKind::NaiveGnn | ModelKind::NaiveMlp => {
                let emb = tape.param(&self.params, EMBEDDINGS)?;
                let tiled = tape.tile(emb, q);
                let tcol: Vec<f64> = times.iter().flat_map(|&t| std::iter::repeat_n(t, n)).collect();
                let tcol = tape.constant(DenseMatrix::column(tcol));
                let x = tape.concat_cols(tiled, tcol)?;
                if self.spec.kind == ModelKind::NaiveGnn {
                    let gin = BoundMlp::bind(tape, &self.params, GIN)?;
                    gin_forward(tape, &gin, x, &edges, n)?
                } else {
                    let mlp = BoundMlp::bind(tape, &self.params, MLP)?;
                    mlp.forward(tape, x)?
                }
            }
        };
        let projection = BoundMlp::bind(tape, &self.params, PROJECTION)?;
        let scores = projection.forward(tape, features)?;
        tape.reshape(scores, q, n)
    }

    fn initial_state_var(&self, tape: &mut Tape, graph: &WeightedDigraph) -> Result<Var> {
        let n = self.spec.num_nodes;
        let free = match self.spec.attr_dim {
            None => tape.param(&self.params, Z0)?,
            Some(dim) => {
                let attrs = graph
                    .node_attrs()
                    .ok_or_else(|| Error::invalid("model expects node attributes"))?;
                if let Some(a) = attrs.iter().find(|a| a.len() != dim) {
                    return Err(Error::shape(format!(
                        "attribute width {} (model expects {dim})",
                        a.len()
                    )));
                }
                let x = tape.constant(DenseMatrix::from_vec(n, dim, attrs.concat())?);
                let encoder = BoundMlp::bind(tape, &self.params, ENCODER)?;
                encoder.forward(tape, x)?
            }
        };
        if self.spec.augmented_dims == 0 {
            return Ok(free);
        }
        let zeros = tape.constant(DenseMatrix::zeros(n, self.spec.augmented_dims));
        tape.concat_cols(free, zeros)
    }

    /// Initial state rows of the ODE model: the encoded (or free) leading
    /// dimensions followed by zero augmented dimensions.
    pub fn encode_attributes(&self, graph: &WeightedDigraph) -> Result<DenseMatrix> {
        self.require_ode("initial state")?;
        self.check_graph(graph)?;
        let mut tape = Tape::new();
        let z0 = self.initial_state_var(&mut tape, graph)?;
        Ok(tape.value(z0).clone())
    }

    /// The learned vector field `g(Z, G, t)` of the ODE model.
    pub fn dynamics(&self, graph: &WeightedDigraph, z: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
        self.require_ode("dynamics")?;
        let edges = self.check_graph(graph)?;
        let n = self.spec.num_nodes;
        if z.shape() != (n, self.spec.hidden) {
            return Err(Error::shape(format!("state shape {:?}", z.shape())));
        }
        let mut tape = Tape::new();
        let dynamics = BoundMlp::bind(&mut tape, &self.params, DYNAMICS)?;
        let z = tape.constant(z.clone());
        let tcol = tape.constant(DenseMatrix::filled(n, 1, t));
        let x = tape.concat_cols(z, tcol)?;
        let out = gin_forward(&mut tape, &dynamics, x, &edges, n)?;
        Ok(tape.value(out).clone())
    }

    fn require_ode(&self, what: &str) -> Result<()> {
        if self.spec.kind != ModelKind::Gopher {
            return Err(Error::invalid(format!("{what} is only defined for the ODE model")));
        }
        Ok(())
    }
}

impl Forecaster for Model {
    fn label(&self) -> String {
        self.spec.kind.to_string()
    }

    fn forecast(&self, graph: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>> {
        self.predict(graph, times)
    }
}

pub(crate) fn edge_list(graph: &WeightedDigraph) -> EdgeList {
    graph
        .edges()
        .iter()
        .map(|e| (e.src, e.dst, e.weight))
        .collect::<Vec<_>>()
        .into()
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("no query times"));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::invalid(format!("query time {t} is not a non-negative number")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
