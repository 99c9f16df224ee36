//! Event sequences from a homogeneous Poisson process whose marks follow
//! the advected node probabilities.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::advection::{solve_advection, AdvectionSolution, ProbVector, SolverMethod};
use crate::error::{Error, Result};
use crate::graph::WeightedDigraph;

/// Default event rate, events per second.
pub const DEFAULT_LAMBDA: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, usize)", into = "(f64, usize)")]
pub struct Event {
    pub t: f64,
    pub node: usize,
}

impl From<(f64, usize)> for Event {
    fn from((t, node): (f64, usize)) -> Self {
        Event { t, node }
    }
}

impl From<Event> for (f64, usize) {
    fn from(e: Event) -> Self {
        (e.t, e.node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
    horizon: f64,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if events.windows(2).any(|w| !(w[0].t < w[1].t)) {
            return Err(Error::invalid("event times must be strictly increasing"));
        }
        if let Some(e) = events.iter().find(|e| !(e.t >= 0.0 && e.t <= horizon)) {
            return Err(Error::invalid(format!(
                "event time {} outside [0, {horizon}]",
                e.t
            )));
        }
        Ok(EventSequence { events, horizon })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    pub(crate) fn check_nodes(&self, num_nodes: usize) -> Result<()> {
        match self.events.iter().find(|e| e.node >= num_nodes) {
            Some(e) => Err(Error::invalid(format!(
                "event node {} out of range for {num_nodes} nodes",
                e.node
            ))),
            None => Ok(()),
        }
    }
}

/// Cumulative exponential inter-arrivals with rate `lambda`, truncated at
/// `horizon`. Times are strictly increasing and lie in `(0, horizon)`.
pub fn sample_poisson_times(lambda: f64, horizon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("rate must be positive, got {lambda}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let gap = Exp::new(lambda).map_err(|e| Error::invalid(e.to_string()))?;
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        let dt: f64 = gap.sample(rng);
        if dt <= 0.0 {
            continue;
        }
        t += dt;
        if t >= horizon {
            return Ok(times);
        }
        times.push(t);
    }
}

/// Draws one mark per time from `Categorical(p(t))`, evaluating the
/// solution exactly at each time.
pub fn sample_marks(sol: &AdvectionSolution, times: &[f64], rng: &mut impl Rng) -> Result<Vec<usize>> {
    if times.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("times must be sorted"));
    }
    times
        .iter()
        .map(|&t| Ok(sample_categorical(sol.evaluate(t)?.as_slice(), rng)))
        .collect()
}

pub fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the round-off gap above the cumulative sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Independent generator for sequence `index`: same key, distinct stream.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: WeightedDigraph,
    /// Initial condition of the generating process; absent for datasets
    /// built from observed data.
    pub p0: Option<ProbVector>,
    pub lambda: f64,
    pub horizon: f64,
    pub sequences: Vec<EventSequence>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    graph: String,
    lambda: f64,
    horizon: f64,
    seed: u64,
    num_sequences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p0: Option<ProbVector>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    seq: usize,
    events: Vec<Event>,
}

pub fn generate_dataset(
    graph: &WeightedDigraph,
    p0: &ProbVector,
    lambda: f64,
    horizon: f64,
    num_sequences: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    let sol = solve_advection(graph, p0, SolverMethod::default())?;
    let sequences = (0..num_sequences)
        .map(|k| {
            let mut rng = sequence_rng(seed, k as u64);
            let times = sample_poisson_times(lambda, horizon, &mut rng)?;
            let marks = sample_marks(&sol, &times, &mut rng)?;
            let events = times
                .into_iter()
                .zip(marks)
                .map(|(t, node)| Event { t, node })
                .collect();
            EventSequence::new(events, horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle {
        graph: graph.clone(),
        p0: Some(p0.clone()),
        lambda,
        horizon,
        sequences,
        seed,
    })
}

impl DatasetBundle {
    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Bundle restricted to the first `n` sequences.
    pub fn take(&self, n: usize) -> DatasetBundle {
        DatasetBundle {
            sequences: self.sequences.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    /// JSON-lines: a header line naming `graph_ref`, then one line per
    /// sequence.
    pub fn write_jsonl(&self, graph_ref: &str, mut out: impl Write) -> Result<()> {
        let header = Header {
            graph: graph_ref.to_string(),
            lambda: self.lambda,
            horizon: self.horizon,
            seed: self.seed,
            num_sequences: self.sequences.len(),
            p0: self.p0.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        writeln!(out)?;
        for (seq, s) in self.sequences.iter().enumerate() {
            let line = SequenceLine {
                seq,
                events: s.events.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self, graph_ref: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(graph_ref, &mut buf)?;
        Ok(buf)
    }

    /// Reads a dataset file; the graph path in its header is resolved
    /// relative to the dataset's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<DatasetBundle> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::read_jsonl(BufReader::new(file), |graph_ref| {
            WeightedDigraph::load(resolve(&base, graph_ref))
        })
        .map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn read_jsonl(
        input: impl BufRead,
        load_graph: impl FnOnce(&str) -> Result<WeightedDigraph>,
    ) -> Result<DatasetBundle> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: "<dataset>".into(),
            line,
            message,
        };
        let mut lines = input.lines();
        let header_text = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header line".into()))??;
        let header: Header =
            serde_json::from_str(&header_text).map_err(|e| parse_err(1, e.to_string()))?;
        let graph = load_graph(&header.graph)?;
        let mut sequences = Vec::with_capacity(header.num_sequences);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let parsed: SequenceLine =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if parsed.seq != sequences.len() {
                return Err(parse_err(
                    lineno,
                    format!("expected sequence {}, found {}", sequences.len(), parsed.seq),
                ));
            }
            let seq = EventSequence::new(parsed.events, header.horizon)
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            seq.check_nodes(graph.num_nodes())
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            sequences.push(seq);
        }
        if sequences.len() != header.num_sequences {
            return Err(parse_err(
                1,
                format!(
                    "header announces {} sequences, file has {}",
                    header.num_sequences,
                    sequences.len()
                ),
            ));
        }
        Ok(DatasetBundle {
            graph,
            p0: header.p0,
            lambda: header.lambda,
            horizon: header.horizon,
            sequences,
            seed: header.seed,
        })
    }
}

fn resolve(base: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
