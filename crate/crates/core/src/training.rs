//! Maximum-likelihood fitting of a [`Model`] to event sequences.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::WeightedDigraph;
use crate::linalg::DenseMatrix;
use crate::models::Model;
use crate::sampler::EventSequence;

/// Relative error allowed by the in-training gradient spot checks.
pub const SPOT_CHECK_TOLERANCE: f64 = 1e-3;
const SPOT_CHECK_SAMPLES: usize = 6;
const SPOT_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the epoch shuffles.
    pub seed: u64,
    /// When nonzero, every this many steps a few sampled gradient entries
    /// are compared against central differences.
    #[serde(default)]
    pub spot_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::synthetic()
    }
}

impl TrainConfig {
    pub fn synthetic() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 30,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            spot_check_every: 0,
        }
    }

    pub fn covid() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 4,
            epochs: 15,
            ..TrainConfig::synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood per event over `batch`.
///
/// The model output does not depend on the sequence, so every event time
/// in the batch goes into one sorted query list and the model runs once.
pub fn nll(
    model: &Model,
    tape: &mut Tape,
    graph: &WeightedDigraph,
    batch: &[&EventSequence],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let horizon = model.spec().horizon;
    let mut queries = Vec::new();
    for seq in batch {
        seq.check_nodes(model.spec().num_nodes)?;
        for e in seq.events() {
            if e.t > horizon {
                return Err(Error::OutOfHorizon { time: e.t, horizon });
            }
            queries.push((e.t, e.node));
        }
    }
    if queries.is_empty() {
        return Err(Error::invalid("batch holds no events"));
    }
    queries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let times: Vec<f64> = queries.iter().map(|q| q.0).collect();
    let log_probs = model.log_probs(tape, graph, &times)?;
    let index = queries.iter().enumerate().map(|(i, q)| (i, q.1)).collect();
    let picked = tape.gather(log_probs, index)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / queries.len() as f64))
}

/// Value of [`nll`] without keeping the tape.
pub fn nll_value(model: &Model, graph: &WeightedDigraph, batch: &[&EventSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = nll(model, &mut tape, graph, batch)?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Adam with decoupled weight decay: each step first shrinks parameters by
/// `1 - lr * weight_decay`, then applies the bias-corrected moment update.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: i32,
    moments: BTreeMap<String, (DenseMatrix, DenseMatrix)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies the pending gradients in `store` and clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_ready() {
            return Err(Error::invalid("optimizer step without gradients"));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in store.iter_mut() {
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                let (r, c) = p.value.shape();
                (DenseMatrix::zeros(r, c), DenseMatrix::zeros(r, c))
            });
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (i, theta) in values.iter_mut().enumerate() {
                let g = grads[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                let m_hat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let v_hat = *vi / c2;
                *theta = *theta * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<LossRecord>,
    /// Largest relative error of each gradient spot check, in step order.
    pub spot_checks: Vec<f64>,
    pub skipped_empty_batches: usize,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nll).collect()
    }

    /// Writes `step,epoch,nll` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits `model` to `data` in place and returns the per-step loss history.
///
/// Each epoch visits the sequences in a freshly shuffled order, cut into
/// batches of `batch_size`; batches without events are skipped. A
/// non-finite loss aborts with [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    graph: &WeightedDigraph,
    data: &[EventSequence],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut check_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut optimizer = AdamW::new(cfg);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    model.params_mut().zero_grad();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &data[i]).collect();
            if batch.iter().all(|s| s.is_empty()) {
                history.skipped_empty_batches += 1;
                continue;
            }
            let step = history.records.len();
            let mut tape = Tape::new();
            let loss = nll(model, &mut tape, graph, &batch)?;
            let value = tape.value(loss)[(0, 0)];
            if !value.is_finite() {
                return Err(Error::Diverged { step, value });
            }
            tape.backward(loss, model.params_mut())?;
            drop(tape);
            if cfg.spot_check_every > 0 && step % cfg.spot_check_every == 0 {
                let err = spot_check(model, graph, &batch, &mut check_rng)?;
                if err > SPOT_CHECK_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "gradient spot check failed at step {step}: relative error {err:.3e}"
                    )));
                }
                history.spot_checks.push(err);
            }
            optimizer.step(model.params_mut())?;
            history.records.push(LossRecord { step, epoch, nll: value });
            epoch_loss += value;
            epoch_batches += 1;
        }
        log::info!(
            "{} epoch {}/{}: mean nll {:.5}",
            model.kind(),
            epoch + 1,
            cfg.epochs,
            epoch_loss / epoch_batches.max(1) as f64
        );
    }
    Ok(history)
}

fn spot_check(
    model: &mut Model,
    graph: &WeightedDigraph,
    batch: &[&EventSequence],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sizes: Vec<(String, usize)> =
        model.params().iter().map(|(k, p)| (k.to_string(), p.value.len())).collect();
    let entries: Vec<(String, usize)> = (0..SPOT_CHECK_SAMPLES)
        .map(|_| {
            let (name, len) = &sizes[rng.random_range(0..sizes.len())];
            (name.clone(), rng.random_range(0..*len))
        })
        .collect();
    let frozen = model.clone();
    let report = finite_difference_check(
        model.params_mut(),
        |store| nll_value(&frozen.with_params(store.clone()), graph, batch),
        SPOT_CHECK_STEP,
        Some(&entries),
    )?;
    Ok(report.max_rel_err)
}
