//! Scoring forecasts against the true dynamics and held-out events.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::advection::{solve_advection, uniform_grid, AdvectionSolution, ProbVector, SolverMethod};
use crate::error::{Error, Result};
use crate::graph::{delete_edges, WeightedDigraph};
use crate::models::{Forecaster, Model, ModelKind, ModelSpec};
use crate::sampler::{DatasetBundle, EventSequence};
use crate::training::{train, TrainConfig, TrainHistory};

/// Predictions are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_GRID_POINTS: usize = 200;
const Z_95: f64 = 1.959963984540054;

/// `KL(p || q) = sum_v p_v ln(p_v / q_v)`, with `q` floored at
/// [`PROB_FLOOR`] and renormalized, and `0 ln 0 = 0`.
pub fn kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl of lengths {} and {}", p.len(), q.len())));
    }
    let floored: Vec<f64> = q.as_slice().iter().map(|&x| x.max(PROB_FLOOR)).collect();
    // Renormalize only when the floor moved something, so KL(p, p) is 0.
    let z = if floored.as_slice() != q.as_slice() {
        log::debug!("prediction floored at {PROB_FLOOR:e} inside kl");
        floored.iter().sum()
    } else {
        1.0
    };
    let d: f64 = p
        .as_slice()
        .iter()
        .zip(&floored)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / (qv / z)).ln())
        .sum();
    Ok(d.max(0.0))
}

/// `exp(mean(ln x))`, with every value floored at [`PROB_FLOOR`].
pub fn geo_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("geometric mean of an empty series"));
    }
    let mut logs: Vec<f64> = values.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
    logs.sort_by(f64::total_cmp);
    Ok((logs.iter().sum::<f64>() / logs.len() as f64).exp())
}

/// Predicts `1/n` everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformForecaster;

impl Forecaster for UniformForecaster {
    fn label(&self) -> String {
        "uniform".into()
    }

    fn forecast(&self, graph: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>> {
        Ok(vec![ProbVector::uniform(graph.num_nodes()); times.len()])
    }
}

/// The true advection dynamics on whatever graph it is handed.
#[derive(Debug, Clone)]
pub struct OracleForecaster {
    pub p0: ProbVector,
    pub method: SolverMethod,
}

impl Forecaster for OracleForecaster {
    fn label(&self) -> String {
        "oracle".into()
    }

    fn forecast(&self, graph: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>> {
        let sol = solve_advection(graph, &self.p0, self.method)?;
        times.iter().map(|&t| sol.evaluate(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Train,
    Extrapolation,
}

impl Region {
    pub fn of(t: f64, horizon: f64) -> Region {
        if t <= horizon {
            Region::Train
        } else {
            Region::Extrapolation
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Train => "train",
            Region::Extrapolation => "extrapolation",
        }
    }
}

/// 200 evenly spaced points on `[0, 2 * horizon]`.
pub fn default_grid(horizon: f64) -> Vec<f64> {
    uniform_grid(0.0, 2.0 * horizon, DEFAULT_GRID_POINTS)
}

/// The points of [`default_grid`] inside `[0, horizon]`.
pub fn train_grid(horizon: f64) -> Vec<f64> {
    default_grid(horizon).into_iter().filter(|&t| t <= horizon).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub regions: Vec<Region>,
    /// KL per grid point, by forecaster label.
    pub kl_series: BTreeMap<String, Vec<f64>>,
    /// Geometric-mean KL over `[0, horizon]`.
    pub geo_mean_kl: BTreeMap<String, f64>,
    /// Geometric-mean KL over `(horizon, 2 horizon]`, when the grid reaches it.
    pub geo_mean_kl_extrapolation: BTreeMap<String, f64>,
}

impl EvalReport {
    fn region_geo_mean(&self, series: &[f64], region: Region) -> Option<f64> {
        let vals: Vec<f64> = series
            .iter()
            .zip(&self.regions)
            .filter(|(_, r)| **r == region)
            .map(|(v, _)| *v)
            .collect();
        geo_mean(&vals).ok()
    }

    /// Rebuilds the summary columns from the stored series.
    pub fn recompute(&mut self) {
        self.geo_mean_kl.clear();
        self.geo_mean_kl_extrapolation.clear();
        for (label, series) in &self.kl_series {
            if let Some(g) = self.region_geo_mean(series, Region::Train) {
                self.geo_mean_kl.insert(label.clone(), g);
            }
            if let Some(g) = self.region_geo_mean(series, Region::Extrapolation) {
                self.geo_mean_kl_extrapolation.insert(label.clone(), g);
            }
        }
    }

    /// Writes `t,model,kl,region` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "model", "kl", "region"])?;
        for (label, series) in &self.kl_series {
            for ((t, k), r) in self.grid.iter().zip(series).zip(&self.regions) {
                w.write_record([t.to_string(), label.clone(), k.to_string(), r.as_str().into()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// KL from the truth to each forecaster at every grid point (sorted).
pub fn kl_trajectory(
    truth: &AdvectionSolution,
    forecasters: &[&dyn Forecaster],
    grid: &[f64],
    horizon: f64,
) -> Result<EvalReport> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("evaluation grid must be sorted"));
    }
    let truth_probs: Vec<ProbVector> = grid.iter().map(|&t| truth.evaluate(t)).collect::<Result<_>>()?;
    let mut report = EvalReport {
        horizon,
        grid: grid.to_vec(),
        regions: grid.iter().map(|&t| Region::of(t, horizon)).collect(),
        kl_series: BTreeMap::new(),
        geo_mean_kl: BTreeMap::new(),
        geo_mean_kl_extrapolation: BTreeMap::new(),
    };
    for f in forecasters {
        let preds = f.forecast(truth.graph(), grid)?;
        let series = truth_probs
            .iter()
            .zip(&preds)
            .map(|(p, q)| kl(p, q))
            .collect::<Result<Vec<_>>>()?;
        report.kl_series.insert(f.label(), series);
    }
    report.recompute();
    Ok(report)
}

/// Geometric-mean KL of one forecaster over `grid`.
pub fn geo_kl(truth: &AdvectionSolution, forecaster: &dyn Forecaster, grid: &[f64]) -> Result<f64> {
    let preds = forecaster.forecast(truth.graph(), grid)?;
    let series = grid
        .iter()
        .zip(&preds)
        .map(|(&t, q)| kl(&truth.evaluate(t)?, q))
        .collect::<Result<Vec<_>>>()?;
    geo_mean(&series)
}

/// Mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

pub fn mean_interval(values: &[f64]) -> Result<MeanInterval> {
    if values.is_empty() {
        return Err(Error::invalid("no values to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = Z_95 * std / n.sqrt();
    Ok(MeanInterval {
        mean,
        std,
        low: mean - half,
        high: mean + half,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub model: ModelKind,
    pub seed: u64,
    pub geo_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub size: usize,
    pub model: ModelKind,
    pub geo_kl: MeanInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    /// Writes `size,model,seed,geo_kl` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_for(&self, size: usize, model: ModelKind) -> Option<&MeanInterval> {
        self.summary
            .iter()
            .find(|s| s.size == size && s.model == model)
            .map(|s| &s.geo_kl)
    }
}

/// One trained model and its score.
#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub model: Model,
    pub history: TrainHistory,
    pub geo_kl: f64,
}

/// Trains a fresh model on `sequences` and scores it on `grid`.
pub fn train_and_score(
    spec: ModelSpec,
    truth: &AdvectionSolution,
    sequences: &[EventSequence],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<TrainedCell> {
    let mut model = Model::new(spec)?;
    let history = train(&mut model, truth.graph(), sequences, cfg)?;
    let geo_kl = geo_kl(truth, &model, grid)?;
    Ok(TrainedCell { model, history, geo_kl })
}

/// Trains every `(size, kind, seed)` combination on the first `size`
/// sequences of `data` and scores it over `[0, T]`. The seed drives both
/// initialization and batch order. `on_cell` sees each trained cell.
#[allow(clippy::too_many_arguments)]
pub fn sample_complexity_sweep(
    data: &DatasetBundle,
    truth: &AdvectionSolution,
    sizes: &[usize],
    kinds: &[ModelKind],
    seeds: &[u64],
    make_spec: impl Fn(ModelKind, u64) -> ModelSpec,
    cfg: &TrainConfig,
    mut on_cell: impl FnMut(usize, ModelKind, u64, &TrainedCell),
) -> Result<SweepReport> {
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sweep sizes must be strictly ascending"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > data.sequences.len()) {
        return Err(Error::invalid(format!(
            "sweep size {s} outside 1..={}",
            data.sequences.len()
        )));
    }
    let grid = train_grid(data.horizon);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &size in sizes {
        for &kind in kinds {
            let mut scores = Vec::new();
            for &seed in seeds {
                let cell_cfg = TrainConfig { seed, ..cfg.clone() };
                let cell = train_and_score(
                    make_spec(kind, seed),
                    truth,
                    &data.sequences[..size],
                    &cell_cfg,
                    &grid,
                )?;
                log::info!("sweep size {size} {kind} seed {seed}: geo kl {:.4e}", cell.geo_kl);
                on_cell(size, kind, seed, &cell);
                rows.push(SweepRow { size, model: kind, seed, geo_kl: cell.geo_kl });
                scores.push(cell.geo_kl);
            }
            summary.push(SweepSummary { size, model: kind, geo_kl: mean_interval(&scores)? });
        }
    }
    Ok(SweepReport { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDeletionRow {
    pub model: String,
    pub intact_geo_kl: f64,
    pub deleted_geo_kl: f64,
}

impl EdgeDeletionRow {
    pub fn ratio(&self) -> f64 {
        self.deleted_geo_kl / self.intact_geo_kl
    }
}

/// Scores each forecaster on the intact graph against `truth`, then on the
/// same graph with every edge removed against that graph's own dynamics,
/// which leave `p0` unchanged.
pub fn edge_deletion_eval(
    truth: &AdvectionSolution,
    forecasters: &[&dyn Forecaster],
    grid: &[f64],
) -> Result<Vec<EdgeDeletionRow>> {
    let bare = delete_edges(truth.graph(), |_| true);
    let bare_truth = solve_advection(&bare, truth.p0(), truth.method())?;
    forecasters
        .iter()
        .map(|f| {
            Ok(EdgeDeletionRow {
                model: f.label(),
                intact_geo_kl: geo_kl(truth, *f, grid)?,
                deleted_geo_kl: geo_kl(&bare_truth, *f, grid)?,
            })
        })
        .collect()
}

/// Largest spread `max_t p_v(t) - min_t p_v(t)` over nodes `v` and `grid`.
pub fn time_variation(forecaster: &dyn Forecaster, graph: &WeightedDigraph, grid: &[f64]) -> Result<f64> {
    let preds = forecaster.forecast(graph, grid)?;
    Ok((0..graph.num_nodes())
        .map(|v| {
            let (lo, hi) = preds.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                (lo.min(p.as_slice()[v]), hi.max(p.as_slice()[v]))
            });
            hi - lo
        })
        .fold(0.0, f64::max))
}

/// Per-event log-likelihood of held-out sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub mean: f64,
    pub events: usize,
}

/// Mean `ln p_{v_i}(t_i)` over every event, with `p` floored at
/// [`PROB_FLOOR`]. Times beyond `horizon` are rejected.
pub fn test_loglik(
    forecaster: &dyn Forecaster,
    graph: &WeightedDigraph,
    sequences: &[EventSequence],
    horizon: f64,
) -> Result<LogLikelihood> {
    let mut events: Vec<(f64, usize)> = Vec::new();
    for seq in sequences {
        seq.check_nodes(graph.num_nodes())?;
        for e in seq.events() {
            if e.t > horizon {
                return Err(Error::OutOfHorizon { time: e.t, horizon });
            }
            events.push((e.t, e.node));
        }
    }
    if events.is_empty() {
        return Err(Error::invalid("no test events"));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    for chunk in events.chunks(4096) {
        let times: Vec<f64> = chunk.iter().map(|e| e.0).collect();
        let preds = forecaster.forecast(graph, &times)?;
        total += chunk
            .iter()
            .zip(&preds)
            .map(|(e, p)| p.as_slice()[e.1].max(PROB_FLOOR).ln())
            .sum::<f64>();
    }
    Ok(LogLikelihood {
        mean: total / events.len() as f64,
        events: events.len(),
    })
}

/// Event counts per `(node, time bin)`, divided by the number of binned
/// events. Bins are `[e_i, e_{i+1})`, the last one closed; events outside
/// every bin are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    /// `mass[node][bin]`.
    pub mass: Vec<Vec<f64>>,
    pub total: usize,
}

pub fn empirical_distribution(
    sequences: &[EventSequence],
    num_nodes: usize,
    bin_edges: &[f64],
) -> Result<Histogram> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("bin edges must be strictly increasing, at least two"));
    }
    let bins = bin_edges.len() - 1;
    let mut counts = vec![vec![0usize; bins]; num_nodes];
    let mut total = 0;
    for seq in sequences {
        seq.check_nodes(num_nodes)?;
        for e in seq.events() {
            let last = bin_edges[bins];
            if e.t < bin_edges[0] || e.t > last {
                continue;
            }
            let b = if e.t == last {
                bins - 1
            } else {
                bin_edges.partition_point(|&x| x <= e.t) - 1
            };
            counts[e.node][b] += 1;
            total += 1;
        }
    }
    let scale = if total > 0 { 1.0 / total as f64 } else { 0.0 };
    Ok(Histogram {
        bin_edges: bin_edges.to_vec(),
        mass: counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 * scale).collect())
            .collect(),
        total,
    })
}

/// Pearson chi-square goodness-of-fit of `observed` counts against
/// `expected` probabilities. Returns `(statistic, p_value)`; categories
/// with zero expected probability must have zero count.
pub fn chi_square_test(observed: &[usize], expected: &ProbVector) -> Result<(f64, f64)> {
    if observed.len() != expected.len() {
        return Err(Error::shape("chi-square categories differ"));
    }
    let n: usize = observed.iter().sum();
    if n == 0 {
        return Err(Error::invalid("chi-square test without observations"));
    }
    let mut stat = 0.0;
    let mut categories = 0;
    for (&o, &p) in observed.iter().zip(expected.as_slice()) {
        if p <= 0.0 {
            if o > 0 {
                return Ok((f64::INFINITY, 0.0));
            }
            continue;
        }
        let e = p * n as f64;
        stat += (o as f64 - e).powi(2) / e;
        categories += 1;
    }
    if categories < 2 {
        return Ok((stat, 1.0));
    }
    let dist = ChiSquared::new((categories - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((stat, dist.sf(stat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ring_graph;
    use crate::sampler::Event;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn seq(events: &[(f64, usize)], horizon: f64) -> EventSequence {
        EventSequence::new(events.iter().map(|&(t, node)| Event { t, node }).collect(), horizon)
            .unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let d = kl(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
        assert!(kl(&p, &pv(&[0.5, 0.5])).is_err());
        // A zero prediction is floored rather than producing infinity.
        let d = kl(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!(d.is_finite() && d > 10.0);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let n = rng.random_range(2..8);
            let mut draw = || {
                let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
                ProbVector::normalize(v).unwrap().0
            };
            let (p, q) = (draw(), draw());
            assert!(kl(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn geo_mean_examples() {
        let e = std::f64::consts::E;
        assert!((geo_mean(&[e, e.powi(3)]).unwrap() - e * e).abs() < 1e-12);
        assert!((geo_mean(&[0.3; 7]).unwrap() - 0.3).abs() < 1e-15);
        assert!(geo_mean(&[]).is_err());
        assert!((geo_mean(&[0.0]).unwrap() / PROB_FLOOR - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn geo_mean_ignores_order(mut v in prop::collection::vec(1e-6f64..10.0, 1..40), seed: u64) {
            let a = geo_mean(&v).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            prop_assert_eq!(a, geo_mean(&v).unwrap());
        }
    }

    #[test]
    fn oracle_scores_zero_and_regions_are_tagged() {
        let g = ring_graph(6, 2.0, 0.5).unwrap();
        let p0 = ProbVector::one_hot(6, 0).unwrap();
        let truth = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let oracle = OracleForecaster { p0: p0.clone(), method: SolverMethod::default() };
        let grid = default_grid(1.0);
        let report = kl_trajectory(&truth, &[&oracle, &UniformForecaster], &grid, 1.0).unwrap();
        // Zero up to the effect of the prediction floor on sub-floor entries.
        assert!(report.kl_series["oracle"].iter().all(|&k| k < 1e-10));
        assert_eq!(report.regions.iter().filter(|r| **r == Region::Train).count(), 100);
        assert_eq!(report.regions.len(), 200);
        let mut again = report.clone();
        again.recompute();
        assert_eq!(again, report);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,model,kl,region\n"));
        assert!(text.contains(",extrapolation\n") && text.contains(",train\n"));
        assert_eq!(text.lines().count(), 401);
    }

    #[test]
    fn uniform_log_likelihood_is_minus_log_n() {
        let g = ring_graph(21, 2.0, 0.5).unwrap();
        let data = [seq(&[(0.5, 3), (2.0, 20)], 8.0), seq(&[(7.9, 0)], 8.0)];
        let ll = test_loglik(&UniformForecaster, &g, &data, 8.0).unwrap();
        assert!((ll.mean + 21f64.ln()).abs() < 1e-12);
        assert_eq!(ll.events, 3);
        assert!(matches!(
            test_loglik(&UniformForecaster, &g, &data, 4.0),
            Err(Error::OutOfHorizon { .. })
        ));
    }

    #[test]
    fn time_variation_of_constant_and_moving_forecasts() {
        let g = ring_graph(5, 2.0, 0.5).unwrap();
        let grid = uniform_grid(0.0, 2.0, 50);
        assert_eq!(time_variation(&UniformForecaster, &g, &grid).unwrap(), 0.0);
        let oracle = OracleForecaster {
            p0: ProbVector::one_hot(5, 0).unwrap(),
            method: SolverMethod::default(),
        };
        let spread = time_variation(&oracle, &g, &grid).unwrap();
        assert!(spread > 0.5 && spread <= 1.0);
    }

    #[test]
    fn certain_forecaster_scores_zero() {
        struct Certain;
        impl Forecaster for Certain {
            fn label(&self) -> String {
                "certain".into()
            }
            fn forecast(&self, g: &WeightedDigraph, times: &[f64]) -> Result<Vec<ProbVector>> {
                times
                    .iter()
                    .map(|&t| ProbVector::one_hot(g.num_nodes(), (t as usize) % g.num_nodes()))
                    .collect()
            }
        }
        let g = ring_graph(4, 2.0, 0.5).unwrap();
        let data = [seq(&[(0.5, 0), (1.5, 1), (3.2, 3)], 5.0)];
        assert_eq!(test_loglik(&Certain, &g, &data, 5.0).unwrap().mean, 0.0);
    }

    #[test]
    fn disconnected_truth_stays_at_start() {
        let g = ring_graph(5, 2.0, 0.5).unwrap();
        let p0 = ProbVector::one_hot(5, 2).unwrap();
        let truth = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let oracle = OracleForecaster { p0: p0.clone(), method: SolverMethod::default() };
        let grid = train_grid(1.0);
        let rows = edge_deletion_eval(&truth, &[&oracle], &grid).unwrap();
        for r in &rows {
            assert!(r.intact_geo_kl < 1e-10);
            assert!(r.deleted_geo_kl < 1e-10);
        }
        let bare = delete_edges(&g, |_| true);
        for p in oracle.forecast(&bare, &[0.0, 0.7, 3.0]).unwrap() {
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn histogram_examples() {
        let edges = [0.0, 1.0, 2.0, 3.0];
        let h = empirical_distribution(&[], 3, &edges).unwrap();
        assert!(h.mass.iter().flatten().all(|&m| m == 0.0));
        let h = empirical_distribution(&[seq(&[(1.5, 2)], 3.0)], 3, &edges).unwrap();
        assert_eq!(h.mass[2][1], 1.0);
        assert_eq!(h.mass.iter().flatten().sum::<f64>(), 1.0);
        let data = [seq(&[(0.0, 0), (0.99, 1), (1.0, 1), (3.0, 2)], 3.0)];
        let h = empirical_distribution(&data, 3, &edges).unwrap();
        assert_eq!(h.mass[0][0], 0.25);
        assert_eq!(h.mass[1][0], 0.25);
        assert_eq!(h.mass[1][1], 0.25);
        assert_eq!(h.mass[2][2], 0.25);
        assert!(empirical_distribution(&data, 3, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn chi_square_matches_table_values() {
        // Statistic 3.84 on one degree of freedom is the 5% critical value.
        let (stat, p) = chi_square_test(&[60, 40], &pv(&[0.5, 0.5])).unwrap();
        assert!((stat - 4.0).abs() < 1e-12);
        assert!((p - 0.0455).abs() < 1e-3);
        let (_, p) = chi_square_test(&[50, 50], &pv(&[0.5, 0.5])).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn interval_examples() {
        let s = mean_interval(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!((s.high - 2.0 - 1.959963984540054 / 3f64.sqrt()).abs() < 1e-12);
        let single = mean_interval(&[4.0]).unwrap();
        assert_eq!((single.low, single.high), (4.0, 4.0));
    }

    #[test]
    fn sweep_emits_one_row_per_cell() {
        let g = ring_graph(4, 2.0, 0.5).unwrap();
        let p0 = ProbVector::one_hot(4, 0).unwrap();
        let data = crate::sampler::generate_dataset(&g, &p0, 2.5, 1.0, 6, 1).unwrap();
        let truth = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::synthetic() };
        let mut seen = 0;
        let report = sample_complexity_sweep(
            &data,
            &truth,
            &[2, 6],
            &ModelKind::ALL,
            &[0],
            |kind, seed| {
                let mut s = ModelSpec::new(kind, 4, 1.0).with_seed(seed);
                s.hidden = 8;
                if kind == ModelKind::Gopher {
                    s.augmented_dims = 2;
                }
                s
            },
            &cfg,
            |_, _, _, _| seen += 1,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(seen, 6);
        assert_eq!(report.summary.len(), 6);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("size,model,seed,geo_kl\n2,gopher,0,"));
    }
}
