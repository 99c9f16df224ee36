//! Command-line driver. Every subcommand resolves an [`ExperimentConfig`],
//! works inside its output directory and leaves a manifest behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::advection::{solve_advection, uniform_grid, ProbVector, SolverMethod};
use crate::config::{ExperimentConfig, Preset};
use crate::covid::{build_event_windows, parse_cases, CountyTable, WindowSettings};
use crate::error::{Error, Result};
use crate::evaluation::{
    edge_deletion_eval, kl_trajectory, sample_complexity_sweep, test_loglik, time_variation,
    EdgeDeletionRow, LogLikelihood, OracleForecaster, UniformForecaster,
};
use crate::graph::WeightedDigraph;
use crate::io::{sha256_file, sha256_hex, write_atomic};
use crate::models::{Forecaster, Model, ModelKind};
use crate::sampler::{generate_dataset, DatasetBundle};
use crate::training::train;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "graph-forecast", version, about = "Forecast categorical distributions over graph nodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic graph and event dataset.
    Generate(Common),
    /// Fit models to the training dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Model kinds to train (default: `model.kind`).
        #[arg(long = "model")]
        models: Vec<ModelKind>,
    },
    /// Score trained models: KL trajectories, edge deletion, test likelihood.
    Eval(Common),
    /// Convert a cumulative cases CSV into county event windows.
    IngestCovid {
        #[command(flatten)]
        common: Common,
        /// Cases CSV (overrides `covid.cases_csv`).
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Train and score every (size, model, seed) combination.
    Sweep(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Starting point for the configuration.
    #[arg(long, value_enum, default_value = "ring")]
    pub preset: Preset,
    /// TOML file merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir` and the environment).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(self.preset, self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        let out = cfg.output_dir();
        std::fs::create_dir_all(&out)?;
        Ok((cfg, out))
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => generate(&c),
        Command::Train { common, models } => train_models(&common, &models),
        Command::Eval(c) => eval(&c),
        Command::IngestCovid { common, cases } => ingest_covid(&common, cases),
        Command::Sweep(c) => sweep(&c),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    code_version: &'a str,
    config: &'a ExperimentConfig,
    seeds: BTreeMap<&'a str, u64>,
    /// Input file name to SHA-256.
    inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256.
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    notes: serde_json::Value,
}

impl<'a> Manifest<'a> {
    fn new(command: &'a str, config: &'a ExperimentConfig) -> Self {
        Manifest {
            command,
            code_version: env!("CARGO_PKG_VERSION"),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: serde_json::Value::Null,
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write(&self, dir: &Path, name: &str) -> Result<()> {
        write_atomic(dir.join(name), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn initial_condition(cfg: &ExperimentConfig, graph: &WeightedDigraph) -> Result<ProbVector> {
    ProbVector::one_hot(graph.num_nodes(), cfg.sampler.initial_node)
        .map_err(|e| Error::Config(format!("sampler.initial_node: {e}")))
}

fn generate(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let graph = cfg.build_graph(&out)?;
    let p0 = initial_condition(&cfg, &graph)?;
    let s = &cfg.sampler;
    let data = generate_dataset(&graph, &p0, s.lambda, s.horizon, s.num_sequences, s.seed)?;
    let mut manifest = Manifest::new("generate", &cfg);
    manifest.seeds.insert("sampler", s.seed);
    if let Some(seed) = graph.seed() {
        manifest.seeds.insert("graph", seed);
    }
    manifest.output(&out, "graph.json", graph.to_json()?.as_bytes())?;
    let train_name = cfg.data.train.display().to_string();
    manifest.output(&out, &train_name, &data.to_jsonl_bytes("graph.json")?)?;
    manifest.write(&out, "manifest-generate.json")?;
    log::info!(
        "wrote {} sequences ({} events) to {}",
        data.sequences.len(),
        data.total_events(),
        out.join(&cfg.data.train).display()
    );
    Ok(())
}

fn model_dir(out: &Path, kind: ModelKind) -> PathBuf {
    out.join(format!("model-{kind}"))
}

fn train_models(common: &Common, kinds: &[ModelKind]) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let data_path = out.join(&cfg.data.train);
    let data = DatasetBundle::load(&data_path)?;
    let kinds = if kinds.is_empty() { vec![cfg.model.kind] } else { kinds.to_vec() };
    for kind in kinds {
        let spec = cfg
            .model
            .spec(kind, data.graph.num_nodes(), data.horizon, cfg.model.seed);
        let mut model = Model::new(spec).map_err(|e| Error::Config(format!("model: {e}")))?;
        let history = train(&mut model, &data.graph, &data.sequences, &cfg.train)?;
        let dir = model_dir(&out, kind);
        model.save(&dir)?;
        let mut manifest = Manifest::new("train", &cfg);
        manifest.seeds.insert("model_init", cfg.model.seed);
        manifest.seeds.insert("train_shuffle", cfg.train.seed);
        manifest.input(&data_path)?;
        for name in [crate::models::ARCHITECTURE_FILE, crate::models::CHECKPOINT_FILE] {
            manifest.outputs.insert(name.into(), sha256_file(dir.join(name))?);
        }
        let mut csv = Vec::new();
        history.write_csv(&mut csv)?;
        manifest.output(&dir, "loss.csv", &csv)?;
        manifest.notes = serde_json::json!({
            "model": kind,
            "steps": history.records.len(),
            "final_nll": history.records.last().map(|r| r.nll),
            "skipped_empty_batches": history.skipped_empty_batches,
        });
        manifest.write(&dir, "manifest.json")?;
        log::info!("saved {kind} to {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    horizon: f64,
    geo_mean_kl: BTreeMap<String, f64>,
    geo_mean_kl_extrapolation: BTreeMap<String, f64>,
    edge_deletion: Vec<EdgeDeletionRow>,
    test_loglik: BTreeMap<String, LogLikelihood>,
    /// Largest change of any node's probability over the grid.
    time_variation: BTreeMap<String, f64>,
}

fn eval(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let data_path = out.join(&cfg.data.train);
    let data = DatasetBundle::load(&data_path)?;
    let graph = &data.graph;
    let t = data.horizon;
    let mut models = Vec::new();
    for &kind in &cfg.eval.models {
        models.push(Model::load(model_dir(&out, kind))?);
    }
    let mut manifest = Manifest::new("eval", &cfg);
    manifest.input(&data_path)?;
    let grid = uniform_grid(0.0, 2.0 * t, cfg.eval.grid_points);
    let mut summary = EvalSummary {
        horizon: t,
        geo_mean_kl: BTreeMap::new(),
        geo_mean_kl_extrapolation: BTreeMap::new(),
        edge_deletion: Vec::new(),
        test_loglik: BTreeMap::new(),
        time_variation: BTreeMap::new(),
    };
    let oracle = data.p0.clone().map(|p0| OracleForecaster {
        p0,
        method: SolverMethod::default(),
    });
    let mut forecasters: Vec<&dyn Forecaster> = Vec::new();
    if let Some(o) = &oracle {
        forecasters.push(o);
    }
    forecasters.push(&UniformForecaster);
    forecasters.extend(models.iter().map(|m| m as &dyn Forecaster));

    if let Some(o) = &oracle {
        let truth = solve_advection(graph, &o.p0, o.method)?;
        let report = kl_trajectory(&truth, &forecasters, &grid, t)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        manifest.output(&out, "kl_trajectory.csv", &csv)?;
        summary.geo_mean_kl = report.geo_mean_kl.clone();
        summary.geo_mean_kl_extrapolation = report.geo_mean_kl_extrapolation.clone();
        if cfg.eval.edge_deletion {
            let train_grid: Vec<f64> = grid.iter().copied().filter(|&x| x <= t).collect();
            let model_refs: Vec<&dyn Forecaster> = models.iter().map(|m| m as &dyn Forecaster).collect();
            summary.edge_deletion = edge_deletion_eval(&truth, &model_refs, &train_grid)?;
        }
    } else {
        log::info!("dataset has no known initial condition; skipping KL scores");
    }
    let train_grid: Vec<f64> = grid.iter().copied().filter(|&x| x <= t).collect();
    for f in &forecasters {
        summary.time_variation.insert(f.label(), time_variation(*f, graph, &train_grid)?);
    }
    if let Some(test) = &cfg.data.test {
        let test_path = out.join(test);
        let test_data = DatasetBundle::load(&test_path)?;
        manifest.input(&test_path)?;
        for f in &forecasters {
            let ll = test_loglik(*f, graph, &test_data.sequences, t)?;
            summary.test_loglik.insert(f.label(), ll);
        }
    }
    manifest.output(&out, "eval_summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    manifest.write(&out, "manifest-eval.json")?;
    for (label, g) in &summary.geo_mean_kl {
        log::info!("{label}: geo-mean KL {g:.4e} over [0, {t}]");
    }
    for (label, ll) in &summary.test_loglik {
        log::info!("{label}: test log-likelihood {:.4} per event", ll.mean);
    }
    Ok(())
}

fn ingest_covid(common: &Common, cases: Option<PathBuf>) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let path = cases
        .or_else(|| cfg.covid.cases_csv.clone())
        .ok_or_else(|| Error::Config("no cases CSV: pass --cases or set covid.cases_csv".into()))?;
    let file = std::fs::File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
        _ => e.into(),
    })?;
    let table = CountyTable::new_jersey();
    let daily = parse_cases(std::io::BufReader::new(file), &path.display().to_string(), &table)?;
    let settings = WindowSettings {
        window_days: cfg.covid.window_days,
        test_fraction: cfg.covid.test_fraction,
        case_fraction: cfg.covid.case_fraction,
        seed: cfg.covid.seed,
    };
    let split = build_event_windows(&daily, &table, &settings)?;
    let mut manifest = Manifest::new("ingest-covid", &cfg);
    manifest.input(&path)?;
    manifest.seeds.insert("jitter", cfg.covid.seed);
    manifest.output(&out, "graph.json", split.train.graph.to_json()?.as_bytes())?;
    manifest.output(&out, "counties.json", serde_json::to_string_pretty(table.names())?.as_bytes())?;
    let test_name = cfg
        .data
        .test
        .clone()
        .ok_or_else(|| Error::Config("data.test must name the test split file".into()))?;
    manifest.output(
        &out,
        &cfg.data.train.display().to_string(),
        &split.train.to_jsonl_bytes("graph.json")?,
    )?;
    manifest.output(&out, &test_name.display().to_string(), &split.test.to_jsonl_bytes("graph.json")?)?;
    manifest.notes = serde_json::json!({
        "first_date": daily.start.to_string(),
        "days": daily.days(),
        "total_cases": daily.total(),
        "clamped_decreases": daily.clamped,
        "skipped_unknown_rows": daily.skipped_unknown,
        "train_windows": split.train.sequences.len(),
        "test_windows": split.test.sequences.len(),
        "window_starts": split.window_starts.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
    });
    manifest.write(&out, "manifest-ingest-covid.json")?;
    log::info!(
        "{} days, {} train and {} test windows",
        daily.days(),
        split.train.sequences.len(),
        split.test.sequences.len()
    );
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let data_path = out.join(&cfg.data.train);
    let data = DatasetBundle::load(&data_path)?;
    let p0 = data
        .p0
        .clone()
        .ok_or_else(|| Error::Config("sweep needs a dataset with a known initial condition".into()))?;
    if let Some(&s) = cfg.eval.sweep_sizes.iter().find(|&&s| s > data.sequences.len()) {
        return Err(Error::Config(format!(
            "sweep size {s} exceeds the {} sequences in the dataset",
            data.sequences.len()
        )));
    }
    let truth = solve_advection(&data.graph, &p0, SolverMethod::default())?;
    let n = data.graph.num_nodes();
    let report = sample_complexity_sweep(
        &data,
        &truth,
        &cfg.eval.sweep_sizes,
        &cfg.eval.sweep_models,
        &cfg.eval.sweep_seeds,
        |kind, seed| cfg.model.spec(kind, n, data.horizon, seed),
        &cfg.train,
        |_, _, _, _| {},
    )?;
    let mut manifest = Manifest::new("sweep", &cfg);
    manifest.input(&data_path)?;
    manifest.notes = serde_json::json!({ "sweep_seeds": cfg.eval.sweep_seeds });
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    manifest.output(&out, "sweep.csv", &csv)?;
    manifest.output(&out, "sweep_summary.json", serde_json::to_string_pretty(&report.summary)?.as_bytes())?;
    manifest.write(&out, "manifest-sweep.json")?;
    Ok(())
}
