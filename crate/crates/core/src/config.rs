//! Experiment configuration: presets, TOML files and `key=value` overrides.
//!
//! A run's configuration is built in layers. A preset is serialized to a
//! TOML table, the config file (if any) is merged over it, then each
//! override is applied. The result is deserialized with unknown keys
//! rejected and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::covid::{TEST_FRACTION, WINDOW_DAYS};
use crate::error::{Error, Result};
use crate::graph::{random_geometric_graph, ring_graph, GeometricParams, WeightedDigraph};
use crate::models::{ModelKind, ModelSpec, DEFAULT_INIT_STD};
use crate::sampler::DEFAULT_LAMBDA;
use crate::training::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GRAPH_FORECAST_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Ring,
    Geometric,
    Covid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphConfig {
    Ring {
        num_nodes: usize,
        ccw_weight: f64,
        cw_weight: f64,
    },
    Geometric {
        num_nodes: usize,
        radius: f64,
        weight_low: f64,
        weight_high: f64,
        seed: u64,
    },
    /// A graph JSON file, relative to the output directory unless absolute.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub horizon: f64,
    pub num_sequences: usize,
    pub seed: u64,
    /// All initial mass sits on this node.
    pub initial_node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Used by the ODE model only.
    pub augmented_dims: usize,
    pub ode_steps_per_unit_time: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn spec(&self, kind: ModelKind, num_nodes: usize, horizon: f64, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(kind, num_nodes, horizon).with_seed(seed);
        spec.hidden = self.hidden;
        spec.ode_steps_per_unit_time = self.ode_steps_per_unit_time;
        spec.init_std = self.init_std;
        spec.augmented_dims = if kind == ModelKind::Gopher { self.augmented_dims } else { 0 };
        spec
    }
}

/// Dataset file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Trained models to score.
    pub models: Vec<ModelKind>,
    pub grid_points: usize,
    pub edge_deletion: bool,
    pub sweep_sizes: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_models: Vec<ModelKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovidConfig {
    /// Cumulative cases CSV; relative paths resolve against the working
    /// directory.
    #[serde(default)]
    pub cases_csv: Option<PathBuf>,
    pub window_days: usize,
    pub test_fraction: f64,
    pub case_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub graph: GraphConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub covid: CovidConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let geometric = GeometricParams::default();
        let (graph, horizon) = match preset {
            Preset::Ring | Preset::Covid => (
                GraphConfig::Ring {
                    num_nodes: 25,
                    ccw_weight: 2.0,
                    cw_weight: 0.5,
                },
                5.0,
            ),
            Preset::Geometric => (
                GraphConfig::Geometric {
                    num_nodes: geometric.n,
                    radius: geometric.radius,
                    weight_low: geometric.weight_low,
                    weight_high: geometric.weight_high,
                    seed: 0,
                },
                1.0,
            ),
        };
        let mut cfg = ExperimentConfig {
            output_dir: None,
            graph,
            sampler: SamplerConfig {
                lambda: DEFAULT_LAMBDA,
                horizon,
                num_sequences: 1024,
                seed: 0,
                initial_node: 0,
            },
            data: DataConfig {
                train: "dataset.jsonl".into(),
                test: None,
            },
            model: ModelConfig {
                kind: ModelKind::Gopher,
                hidden: 64,
                augmented_dims: 16,
                ode_steps_per_unit_time: 40,
                init_std: DEFAULT_INIT_STD,
                seed: 0,
            },
            train: TrainConfig::synthetic(),
            eval: EvalConfig {
                models: ModelKind::ALL.to_vec(),
                grid_points: 200,
                edge_deletion: true,
                sweep_sizes: vec![64, 128, 256, 512, 1024],
                sweep_seeds: vec![0, 1, 2],
                sweep_models: ModelKind::ALL.to_vec(),
            },
            covid: CovidConfig {
                cases_csv: None,
                window_days: WINDOW_DAYS,
                test_fraction: TEST_FRACTION,
                case_fraction: 1.0,
                seed: 0,
            },
        };
        if preset == Preset::Covid {
            cfg.graph = GraphConfig::File { path: "graph.json".into() };
            cfg.sampler.horizon = WINDOW_DAYS as f64;
            cfg.data = DataConfig {
                train: "train.jsonl".into(),
                test: Some("test.jsonl".into()),
            };
            cfg.train = TrainConfig::covid();
            cfg.eval.edge_deletion = false;
        }
        cfg
    }

    /// Preset, then `file`, then `overrides` (`dotted.key=value`).
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(ExperimentConfig::preset(preset))
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = crate::io::read_artifact(path)?;
            let layer: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, layer);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| {
            Error::Config(e.to_string().trim().replace('\n', " "))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.sampler;
        if !(s.lambda.is_finite() && s.lambda > 0.0) {
            return bad(format!("sampler.lambda must be positive, got {}", s.lambda));
        }
        if !(s.horizon.is_finite() && s.horizon > 0.0) {
            return bad(format!("sampler.horizon must be positive, got {}", s.horizon));
        }
        match &self.graph {
            GraphConfig::Ring { num_nodes, .. } | GraphConfig::Geometric { num_nodes, .. } => {
                if s.initial_node >= *num_nodes {
                    return bad(format!(
                        "sampler.initial_node {} outside a {num_nodes}-node graph",
                        s.initial_node
                    ));
                }
            }
            GraphConfig::File { .. } => {}
        }
        if self.eval.grid_points < 2 {
            return bad("eval.grid_points must be at least 2".into());
        }
        if self.eval.sweep_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return bad("eval.sweep_sizes must be strictly ascending".into());
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.model
            .spec(self.model.kind, 1, s.horizon, 0)
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// Explicit `output_dir`, else `$GRAPH_FORECAST_OUT`, else `runs`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
        })
    }

    /// Builds the configured graph; `File` paths resolve against `out`.
    pub fn build_graph(&self, out: &Path) -> Result<WeightedDigraph> {
        match &self.graph {
            GraphConfig::Ring {
                num_nodes,
                ccw_weight,
                cw_weight,
            } => ring_graph(*num_nodes, *ccw_weight, *cw_weight),
            GraphConfig::Geometric {
                num_nodes,
                radius,
                weight_low,
                weight_high,
                seed,
            } => random_geometric_graph(
                GeometricParams {
                    n: *num_nodes,
                    radius: *radius,
                    weight_low: *weight_low,
                    weight_high: *weight_high,
                },
                *seed,
            ),
            GraphConfig::File { path } => WeightedDigraph::load(out.join(path)),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Recursive table merge. A `graph` table whose `kind` changes is
/// replaced whole, so a new variant does not inherit the old one's fields.
fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                let switches_variant = k == "graph"
                    && matches!(
                        (b.get("graph").and_then(|g| g.get("kind")), v.get("kind")),
                        (Some(old), Some(new)) if old != new
                    );
                match b.get_mut(&k) {
                    Some(existing) if !switches_variant => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn apply_override(value: &mut toml::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut layer = parsed;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key '{key}'")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), layer);
        layer = toml::Value::Table(t);
    }
    merge(value, layer);
    Ok(())
}
