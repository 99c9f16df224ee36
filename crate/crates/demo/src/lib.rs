//! Browser bindings: build a ring or geometric graph, watch probability
//! mass advect over it, sample events from it, and compare simple
//! forecasters against the true trajectory.

use graph_forecast::advection::{
    solve_advection, stationary_distribution, uniform_grid, AdvectionSolution, ProbVector, SolverMethod,
};
use graph_forecast::evaluation::{kl, UniformForecaster};
use graph_forecast::graph::{random_geometric_graph, ring_graph, GeometricParams, WeightedDigraph};
use graph_forecast::models::Forecaster;
use graph_forecast::sampler::generate_dataset;
use wasm_bindgen::prelude::*;

fn js(e: graph_forecast::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scenario {
    truth: AdvectionSolution,
}

impl Scenario {
    fn from_graph(graph: WeightedDigraph, start: usize) -> graph_forecast::Result<Scenario> {
        let p0 = ProbVector::one_hot(graph.num_nodes(), start)?;
        let truth = solve_advection(&graph, &p0, SolverMethod::ClosedForm)?;
        Ok(Scenario { truth })
    }

    fn graph(&self) -> &WeightedDigraph {
        self.truth.graph()
    }

    fn trajectory_inner(&self, horizon: f64, points: usize) -> graph_forecast::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points * self.graph().num_nodes());
        for t in uniform_grid(0.0, horizon, points) {
            out.extend_from_slice(self.truth.evaluate(t)?.as_slice());
        }
        Ok(out)
    }

    fn sample_inner(&self, lambda: f64, horizon: f64, seed: u64) -> graph_forecast::Result<Vec<f64>> {
        let data = generate_dataset(self.graph(), self.truth.p0(), lambda, horizon, 1, seed)?;
        Ok(data.sequences[0]
            .events()
            .iter()
            .flat_map(|e| [e.t, e.node as f64])
            .collect())
    }

    fn kl_curves_inner(&self, horizon: f64, points: usize) -> graph_forecast::Result<Vec<f64>> {
        let grid = uniform_grid(0.0, horizon, points);
        let uniform = UniformForecaster.forecast(self.graph(), &grid)?;
        let stationary = stationary_distribution(self.graph())?;
        let start = self.truth.p0();
        let mut out = Vec::with_capacity(points * 3);
        for (&t, u) in grid.iter().zip(&uniform) {
            let p = self.truth.evaluate(t)?;
            out.push(kl(&p, u)?);
            out.push(kl(&p, &stationary)?);
            out.push(kl(&p, start)?);
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl Scenario {
    /// Directed ring; all mass starts on node `start`.
    pub fn ring(n: usize, ccw_weight: f64, cw_weight: f64, start: usize) -> Result<Scenario, JsError> {
        let g = ring_graph(n, ccw_weight, cw_weight).map_err(js)?;
        Scenario::from_graph(g, start).map_err(js)
    }

    /// Random geometric graph in the unit square.
    pub fn geometric(n: usize, radius: f64, seed: u64, start: usize) -> Result<Scenario, JsError> {
        let params = GeometricParams {
            n,
            radius,
            ..GeometricParams::default()
        };
        let g = random_geometric_graph(params, seed).map_err(js)?;
        Scenario::from_graph(g, start).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn num_nodes(&self) -> usize {
        self.graph().num_nodes()
    }

    /// Node positions as `[x0, y0, x1, y1, ...]`; ring nodes sit on a circle.
    pub fn layout(&self) -> Vec<f64> {
        match self.graph().node_coords() {
            Some(c) => c.iter().flat_map(|p| [p[0], p[1]]).collect(),
            None => {
                let n = self.num_nodes() as f64;
                (0..self.num_nodes())
                    .flat_map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / n;
                        [0.5 + 0.45 * a.cos(), 0.5 - 0.45 * a.sin()]
                    })
                    .collect()
            }
        }
    }

    /// Edges as `[src, dst, weight, ...]`.
    pub fn edges(&self) -> Vec<f64> {
        self.graph()
            .edges()
            .iter()
            .flat_map(|e| [e.src as f64, e.dst as f64, e.weight])
            .collect()
    }

    /// `p(t)` on `points` times over `[0, horizon]`, row-major `points x n`.
    pub fn trajectory(&self, horizon: f64, points: usize) -> Result<Vec<f64>, JsError> {
        self.trajectory_inner(horizon, points).map_err(js)
    }

    /// One Poisson event sequence as `[t0, node0, t1, node1, ...]`.
    pub fn sample(&self, lambda: f64, horizon: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        self.sample_inner(lambda, horizon, seed).map_err(js)
    }

    /// KL from the truth to the uniform, stationary and frozen-start
    /// forecasts, as `[uniform, stationary, start]` triples per time.
    pub fn kl_curves(&self, horizon: f64, points: usize) -> Result<Vec<f64>, JsError> {
        self.kl_curves_inner(horizon, points).map_err(js)
    }
}
