//! Ground-truth graph advection, `dp/dt = -L_out^T p`.
//!
//! Two solvers: fixed-step RK4 (default, step 1e-3) and the closed form
//! `p(t) = exp(-L_out^T t) p0`, which serves as the oracle for RK4.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{out_degree_laplacian, WeightedDigraph};
use crate::linalg::DenseMatrix;

pub const DEFAULT_STEP: f64 = 1e-3;
const SUM_TOLERANCE: f64 = 1e-9;
const NEGATIVE_TOLERANCE: f64 = 1e-9;

/// Nonnegative vector summing to one, one entry per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(x) = values.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid(format!("probability entry {x} is not in [0, inf)")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(n: usize) -> Self {
        ProbVector(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, node: usize) -> Result<Self> {
        if node >= n {
            return Err(Error::invalid(format!("node {node} out of range for {n} nodes")));
        }
        let mut v = vec![0.0; n];
        v[node] = 1.0;
        Ok(ProbVector(v))
    }

    /// Clamps negatives to zero and rescales to unit sum. Returns the
    /// normalized vector and whether any entry was clamped.
    pub fn normalize(mut values: Vec<f64>) -> Result<(Self, bool)> {
        let mut clamped = false;
        for x in values.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
                clamped = true;
            }
        }
        let s: f64 = values.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("cannot normalize vector with sum {s}")));
        }
        values.iter_mut().for_each(|x| *x /= s);
        Ok((ProbVector(values), clamped))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `out[perm[i]] = self[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ProbVector {
        ProbVector(crate::graph::permute_rows(&self.0, perm))
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `-L_out^T p`: inflow along incoming edges minus outflow along outgoing.
pub fn advection_derivative(g: &WeightedDigraph, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != g.num_nodes() {
        return Err(Error::shape(format!(
            "probability vector of length {} for {} nodes",
            p.len(),
            g.num_nodes()
        )));
    }
    let mut dp = vec![0.0; p.len()];
    derivative_into(g, p, &mut dp);
    Ok(dp)
}

fn derivative_into(g: &WeightedDigraph, p: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for e in g.edges() {
        let flow = e.weight * p[e.src];
        out[e.dst] += flow;
        out[e.src] -= flow;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum SolverMethod {
    FixedStepRk4 { step_size: f64 },
    ClosedForm,
}

impl Default for SolverMethod {
    fn default() -> Self {
        SolverMethod::FixedStepRk4 {
            step_size: DEFAULT_STEP,
        }
    }
}

/// A solved advection problem, evaluable at any `t >= 0`.
///
/// RK4 states at multiples of the step size are cached as they are first
/// reached; an evaluation between checkpoints takes one partial step from
/// the preceding checkpoint, which is the same arithmetic as integrating
/// from zero.
#[derive(Debug)]
pub struct AdvectionSolution {
    graph: WeightedDigraph,
    p0: ProbVector,
    method: SolverMethod,
    generator: DenseMatrix,
    checkpoints: RwLock<Vec<Vec<f64>>>,
    clamp_count: AtomicUsize,
}

pub fn solve_advection(
    g: &WeightedDigraph,
    p0: &ProbVector,
    method: SolverMethod,
) -> Result<AdvectionSolution> {
    if p0.len() != g.num_nodes() {
        return Err(Error::shape(format!(
            "p0 has {} entries for {} nodes",
            p0.len(),
            g.num_nodes()
        )));
    }
    if let SolverMethod::FixedStepRk4 { step_size } = method {
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {step_size}")));
        }
    }
    Ok(AdvectionSolution {
        graph: g.clone(),
        p0: p0.clone(),
        method,
        generator: out_degree_laplacian(g).transpose().scaled(-1.0),
        checkpoints: RwLock::new(vec![p0.as_slice().to_vec()]),
        clamp_count: AtomicUsize::new(0),
    })
}

impl AdvectionSolution {
    pub fn graph(&self) -> &WeightedDigraph {
        &self.graph
    }

    pub fn p0(&self) -> &ProbVector {
        &self.p0
    }

    pub fn method(&self) -> SolverMethod {
        self.method
    }

    /// Number of evaluations where negative round-off was clamped.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count.load(Ordering::Relaxed)
    }

    /// Unnormalized state at `t`.
    pub fn raw_state(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("evaluation time must be >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.p0.as_slice().to_vec());
        }
        match self.method {
            SolverMethod::ClosedForm => {
                Ok(self.generator.scaled(t).expm().matvec(self.p0.as_slice()))
            }
            SolverMethod::FixedStepRk4 { step_size } => {
                let k = (t / step_size).floor() as usize;
                let base = self.checkpoint(k, step_size);
                let rest = t - k as f64 * step_size;
                if rest > 0.0 {
                    Ok(self.rk4_step(&base, rest))
                } else {
                    Ok(base)
                }
            }
        }
    }

    /// Probability vector at `t`, clamped and renormalized.
    pub fn evaluate(&self, t: f64) -> Result<ProbVector> {
        let raw = self.raw_state(t)?;
        if raw.iter().any(|&x| x < -NEGATIVE_TOLERANCE) {
            log::warn!("advection state at t={t} has a component below -1e-9");
        }
        let (p, clamped) = ProbVector::normalize(raw)?;
        if clamped {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
        }
        Ok(p)
    }

    fn checkpoint(&self, k: usize, step: f64) -> Vec<f64> {
        if let Some(state) = self.checkpoints.read().unwrap().get(k) {
            return state.clone();
        }
        let mut cache = self.checkpoints.write().unwrap();
        while cache.len() <= k {
            let next = self.rk4_step(cache.last().unwrap(), step);
            cache.push(next);
        }
        cache[k].clone()
    }

    fn rk4_step(&self, p: &[f64], h: f64) -> Vec<f64> {
        let n = p.len();
        let g = &self.graph;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        derivative_into(g, p, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        derivative_into(g, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        derivative_into(g, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + h * k3[i];
        }
        derivative_into(g, &tmp, &mut k4);
        (0..n)
            .map(|i| p[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub probs: Vec<ProbVector>,
    /// Largest `|sum p - 1|` seen before renormalization.
    pub max_drift: f64,
}

pub fn evaluate_trajectory(sol: &AdvectionSolution, grid: &[f64]) -> Result<Trajectory> {
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("evaluation grid must be nondecreasing"));
    }
    let mut max_drift = 0.0f64;
    let mut probs = Vec::with_capacity(grid.len());
    for &t in grid {
        let raw = sol.raw_state(t)?;
        max_drift = max_drift.max((raw.iter().sum::<f64>() - 1.0).abs());
        probs.push(sol.evaluate(t)?);
    }
    if max_drift >= 1e-7 {
        log::warn!("advection drift {max_drift:e} exceeds 1e-7");
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        probs,
        max_drift,
    })
}

/// Stationary distribution of a weakly connected graph: the unit-sum null
/// vector of `-L_out^T`.
pub fn stationary_distribution(g: &WeightedDigraph) -> Result<ProbVector> {
    let n = g.num_nodes();
    let mut m = out_degree_laplacian(g).transpose();
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let pi = m.solve(&rhs)?;
    Ok(ProbVector::normalize(pi)?.0)
}

/// `n` evenly spaced points covering `[start, end]` inclusive.
pub fn uniform_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn write_trajectory_csv(traj: &Trajectory, mut out: impl Write) -> Result<()> {
    let n = traj.probs.first().map_or(0, |p| p.len());
    let mut header = String::from("t");
    for v in 0..n {
        header.push_str(&format!(",p_{v}"));
    }
    writeln!(out, "{header}")?;
    for (t, p) in traj.times.iter().zip(&traj.probs) {
        let mut line = t.to_string();
        for x in p.as_slice() {
            line.push(',');
            line.push_str(&x.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_geometric_graph, ring_graph, GeometricParams};

    fn symmetric_pair() -> WeightedDigraph {
        WeightedDigraph::new(2, vec![(0, 1, 1.0).into(), (1, 0, 1.0).into()]).unwrap()
    }

    #[test]
    fn derivative_examples() {
        let g = symmetric_pair();
        assert_eq!(advection_derivative(&g, &[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(advection_derivative(&g, &[1.0, 0.0]).unwrap(), vec![-1.0, 1.0]);
        let ring = ring_graph(9, 1.7, 0.0).unwrap();
        let dp = advection_derivative(&ring, ProbVector::uniform(9).as_slice()).unwrap();
        assert!(dp.iter().all(|x| x.abs() < 1e-15));
        assert!(advection_derivative(&ring, &[1.0]).is_err());
    }

    #[test]
    fn derivative_conserves_mass() {
        let g = random_geometric_graph(GeometricParams::default(), 1).unwrap();
        let p: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let dp = advection_derivative(&g, &p).unwrap();
        assert!(dp.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn two_node_closed_form() {
        let g = symmetric_pair();
        let p0 = ProbVector::one_hot(2, 0).unwrap();
        let t = 0.5 * 2f64.ln();
        for method in [SolverMethod::default(), SolverMethod::ClosedForm] {
            let sol = solve_advection(&g, &p0, method).unwrap();
            let p = sol.evaluate(t).unwrap();
            assert!((p[0] - 0.75).abs() < 1e-6 && (p[1] - 0.25).abs() < 1e-6, "{method:?}");
            let late = sol.evaluate(20.0).unwrap();
            assert!((late[0] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_is_stationary_on_ring() {
        let g = ring_graph(12, 2.0, 0.0).unwrap();
        let sol = solve_advection(&g, &ProbVector::uniform(12), SolverMethod::default()).unwrap();
        for t in [0.3, 1.0, 4.2] {
            let p = sol.evaluate(t).unwrap();
            assert!(p.as_slice().iter().all(|x| (x - 1.0 / 12.0).abs() < 1e-14));
        }
    }

    #[test]
    fn stationary_of_symmetric_pair() {
        let pi = stationary_distribution(&symmetric_pair()).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trajectory_edge_cases() {
        let g = ring_graph(5, 1.0, 0.0).unwrap();
        let p0 = ProbVector::one_hot(5, 0).unwrap();
        let sol = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let traj = evaluate_trajectory(&sol, &[0.0]).unwrap();
        assert_eq!(traj.probs, vec![p0.clone()]);
        let traj = evaluate_trajectory(&sol, &[0.0, 0.4, 0.4]).unwrap();
        assert_eq!(traj.probs[1], traj.probs[2]);
        assert!(evaluate_trajectory(&sol, &[0.4, 0.1]).is_err());
        assert!(solve_advection(&g, &p0, SolverMethod::FixedStepRk4 { step_size: 0.0 }).is_err());
    }

    #[test]
    fn rk4_matches_closed_form_on_geometric_graph() {
        let g = random_geometric_graph(GeometricParams::default(), 0).unwrap();
        let p0 = ProbVector::one_hot(25, 0).unwrap();
        let rk4 = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let exact = solve_advection(&g, &p0, SolverMethod::ClosedForm).unwrap();
        let grid = uniform_grid(0.0, 1.0, 100);
        let a = evaluate_trajectory(&rk4, &grid).unwrap();
        let b = evaluate_trajectory(&exact, &grid).unwrap();
        let worst = a
            .probs
            .iter()
            .zip(&b.probs)
            .flat_map(|(p, q)| p.as_slice().iter().zip(q.as_slice()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "max difference {worst}");
        assert!(a.max_drift < 1e-7);
    }

    #[test]
    fn evaluation_order_does_not_matter() {
        let g = ring_graph(25, 2.0, 0.5).unwrap();
        let p0 = ProbVector::one_hot(25, 0).unwrap();
        let fresh = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        let warmed = solve_advection(&g, &p0, SolverMethod::default()).unwrap();
        warmed.evaluate(4.0).unwrap();
        assert_eq!(fresh.evaluate(1.2345).unwrap(), warmed.evaluate(1.2345).unwrap());
    }

    #[test]
    fn csv_layout() {
        let g = symmetric_pair();
        let sol = solve_advection(&g, &ProbVector::uniform(2), SolverMethod::ClosedForm).unwrap();
        let traj = evaluate_trajectory(&sol, &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,p_0,p_1\n0,0.5,0.5\n"));
    }
}
