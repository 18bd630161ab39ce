//! Exact first and second moments of the simulated systems under affine
//! strategies.
//!
//! Every state and control of the Euler scheme is an affine function of the
//! Gaussian increments, so it is stored as a mean plus a loading matrix over
//! the standardized increments. Agents that share a noise stream share
//! columns, which makes cross moments between the coupled system and the
//! limit system exact as well.

use crate::error::{dim_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::nce::NceField;
use crate::population_sim::{Coupling, CostBreakdown, CostValue};
use crate::strategies::Strategy;

/// `mean + load · ζ` with `ζ` standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub mean: Vector,
    pub load: Mat,
}

impl Affine {
    fn constant(mean: Vector, cols: usize) -> Self {
        let rows = mean.len();
        Self {
            mean,
            load: Mat::zeros(rows, cols),
        }
    }

    /// `E[vᵀ W v]`.
    pub fn expected_quad(&self, weight: &Mat) -> f64 {
        self.mean.dot(&(weight * &self.mean)) + (weight * &self.load).component_mul(&self.load).sum()
    }

    /// `E|v|²`.
    pub fn second_moment(&self) -> f64 {
        self.mean.norm_squared() + self.load.norm_squared()
    }

    pub fn sub(&self, other: &Affine) -> Affine {
        Affine {
            mean: &self.mean - &other.mean,
            load: &self.load - &other.load,
        }
    }

    fn transform(&self, m: &Mat) -> Affine {
        Affine {
            mean: m * &self.mean,
            load: m * &self.load,
        }
    }

    fn add_scaled(&mut self, m: &Mat, other: &Affine, scale: f64) {
        self.mean.gemv(scale, m, &other.mean, 1.0);
        self.load.gemm(scale, m, &other.load, 1.0);
    }
}

/// Column layout of the standardized increments: `streams` idiosyncratic
/// streams of dimension `m` per cell, then the common increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseLayout {
    pub streams: usize,
    pub m: usize,
    pub d: usize,
    pub cells: usize,
}

impl NoiseLayout {
    pub fn new(spec: &ModelSpec, streams: usize) -> Self {
        Self {
            streams,
            m: spec.dims.m,
            d: spec.dims.d,
            cells: spec.steps(),
        }
    }

    pub fn columns(&self) -> usize {
        self.cells * (self.streams * self.m + self.d)
    }

    fn idio(&self, s: usize, stream: usize) -> usize {
        (s * self.streams + stream) * self.m
    }

    fn common(&self, s: usize) -> usize {
        self.cells * self.streams * self.m + s * self.d
    }
}

/// Moments of every agent's state (nodes `0..=K`) and control (cells `0..K`).
#[derive(Clone, Debug)]
pub struct GaussianPaths {
    pub x: Vec<Vec<Affine>>,
    pub u: Vec<Vec<Affine>>,
}

fn affine_rule(strategy: &Strategy, s: usize, n: usize, k: usize) -> (Mat, Vector) {
    match strategy {
        Strategy::Feedback { gain, offset, .. } => (gain[s].clone(), offset[s].clone()),
        Strategy::OpenLoop { controls, .. } => (Mat::zeros(k, n), controls[s].clone()),
        Strategy::History { dim, .. } => (Mat::zeros(*dim, n), Vector::zeros(*dim)),
    }
}

/// Propagates the moments of a system of agents. Agent `j` plays
/// `strategies[j]` and draws from stream `streams[j]` of `layout`.
pub fn propagate(
    spec: &ModelSpec,
    strategies: &[&Strategy],
    streams: &[usize],
    layout: &NoiseLayout,
    coupling: Coupling,
) -> Result<GaussianPaths> {
    let count = strategies.len();
    let (n, kd) = (spec.dims.n, spec.dims.k);
    let k = spec.steps();
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let sqrt_h = h.sqrt();
    let cols = layout.columns();
    if streams.len() != count {
        return Err(dim_err("agent streams", count, streams.len()));
    }
    if count == 0 {
        return Err(Error::InvalidParameter("at least one agent is required".into()));
    }
    if streams.iter().any(|&s| s >= layout.streams) || layout.cells != k {
        return Err(Error::InvalidParameter("noise layout does not cover the agents".into()));
    }
    match coupling {
        Coupling::Centralized if count < 2 => {
            return Err(Error::InvalidParameter("the coupled system needs N >= 2".into()))
        }
        Coupling::Decentralized(field) if field.cells() != k => return Err(dim_err("m0 cells", k, field.cells())),
        _ => {}
    }
    for st in strategies {
        if st.cells() != k || st.history().len() != q {
            return Err(dim_err("strategy cells", k, st.cells()));
        }
    }

    let state_hist: Vec<Affine> = spec.state_history.iter().map(|v| Affine::constant(v.clone(), cols)).collect();
    let control_hist: Vec<Vec<Affine>> = strategies
        .iter()
        .map(|st| st.history().iter().map(|v| Affine::constant(v.clone(), cols)).collect())
        .collect();
    let mut x: Vec<Vec<Affine>> = (0..count).map(|_| vec![Affine::constant(spec.initial.clone(), cols)]).collect();
    let mut u: Vec<Vec<Affine>> = (0..count).map(|_| Vec::with_capacity(k)).collect();
    let scale = if count > 1 { 1.0 / (count - 1) as f64 } else { 0.0 };
    let eye = Mat::identity(n, n);

    for s in 0..k {
        for j in 0..count {
            let (g, c) = affine_rule(strategies[j], s, n, kd);
            let mut us = x[j][s].transform(&g);
            us.mean += c;
            u[j].push(us);
        }
        let lagged = |j: usize| if s < q { &control_hist[j][s] } else { &u[j][s - q] };
        let total = match coupling {
            Coupling::Centralized => {
                let mut sum = Affine::constant(Vector::zeros(kd), cols);
                for j in 0..count {
                    sum.add_scaled(&Mat::identity(kd, kd), lagged(j), 1.0);
                }
                Some(sum)
            }
            Coupling::Decentralized(_) => None,
        };
        let phi = &eye + &spec.drift[s] * h;
        for j in 0..count {
            let mut next = x[j][s].transform(&phi);
            let x_lag = if s < p { &state_hist[s] } else { &x[j][s - p] };
            next.add_scaled(&spec.drift_delayed[s], x_lag, h);
            next.add_scaled(&spec.input[s], &u[j][s], h);
            next.add_scaled(&spec.input_delayed[s], lagged(j), h);
            match (&total, coupling) {
                (Some(sum), _) => {
                    let others = sum.sub(lagged(j));
                    next.add_scaled(&spec.input_population[s], &others, h * scale);
                }
                (None, Coupling::Decentralized(field)) => next.mean += &field.m0[s] * h,
                _ => unreachable!(),
            }
            let col = layout.idio(s, streams[j]);
            let mut block = next.load.columns_mut(col, layout.m);
            block += &spec.sigma[s] * sqrt_h;
            let mut block = next.load.columns_mut(layout.common(s), layout.d);
            block += &spec.sigma0[s] * sqrt_h;
            x[j].push(next);
        }
    }
    Ok(GaussianPaths { x, u })
}

/// Expected cost of agent `j` with the same quadrature as the simulator.
pub fn expected_cost(spec: &ModelSpec, paths: &GaussianPaths, strategy: &Strategy, j: usize) -> CostValue {
    let k = spec.steps();
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let half_h = 0.5 * spec.grid.step;
    let x = &paths.x[j];
    let u = &paths.u[j];
    let quad_const = |w: &Mat, v: &Vector| v.dot(&(w * v));
    let mut b = CostBreakdown::default();
    for s in 0..k {
        b.state += half_h * x[s].expected_quad(&spec.state_weight[s]);
        b.delayed_state += half_h
            * if s < p {
                quad_const(&spec.state_weight_delayed[s], &spec.state_history[s])
            } else {
                x[s - p].expected_quad(&spec.state_weight_delayed[s])
            };
        b.control += half_h * u[s].expected_quad(&spec.control_weight[s]);
        b.delayed_control += half_h
            * if s < q {
                quad_const(&spec.control_weight_delayed[s], &strategy.history()[s])
            } else {
                u[s - q].expected_quad(&spec.control_weight_delayed[s])
            };
    }
    b.terminal = 0.5 * x[k].expected_quad(&spec.terminal_weight);
    CostValue::from_breakdown(b)
}

/// Exact statistics of one population size under a common rule, with one
/// agent optionally switching to `deviation`.
#[derive(Clone, Debug)]
pub struct ExactGaps {
    /// Per cell, `E|(1/(N-1)) Σ_{j≠i} Bhat u^j_{s-q} - m0_s|²` for agent 0.
    pub control_average: Vec<f64>,
    /// Per node, `E|x̌ - x̂|²` for agent 0.
    pub state_gap: Vec<f64>,
    /// Expected cost of agent 0 in the coupled system.
    pub coupled_cost: f64,
    /// Expected cost of agent 0 in the limit system.
    pub limit_cost: f64,
}

impl ExactGaps {
    pub fn cost_gap(&self) -> f64 {
        (self.coupled_cost - self.limit_cost).abs()
    }
}

/// Agent 0 plays `own`, agents `1..N` play `others`; agent 0's limit run
/// shares its noise stream.
pub fn exact_gaps(spec: &ModelSpec, field: &NceField, own: &Strategy, others: &Strategy, agents: usize) -> Result<ExactGaps> {
    let layout = NoiseLayout::new(spec, agents);
    let mut rules: Vec<&Strategy> = vec![others; agents];
    rules[0] = own;
    let streams: Vec<usize> = (0..agents).collect();
    let coupled = propagate(spec, &rules, &streams, &layout, Coupling::Centralized)?;
    let limit = propagate(spec, &[own], &[0], &layout, Coupling::Decentralized(field))?;

    let k = spec.steps();
    let q = spec.control_lag();
    let cols = layout.columns();
    let scale = 1.0 / (agents - 1) as f64;
    let control_average = (0..k)
        .map(|s| {
            let mut avg = Affine::constant(-field.m0[s].clone(), cols);
            for (j, rule) in rules.iter().enumerate().skip(1) {
                let lagged = if s < q {
                    Affine::constant(rule.history()[s].clone(), cols)
                } else {
                    coupled.u[j][s - q].clone()
                };
                avg.add_scaled(&spec.input_population[s], &lagged, scale);
            }
            avg.second_moment()
        })
        .collect();
    let state_gap = (0..=k).map(|s| coupled.x[0][s].sub(&limit.x[0][s]).second_moment()).collect();
    Ok(ExactGaps {
        control_average,
        state_gap,
        coupled_cost: expected_cost(spec, &coupled, own, 0).j,
        limit_cost: expected_cost(spec, &limit, own, 0).j,
    })
}

/// Expected cost of agent 0 in the coupled system when it plays `own` and
/// everybody else plays `others`.
pub fn coupled_cost(spec: &ModelSpec, own: &Strategy, others: &Strategy, agents: usize) -> Result<f64> {
    let layout = NoiseLayout::new(spec, agents);
    let mut rules: Vec<&Strategy> = vec![others; agents];
    rules[0] = own;
    let streams: Vec<usize> = (0..agents).collect();
    let paths = propagate(spec, &rules, &streams, &layout, Coupling::Centralized)?;
    Ok(expected_cost(spec, &paths, own, 0).j)
}

/// Expected cost of one agent in the limit system.
pub fn limit_cost(spec: &ModelSpec, field: &NceField, rule: &Strategy) -> Result<f64> {
    let layout = NoiseLayout::new(spec, 1);
    let paths = propagate(spec, &[rule], &[0], &layout, Coupling::Decentralized(field))?;
    Ok(expected_cost(spec, &paths, rule, 0).j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det_solvers::PicardOptions;
    use crate::model::ScalarModel;
    use crate::nce::compute_m0_case1;
    use crate::population_sim::{evaluate_cost, simulate_population, NoiseConfig};
    use crate::strategies::case1_discrete_feedback;

    fn model() -> ScalarModel {
        ScalarModel {
            drift: 0.2,
            input: 1.0,
            input_population: 0.5,
            sigma: 0.5,
            state_weight: 1.0,
            state_weight_delayed: 0.5,
            control_weight: 1.0,
            control_weight_delayed: 0.5,
            terminal_weight: 1.0,
            a: 1.0,
            xi: 1.0,
            eta: 0.2,
            delta: 0.125,
            theta: 0.125,
            ..Default::default()
        }
    }

    fn setup(spec: &ModelSpec) -> (NceField, Strategy) {
        let picard = PicardOptions::default();
        let (field, _) = compute_m0_case1(spec, &picard).unwrap();
        let mean = crate::det_solvers::solve_mean_case1(spec, &picard).unwrap().0;
        let rule = case1_discrete_feedback(spec, &mean.riccati, &mean.phi, &field.m0).unwrap();
        (field, rule)
    }

    #[test]
    fn deterministic_system_matches_simulation() {
        let spec = ScalarModel { sigma: 0.0, ..model() }.spec(0.0625).unwrap();
        let (field, rule) = setup(&spec);
        let noise = NoiseConfig {
            seed: 1,
            agents: 3,
            replications: 1,
        };
        let sim = simulate_population(&spec, std::slice::from_ref(&rule), &noise, 0, Coupling::Centralized).unwrap();
        let exact = propagate(&spec, &[&rule; 3], &[0, 1, 2], &NoiseLayout::new(&spec, 3), Coupling::Centralized).unwrap();
        for s in 0..=spec.steps() {
            assert!((&exact.x[1][s].mean - sim.states[1].at(s as isize)).amax() < 1e-13);
            assert!(exact.x[1][s].load.amax() == 0.0);
        }
        let cost = evaluate_cost(&spec, &sim.states[0], &sim.controls[0]).unwrap().j;
        assert!((expected_cost(&spec, &exact, &rule, 0).j - cost).abs() < 1e-13);
        let _ = field;
    }

    #[test]
    fn monte_carlo_agrees_with_exact_moments() {
        let spec = model().spec(0.0625).unwrap();
        let (field, rule) = setup(&spec);
        let exact = exact_gaps(&spec, &field, &rule, &rule, 4).unwrap();
        let noise = NoiseConfig {
            seed: 11,
            agents: 4,
            replications: 4000,
        };
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for r in 0..noise.replications as u32 {
            let sim = simulate_population(&spec, std::slice::from_ref(&rule), &noise, r, Coupling::Centralized).unwrap();
            let c = evaluate_cost(&spec, &sim.states[0], &sim.controls[0]).unwrap().j;
            sum += c;
            sum_sq += c * c;
        }
        let reps = noise.replications as f64;
        let mean = sum / reps;
        let se = ((sum_sq / reps - mean * mean) / reps).sqrt();
        assert!((mean - exact.coupled_cost).abs() < 4.0 * se, "{mean} vs {} (se {se})", exact.coupled_cost);
    }

    #[test]
    fn limit_mean_is_consistent_with_field() {
        // The coupled mean equals the limit mean, so the gap has no bias term.
        let spec = model().spec(0.0625).unwrap();
        let (field, rule) = setup(&spec);
        let layout = NoiseLayout::new(&spec, 8);
        let coupled = propagate(&spec, &[&rule; 8], &(0..8).collect::<Vec<_>>(), &layout, Coupling::Centralized).unwrap();
        let limit = propagate(&spec, &[&rule], &[0], &layout, Coupling::Decentralized(&field)).unwrap();
        for s in 0..=spec.steps() {
            assert!((&coupled.x[0][s].mean - &limit.x[0][s].mean).amax() < 1e-12);
        }
    }

    #[test]
    fn gaps_shrink_with_population() {
        let spec = model().spec(0.0625).unwrap();
        let (field, rule) = setup(&spec);
        let small = exact_gaps(&spec, &field, &rule, &rule, 4).unwrap();
        let large = exact_gaps(&spec, &field, &rule, &rule, 32).unwrap();
        let sup = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        assert!(sup(&large.control_average) < sup(&small.control_average) / 4.0);
        assert!(sup(&large.state_gap) < sup(&small.state_gap) / 4.0);
        assert!((limit_cost(&spec, &field, &rule).unwrap() - large.limit_cost).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = model().spec(0.0625).unwrap();
        let (_, rule) = setup(&spec);
        let layout = NoiseLayout::new(&spec, 1);
        assert!(propagate(&spec, &[&rule], &[0], &layout, Coupling::Centralized).is_err());
        assert!(propagate(&spec, &[&rule], &[1], &layout, Coupling::Centralized).is_err());
    }
}
