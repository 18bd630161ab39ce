//! Euler–Maruyama simulation of the coupled N-agent system and of the
//! decentralized limit system, cost evaluation, and the Monte Carlo
//! statistics behind the convergence-rate experiments.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Vector;
use crate::model::ModelSpec;
use crate::nce::NceField;
use crate::rng::{normal_block, COMMON_AGENT};
use crate::strategies::Strategy;
use crate::timegrid::{DelayedPath, PathRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub seed: u64,
    pub agents: usize,
    pub replications: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Coupling<'a> {
    /// Realized average `(1/(N-1)) Σ_{j≠i} Bhat u^j_{t-θ}` over the population.
    Centralized,
    /// The consistency field replaces the average; agents are independent.
    Decentralized(&'a NceField),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationPaths {
    pub states: Vec<DelayedPath>,
    pub controls: Vec<DelayedPath>,
    /// Common-noise increments per cell.
    pub common_noise: Vec<Vector>,
}

impl PopulationPaths {
    pub fn agents(&self) -> usize {
        self.states.len()
    }
}

/// An agent inside one simulated system: its rule and the id of its noise stream.
#[derive(Clone, Copy, Debug)]
pub struct AgentSpec<'a> {
    pub strategy: &'a Strategy,
    pub stream: u32,
}

pub(crate) struct RawPaths {
    pub x: Vec<Vec<Vector>>,
    pub u: Vec<Vec<Vector>>,
    pub common: Vec<Vector>,
}

impl RawPaths {
    fn into_paths(self, spec: &ModelSpec, agents: &[AgentSpec]) -> Result<PopulationPaths> {
        let grid = &spec.grid;
        let mut states = Vec::with_capacity(self.x.len());
        let mut controls = Vec::with_capacity(self.u.len());
        for ((x, u), a) in self.x.into_iter().zip(self.u).zip(agents) {
            states.push(DelayedPath::new(PathRole::State, grid, spec.state_history.clone(), x)?);
            controls.push(DelayedPath::new(PathRole::Control, grid, a.strategy.history().to_vec(), u)?);
        }
        Ok(PopulationPaths {
            states,
            controls,
            common_noise: self.common,
        })
    }
}

/// Integrates one replication of a system of agents.
pub(crate) fn integrate(
    spec: &ModelSpec,
    agents: &[AgentSpec],
    seed: u64,
    replication: u32,
    coupling: Coupling,
) -> Result<RawPaths> {
    let k = spec.steps();
    let (m, d) = (spec.dims.m, spec.dims.d);
    let p = spec.state_lag();
    let q = spec.control_lag();
    let h = spec.grid.step;
    let sqrt_h = h.sqrt();
    let count = agents.len();
    if count == 0 {
        return Err(Error::InvalidParameter("at least one agent is required".into()));
    }
    if matches!(coupling, Coupling::Centralized) && count < 2 {
        return Err(Error::InvalidParameter("the coupled system needs N >= 2".into()));
    }
    if let Coupling::Decentralized(field) = coupling {
        if field.cells() != k {
            return Err(dim_err("m0 cells", k, field.cells()));
        }
    }
    for a in agents {
        if a.strategy.cells() != k || a.strategy.history().len() != q {
            return Err(dim_err("strategy cells", k, a.strategy.cells()));
        }
    }

    let idio: Vec<Vec<f64>> = agents
        .iter()
        .map(|a| normal_block(seed, a.stream, replication, k, m))
        .collect();
    let common_draws = normal_block(seed, COMMON_AGENT, replication, k, d);
    let common: Vec<Vector> = (0..k)
        .map(|s| Vector::from_iterator(d, common_draws[s * d..(s + 1) * d].iter().map(|z| z * sqrt_h)))
        .collect();

    let mut x: Vec<Vec<Vector>> = vec![Vec::with_capacity(k + 1); count];
    let mut u: Vec<Vec<Vector>> = vec![Vec::with_capacity(k); count];
    for xs in x.iter_mut() {
        xs.push(spec.initial.clone());
    }
    let scale = if count > 1 { 1.0 / (count - 1) as f64 } else { 0.0 };

    for s in 0..k {
        for j in 0..count {
            let c = agents[j].strategy.control(s, &x[j][s]);
            u[j].push(c);
        }
        let lagged: Vec<&Vector> = (0..count)
            .map(|j| if s < q { &agents[j].strategy.history()[s] } else { &u[j][s - q] })
            .collect();
        let total: Option<Vector> = match coupling {
            Coupling::Centralized => {
                let mut sum = Vector::zeros(spec.dims.k);
                for l in &lagged {
                    sum += *l;
                }
                Some(sum)
            }
            Coupling::Decentralized(_) => None,
        };
        let dw0 = &common[s];
        for j in 0..count {
            let xs = &x[j][s];
            let x_lag = if s < p { &spec.state_history[s] } else { &x[j][s - p] };
            let population = match (&total, coupling) {
                (Some(sum), _) => &spec.input_population[s] * ((sum - lagged[j]) * scale),
                (None, Coupling::Decentralized(field)) => field.m0[s].clone(),
                _ => unreachable!(),
            };
            let drift = &spec.drift[s] * xs
                + &spec.drift_delayed[s] * x_lag
                + &spec.input[s] * &u[j][s]
                + &spec.input_delayed[s] * lagged[j]
                + population;
            let dw = Vector::from_iterator(m, idio[j][s * m..(s + 1) * m].iter().map(|z| z * sqrt_h));
            let next = xs + drift * h + &spec.sigma[s] * dw + &spec.sigma0[s] * dw0;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { node: s + 1 });
            }
            x[j].push(next);
        }
    }
    Ok(RawPaths { x, u, common })
}

/// Simulates one replication. Agent `i` uses noise stream `i`, so runs in
/// different modes with the same seed share their idiosyncratic noise.
///
/// `strategies` holds one rule per agent, or a single rule shared by all.
pub fn simulate_population(
    spec: &ModelSpec,
    strategies: &[Strategy],
    noise: &NoiseConfig,
    replication: u32,
    coupling: Coupling,
) -> Result<PopulationPaths> {
    let agents = agent_list(strategies, noise.agents)?;
    integrate(spec, &agents, noise.seed, replication, coupling)?.into_paths(spec, &agents)
}

fn agent_list(strategies: &[Strategy], count: usize) -> Result<Vec<AgentSpec<'_>>> {
    if strategies.len() != count && strategies.len() != 1 {
        return Err(dim_err("strategies", count, strategies.len()));
    }
    Ok((0..count)
        .map(|i| AgentSpec {
            strategy: &strategies[if strategies.len() == 1 { 0 } else { i }],
            stream: i as u32,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub state: f64,
    pub delayed_state: f64,
    pub control: f64,
    pub delayed_control: f64,
    pub terminal: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostValue {
    pub j: f64,
    pub breakdown: CostBreakdown,
}

impl CostValue {
    pub fn from_breakdown(breakdown: CostBreakdown) -> Self {
        let b = breakdown;
        Self {
            j: b.state + b.delayed_state + b.control + b.delayed_control + b.terminal,
            breakdown,
        }
    }
}

fn quad(m: &crate::linalg::Mat, v: &Vector) -> f64 {
    v.dot(&(m * v))
}

/// Left-endpoint quadrature of the running cost plus the terminal term.
pub fn evaluate_cost(spec: &ModelSpec, state: &DelayedPath, control: &DelayedPath) -> Result<CostValue> {
    if state.role() != PathRole::State || control.role() != PathRole::Control {
        return Err(Error::InvalidParameter("expected a state path and a control path".into()));
    }
    if state.dim() != spec.dims.n || control.dim() != spec.dims.k {
        return Err(dim_err("cost paths", spec.dims.n, state.dim()));
    }
    let k = spec.steps() as isize;
    if state.last_index() != k || control.last_index() != k - 1 {
        return Err(dim_err("cost path length", k, state.last_index()));
    }
    let (p, q) = (spec.state_lag() as isize, spec.control_lag() as isize);
    let half_h = 0.5 * spec.grid.step;
    let mut b = CostBreakdown::default();
    for s in 0..k {
        let c = s as usize;
        b.state += half_h * quad(&spec.state_weight[c], state.get(s)?);
        b.delayed_state += half_h * quad(&spec.state_weight_delayed[c], state.get(s - p)?);
        b.control += half_h * quad(&spec.control_weight[c], control.get(s)?);
        b.delayed_control += half_h * quad(&spec.control_weight_delayed[c], control.get(s - q)?);
    }
    b.terminal = 0.5 * quad(&spec.terminal_weight, state.get(k)?);
    Ok(CostValue::from_breakdown(b))
}

/// Coupled run where agent `i` deviates, and the limit run of agent `i`
/// under the same rule and noise.
#[derive(Clone, Debug)]
pub struct DeviationPaths {
    pub centralized: PopulationPaths,
    pub limit_state: DelayedPath,
    pub limit_control: DelayedPath,
}

pub fn deviation_run(
    spec: &ModelSpec,
    noise: &NoiseConfig,
    replication: u32,
    i: usize,
    u_dev: &Strategy,
    others: &Strategy,
    m0: &NceField,
) -> Result<DeviationPaths> {
    if i >= noise.agents {
        return Err(Error::InvalidParameter(format!("agent {i} outside a population of {}", noise.agents)));
    }
    let agents: Vec<AgentSpec> = (0..noise.agents)
        .map(|j| AgentSpec {
            strategy: if j == i { u_dev } else { others },
            stream: j as u32,
        })
        .collect();
    let centralized = integrate(spec, &agents, noise.seed, replication, Coupling::Centralized)?.into_paths(spec, &agents)?;
    let solo = [agents[i]];
    let mut limit = integrate(spec, &solo, noise.seed, replication, Coupling::Decentralized(m0))?.into_paths(spec, &solo)?;
    Ok(DeviationPaths {
        centralized,
        limit_state: limit.states.pop().expect("one agent"),
        limit_control: limit.controls.pop().expect("one agent"),
    })
}

/// Per node `s`, the agent average of `|(1/(N-1)) Σ_{j≠i} Bhat_s u^j_{s-q} - m0_s|²`.
pub fn control_average_sq(spec: &ModelSpec, paths: &PopulationPaths, m0: &NceField) -> Result<Vec<f64>> {
    let count = paths.agents();
    if count < 2 {
        return Err(Error::InvalidParameter("need at least two agents".into()));
    }
    let q = spec.control_lag() as isize;
    let scale = 1.0 / (count - 1) as f64;
    (0..spec.steps())
        .map(|s| {
            let lag = s as isize - q;
            let mut sum = Vector::zeros(spec.dims.k);
            for u in &paths.controls {
                sum += u.get(lag)?;
            }
            let mut acc = 0.0;
            for u in &paths.controls {
                let avg = &spec.input_population[s] * ((&sum - u.get(lag)?) * scale);
                acc += (avg - &m0.m0[s]).norm_squared();
            }
            Ok(acc / count as f64)
        })
        .collect()
}

/// Sup over nodes of the replication mean of [`control_average_sq`].
pub fn control_average_error(spec: &ModelSpec, replications: &[PopulationPaths], m0: &NceField) -> Result<f64> {
    let per: Vec<Vec<f64>> = replications
        .iter()
        .map(|p| control_average_sq(spec, p, m0))
        .collect::<Result<_>>()?;
    Ok(sup_of_means(&per))
}

/// Per node `0..=K`, the agent average of `|a - b|²` between matched states.
pub fn state_gap_sq(a: &PopulationPaths, b: &PopulationPaths) -> Vec<f64> {
    let count = a.agents();
    let nodes = a.states[0].forward_values().len();
    (0..nodes)
        .map(|s| {
            a.states
                .iter()
                .zip(&b.states)
                .map(|(x, y)| (&x.forward_values()[s] - &y.forward_values()[s]).norm_squared())
                .sum::<f64>()
                / count as f64
        })
        .collect()
}

/// Per node, the agent average of `||a|² - |b|²|`.
pub fn square_norm_gap(a: &PopulationPaths, b: &PopulationPaths) -> Vec<f64> {
    let count = a.agents();
    let nodes = a.states[0].forward_values().len();
    (0..nodes)
        .map(|s| {
            a.states
                .iter()
                .zip(&b.states)
                .map(|(x, y)| (x.forward_values()[s].norm_squared() - y.forward_values()[s].norm_squared()).abs())
                .sum::<f64>()
                / count as f64
        })
        .collect()
}

pub(crate) fn sup_of_means(per_rep: &[Vec<f64>]) -> f64 {
    if per_rep.is_empty() {
        return 0.0;
    }
    let len = per_rep[0].len();
    (0..len)
        .map(|s| per_rep.iter().map(|v| v[s]).sum::<f64>() / per_rep.len() as f64)
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log value` on `log N`.
pub fn rate_fit(ns: &[f64], values: &[f64]) -> Result<RateFit> {
    if ns.len() != values.len() {
        return Err(dim_err("rate fit", ns.len(), values.len()));
    }
    if ns.len() < 3 {
        return Err(Error::InvalidParameter("a rate fit needs at least three points".into()));
    }
    if let Some(bad) = ns.iter().chain(values).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("log of non-positive value {bad}")));
    }
    let xs: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let len = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / len;
    let my = ys.iter().sum::<f64>() / len;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, intercept, r2 })
}
