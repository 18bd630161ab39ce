//! Population-size sweeps: Monte Carlo estimates of the coupling and state
//! gaps, exact moment values of the same quantities, and the sampled
//! ε-Nash scan.

use serde::{Deserialize, Serialize};

use crate::det_solvers::{solve_mean_case1, PicardOptions, PicardReport};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::ModelSpec;
use crate::moments::{coupled_cost, exact_gaps, limit_cost};
use crate::nce::NceField;
use crate::population_sim::{
    control_average_sq, deviation_run, evaluate_cost, rate_fit, simulate_population, state_gap_sq, Coupling,
    NoiseConfig, RateFit,
};
use crate::strategies::{case1_discrete_feedback, Strategy};

/// How replications are scheduled. Results do not depend on the choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Maps `f` over `0..count` and returns the results in index order.
pub fn map_indexed<T, F>(exec: Execution, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Equilibrium data for the `Atil = Btil = 0` structure.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub spec: ModelSpec,
    pub field: NceField,
    /// Decentralized rule played by every agent.
    pub rule: Strategy,
    pub report: PicardReport,
}

impl Equilibrium {
    pub fn case1(spec: &ModelSpec, picard: &PicardOptions) -> Result<Self> {
        let (mean, report) = solve_mean_case1(spec, picard)?;
        let field = NceField::from_parts(mean.m0.clone(), vec![Vector::zeros(spec.dims.n); spec.steps()])?;
        let rule = case1_discrete_feedback(spec, &mean.riccati, &mean.phi, &field.m0)?;
        Ok(Self {
            spec: spec.clone(),
            field,
            rule,
            report,
        })
    }

    /// Unilateral deviation used for the deviation-gap statistic.
    pub fn default_deviation(&self) -> Result<Strategy> {
        let bump = vec![Vector::from_element(self.spec.dims.k, 0.2); self.spec.steps()];
        self.rule.with_gain_scale(0.5).with_offset(&bump)
    }
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn estimate(samples: impl Iterator<Item = f64>) -> Estimate {
    let v: Vec<f64> = samples.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        value: mean,
        se: (var / n).sqrt(),
    }
}

/// Node-wise replication means; returns the estimate at the largest node.
fn sup_estimate(per_rep: &[Vec<f64>]) -> Estimate {
    let nodes = per_rep[0].len();
    (0..nodes)
        .map(|s| estimate(per_rep.iter().map(|v| v[s])))
        .fold(Estimate::default(), |best, e| if e.value > best.value { e } else { best })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// One population size of a rate scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub agents: usize,
    /// Sup over cells of `E|(1/(N-1)) Σ_{j≠i} Bhat u^j_{t-θ} - m0|²`.
    pub control_average: Estimate,
    /// Sup over nodes of `E|x̌ - x̂|²`.
    pub state_gap: Estimate,
    /// Sup over nodes of `E|l - p|²` for agent 0 under the deviation.
    pub deviation_gap: Estimate,
    /// `|E 𝒥 - E J|` of an agent playing the equilibrium rule.
    pub cost_gap: Estimate,
    /// `E|𝒥 - J|`, the gap of the realized costs.
    pub pathwise_cost_gap: Estimate,
    pub exact_control_average: f64,
    pub exact_state_gap: f64,
    pub exact_deviation_gap: f64,
    pub exact_cost_gap: f64,
    pub exact_deviation_cost_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateScan {
    pub rows: Vec<RateRow>,
    pub control_average_fit: RateFit,
    pub state_gap_fit: RateFit,
    pub deviation_gap_fit: RateFit,
    pub cost_gap_fit: RateFit,
    pub pathwise_cost_gap_fit: RateFit,
    pub exact_cost_gap_fit: RateFit,
}

impl RateScan {
    /// Columns `N, statistic, value, se`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "statistic", "value", "se"])?;
        for r in &self.rows {
            let n = r.agents.to_string();
            let mc = [
                ("control_average", r.control_average),
                ("state_gap", r.state_gap),
                ("deviation_gap", r.deviation_gap),
                ("cost_gap", r.cost_gap),
                ("pathwise_cost_gap", r.pathwise_cost_gap),
            ];
            for (name, e) in mc {
                w.write_record([n.clone(), name.into(), e.value.to_string(), e.se.to_string()])?;
            }
            let exact = [
                ("exact_control_average", r.exact_control_average),
                ("exact_state_gap", r.exact_state_gap),
                ("exact_deviation_gap", r.exact_deviation_gap),
                ("exact_cost_gap", r.exact_cost_gap),
                ("exact_deviation_cost_gap", r.exact_deviation_cost_gap),
            ];
            for (name, v) in exact {
                w.write_record([n.clone(), name.into(), v.to_string(), "0".into()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `statistic, slope, intercept, r2`.
    pub fn write_fits_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "slope", "intercept", "r2"])?;
        for (name, f) in self.fits() {
            w.write_record([name.to_string(), f.slope.to_string(), f.intercept.to_string(), f.r2.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn fits(&self) -> [(&'static str, RateFit); 6] {
        [
            ("control_average", self.control_average_fit),
            ("state_gap", self.state_gap_fit),
            ("deviation_gap", self.deviation_gap_fit),
            ("cost_gap", self.cost_gap_fit),
            ("pathwise_cost_gap", self.pathwise_cost_gap_fit),
            ("exact_cost_gap", self.exact_cost_gap_fit),
        ]
    }
}

struct RepStats {
    control_average: Vec<f64>,
    state_gap: Vec<f64>,
    deviation_gap: Vec<f64>,
    cost_diff: f64,
    cost_abs: f64,
}

fn replication(eq: &Equilibrium, deviation: &Strategy, noise: &NoiseConfig, rep: u32) -> Result<RepStats> {
    let spec = &eq.spec;
    let rules = std::slice::from_ref(&eq.rule);
    let coupled = simulate_population(spec, rules, noise, rep, Coupling::Centralized)?;
    let limit = simulate_population(spec, rules, noise, rep, Coupling::Decentralized(&eq.field))?;
    let control_average = control_average_sq(spec, &coupled, &eq.field)?;
    let state_gap = state_gap_sq(&coupled, &limit);

    let mut cost_diff = 0.0;
    let mut cost_abs = 0.0;
    for j in 0..noise.agents {
        let a = evaluate_cost(spec, &coupled.states[j], &coupled.controls[j])?.j;
        let b = evaluate_cost(spec, &limit.states[j], &limit.controls[j])?.j;
        cost_diff += a - b;
        cost_abs += (a - b).abs();
    }
    cost_diff /= noise.agents as f64;
    cost_abs /= noise.agents as f64;

    let dev = deviation_run(spec, noise, rep, 0, deviation, &eq.rule, &eq.field)?;
    let l = dev.centralized.states[0].forward_values();
    let p = dev.limit_state.forward_values();
    let deviation_gap = l.iter().zip(p).map(|(a, b)| (a - b).norm_squared()).collect();
    Ok(RepStats {
        control_average,
        state_gap,
        deviation_gap,
        cost_diff,
        cost_abs,
    })
}

/// Runs every population size in `ns` with `replications` independent
/// replications each. Replication `r` of size `N` uses stream ids
/// `(agent, r)` under `seed`, so the output is independent of scheduling.
pub fn rate_scan(eq: &Equilibrium, ns: &[usize], replications: usize, seed: u64, exec: Execution) -> Result<RateScan> {
    if ns.len() < 3 || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] < 2 {
        return Err(Error::InvalidParameter(
            "population sizes must be strictly increasing, at least 2, with three or more entries".into(),
        ));
    }
    if replications < 2 {
        return Err(Error::InvalidParameter("at least two replications are required".into()));
    }
    let deviation = eq.default_deviation()?;
    let mut rows = Vec::with_capacity(ns.len());
    for &agents in ns {
        let noise = NoiseConfig {
            seed,
            agents,
            replications,
        };
        let reps = map_indexed(exec, replications, |r| replication(eq, &deviation, &noise, r as u32))?;
        let collect = |f: fn(&RepStats) -> &Vec<f64>| reps.iter().map(|r| f(r).clone()).collect::<Vec<_>>();
        let cost_gap = estimate(reps.iter().map(|r| r.cost_diff));
        let exact = exact_gaps(&eq.spec, &eq.field, &eq.rule, &eq.rule, agents)?;
        let exact_dev = exact_gaps(&eq.spec, &eq.field, &deviation, &eq.rule, agents)?;
        rows.push(RateRow {
            agents,
            control_average: sup_estimate(&collect(|r| &r.control_average)),
            state_gap: sup_estimate(&collect(|r| &r.state_gap)),
            deviation_gap: sup_estimate(&collect(|r| &r.deviation_gap)),
            cost_gap: Estimate {
                value: cost_gap.value.abs(),
                se: cost_gap.se,
            },
            pathwise_cost_gap: estimate(reps.iter().map(|r| r.cost_abs)),
            exact_control_average: sup(&exact.control_average),
            exact_state_gap: sup(&exact.state_gap),
            exact_deviation_gap: sup(&exact_dev.state_gap),
            exact_cost_gap: exact.cost_gap(),
            exact_deviation_cost_gap: exact_dev.cost_gap(),
        });
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let fit = |f: &dyn Fn(&RateRow) -> f64| rate_fit(&xs, &rows.iter().map(f).collect::<Vec<_>>());
    Ok(RateScan {
        control_average_fit: fit(&|r| r.control_average.value)?,
        state_gap_fit: fit(&|r| r.state_gap.value)?,
        deviation_gap_fit: fit(&|r| r.deviation_gap.value)?,
        cost_gap_fit: fit(&|r| r.cost_gap.value)?,
        pathwise_cost_gap_fit: fit(&|r| r.pathwise_cost_gap.value)?,
        exact_cost_gap_fit: fit(&|r| r.exact_cost_gap)?,
        rows,
    })
}

/// A member of the sampled deviation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Deviation {
    /// Equilibrium rule plus `amplitude · bump`, with `bump` from [`bump_shapes`].
    Offset { shape: usize, amplitude: f64 },
    /// Offset along a shape with the amplitude that minimizes the coupled cost.
    LineOptimal { shape: usize },
    /// Equilibrium gain multiplied by `factor`.
    GainScale { factor: f64 },
}

/// Deterministic bump directions per cell: constant, linear ramp, one sine period.
pub fn bump_shapes(spec: &ModelSpec) -> Vec<Vec<Vector>> {
    let k = spec.steps();
    let dim = spec.dims.k;
    let shape = |f: &dyn Fn(f64) -> f64| -> Vec<Vector> {
        (0..k)
            .map(|s| Vector::from_element(dim, f(spec.grid.time(s as isize) / spec.grid.horizon)))
            .collect()
    };
    vec![
        shape(&|_| 1.0),
        shape(&|t| 1.0 - 2.0 * t),
        shape(&|t| (2.0 * std::f64::consts::PI * t).sin()),
    ]
}

fn scaled(bump: &[Vector], a: f64) -> Vec<Vector> {
    bump.iter().map(|v| v * a).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashRow {
    pub agents: usize,
    /// Expected coupled cost of agent 0 when everybody plays the rule.
    pub equilibrium_cost: f64,
    /// `max(0, max over the family of 𝒥(ū) - 𝒥(u_dev, ū⁻ⁱ))`.
    pub epsilon: f64,
    pub best: Deviation,
    /// Envelope `Ĉ/√N`.
    pub envelope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashScan {
    pub rows: Vec<NashRow>,
    /// `Ĉ = ε(N₀)·√N₀` at the smallest size.
    pub constant: f64,
    pub limit_cost: f64,
}

impl NashScan {
    pub fn non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].epsilon <= w[0].epsilon * (1.0 + 1e-9) + 1e-15)
    }

    pub fn within_envelope(&self) -> bool {
        self.rows.iter().all(|r| r.epsilon <= r.envelope * (1.0 + 1e-9) + 1e-15)
    }

    /// Columns `N, equilibrium_cost, epsilon, envelope, best_deviation`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "equilibrium_cost", "epsilon", "envelope", "best_deviation"])?;
        for r in &self.rows {
            w.write_record([
                r.agents.to_string(),
                r.equilibrium_cost.to_string(),
                r.epsilon.to_string(),
                r.envelope.to_string(),
                serde_json::to_string(&r.best)?,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact expected costs over the deviation family for every `N`.
pub fn nash_scan(eq: &Equilibrium, ns: &[usize], exec: Execution) -> Result<NashScan> {
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] < 2 {
        return Err(Error::InvalidParameter("population sizes must be strictly increasing and at least 2".into()));
    }
    let shapes = bump_shapes(&eq.spec);
    let amplitudes = [-0.1, -0.01, 0.01, 0.1];
    let factors = [0.8, 0.95, 1.05, 1.2];
    let probe = 0.05;

    let rows = map_indexed(exec, ns.len(), |idx| {
        let agents = ns[idx];
        let cost = |rule: &Strategy| coupled_cost(&eq.spec, rule, &eq.rule, agents);
        let base = cost(&eq.rule)?;
        let mut best = (0.0, Deviation::GainScale { factor: 1.0 });
        let mut consider = |value: f64, dev: Deviation| {
            if base - value > best.0 {
                best = (base - value, dev);
            }
        };
        for (shape, bump) in shapes.iter().enumerate() {
            for &a in &amplitudes {
                consider(cost(&eq.rule.with_offset(&scaled(bump, a))?)?, Deviation::Offset { shape, amplitude: a });
            }
            // The coupled cost is quadratic along an offset direction.
            let plus = cost(&eq.rule.with_offset(&scaled(bump, probe))?)?;
            let minus = cost(&eq.rule.with_offset(&scaled(bump, -probe))?)?;
            let c1 = (plus - minus) / (2.0 * probe);
            let c2 = (plus + minus - 2.0 * base) / (2.0 * probe * probe);
            if c2 > 0.0 {
                let a = -c1 / (2.0 * c2);
                consider(cost(&eq.rule.with_offset(&scaled(bump, a))?)?, Deviation::LineOptimal { shape });
            }
        }
        for &factor in &factors {
            consider(cost(&eq.rule.with_gain_scale(factor))?, Deviation::GainScale { factor });
        }
        Ok((agents, base, best))
    })?;

    let (n0, _, (eps0, _)) = &rows[0];
    let constant = eps0 * (*n0 as f64).sqrt();
    Ok(NashScan {
        rows: rows
            .into_iter()
            .map(|(agents, base, (epsilon, best))| NashRow {
                agents,
                equilibrium_cost: base,
                epsilon,
                best,
                envelope: constant / (agents as f64).sqrt(),
            })
            .collect(),
        constant,
        limit_cost: limit_cost(&eq.spec, &eq.field, &eq.rule)?,
    })
}
