//! Decentralized strategies: open-loop controls from a deterministic
//! costate, affine state feedback for the `Atil = Btil = 0` structure, and
//! the explicit piecewise-polynomial costate of the pure-delay structure.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::det_solvers::{PhiPath, RiccatiSolution};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::timegrid::{DelayedPath, PathRole, TimeGrid};

/// A control rule per cell `0..K`, with the control history `η` attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// `u_s = gain_s x_s + offset_s`.
    Feedback {
        gain: Vec<Mat>,
        offset: Vec<Vector>,
        history: Vec<Vector>,
    },
    OpenLoop {
        controls: Vec<Vector>,
        history: Vec<Vector>,
    },
    /// Plays the history before time zero and nothing afterwards.
    History { history: Vec<Vector>, dim: usize, cells: usize },
}

impl Strategy {
    pub fn history_only(spec: &ModelSpec) -> Self {
        Strategy::History {
            history: spec.control_history.clone(),
            dim: spec.dims.k,
            cells: spec.steps(),
        }
    }

    pub fn open_loop(path: &DelayedPath) -> Result<Self> {
        if path.role() != PathRole::Control {
            return Err(Error::InvalidParameter("open-loop strategies need a control path".into()));
        }
        Ok(Strategy::OpenLoop {
            controls: path.forward_values().to_vec(),
            history: path.history().to_vec(),
        })
    }

    pub fn history(&self) -> &[Vector] {
        match self {
            Strategy::Feedback { history, .. }
            | Strategy::OpenLoop { history, .. }
            | Strategy::History { history, .. } => history,
        }
    }

    pub fn cells(&self) -> usize {
        match self {
            Strategy::Feedback { offset, .. } => offset.len(),
            Strategy::OpenLoop { controls, .. } => controls.len(),
            Strategy::History { cells, .. } => *cells,
        }
    }

    pub fn is_feedback(&self) -> bool {
        matches!(self, Strategy::Feedback { .. })
    }

    /// Control at cell `s` for current state `x`.
    pub fn control(&self, s: usize, x: &Vector) -> Vector {
        match self {
            Strategy::Feedback { gain, offset, .. } => &gain[s] * x + &offset[s],
            Strategy::OpenLoop { controls, .. } => controls[s].clone(),
            Strategy::History { dim, .. } => Vector::zeros(*dim),
        }
    }

    /// Control path along a state trajectory (values `0..=K`, history ignored).
    pub fn control_path(&self, grid: &TimeGrid, states: &[Vector]) -> Result<DelayedPath> {
        let u = (0..self.cells()).map(|s| self.control(s, &states[s])).collect();
        DelayedPath::new(PathRole::Control, grid, self.history().to_vec(), u)
    }

    /// Adds a deterministic offset per cell.
    pub fn with_offset(&self, bump: &[Vector]) -> Result<Self> {
        if bump.len() != self.cells() {
            return Err(dim_err("offset bump", self.cells(), bump.len()));
        }
        Ok(match self {
            Strategy::Feedback { gain, offset, history } => Strategy::Feedback {
                gain: gain.clone(),
                offset: offset.iter().zip(bump).map(|(a, b)| a + b).collect(),
                history: history.clone(),
            },
            Strategy::OpenLoop { controls, history } => Strategy::OpenLoop {
                controls: controls.iter().zip(bump).map(|(a, b)| a + b).collect(),
                history: history.clone(),
            },
            Strategy::History { history, .. } => Strategy::OpenLoop {
                controls: bump.to_vec(),
                history: history.clone(),
            },
        })
    }

    /// Multiplies the feedback gain by `factor`; open-loop rules are unchanged.
    pub fn with_gain_scale(&self, factor: f64) -> Self {
        match self {
            Strategy::Feedback { gain, offset, history } => Strategy::Feedback {
                gain: gain.iter().map(|g| g * factor).collect(),
                offset: offset.clone(),
                history: history.clone(),
            },
            other => other.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// CSV of the control path for open-loop and history rules.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let controls = match self {
            Strategy::OpenLoop { controls, .. } => controls.clone(),
            Strategy::History { dim, cells, .. } => vec![Vector::zeros(*dim); *cells],
            Strategy::Feedback { .. } => {
                return Err(Error::InvalidParameter(
                    "feedback rules export to JSON, not to a control path".into(),
                ))
            }
        };
        DelayedPath::new(PathRole::Control, grid, self.history().to_vec(), controls)?.write_csv(grid, out)
    }
}

/// Which costate sample the control at cell `s` reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostateTiming {
    /// `y_{s+1}` and `y_{s+q+1}`: costates produced by the discrete solvers.
    StepAhead,
    /// `y_s` and `y_{s+q}`: pointwise samples of a continuous-time costate.
    Node,
}

/// Open-loop control from a deterministic costate:
/// `u_s = -(Nc_s + Nctil_{s+q})^{-1} [B_sᵀ y + Btil_{s+q}ᵀ y(· + θ)]`.
/// The anticipated term is absent when `s + q` reaches the horizon.
pub fn strategy_from_ypath(spec: &ModelSpec, ypath: &DelayedPath, timing: CostateTiming) -> Result<Strategy> {
    if ypath.role() != PathRole::Costate {
        return Err(Error::InvalidParameter("expected a costate path".into()));
    }
    if ypath.dim() != spec.dims.n {
        return Err(dim_err("costate", spec.dims.n, ypath.dim()));
    }
    let k = spec.steps();
    let q = spec.control_lag();
    let shift = match timing {
        CostateTiming::StepAhead => 1,
        CostateTiming::Node => 0,
    };
    let weight_inv = spec.control_weight_inverses()?;
    let controls = (0..k)
        .map(|s| {
            let now = (s + shift) as isize;
            let ahead = ypath.get(now + q as isize)?;
            let mut g = spec.input[s].transpose() * ypath.get(now)?;
            if s + q < k {
                g += spec.input_delayed[s + q].transpose() * ahead;
            }
            Ok(-(&weight_inv[s] * g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Strategy::OpenLoop {
        controls,
        history: spec.control_history.clone(),
    })
}

/// Feedback `u_s = -W_s B_sᵀ (P_s x_s + φ_s)`.
pub fn case1_feedback(spec: &ModelSpec, riccati: &RiccatiSolution, phi: &PhiPath) -> Result<Strategy> {
    let k = spec.steps();
    if riccati.p.len() != k + 1 || phi.phi.len() != k + 1 {
        return Err(dim_err("decoupling arrays", k + 1, riccati.p.len().min(phi.phi.len())));
    }
    let mut gain = Vec::with_capacity(k);
    let mut offset = Vec::with_capacity(k);
    for s in 0..k {
        let wb = -(riccati.weight_inverse(s) * spec.input[s].transpose());
        gain.push(&wb * &riccati.p[s]);
        offset.push(&wb * &phi.phi[s]);
    }
    Ok(Strategy::Feedback {
        gain,
        offset,
        history: spec.control_history.clone(),
    })
}

/// Feedback that is optimal for the discrete system:
/// `u_s = -W_s B_sᵀ E_s[y_{s+1}]` with `E_s[y_{s+1}]` expressed through
/// `P_{s+1}`, `φ_{s+1}` and the forcing `m0_s`.
pub fn case1_discrete_feedback(
    spec: &ModelSpec,
    riccati: &RiccatiSolution,
    phi: &PhiPath,
    m0: &[Vector],
) -> Result<Strategy> {
    let k = spec.steps();
    if m0.len() != k {
        return Err(dim_err("m0", k, m0.len()));
    }
    let h = spec.grid.step;
    let mut gain = Vec::with_capacity(k);
    let mut offset = Vec::with_capacity(k);
    for s in 0..k {
        let wb = -(riccati.weight_inverse(s) * spec.input[s].transpose());
        let (lin, off) = riccati.step_ahead(s, &m0[s], phi, h);
        gain.push(&wb * lin);
        offset.push(&wb * off);
    }
    Ok(Strategy::Feedback {
        gain,
        offset,
        history: spec.control_history.clone(),
    })
}

/// Costate of the pure-delay structure, piecewise polynomial in the local
/// variable `τ = t_{s+1} - t` on each cell `[t_s, t_{s+1}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case2Costate {
    pub horizon: f64,
    pub step: f64,
    /// Coefficients in `τ` for each cell `0..K`; zero beyond the horizon.
    pub pieces: Vec<Vec<f64>>,
    /// The martingale integrands vanish identically.
    pub zbar_zero: bool,
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

impl Case2Costate {
    /// `ȳ(t)` for `t ∈ [0, T + δ]`, zero on `(T, T+δ]`.
    pub fn value(&self, t: f64) -> f64 {
        let k = self.pieces.len();
        let tol = 1e-12 * self.horizon.max(1.0);
        if t > self.horizon + tol {
            return 0.0;
        }
        let raw = (t / self.step).floor();
        let s = (raw.max(0.0) as usize).min(k - 1);
        let tau = (s + 1) as f64 * self.step - t;
        poly_eval(&self.pieces[s], tau)
    }

    /// Node samples as a costate path.
    pub fn to_path(&self, grid: &TimeGrid) -> Result<DelayedPath> {
        let k = grid.steps;
        let mut values: Vec<Vector> = (0..k).map(|s| Vector::from_element(1, poly_eval(&self.pieces[s], self.step))).collect();
        values.push(Vector::from_element(1, poly_eval(&self.pieces[k - 1], 0.0)));
        DelayedPath::new(PathRole::Costate, grid, vec![], values)
    }

    pub fn degree(&self, s: usize) -> usize {
        self.pieces[s].iter().rposition(|c| *c != 0.0).unwrap_or(0)
    }
}

/// Solves the anticipated adjoint of the pure-delay structure,
/// `ȳ_t = ȳ(T - kδ) + ∫_t^{T-kδ} Atil_s ȳ(s + δ) ds`, `ȳ_T = -M`, exactly and
/// interval by interval.
///
/// Requires scalar state and control, `A = B = 0`, `δ = θ`, no running
/// state cost; `M` is read as the linear terminal coefficient.
pub fn case2_solve(spec: &ModelSpec) -> Result<Case2Costate> {
    let d = spec.dims;
    if d.n != 1 || d.k != 1 {
        return Err(Error::Structure("scalar state and control required".into()));
    }
    let zero = |arr: &[Mat]| arr.iter().all(|m| m.amax() == 0.0);
    if !zero(&spec.drift) || !zero(&spec.input) {
        return Err(Error::Structure("A and B must vanish".into()));
    }
    if !zero(&spec.state_weight) || !zero(&spec.state_weight_delayed) {
        return Err(Error::Structure("no running state cost is allowed".into()));
    }
    if spec.state_lag() != spec.control_lag() {
        return Err(Error::Structure("state and control delays must coincide".into()));
    }
    let k = spec.steps();
    let p = spec.state_lag();
    let h = spec.grid.step;
    let m = spec.terminal_weight[(0, 0)];

    let mut pieces: Vec<Vec<f64>> = vec![Vec::new(); k];
    for s in (0..k).rev() {
        let right = if s + 1 == k { -m } else { poly_eval(&pieces[s + 1], h) };
        let mut poly = vec![right];
        if s + p < k {
            let a = spec.drift_delayed[s][(0, 0)];
            let src = &pieces[s + p];
            poly.resize(src.len() + 1, 0.0);
            for (j, c) in src.iter().enumerate() {
                poly[j + 1] += a * c / (j + 1) as f64;
            }
        }
        pieces[s] = poly;
    }
    Ok(Case2Costate {
        horizon: spec.grid.horizon,
        step: h,
        pieces,
        zbar_zero: true,
    })
}

/// Open-loop equilibrium control `ū_t = -(Nc_t + Nctil_{t+δ})^{-1} Btil_{t+δ} ȳ(t+δ)`.
pub fn case2_strategy(spec: &ModelSpec, costate: &Case2Costate) -> Result<Strategy> {
    strategy_from_ypath(spec, &costate.to_path(&spec.grid)?, CostateTiming::Node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det_solvers::{solve_phi, solve_riccati};
    use crate::model::ScalarModel;
    use proptest::prelude::*;

    fn ypath(spec: &ModelSpec, f: impl Fn(usize) -> f64) -> DelayedPath {
        let values = (0..=spec.steps()).map(|s| Vector::from_element(1, f(s))).collect();
        DelayedPath::new(PathRole::Costate, &spec.grid, vec![], values).unwrap()
    }

    #[test]
    fn zero_costate_gives_zero_control() {
        let spec = ScalarModel {
            input: 1.0,
            input_delayed: 0.5,
            ..Default::default()
        }
        .spec(0.125)
        .unwrap();
        let strat = strategy_from_ypath(&spec, &ypath(&spec, |_| 0.0), CostateTiming::Node).unwrap();
        assert!((0..spec.steps()).all(|s| strat.control(s, &Vector::zeros(1))[0] == 0.0));
    }

    #[test]
    fn zero_tail_switches_off_anticipation() {
        let (btil, c) = (0.7, 2.0);
        let spec = ScalarModel {
            input_delayed: btil,
            control_weight: 1.0,
            control_weight_delayed: 0.5,
            ..Default::default()
        }
        .spec(0.125)
        .unwrap();
        let strat = strategy_from_ypath(&spec, &ypath(&spec, |_| c), CostateTiming::Node).unwrap();
        let k = spec.steps();
        let q = spec.control_lag();
        for s in 0..k {
            let u = strat.control(s, &Vector::zeros(1))[0];
            if s + q < k {
                assert!((u + btil * c / 1.5).abs() < 1e-15, "cell {s}");
            } else {
                assert_eq!(u, 0.0, "cell {s}");
            }
        }
    }

    #[test]
    fn missing_pad_is_a_range_error() {
        let spec = ScalarModel {
            input: 1.0,
            ..Default::default()
        }
        .spec(0.125)
        .unwrap();
        let values = (0..=spec.steps()).map(|_| Vector::from_element(1, 1.0)).collect();
        let state = DelayedPath::new(PathRole::State, &spec.grid, spec.state_history.clone(), values).unwrap();
        assert!(strategy_from_ypath(&spec, &state, CostateTiming::Node).is_err());
    }

    #[test]
    fn unit_feedback() {
        let spec = ScalarModel {
            input: 1.0,
            terminal_weight: 1.0,
            ..Default::default()
        }
        .spec(0.25)
        .unwrap();
        let mut riccati = solve_riccati(&spec).unwrap();
        for p in riccati.p.iter_mut() {
            p[(0, 0)] = 1.0;
        }
        let phi = PhiPath {
            phi: vec![Vector::zeros(1); spec.steps() + 1],
        };
        let strat = case1_feedback(&spec, &riccati, &phi).unwrap();
        for s in 0..spec.steps() {
            let x = Vector::from_element(1, 0.3 + s as f64);
            assert_eq!(strat.control(s, &x)[0], -x[0]);
        }
        // Zero decoupling gives zero control.
        for p in riccati.p.iter_mut() {
            p[(0, 0)] = 0.0;
        }
        let strat = case1_feedback(&spec, &riccati, &phi).unwrap();
        assert_eq!(strat.control(1, &Vector::from_element(1, 5.0))[0], 0.0);
    }

    #[test]
    fn discrete_feedback_reproduces_decoupled_mean() {
        let spec = ScalarModel {
            drift: 0.2,
            input: 1.0,
            input_population: 0.5,
            state_weight: 1.0,
            control_weight: 1.0,
            terminal_weight: 1.0,
            a: 1.0,
            eta: 0.3,
            ..Default::default()
        }
        .spec(0.0625)
        .unwrap();
        let (mean, _) = crate::det_solvers::solve_mean_case1(&spec, &Default::default()).unwrap();
        let strat = case1_discrete_feedback(&spec, &mean.riccati, &mean.phi, &mean.m0).unwrap();
        for s in 0..spec.steps() {
            let u = strat.control(s, mean.pair.x.at(s as isize));
            assert!((u[0] - mean.pair.u.at(s as isize)[0]).abs() < 1e-14);
        }
        let phi = solve_phi(&spec, &mean.riccati, &mean.m0).unwrap();
        assert_eq!(phi, mean.phi);
    }

    fn case2_spec(atil: f64) -> ModelSpec {
        ScalarModel {
            drift_delayed: atil,
            input_delayed: 1.0,
            input_population: 0.3,
            control_weight: 1.0,
            control_weight_delayed: 0.5,
            terminal_weight: 1.0,
            horizon: 1.0,
            delta: 0.25,
            theta: 0.25,
            ..Default::default()
        }
        .spec(1.0 / 32.0)
        .unwrap()
    }

    #[test]
    fn case2_matches_constant_coefficient_forms() {
        let atil = 0.6;
        let spec = case2_spec(atil);
        let sol = case2_solve(&spec).unwrap();
        let (t_end, d) = (1.0, 0.25);
        for s in 0..=spec.steps() {
            let t = spec.grid.time(s as isize);
            let y = sol.value(t);
            let expect = if t >= t_end - d {
                -1.0
            } else if t >= t_end - 2.0 * d {
                -1.0 - atil * (t_end - d - t)
            } else if t >= t_end - 3.0 * d {
                let r = t_end - 2.0 * d - t;
                -1.0 - atil * d - atil * r * (1.0 + 0.5 * atil * r)
            } else {
                continue;
            };
            assert!((y - expect).abs() < 1e-12, "t = {t}: {y} vs {expect}");
        }
        assert_eq!(sol.value(1.1), 0.0);
        assert!(sol.zbar_zero);
    }

    #[test]
    fn case2_degree_grows_per_interval() {
        let spec = case2_spec(0.4);
        let sol = case2_solve(&spec).unwrap();
        let per = spec.state_lag();
        for s in 0..spec.steps() {
            let interval = (spec.steps() - 1 - s) / per;
            assert_eq!(sol.degree(s), interval, "cell {s}");
        }
    }

    #[test]
    fn case2_control_uses_shifted_costate() {
        let spec = case2_spec(0.6);
        let sol = case2_solve(&spec).unwrap();
        let strat = case2_strategy(&spec, &sol).unwrap();
        let q = spec.control_lag();
        for s in 0..spec.steps() - q {
            let t = spec.grid.time(s as isize);
            let expect = -1.0 / 1.5 * sol.value(t + 0.25);
            assert!((strat.control(s, &Vector::zeros(1))[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn case2_rejects_other_structures() {
        let spec = ScalarModel {
            input: 1.0,
            ..Default::default()
        }
        .spec(0.125)
        .unwrap();
        assert!(matches!(case2_solve(&spec), Err(Error::Structure(_))));
    }

    #[test]
    fn json_round_trip() {
        let spec = case2_spec(0.6);
        let strat = case2_strategy(&spec, &case2_solve(&spec).unwrap()).unwrap();
        let back: super::Strategy = serde_json::from_str(&strat.to_json().unwrap()).unwrap();
        assert_eq!(back, strat);
        let mut buf = Vec::new();
        strat.write_csv(&spec.grid, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + spec.control_lag() + spec.steps());
    }

    proptest! {
        #[test]
        fn costate_map_is_linear(
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            c1 in proptest::collection::vec(-2.0f64..2.0, 9),
            c2 in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            let spec = ScalarModel {
                input: 0.8,
                input_delayed: 0.5,
                control_weight: 1.0,
                control_weight_delayed: 0.3,
                ..Default::default()
            }
            .spec(0.125)
            .unwrap();
            let y1 = ypath(&spec, |s| c1[s]);
            let y2 = ypath(&spec, |s| c2[s]);
            let y12 = ypath(&spec, |s| alpha * c1[s] + beta * c2[s]);
            for timing in [CostateTiming::Node, CostateTiming::StepAhead] {
                let u1 = strategy_from_ypath(&spec, &y1, timing).unwrap();
                let u2 = strategy_from_ypath(&spec, &y2, timing).unwrap();
                let u12 = strategy_from_ypath(&spec, &y12, timing).unwrap();
                let z = Vector::zeros(1);
                for s in 0..spec.steps() {
                    let lhs = u12.control(s, &z)[0];
                    let rhs = alpha * u1.control(s, &z)[0] + beta * u2.control(s, &z)[0];
                    prop_assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }
}
