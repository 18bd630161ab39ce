//! Deterministic solvers: the decoupling Riccati recursion and its affine
//! companion, and damped Picard iteration for the expectation-level
//! forward-backward systems with delayed and anticipated terms.
//!
//! All solvers use the same explicit discretization as the stochastic
//! simulator. With `y` the costate, `W_s = (Nc_s + Nctil_{s+q})^{-1}` and
//! `Q_s = R_s + Rtil_{s+p}`:
//!
//! ```text
//! x_{s+1} = x_s + h [A x_s + Atil x_{s-p} + B u_s + Btil u_{s-q} + f_s]
//! y_s     = y_{s+1} + h [Aᵀ y_{s+1} + Atil_{s+p}ᵀ y_{s+p+1} + Q_s x_s],  y_K = M x_K
//! u_s     = -W_s [B_sᵀ y_{s+1} + Btil_{s+q}ᵀ y_{s+q+1}]
//! ```
//!
//! which is exactly the first-order condition of the Euler dynamics with
//! left-endpoint cost quadrature. Terms whose shifted index reaches the
//! horizon drop out, and `y` reads zero past `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sup_distance, symmetrize, Mat, Vector};
use crate::model::ModelSpec;
use crate::timegrid::{DelayedPath, PathRole};

const RICCATI_BLOWUP: f64 = 1e12;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Halve the damping and step back whenever the residual grows.
    pub backtrack: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tolerance: 1e-10,
            max_iter: 500,
            backtrack: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub iterations: usize,
    /// Sup norm of the last undamped update.
    pub residual: f64,
    pub converged: bool,
    /// Damping in force at the end.
    pub damping: f64,
    pub trace: Vec<f64>,
}

/// Damped fixed-point iteration `z <- z + λ (F(z) - z)` on a path of vectors.
pub(crate) fn damped_fixed_point<F>(
    mut z: Vec<Vector>,
    mut map: F,
    opts: &PicardOptions,
) -> Result<(Vec<Vector>, PicardReport)>
where
    F: FnMut(&[Vector]) -> Result<Vec<Vector>>,
{
    let mut report = PicardReport {
        damping: opts.damping,
        ..Default::default()
    };
    let mut best: Option<(Vec<Vector>, f64)> = None;
    let mut lambda = opts.damping;
    for it in 1..=opts.max_iter {
        let target = map(&z)?;
        let res = sup_distance(&target, &z);
        report.iterations = it;
        report.residual = res;
        report.trace.push(res);
        if res <= opts.tolerance {
            report.converged = true;
            z = target;
            break;
        }
        if opts.backtrack {
            match &best {
                Some((best_z, best_res)) if !(res <= DIVERGENCE_FACTOR * best_res) => {
                    // A mode is being amplified: restart from the best iterate.
                    lambda *= 0.5;
                    z = best_z.clone();
                    let step = map(&z)?;
                    for (cur, new) in z.iter_mut().zip(&step) {
                        *cur += (new - &*cur) * lambda;
                    }
                    continue;
                }
                Some((_, best_res)) if res >= *best_res => {}
                _ if res.is_finite() => best = Some((z.clone(), res)),
                _ => break,
            }
        } else if !res.is_finite() {
            break;
        }
        for (cur, new) in z.iter_mut().zip(&target) {
            *cur += (new - &*cur) * lambda;
        }
    }
    report.damping = lambda;
    if !report.converged {
        return Err(Error::NoConvergence {
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    Ok((z, report))
}

/// Decoupling matrices `P_0..=P_K`, with `y = P x + φ` holding exactly on
/// the discrete system, plus the per-step factors reused by `φ` and the
/// step-ahead feedback.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub p: Vec<Mat>,
    /// `Φ_s = I + h A_s`.
    pub(crate) transition: Vec<Mat>,
    /// `G_s = (I + h P_{s+1} B_s W_s B_sᵀ)^{-1}`.
    pub(crate) factor: Vec<Mat>,
    pub(crate) weight_inv: Vec<Mat>,
}

/// Backward recursion
/// `P_s = Φ_sᵀ (I + h P_{s+1} S_s)^{-1} P_{s+1} Φ_s + h Q_s`, `P_K = M`,
/// with `S_s = B_s W_s B_sᵀ`, symmetrized each step.
///
/// Assumes `Atil = Btil = 0`; that is left to the caller.
pub fn solve_riccati(spec: &ModelSpec) -> Result<RiccatiSolution> {
    let n = spec.dims.n;
    let h = spec.grid.step;
    let k = spec.steps();
    let weight_inv = spec.control_weight_inverses()?;
    let eye = Mat::identity(n, n);

    let mut p = vec![Mat::zeros(n, n); k + 1];
    let mut transition = vec![Mat::zeros(n, n); k];
    let mut factor = vec![Mat::zeros(n, n); k];
    p[k] = spec.terminal_weight.clone();
    for s in (0..k).rev() {
        let phi = &eye + &spec.drift[s] * h;
        let b = &spec.input[s];
        let gain = b * &weight_inv[s] * b.transpose();
        let lhs = &eye + &p[s + 1] * &gain * h;
        let g = lhs.try_inverse().ok_or_else(|| {
            Error::Singular(format!("I + h P S is singular at node {s}"))
        })?;
        let next = phi.transpose() * (&g * &p[s + 1]) * &phi + spec.running_state_weight(s) * h;
        let next = symmetrize(&next);
        let norm = next.amax();
        if !norm.is_finite() || norm > RICCATI_BLOWUP {
            return Err(Error::RiccatiDivergence { node: s, norm });
        }
        p[s] = next;
        transition[s] = phi;
        factor[s] = g;
    }
    Ok(RiccatiSolution {
        p,
        transition,
        factor,
        weight_inv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiPath {
    /// `φ_0..=φ_K`, with `φ_K = 0`.
    pub phi: Vec<Vector>,
}

/// Affine companion `φ_s = Φ_sᵀ G_s (h P_{s+1} f_s + φ_{s+1})`, `φ_K = 0`,
/// for a deterministic forcing `f` entering the state equation. With
/// `f = m0` this is the mean-field offset of the decoupled costate.
pub fn solve_phi(spec: &ModelSpec, riccati: &RiccatiSolution, forcing: &[Vector]) -> Result<PhiPath> {
    let n = spec.dims.n;
    let k = spec.steps();
    if forcing.len() != k || forcing.iter().any(|f| f.len() != n) {
        return Err(crate::error::dim_err("phi forcing", format!("{k} vectors of length {n}"), forcing.len()));
    }
    let h = spec.grid.step;
    let mut phi = vec![Vector::zeros(n); k + 1];
    for s in (0..k).rev() {
        let inner = &riccati.p[s + 1] * &forcing[s] * h + &phi[s + 1];
        phi[s] = riccati.transition[s].transpose() * (&riccati.factor[s] * inner);
    }
    Ok(PhiPath { phi })
}

impl RiccatiSolution {
    /// `E_s[y_{s+1}] = G_s (P_{s+1}(Φ_s x + h f_s) + φ_{s+1})` as an affine map
    /// `x ↦ L x + c`.
    pub fn step_ahead(&self, s: usize, forcing: &Vector, phi: &PhiPath, h: f64) -> (Mat, Vector) {
        let lin = &self.factor[s] * &self.p[s + 1] * &self.transition[s];
        let off = &self.factor[s] * (&self.p[s + 1] * forcing * h + &phi.phi[s + 1]);
        (lin, off)
    }

    pub fn weight_inverse(&self, s: usize) -> &Mat {
        &self.weight_inv[s]
    }
}

/// Expectation-level solution: state (with history), costate (with zero
/// tail) and the control implied by the stationarity condition.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanPair {
    pub x: DelayedPath,
    pub y: DelayedPath,
    pub u: DelayedPath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanMode {
    /// Mean of the idiosyncratic component: initial data `a`, `ξ`, `η`, no
    /// population term.
    Eq12,
    /// Population component: zero initial data, forcing supplied by the
    /// caller, and the population input `Bhat` acting on the lagged control.
    Eq13,
}

/// Inputs of a deterministic forward-backward system with delay and
/// anticipation.
#[derive(Clone, Debug)]
pub struct MeanInputs {
    pub initial: Vector,
    pub state_history: Vec<Vector>,
    pub control_history: Vec<Vector>,
    /// Additive forcing per cell.
    pub forcing: Vec<Vector>,
    /// Extra matrix multiplying `u_{s-q}` in the state equation.
    pub lag_coupling: Option<Vec<Mat>>,
}

impl MeanInputs {
    pub fn for_mode(spec: &ModelSpec, mode: MeanMode, extra_forcing: Option<&[Vector]>) -> Result<Self> {
        let n = spec.dims.n;
        let k = spec.steps();
        let forcing = match extra_forcing {
            Some(f) => {
                if f.len() != k || f.iter().any(|v| v.len() != n) {
                    return Err(crate::error::dim_err("extra forcing", k, f.len()));
                }
                f.to_vec()
            }
            None if mode == MeanMode::Eq13 => {
                return Err(Error::InvalidParameter(
                    "Eq13 mode needs the population forcing from a prior Eq12 solve".into(),
                ))
            }
            None => vec![Vector::zeros(n); k],
        };
        Ok(match mode {
            MeanMode::Eq12 => Self {
                initial: spec.initial.clone(),
                state_history: spec.state_history.clone(),
                control_history: spec.control_history.clone(),
                forcing,
                lag_coupling: None,
            },
            MeanMode::Eq13 => Self {
                initial: Vector::zeros(n),
                state_history: vec![Vector::zeros(n); spec.state_lag()],
                control_history: vec![Vector::zeros(spec.dims.k); spec.control_lag()],
                forcing,
                lag_coupling: Some(spec.input_population.clone()),
            },
        })
    }
}

pub(crate) struct MeanSystem<'a> {
    spec: &'a ModelSpec,
    inputs: &'a MeanInputs,
    weight_inv: Vec<Mat>,
}

impl<'a> MeanSystem<'a> {
    pub(crate) fn new(spec: &'a ModelSpec, inputs: &'a MeanInputs) -> Result<Self> {
        Ok(Self {
            spec,
            inputs,
            weight_inv: spec.control_weight_inverses()?,
        })
    }

    fn y_at(y: &[Vector], idx: usize) -> Option<&Vector> {
        y.get(idx)
    }

    pub(crate) fn controls(&self, y: &[Vector]) -> Vec<Vector> {
        let spec = self.spec;
        let k = spec.steps();
        let q = spec.control_lag();
        (0..k)
            .map(|s| {
                let mut g = spec.input[s].transpose() * &y[s + 1];
                if s + q < k {
                    if let Some(ya) = Self::y_at(y, s + q + 1) {
                        g += spec.input_delayed[s + q].transpose() * ya;
                    }
                }
                -(&self.weight_inv[s] * g)
            })
            .collect()
    }

    fn lagged_control<'b>(&'b self, u: &'b [Vector], s: usize) -> &'b Vector {
        let q = self.spec.control_lag();
        if s < q {
            &self.inputs.control_history[s]
        } else {
            &u[s - q]
        }
    }

    fn lagged_state<'b>(&'b self, x: &'b [Vector], s: usize) -> &'b Vector {
        let p = self.spec.state_lag();
        if s < p {
            &self.inputs.state_history[s]
        } else {
            &x[s - p]
        }
    }

    pub(crate) fn forward_rhs(&self, x: &[Vector], u: &[Vector], s: usize) -> Vector {
        let spec = self.spec;
        let h = spec.grid.step;
        let ul = self.lagged_control(u, s);
        let mut drift = &spec.drift[s] * &x[s]
            + &spec.drift_delayed[s] * self.lagged_state(x, s)
            + &spec.input[s] * &u[s]
            + &spec.input_delayed[s] * ul
            + &self.inputs.forcing[s];
        if let Some(c) = &self.inputs.lag_coupling {
            drift += &c[s] * ul;
        }
        &x[s] + drift * h
    }

    pub(crate) fn forward(&self, u: &[Vector]) -> Vec<Vector> {
        let k = self.spec.steps();
        let mut x = Vec::with_capacity(k + 1);
        x.push(self.inputs.initial.clone());
        for s in 0..k {
            let next = self.forward_rhs(&x, u, s);
            x.push(next);
        }
        x
    }

    pub(crate) fn backward_rhs(&self, x: &[Vector], y: &[Vector], s: usize) -> Vector {
        let spec = self.spec;
        let h = spec.grid.step;
        let p = spec.state_lag();
        let k = spec.steps();
        let mut drift = spec.drift[s].transpose() * &y[s + 1] + spec.running_state_weight(s) * &x[s];
        if s + p < k {
            drift += spec.drift_delayed[s + p].transpose() * &y[s + p + 1];
        }
        &y[s + 1] + drift * h
    }

    pub(crate) fn backward(&self, x: &[Vector]) -> Vec<Vector> {
        let k = self.spec.steps();
        let mut y = vec![Vector::zeros(self.spec.dims.n); k + 1];
        y[k] = &self.spec.terminal_weight * &x[k];
        for s in (0..k).rev() {
            y[s] = self.backward_rhs(x, &y, s);
        }
        y
    }

    pub(crate) fn assemble(&self, x: Vec<Vector>, y: Vec<Vector>, u: Vec<Vector>) -> Result<MeanPair> {
        let grid = &self.spec.grid;
        Ok(MeanPair {
            x: DelayedPath::new(PathRole::State, grid, self.inputs.state_history.clone(), x)?,
            y: DelayedPath::new(PathRole::Costate, grid, vec![], y)?,
            u: DelayedPath::new(PathRole::Control, grid, self.inputs.control_history.clone(), u)?,
        })
    }

    /// Largest violation of the three discrete equations by `pair`.
    pub(crate) fn residual(&self, pair: &MeanPair) -> f64 {
        let k = self.spec.steps();
        let x: Vec<Vector> = pair.x.forward_values().to_vec();
        let y: Vec<Vector> = pair.y.forward_values().to_vec();
        let u: Vec<Vector> = pair.u.forward_values().to_vec();
        let mut worst = (&y[k] - &self.spec.terminal_weight * &x[k]).amax();
        worst = worst.max((&x[0] - &self.inputs.initial).amax());
        for s in 0..k {
            worst = worst.max((&x[s + 1] - self.forward_rhs(&x, &u, s)).amax());
            worst = worst.max((&y[s] - self.backward_rhs(&x, &y, s)).amax());
        }
        worst.max(sup_distance(&u, &self.controls(&y)))
    }

    pub(crate) fn solve(&self, opts: &PicardOptions) -> Result<(MeanPair, PicardReport)> {
        let y0 = vec![Vector::zeros(self.spec.dims.n); self.spec.steps() + 1];
        let (y, report) = damped_fixed_point(y0, |y| Ok(self.backward(&self.forward(&self.controls(y)))), opts)?;
        let u = self.controls(&y);
        let x = self.forward(&u);
        Ok((self.assemble(x, y, u)?, report))
    }
}

/// Solves the expectation-level system in the given mode by damped Picard
/// iteration: forward sweep for the state under the current costate's
/// controls, backward sweep for the costate (anticipated terms resolved
/// inside the same pass), then a damped update.
pub fn solve_afbodde(
    spec: &ModelSpec,
    extra_forcing: Option<&[Vector]>,
    mode: MeanMode,
    opts: &PicardOptions,
) -> Result<(MeanPair, PicardReport)> {
    let inputs = MeanInputs::for_mode(spec, mode, extra_forcing)?;
    solve_mean_system(spec, &inputs, opts)
}

pub fn solve_mean_system(
    spec: &ModelSpec,
    inputs: &MeanInputs,
    opts: &PicardOptions,
) -> Result<(MeanPair, PicardReport)> {
    MeanSystem::new(spec, inputs)?.solve(opts)
}

/// Largest violation of the discrete forward, backward and stationarity
/// equations by a candidate solution.
pub fn mean_system_residual(spec: &ModelSpec, inputs: &MeanInputs, pair: &MeanPair) -> Result<f64> {
    Ok(MeanSystem::new(spec, inputs)?.residual(pair))
}

/// Mean of the structure without delayed drift/input (`Atil = Btil = 0`).
#[derive(Clone, Debug)]
pub struct CaseOneMean {
    pub pair: MeanPair,
    /// Population field per cell; `Bhat η` on the first `q` cells.
    pub m0: Vec<Vector>,
    pub riccati: RiccatiSolution,
    pub phi: PhiPath,
}

/// Population-consistent mean for the `Atil = Btil = 0` structure.
///
/// Damped Picard on the self-referential delayed forcing
/// `m0_s = Bhat_s ū_{s-q}`: each sweep solves `φ` for the current field,
/// runs the mean state forward under the decoupled control
/// `ū_s = -W_s B_sᵀ E_s[y_{s+1}]`, and reads the lagged control back.
pub fn solve_mean_case1(spec: &ModelSpec, opts: &PicardOptions) -> Result<(CaseOneMean, PicardReport)> {
    if !spec.is_case_one() {
        return Err(Error::Structure("Atil and Btil must vanish".into()));
    }
    let n = spec.dims.n;
    let k = spec.steps();
    let q = spec.control_lag();
    let h = spec.grid.step;
    let riccati = solve_riccati(spec)?;

    let history_field = |s: usize| &spec.input_population[s] * &spec.control_history[s];
    let m0: Vec<Vector> = (0..k)
        .map(|s| if s < q { history_field(s) } else { Vector::zeros(n) })
        .collect();

    let sweep = |m0: &[Vector]| -> Result<(PhiPath, Vec<Vector>, Vec<Vector>)> {
        let phi = solve_phi(spec, &riccati, m0)?;
        let mut x = Vec::with_capacity(k + 1);
        let mut u = Vec::with_capacity(k);
        x.push(spec.initial.clone());
        for s in 0..k {
            let (lin, off) = riccati.step_ahead(s, &m0[s], &phi, h);
            let ys = lin * &x[s] + off;
            let us = -(&riccati.weight_inv[s] * (spec.input[s].transpose() * ys));
            let next = &x[s] + (&spec.drift[s] * &x[s] + &spec.input[s] * &us + &m0[s]) * h;
            u.push(us);
            x.push(next);
        }
        Ok((phi, x, u))
    };

    let (m0, report) = damped_fixed_point(
        m0,
        |m0| {
            let (_, _, u) = sweep(m0)?;
            Ok((0..k)
                .map(|s| if s < q { history_field(s) } else { &spec.input_population[s] * &u[s - q] })
                .collect())
        },
        opts,
    )?;

    let (phi, x, u) = sweep(&m0)?;
    let y: Vec<Vector> = (0..=k).map(|s| &riccati.p[s] * &x[s] + &phi.phi[s]).collect();
    let grid = &spec.grid;
    let pair = MeanPair {
        x: DelayedPath::new(PathRole::State, grid, spec.state_history.clone(), x)?,
        y: DelayedPath::new(PathRole::Costate, grid, vec![], y)?,
        u: DelayedPath::new(PathRole::Control, grid, spec.control_history.clone(), u)?,
    };
    Ok((
        CaseOneMean {
            pair,
            m0,
            riccati,
            phi,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::model::ScalarModel;

    fn scalar(v: &Vector) -> f64 {
        v[0]
    }

    #[test]
    fn riccati_linear_closed_form() {
        // A = B = 0: P(t) = m + r (T - t).
        let (r, m) = (0.7, 1.3);
        let spec = ScalarModel {
            state_weight: r,
            terminal_weight: m,
            ..Default::default()
        }
        .spec(1.0 / 16.0)
        .unwrap();
        let sol = solve_riccati(&spec).unwrap();
        for s in 0..=spec.steps() {
            let t = spec.grid.time(s as isize);
            assert!((sol.p[s][(0, 0)] - (m + r * (1.0 - t))).abs() < 1e-13);
        }
    }

    #[test]
    fn riccati_separable_closed_form() {
        // A = 0, Q = 0, B = W = 1: P(t) = m / (1 + m (T - t)), exact on the grid.
        let m = 2.0;
        let spec = ScalarModel {
            input: 1.0,
            terminal_weight: m,
            ..Default::default()
        }
        .spec(1.0 / 32.0)
        .unwrap();
        let sol = solve_riccati(&spec).unwrap();
        for s in 0..=spec.steps() {
            let t = spec.grid.time(s as isize);
            let exact = m / (1.0 + m * (1.0 - t));
            assert!((sol.p[s][(0, 0)] - exact).abs() < 1e-12, "node {s}");
        }
    }

    #[test]
    fn riccati_all_zero() {
        let spec = ScalarModel::default().spec(0.125).unwrap();
        let sol = solve_riccati(&spec).unwrap();
        assert!(sol.p.iter().all(|p| p.amax() == 0.0));
    }

    #[test]
    fn riccati_blowup_is_reported() {
        let spec = ScalarModel {
            drift: 40.0,
            state_weight: 1.0,
            horizon: 2.0,
            ..Default::default()
        }
        .spec(0.25)
        .unwrap();
        assert!(matches!(solve_riccati(&spec), Err(Error::RiccatiDivergence { .. })));
    }

    #[test]
    fn riccati_matrix_case_is_symmetric_psd() {
        use crate::model::{Coefficient, Dimensions, History, MatrixLiteral, ModelFile, VectorLiteral};
        let m2 = |rows: Vec<Vec<f64>>| Coefficient::Constant(MatrixLiteral::Rows(rows));
        let file = ModelFile {
            dims: Dimensions { n: 2, k: 2, m: 1, d: 1 },
            horizon: 1.0,
            delta: 0.25,
            theta: 0.25,
            step: None,
            a: VectorLiteral::Components(vec![1.0, -1.0]),
            xi: History::Constant(VectorLiteral::Components(vec![0.0, 0.0])),
            eta: History::Constant(VectorLiteral::Components(vec![0.0, 0.0])),
            drift: m2(vec![vec![0.1, 0.5], vec![-0.3, 0.2]]),
            drift_delayed: m2(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            input: m2(vec![vec![1.0, 0.2], vec![0.0, 0.7]]),
            input_delayed: m2(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            input_population: m2(vec![vec![0.3, 0.0], vec![0.0, 0.3]]),
            sigma: m2(vec![vec![0.2], vec![0.1]]),
            sigma0: m2(vec![vec![0.0], vec![0.0]]),
            state_weight: m2(vec![vec![1.0, 0.2], vec![0.2, 0.5]]),
            state_weight_delayed: m2(vec![vec![0.3, 0.0], vec![0.0, 0.3]]),
            control_weight: m2(vec![vec![1.0, 0.1], vec![0.1, 0.8]]),
            control_weight_delayed: m2(vec![vec![0.2, 0.0], vec![0.0, 0.2]]),
            terminal_weight: MatrixLiteral::Rows(vec![vec![1.0, 0.0], vec![0.0, 2.0]]),
        };
        let spec = file.sample(1.0 / 16.0).unwrap();
        let sol = solve_riccati(&spec).unwrap();
        for p in &sol.p {
            assert!((p - p.transpose()).amax() == 0.0);
            assert!(min_eigenvalue(p) >= -1e-10);
        }
    }

    #[test]
    fn phi_vanishes_without_forcing_or_population_input() {
        let spec = ScalarModel {
            input: 1.0,
            state_weight: 1.0,
            terminal_weight: 1.0,
            ..Default::default()
        }
        .spec(0.125)
        .unwrap();
        let sol = solve_riccati(&spec).unwrap();
        let zero = vec![Vector::zeros(1); spec.steps()];
        let phi = solve_phi(&spec, &sol, &zero).unwrap();
        assert!(phi.phi.iter().all(|v| v.amax() == 0.0));

        // Bhat = 0 makes the consistent field vanish, hence φ ≡ 0 too.
        let (mean, _) = solve_mean_case1(&spec, &PicardOptions::default()).unwrap();
        assert!(mean.phi.phi.iter().all(|v| v.amax() == 0.0));
    }

    /// Closed form for A = 0, Q = 0, B = W = 1, M = m and constant forcing c:
    /// φ(t) = c m τ / (1 + m τ) with τ = T - t.
    fn phi_exact(c: f64, m: f64, tau: f64) -> f64 {
        c * m * tau / (1.0 + m * tau)
    }

    #[test]
    fn phi_matches_closed_form_on_the_grid() {
        let (c, m) = (0.8, 1.5);
        for step in [1.0 / 16.0, 1.0 / 64.0] {
            let spec = ScalarModel {
                input: 1.0,
                terminal_weight: m,
                ..Default::default()
            }
            .spec(step)
            .unwrap();
            let sol = solve_riccati(&spec).unwrap();
            let forcing = vec![Vector::from_element(1, c); spec.steps()];
            let phi = solve_phi(&spec, &sol, &forcing).unwrap();
            for s in 0..=spec.steps() {
                let exact = phi_exact(c, m, 1.0 - spec.grid.time(s as isize));
                assert!((phi.phi[s][0] - exact).abs() < 1e-12, "node {s}");
            }
        }
    }

    #[test]
    fn phi_with_drift_converges_first_order() {
        // A = 0.5 breaks grid exactness; compare with a fine reference.
        let value = |k: usize| {
            let spec = ScalarModel {
                drift: 0.5,
                input: 1.0,
                state_weight: 1.0,
                terminal_weight: 1.5,
                ..Default::default()
            }
            .spec(1.0 / k as f64)
            .unwrap();
            let sol = solve_riccati(&spec).unwrap();
            let forcing = vec![Vector::from_element(1, 0.8); spec.steps()];
            solve_phi(&spec, &sol, &forcing).unwrap().phi[0][0]
        };
        let reference = value(8192);
        let errs: Vec<f64> = [64, 128, 256, 512].iter().map(|&k| (value(k) - reference).abs()).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.4).contains(&ratio), "ratio {ratio} from {errs:?}");
        }
        // Richardson extrapolation removes the leading term.
        let extrapolated = 2.0 * value(512) - value(256);
        assert!((extrapolated - reference).abs() < errs[3] / 5.0);
    }

    fn delayed_example() -> ScalarModel {
        ScalarModel {
            drift: 0.1,
            drift_delayed: 0.2,
            input: 1.0,
            input_delayed: 1.0,
            input_population: 0.4,
            sigma: 0.3,
            state_weight: 1.0,
            state_weight_delayed: 0.5,
            control_weight: 1.0,
            control_weight_delayed: 0.5,
            terminal_weight: 1.0,
            a: 1.0,
            xi: 0.5,
            eta: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_give_zero_costate() {
        let spec = ScalarModel {
            drift: 0.3,
            drift_delayed: 0.2,
            input: 1.0,
            a: 1.0,
            xi: 1.0,
            eta: 0.5,
            input_delayed: 0.4,
            ..Default::default()
        }
        .spec(0.0625)
        .unwrap();
        let (pair, _) = solve_afbodde(&spec, None, MeanMode::Eq12, &PicardOptions::default()).unwrap();
        assert!(pair.y.forward_values().iter().all(|v| v.amax() == 0.0));
        // Ex is the uncontrolled delayed recursion.
        let h = spec.grid.step;
        let p = spec.state_lag() as isize;
        let q = spec.control_lag() as isize;
        let mut x = vec![1.0];
        for s in 0..spec.steps() as isize {
            let xl = if s < p { 1.0 } else { x[(s - p) as usize] };
            let ul = if s < q { 0.5 } else { 0.0 };
            let cur = x[s as usize];
            x.push(cur + h * (0.3 * cur + 0.2 * xl + 0.4 * ul));
        }
        for (s, v) in x.iter().enumerate() {
            assert!((pair.x.at(s as isize)[0] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn without_delay_terms_mean_matches_riccati() {
        let spec = ScalarModel {
            drift_delayed: 0.0,
            input_delayed: 0.0,
            ..delayed_example()
        }
        .spec(1.0 / 16.0)
        .unwrap();
        let (pair, report) = solve_afbodde(&spec, None, MeanMode::Eq12, &PicardOptions::default()).unwrap();
        assert!(report.converged);
        let sol = solve_riccati(&spec).unwrap();
        for s in 0..=spec.steps() as isize {
            let py = sol.p[s as usize][(0, 0)] * scalar(pair.x.at(s));
            assert!((scalar(pair.y.at(s)) - py).abs() < 1e-6, "node {s}");
        }
    }

    #[test]
    fn picard_fixed_point_satisfies_discrete_equations() {
        let spec = delayed_example().spec(1.0 / 16.0).unwrap();
        let opts = PicardOptions::default();
        let inputs = MeanInputs::for_mode(&spec, MeanMode::Eq12, None).unwrap();
        let (pair, report) = solve_mean_system(&spec, &inputs, &opts).unwrap();
        assert!(report.converged && report.residual <= opts.tolerance);
        let res = mean_system_residual(&spec, &inputs, &pair).unwrap();
        assert!(res <= 10.0 * opts.tolerance, "residual {res}");
        for s in spec.steps() as isize + 1..=pair.y.readable_end() {
            assert_eq!(pair.y.at(s).amax(), 0.0);
        }
        assert!((pair.y.at(spec.steps() as isize)[0] - pair.x.at(spec.steps() as isize)[0]).abs() < 1e-9);
    }

    #[test]
    fn eq13_requires_forcing() {
        let spec = delayed_example().spec(0.125).unwrap();
        assert!(solve_afbodde(&spec, None, MeanMode::Eq13, &PicardOptions::default()).is_err());
    }

    #[test]
    fn nonconvergence_is_reported() {
        let spec = delayed_example().spec(1.0 / 16.0).unwrap();
        let opts = PicardOptions {
            backtrack: false,
            ..Default::default()
        };
        match solve_afbodde(&spec, None, MeanMode::Eq12, &opts) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, opts.max_iter);
                assert!(residual > 1.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        // The safeguard recovers by halving the damping.
        let (_, report) = solve_afbodde(&spec, None, MeanMode::Eq12, &PicardOptions::default()).unwrap();
        assert!(report.damping < 0.5);
    }

    #[test]
    fn refinement_is_first_order() {
        // Ey(0) of the delayed example at h, h/2, h/4, h/8.
        let vals: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&k| {
                let spec = delayed_example().spec(1.0 / k as f64).unwrap();
                let (pair, _) = solve_afbodde(&spec, None, MeanMode::Eq12, &PicardOptions::default()).unwrap();
                pair.y.at(0)[0]
            })
            .collect();
        let d: Vec<f64> = vals.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
        for w in d.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.4).contains(&ratio), "ratio {ratio} from {vals:?}");
        }
    }

    #[test]
    fn case1_mean_without_population_input_is_riccati() {
        let spec = ScalarModel {
            drift_delayed: 0.0,
            input_delayed: 0.0,
            input_population: 0.0,
            ..delayed_example()
        }
        .spec(1.0 / 16.0)
        .unwrap();
        let (mean, _) = solve_mean_case1(&spec, &PicardOptions::default()).unwrap();
        let sol = solve_riccati(&spec).unwrap();
        for s in 0..=spec.steps() {
            let expect = sol.p[s][(0, 0)] * mean.pair.x.at(s as isize)[0];
            assert!((mean.pair.y.at(s as isize)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn case1_mean_zero_weights() {
        let spec = ScalarModel {
            drift_delayed: 0.0,
            input_delayed: 0.0,
            state_weight: 0.0,
            state_weight_delayed: 0.0,
            terminal_weight: 0.0,
            ..delayed_example()
        }
        .spec(1.0 / 16.0)
        .unwrap();
        let (mean, _) = solve_mean_case1(&spec, &PicardOptions::default()).unwrap();
        assert!(mean.pair.y.forward_values().iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn case1_mean_fixed_point_residual() {
        let spec = ScalarModel {
            drift_delayed: 0.0,
            input_delayed: 0.0,
            ..delayed_example()
        }
        .spec(1.0 / 16.0)
        .unwrap();
        let (mean, _) = solve_mean_case1(&spec, &PicardOptions::default()).unwrap();
        // Substitute into the combined system: forcing m0 = Bhat ū_{s-q}.
        let inputs = MeanInputs {
            initial: spec.initial.clone(),
            state_history: spec.state_history.clone(),
            control_history: spec.control_history.clone(),
            forcing: mean.m0.clone(),
            lag_coupling: None,
        };
        let res = mean_system_residual(&spec, &inputs, &mean.pair).unwrap();
        assert!(res <= 1e-9, "residual {res}");
        let q = spec.control_lag();
        for s in q..spec.steps() {
            let expect = 0.4 * mean.pair.u.at((s - q) as isize)[0];
            assert!((mean.m0[s][0] - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn case1_mean_rejects_delay_structure() {
        let spec = delayed_example().spec(0.125).unwrap();
        assert!(matches!(
            solve_mean_case1(&spec, &PicardOptions::default()),
            Err(Error::Structure(_))
        ));
    }
}
