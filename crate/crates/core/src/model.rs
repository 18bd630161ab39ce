//! Game data: coefficients of the delayed dynamics and the quadratic cost,
//! the JSON model-file format, and the standing-assumption checks.
//!
//! Time-indexed coefficients are sampled once per grid cell: entry `s`
//! holds the value on `[t_s, t_{s+1})`, `s = 0..K`. Nothing is stored past
//! the horizon, so the delayed weights vanish on `[T, T+δ]` and `[T, T+θ]`
//! by construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{asymmetry, min_eigenvalue, Mat, Vector};
use crate::timegrid::{build_grid, TimeGrid};

pub const DEFAULT_EPD: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub k: usize,
    /// Idiosyncratic noise dimension.
    pub m: usize,
    /// Common noise dimension.
    pub d: usize,
}

impl Dimensions {
    pub fn scalar() -> Self {
        Self { n: 1, k: 1, m: 1, d: 1 }
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::InvalidParameter(format!(
                "all dimensions must be at least 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A matrix in a model file: a bare number (1×1 only) or a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixLiteral {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixLiteral {
    fn to_matrix(&self, what: &str, rows: usize, cols: usize) -> Result<Mat> {
        match self {
            MatrixLiteral::Scalar(v) if rows == 1 && cols == 1 => Ok(Mat::from_element(1, 1, *v)),
            MatrixLiteral::Scalar(_) => Err(dim_err(what, format!("{rows}x{cols}"), "scalar")),
            MatrixLiteral::Rows(data) => {
                if data.len() != rows || data.iter().any(|r| r.len() != cols) {
                    let found = format!("{}x{}", data.len(), data.first().map_or(0, |r| r.len()));
                    return Err(dim_err(what, format!("{rows}x{cols}"), found));
                }
                Ok(Mat::from_fn(rows, cols, |i, j| data[i][j]))
            }
        }
    }

    fn from_matrix(m: &Mat) -> Self {
        if m.nrows() == 1 && m.ncols() == 1 {
            return MatrixLiteral::Scalar(m[(0, 0)]);
        }
        MatrixLiteral::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

/// A time-indexed coefficient: constant, or one matrix per grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(MatrixLiteral),
    Nodes { nodes: Vec<MatrixLiteral> },
}

impl Coefficient {
    pub fn scalar(v: f64) -> Self {
        Coefficient::Constant(MatrixLiteral::Scalar(v))
    }

    pub fn matrix(m: &Mat) -> Self {
        Coefficient::Constant(MatrixLiteral::from_matrix(m))
    }

    pub fn nodes(ms: &[Mat]) -> Self {
        Coefficient::Nodes {
            nodes: ms.iter().map(MatrixLiteral::from_matrix).collect(),
        }
    }

    fn sample(&self, what: &str, rows: usize, cols: usize, cells: usize) -> Result<Vec<Mat>> {
        match self {
            Coefficient::Constant(lit) => Ok(vec![lit.to_matrix(what, rows, cols)?; cells]),
            Coefficient::Nodes { nodes } => {
                if nodes.len() != cells {
                    return Err(dim_err(format!("{what} node count"), cells, nodes.len()));
                }
                nodes.iter().map(|l| l.to_matrix(what, rows, cols)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorLiteral {
    Scalar(f64),
    Components(Vec<f64>),
}

impl VectorLiteral {
    fn to_vector(&self, what: &str, len: usize) -> Result<Vector> {
        match self {
            VectorLiteral::Scalar(v) if len == 1 => Ok(Vector::from_element(1, *v)),
            VectorLiteral::Scalar(_) => Err(dim_err(what, len, 1)),
            VectorLiteral::Components(c) if c.len() == len => Ok(Vector::from_column_slice(c)),
            VectorLiteral::Components(c) => Err(dim_err(what, len, c.len())),
        }
    }
}

/// History on `[-lag, 0)`: constant, or one sample per node ordered from
/// the oldest (`-lag`) to the newest (`-1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum History {
    Constant(VectorLiteral),
    Nodes { nodes: Vec<VectorLiteral> },
}

impl History {
    pub fn scalar(v: f64) -> Self {
        History::Constant(VectorLiteral::Scalar(v))
    }

    fn sample(&self, what: &str, len: usize, lag: usize) -> Result<Vec<Vector>> {
        match self {
            History::Constant(lit) => Ok(vec![lit.to_vector(what, len)?; lag]),
            History::Nodes { nodes } => {
                if nodes.len() != lag {
                    return Err(dim_err(format!("{what} node count"), lag, nodes.len()));
                }
                nodes.iter().map(|l| l.to_vector(what, len)).collect()
            }
        }
    }
}

/// On-disk model description. Matrices are row-major lists of rows;
/// time-indexed arrays are node-major (`{"nodes": [...]}` with one entry
/// per grid cell).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub dims: Dimensions,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub delta: f64,
    pub theta: f64,
    /// Default grid step, overridable from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    pub a: VectorLiteral,
    pub xi: History,
    pub eta: History,
    #[serde(rename = "A")]
    pub drift: Coefficient,
    #[serde(rename = "Atil")]
    pub drift_delayed: Coefficient,
    #[serde(rename = "B")]
    pub input: Coefficient,
    #[serde(rename = "Btil")]
    pub input_delayed: Coefficient,
    #[serde(rename = "Bhat")]
    pub input_population: Coefficient,
    pub sigma: Coefficient,
    pub sigma0: Coefficient,
    #[serde(rename = "R")]
    pub state_weight: Coefficient,
    #[serde(rename = "Rtil")]
    pub state_weight_delayed: Coefficient,
    #[serde(rename = "Nc")]
    pub control_weight: Coefficient,
    #[serde(rename = "Nctil")]
    pub control_weight_delayed: Coefficient,
    #[serde(rename = "M")]
    pub terminal_weight: MatrixLiteral,
}

impl ModelFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Samples every coefficient on the grid with step `step`.
    pub fn sample(&self, step: f64) -> Result<ModelSpec> {
        self.dims.check()?;
        let grid = build_grid(self.horizon, step, self.delta, self.theta)?;
        let Dimensions { n, k, m, d } = self.dims;
        let cells = grid.steps;
        Ok(ModelSpec {
            dims: self.dims,
            grid,
            initial: self.a.to_vector("a", n)?,
            state_history: self.xi.sample("xi", n, grid.state_lag)?,
            control_history: self.eta.sample("eta", k, grid.control_lag)?,
            drift: self.drift.sample("A", n, n, cells)?,
            drift_delayed: self.drift_delayed.sample("Atil", n, n, cells)?,
            input: self.input.sample("B", n, k, cells)?,
            input_delayed: self.input_delayed.sample("Btil", n, k, cells)?,
            input_population: self.input_population.sample("Bhat", n, k, cells)?,
            sigma: self.sigma.sample("sigma", n, m, cells)?,
            sigma0: self.sigma0.sample("sigma0", n, d, cells)?,
            state_weight: self.state_weight.sample("R", n, n, cells)?,
            state_weight_delayed: self.state_weight_delayed.sample("Rtil", n, n, cells)?,
            control_weight: self.control_weight.sample("Nc", k, k, cells)?,
            control_weight_delayed: self.control_weight_delayed.sample("Nctil", k, k, cells)?,
            terminal_weight: self.terminal_weight.to_matrix("M", n, n)?,
        })
    }

    /// Samples on the step stored in the file.
    pub fn sample_default(&self) -> Result<ModelSpec> {
        let step = self
            .step
            .ok_or_else(|| Error::InvalidParameter("model file has no default step".into()))?;
        self.sample(step)
    }
}

/// Constant-coefficient scalar model (`n = k = m = d = 1`), the workhorse
/// of the experiments and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarModel {
    pub horizon: f64,
    pub delta: f64,
    pub theta: f64,
    pub a: f64,
    pub xi: f64,
    pub eta: f64,
    pub drift: f64,
    pub drift_delayed: f64,
    pub input: f64,
    pub input_delayed: f64,
    pub input_population: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub state_weight: f64,
    pub state_weight_delayed: f64,
    pub control_weight: f64,
    pub control_weight_delayed: f64,
    pub terminal_weight: f64,
}

impl Default for ScalarModel {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            delta: 0.25,
            theta: 0.25,
            a: 0.0,
            xi: 0.0,
            eta: 0.0,
            drift: 0.0,
            drift_delayed: 0.0,
            input: 0.0,
            input_delayed: 0.0,
            input_population: 0.0,
            sigma: 0.0,
            sigma0: 0.0,
            state_weight: 0.0,
            state_weight_delayed: 0.0,
            control_weight: 1.0,
            control_weight_delayed: 0.0,
            terminal_weight: 0.0,
        }
    }
}

impl ScalarModel {
    pub fn file(&self, step: Option<f64>) -> ModelFile {
        let c = Coefficient::scalar;
        ModelFile {
            dims: Dimensions::scalar(),
            horizon: self.horizon,
            delta: self.delta,
            theta: self.theta,
            step,
            a: VectorLiteral::Scalar(self.a),
            xi: History::scalar(self.xi),
            eta: History::scalar(self.eta),
            drift: c(self.drift),
            drift_delayed: c(self.drift_delayed),
            input: c(self.input),
            input_delayed: c(self.input_delayed),
            input_population: c(self.input_population),
            sigma: c(self.sigma),
            sigma0: c(self.sigma0),
            state_weight: c(self.state_weight),
            state_weight_delayed: c(self.state_weight_delayed),
            control_weight: c(self.control_weight),
            control_weight_delayed: c(self.control_weight_delayed),
            terminal_weight: MatrixLiteral::Scalar(self.terminal_weight),
        }
    }

    pub fn spec(&self, step: f64) -> Result<ModelSpec> {
        self.file(Some(step)).sample(step)
    }
}

/// All coefficients and data of the game, sampled on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dims: Dimensions,
    pub grid: TimeGrid,
    /// Initial state `a`.
    pub initial: Vector,
    /// State history on nodes `-p..=-1`.
    pub state_history: Vec<Vector>,
    /// Control history on nodes `-q..=-1`.
    pub control_history: Vec<Vector>,
    pub drift: Vec<Mat>,
    pub drift_delayed: Vec<Mat>,
    pub input: Vec<Mat>,
    pub input_delayed: Vec<Mat>,
    pub input_population: Vec<Mat>,
    pub sigma: Vec<Mat>,
    pub sigma0: Vec<Mat>,
    pub state_weight: Vec<Mat>,
    pub state_weight_delayed: Vec<Mat>,
    pub control_weight: Vec<Mat>,
    pub control_weight_delayed: Vec<Mat>,
    pub terminal_weight: Mat,
}

impl ModelSpec {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn state_lag(&self) -> usize {
        self.grid.state_lag
    }

    pub fn control_lag(&self) -> usize {
        self.grid.control_lag
    }

    /// `ξ` at a negative node.
    pub fn xi_at(&self, node: isize) -> &Vector {
        &self.state_history[(node + self.state_lag() as isize) as usize]
    }

    /// `η` at a negative node.
    pub fn eta_at(&self, node: isize) -> &Vector {
        &self.control_history[(node + self.control_lag() as isize) as usize]
    }

    /// `Rtil` at node `s`, zero at or beyond the horizon.
    pub fn state_weight_delayed_at(&self, node: usize) -> Option<&Mat> {
        self.state_weight_delayed.get(node)
    }

    pub fn control_weight_delayed_at(&self, node: usize) -> Option<&Mat> {
        self.control_weight_delayed.get(node)
    }

    /// `R_s + Rtil_{s+p}`.
    pub fn running_state_weight(&self, s: usize) -> Mat {
        let mut q = self.state_weight[s].clone();
        if let Some(rt) = self.state_weight_delayed_at(s + self.state_lag()) {
            q += rt;
        }
        q
    }

    /// `Nc_s + Nctil_{s+q}`.
    pub fn control_weight_sum(&self, s: usize) -> Mat {
        let mut w = self.control_weight[s].clone();
        if let Some(nt) = self.control_weight_delayed_at(s + self.control_lag()) {
            w += nt;
        }
        w
    }

    /// `(Nc_s + Nctil_{s+q})^{-1}` for every cell.
    pub fn control_weight_inverses(&self) -> Result<Vec<Mat>> {
        (0..self.steps())
            .map(|s| {
                self.control_weight_sum(s).try_inverse().ok_or_else(|| {
                    Error::Assumption(format!("Nc + Nctil(.+theta) is singular at node {s}"))
                })
            })
            .collect()
    }

    /// True when `Atil ≡ 0` and `Btil ≡ 0`.
    pub fn is_case_one(&self) -> bool {
        self.drift_delayed.iter().all(|m| m.amax() == 0.0)
            && self.input_delayed.iter().all(|m| m.amax() == 0.0)
    }

    pub fn has_idiosyncratic_noise(&self) -> bool {
        self.sigma.iter().any(|m| m.amax() != 0.0)
    }

    pub fn has_common_noise(&self) -> bool {
        self.sigma0.iter().any(|m| m.amax() != 0.0)
    }

    /// Verifies that every array has the declared shape and length.
    pub fn check_structure(&self) -> Result<()> {
        self.dims.check()?;
        let Dimensions { n, k, m, d } = self.dims;
        let cells = self.steps();
        let arrays: [(&str, &Vec<Mat>, usize, usize); 11] = [
            ("A", &self.drift, n, n),
            ("Atil", &self.drift_delayed, n, n),
            ("B", &self.input, n, k),
            ("Btil", &self.input_delayed, n, k),
            ("Bhat", &self.input_population, n, k),
            ("sigma", &self.sigma, n, m),
            ("sigma0", &self.sigma0, n, d),
            ("R", &self.state_weight, n, n),
            ("Rtil", &self.state_weight_delayed, n, n),
            ("Nc", &self.control_weight, k, k),
            ("Nctil", &self.control_weight_delayed, k, k),
        ];
        for (name, arr, r, c) in arrays {
            if arr.len() != cells {
                return Err(dim_err(format!("{name} node count"), cells, arr.len()));
            }
            if let Some(bad) = arr.iter().find(|x| x.shape() != (r, c)) {
                return Err(dim_err(name, format!("{r}x{c}"), format!("{:?}", bad.shape())));
            }
        }
        if self.terminal_weight.shape() != (n, n) {
            return Err(dim_err("M", format!("{n}x{n}"), format!("{:?}", self.terminal_weight.shape())));
        }
        if self.initial.len() != n {
            return Err(dim_err("a", n, self.initial.len()));
        }
        if self.state_history.len() != self.state_lag() || self.state_history.iter().any(|v| v.len() != n) {
            return Err(dim_err("xi", format!("{} samples of length {n}", self.state_lag()), "other"));
        }
        if self.control_history.len() != self.control_lag()
            || self.control_history.iter().any(|v| v.len() != k)
        {
            return Err(dim_err("eta", format!("{} samples of length {k}", self.control_lag()), "other"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    /// A coefficient is not finite.
    Bounded,
    SymmetricR,
    SymmetricRtil,
    SymmetricNc,
    SymmetricNctil,
    SymmetricM,
    /// `R + Rtil(.+δ)` is not positive semi-definite.
    StateWeightPsd,
    /// `Nc + Nctil(.+θ)` is not positive definite with margin `εpd`.
    ControlWeightPd,
    TerminalPsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub assumption: Assumption,
    /// Grid node, or `None` for time-independent data.
    pub node: Option<usize>,
    /// Asymmetry or smallest eigenvalue, depending on the assumption.
    pub diagnostic: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Checks the standing assumptions on the sampled model.
///
/// Shape errors are returned as `Err`; assumption failures are collected
/// in the report.
pub fn validate_spec(spec: &ModelSpec, epd: f64) -> Result<ValidationReport> {
    spec.check_structure()?;
    let mut violations = Vec::new();
    let mut push = |assumption, node, diagnostic| {
        violations.push(Violation {
            assumption,
            node,
            diagnostic,
        })
    };

    let all_finite = |arr: &[Mat]| arr.iter().all(|m| m.iter().all(|v| v.is_finite()));
    let finite = [
        &spec.drift,
        &spec.drift_delayed,
        &spec.input,
        &spec.input_delayed,
        &spec.input_population,
        &spec.sigma,
        &spec.sigma0,
        &spec.state_weight,
        &spec.state_weight_delayed,
        &spec.control_weight,
        &spec.control_weight_delayed,
    ]
    .iter()
    .all(|a| all_finite(a))
        && spec.terminal_weight.iter().all(|v| v.is_finite())
        && spec.initial.iter().all(|v| v.is_finite());
    if !finite {
        push(Assumption::Bounded, None, f64::NAN);
        return Ok(ValidationReport { ok: false, violations });
    }

    let sym_checks: [(Assumption, &Vec<Mat>); 4] = [
        (Assumption::SymmetricR, &spec.state_weight),
        (Assumption::SymmetricRtil, &spec.state_weight_delayed),
        (Assumption::SymmetricNc, &spec.control_weight),
        (Assumption::SymmetricNctil, &spec.control_weight_delayed),
    ];
    for (id, arr) in sym_checks {
        for (s, m) in arr.iter().enumerate() {
            let asym = asymmetry(m);
            if asym > SYMMETRY_TOL {
                push(id, Some(s), asym);
            }
        }
    }
    let asym_m = asymmetry(&spec.terminal_weight);
    if asym_m > SYMMETRY_TOL {
        push(Assumption::SymmetricM, None, asym_m);
    }

    for s in 0..spec.steps() {
        let q = spec.running_state_weight(s);
        let lam = min_eigenvalue(&q);
        if lam < -PSD_TOL * q.amax().max(1.0) {
            push(Assumption::StateWeightPsd, Some(s), lam);
        }
        let lam = min_eigenvalue(&spec.control_weight_sum(s));
        if lam < epd {
            push(Assumption::ControlWeightPd, Some(s), lam);
        }
    }
    let lam = min_eigenvalue(&spec.terminal_weight);
    if lam < -PSD_TOL * spec.terminal_weight.amax().max(1.0) {
        push(Assumption::TerminalPsd, None, lam);
    }

    Ok(ValidationReport {
        ok: violations.is_empty(),
        violations,
    })
}
