//! Consistency field `m0`: the deterministic limit of the population
//! control average `(1/(N-1)) Σ_{j≠i} Bhat u^j_{t-θ}` under zero common noise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::det_solvers::{
    solve_afbodde, solve_mean_case1, MeanMode, MeanPair, PicardOptions, PicardReport,
};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::ModelSpec;
use crate::timegrid::TimeGrid;

/// Field per cell `0..K`, split into the idiosyncratic-mean part `sigma1`
/// and the population part `sigma2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceField {
    pub m0: Vec<Vector>,
    pub sigma1: Vec<Vector>,
    pub sigma2: Vec<Vector>,
}

impl NceField {
    pub fn zeros(n: usize, cells: usize) -> Self {
        Self {
            m0: vec![Vector::zeros(n); cells],
            sigma1: vec![Vector::zeros(n); cells],
            sigma2: vec![Vector::zeros(n); cells],
        }
    }

    pub fn from_parts(sigma1: Vec<Vector>, sigma2: Vec<Vector>) -> Result<Self> {
        if sigma1.len() != sigma2.len() {
            return Err(crate::error::dim_err("NCE parts", sigma1.len(), sigma2.len()));
        }
        let m0 = sigma1.iter().zip(&sigma2).map(|(a, b)| a + b).collect();
        Ok(Self { m0, sigma1, sigma2 })
    }

    pub fn cells(&self) -> usize {
        self.m0.len()
    }

    /// Largest `|m0 - (sigma1 + sigma2)|` over the grid.
    pub fn additivity_defect(&self) -> f64 {
        self.m0
            .iter()
            .zip(self.sigma1.iter().zip(&self.sigma2))
            .map(|(m, (a, b))| (m - (a + b)).amax())
            .fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &NceField) -> f64 {
        crate::linalg::sup_distance(&self.m0, &other.m0)
    }

    /// Columns: `t`, `m0_i`, `sigma1_i`, `sigma2_i`.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let n = self.m0.first().map_or(0, |v| v.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for name in ["m0", "sigma1", "sigma2"] {
            header.extend((0..n).map(|i| format!("{name}_{i}")));
        }
        w.write_record(&header)?;
        for s in 0..self.cells() {
            let mut row = vec![grid.time(s as isize).to_string()];
            for part in [&self.m0, &self.sigma1, &self.sigma2] {
                row.extend(part[s].iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, grid: &TimeGrid, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(grid, std::fs::File::create(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NceOptions {
    /// Include the population term `Bhat u²_{t-θ}` in the second system.
    /// Disabling it makes the field linear in `Bhat`.
    pub population_feedback: bool,
}

impl Default for NceOptions {
    fn default() -> Self {
        Self {
            population_feedback: true,
        }
    }
}

/// Everything produced by the general construction.
#[derive(Clone, Debug)]
pub struct NceSolution {
    pub field: NceField,
    pub mean1: MeanPair,
    pub mean2: MeanPair,
    pub reports: [PicardReport; 2],
}

fn lagged_population_term(spec: &ModelSpec, u: &MeanPair, history: bool) -> Vec<Vector> {
    let q = spec.control_lag() as isize;
    (0..spec.steps())
        .map(|s| {
            let lag = s as isize - q;
            if lag < 0 && !history {
                Vector::zeros(spec.dims.n)
            } else {
                &spec.input_population[s] * u.u.at(lag)
            }
        })
        .collect()
}

/// General construction from the two expectation-level systems.
///
/// `sigma1_s = Bhat_s ū¹_{s-q}` with `ū¹` the mean control of the
/// idiosyncratic system (history `η` for `s < q`); `sigma2_s = Bhat_s u²_{s-q}`
/// with `u²` the control of the population system forced by `sigma1`.
pub fn compute_m0_general(spec: &ModelSpec, picard: &PicardOptions, opts: &NceOptions) -> Result<NceSolution> {
    let (mean1, r1) = solve_afbodde(spec, None, MeanMode::Eq12, picard)?;
    let sigma1 = lagged_population_term(spec, &mean1, true);

    let (mean2, r2) = if opts.population_feedback {
        solve_afbodde(spec, Some(&sigma1), MeanMode::Eq13, picard)?
    } else {
        let mut inputs = crate::det_solvers::MeanInputs::for_mode(spec, MeanMode::Eq13, Some(&sigma1))?;
        inputs.lag_coupling = None;
        crate::det_solvers::solve_mean_system(spec, &inputs, picard)?
    };
    let sigma2 = if opts.population_feedback {
        lagged_population_term(spec, &mean2, false)
    } else {
        vec![Vector::zeros(spec.dims.n); spec.steps()]
    };
    Ok(NceSolution {
        field: NceField::from_parts(sigma1, sigma2)?,
        mean1,
        mean2,
        reports: [r1, r2],
    })
}

/// Field for the `Atil = Btil = 0` structure from the consistent mean of
/// the decoupled system. The whole field is reported as `sigma1`.
pub fn compute_m0_case1(spec: &ModelSpec, picard: &PicardOptions) -> Result<(NceField, PicardReport)> {
    if !spec.is_case_one() {
        return Err(Error::Structure("Atil and Btil must vanish".into()));
    }
    let (mean, report) = solve_mean_case1(spec, picard)?;
    let zeros = vec![Vector::zeros(spec.dims.n); spec.steps()];
    Ok((NceField::from_parts(mean.m0, zeros)?, report))
}
