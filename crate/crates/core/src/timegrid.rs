//! Uniform time grid with integer delay offsets and the path containers
//! used throughout the crate.
//!
//! Node `s` sits at `t = s·h`. Negative indices address history segments
//! (`-p..=-1` for the state, `-q..=-1` for the control), and costate paths
//! read as zero beyond the horizon node `K`.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DIVISIBILITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub step: f64,
    /// Number of steps `K`, so that `K·h = T`.
    pub steps: usize,
    /// State delay in steps, `p = δ/h`.
    pub state_lag: usize,
    /// Control delay in steps, `q = θ/h`.
    pub control_lag: usize,
}

fn whole_steps(what: &'static str, value: f64, step: f64) -> Result<usize> {
    let ratio = value / step;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > DIVISIBILITY_TOL * rounded.max(1.0) {
        return Err(Error::Divisibility { what, value, step });
    }
    Ok(rounded as usize)
}

/// Builds the grid for horizon `T`, step `h`, state delay `δ` and control delay `θ`.
pub fn build_grid(horizon: f64, step: f64, delta: f64, theta: f64) -> Result<TimeGrid> {
    for (name, v) in [("T", horizon), ("h", step), ("delta", delta), ("theta", theta)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(TimeGrid {
        horizon,
        step,
        steps: whole_steps("T", horizon, step)?,
        state_lag: whole_steps("delta", delta, step)?,
        control_lag: whole_steps("theta", theta, step)?,
    })
}

impl TimeGrid {
    pub fn time(&self, node: isize) -> f64 {
        node as f64 * self.step
    }

    pub fn delta(&self) -> f64 {
        self.state_lag as f64 * self.step
    }

    pub fn theta(&self) -> f64 {
        self.control_lag as f64 * self.step
    }

    /// Length of the zero-padded anticipation tail, `max(p, q)`.
    pub fn pad(&self) -> usize {
        self.state_lag.max(self.control_lag)
    }

    /// Same delays and horizon with the step divided by `factor`.
    pub fn refined(&self, factor: usize) -> Result<TimeGrid> {
        build_grid(self.horizon, self.step / factor as f64, self.delta(), self.theta())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathRole {
    State,
    Control,
    Costate,
}

/// Vector-valued samples on the grid, including the history segment
/// (state/control) or the zero anticipation tail (costate).
#[derive(Clone, Debug, PartialEq)]
pub struct DelayedPath {
    role: PathRole,
    first: isize,
    last: isize,
    pad: usize,
    values: Vec<DVector<f64>>,
    zero: DVector<f64>,
}

impl DelayedPath {
    /// Assembles a path from its history and its values on `0..`.
    ///
    /// State paths carry `p` history samples and values on `0..=K`; control
    /// paths carry `q` history samples and values on `0..K`; costates have no
    /// history, values on `0..=K` and read zero on `K+1..=K+pad`.
    pub fn new(
        role: PathRole,
        grid: &TimeGrid,
        history: Vec<DVector<f64>>,
        values: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let k = grid.steps as isize;
        let (expected_hist, last) = match role {
            PathRole::State => (grid.state_lag, k),
            PathRole::Control => (grid.control_lag, k - 1),
            PathRole::Costate => (0, k),
        };
        if history.len() != expected_hist {
            return Err(crate::error::dim_err(
                format!("{role:?} history"),
                expected_hist,
                history.len(),
            ));
        }
        if values.len() as isize != last + 1 {
            return Err(crate::error::dim_err(
                format!("{role:?} values"),
                last + 1,
                values.len(),
            ));
        }
        let dim = values
            .first()
            .or(history.first())
            .map(|v| v.len())
            .unwrap_or(0);
        let mut all = history;
        all.extend(values);
        if let Some(bad) = all.iter().find(|v| v.len() != dim) {
            return Err(crate::error::dim_err("path component", dim, bad.len()));
        }
        let pad = if role == PathRole::Costate { grid.pad() } else { 0 };
        Ok(Self {
            role,
            first: -(expected_hist as isize),
            last,
            pad,
            values: all,
            zero: DVector::zeros(dim),
        })
    }

    pub fn role(&self) -> PathRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.zero.len()
    }

    /// First stored index (`-p`, `-q` or `0`).
    pub fn first_index(&self) -> isize {
        self.first
    }

    /// Last index with stored (not padded) data.
    pub fn last_index(&self) -> isize {
        self.last
    }

    /// Last readable index, including the zero tail of a costate.
    pub fn readable_end(&self) -> isize {
        self.last + self.pad as isize
    }

    pub fn get(&self, index: isize) -> Result<&DVector<f64>> {
        if index < self.first || index > self.readable_end() {
            return Err(Error::Range {
                role: self.role,
                index,
            });
        }
        if index > self.last {
            return Ok(&self.zero);
        }
        Ok(&self.values[(index - self.first) as usize])
    }

    /// Unchecked read for hot loops; panics outside the readable range.
    pub fn at(&self, index: isize) -> &DVector<f64> {
        if index > self.last && index <= self.readable_end() {
            return &self.zero;
        }
        &self.values[(index - self.first) as usize]
    }

    /// Values on `0..=last`.
    pub fn forward_values(&self) -> &[DVector<f64>] {
        &self.values[(-self.first) as usize..]
    }

    pub fn history(&self) -> &[DVector<f64>] {
        &self.values[..(-self.first) as usize]
    }

    /// Sup norm of the difference on the common stored range.
    pub fn sup_distance(&self, other: &DelayedPath) -> f64 {
        let lo = self.first.max(other.first);
        let hi = self.last.min(other.last);
        (lo..=hi)
            .map(|s| (self.at(s) - other.at(s)).amax())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..self.dim()).map(|c| format!("c{c}")));
        w.write_record(&header)?;
        for s in self.first..=self.readable_end() {
            let mut row = vec![format!("{}", grid.time(s))];
            row.extend(self.at(s).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, grid: &TimeGrid, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(grid, std::io::BufWriter::new(file))
    }
}

/// Read-only view of a path displaced by a signed number of steps:
/// `view.get(s)` reads `path[s + steps]`.
#[derive(Clone, Copy, Debug)]
pub struct ShiftedView<'a> {
    path: &'a DelayedPath,
    steps: isize,
}

pub fn shift<'a>(path: &'a DelayedPath, grid: &TimeGrid, steps: isize) -> Result<ShiftedView<'a>> {
    if steps.unsigned_abs() > grid.pad() {
        return Err(Error::InvalidParameter(format!(
            "shift of {steps} steps exceeds max(p, q) = {}",
            grid.pad()
        )));
    }
    Ok(ShiftedView { path, steps })
}

impl<'a> ShiftedView<'a> {
    pub fn get(&self, index: isize) -> Result<&'a DVector<f64>> {
        self.path.get(index + self.steps)
    }

    pub fn steps(&self) -> isize {
        self.steps
    }

    /// Materializes the view back into a path of the same role and range.
    /// Reads falling outside the source path are reported as range errors.
    pub fn to_path(&self, grid: &TimeGrid) -> Result<DelayedPath> {
        let p = self.path;
        let hist = (p.first..0).map(|s| self.get(s).cloned()).collect::<Result<Vec<_>>>()?;
        let vals = (0..=p.last).map(|s| self.get(s).cloned()).collect::<Result<Vec<_>>>()?;
        DelayedPath::new(p.role, grid, hist, vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(1.0, 0.25, 0.5, 0.25).unwrap();
        assert_eq!((g.steps, g.state_lag, g.control_lag), (4, 2, 1));
        assert!(matches!(
            build_grid(1.0, 0.3, 0.5, 0.25),
            Err(Error::Divisibility { .. })
        ));
        let g = build_grid(2.0, 0.5, 0.5, 0.5).unwrap();
        assert_eq!((g.steps, g.state_lag, g.control_lag), (4, 1, 1));
        assert!(build_grid(1.0, -0.1, 0.5, 0.5).is_err());
        assert!(build_grid(1.0, 0.5, 0.25, 0.5).is_err());
    }

    fn sample_grid() -> TimeGrid {
        build_grid(1.0, 0.25, 0.5, 0.25).unwrap()
    }

    fn state_path(g: &TimeGrid) -> DelayedPath {
        let hist = vec![v(-2.0), v(-1.0)];
        let vals = (0..=g.steps).map(|s| v(s as f64)).collect();
        DelayedPath::new(PathRole::State, g, hist, vals).unwrap()
    }

    #[test]
    fn shift_examples() {
        let g = sample_grid();
        let x = state_path(&g);
        let view = shift(&x, &g, -(g.state_lag as isize)).unwrap();
        assert_eq!(view.get(0).unwrap()[0], -2.0);

        let y = DelayedPath::new(
            PathRole::Costate,
            &g,
            vec![],
            (0..=g.steps).map(|s| v(1.0 + s as f64)).collect(),
        )
        .unwrap();
        let ahead = shift(&y, &g, g.control_lag as isize).unwrap();
        assert_eq!(ahead.get(g.steps as isize).unwrap()[0], 0.0);

        let u = DelayedPath::new(
            PathRole::Control,
            &g,
            vec![v(9.0)],
            (0..g.steps).map(|s| v(10.0 + s as f64)).collect(),
        )
        .unwrap();
        let lag = shift(&u, &g, -(g.control_lag as isize)).unwrap();
        assert_eq!(lag.get(g.control_lag as isize).unwrap()[0], 10.0);
    }

    #[test]
    fn forward_shift_on_state_is_range_error() {
        let g = sample_grid();
        let x = state_path(&g);
        let ahead = shift(&x, &g, 1).unwrap();
        assert!(matches!(
            ahead.get(g.steps as isize),
            Err(Error::Range { role: PathRole::State, .. })
        ));
        assert!(shift(&x, &g, 3).is_err());
    }

    #[test]
    fn costate_tail_is_zero() {
        let g = sample_grid();
        let y = DelayedPath::new(
            PathRole::Costate,
            &g,
            vec![],
            (0..=g.steps).map(|_| v(3.0)).collect(),
        )
        .unwrap();
        for s in g.steps as isize + 1..=y.readable_end() {
            assert_eq!(y.get(s).unwrap()[0], 0.0);
        }
        assert!(y.get(y.readable_end() + 1).is_err());
    }

    #[test]
    fn csv_includes_history_times() {
        let g = sample_grid();
        let mut buf = Vec::new();
        state_path(&g).write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first_row = text.lines().nth(1).unwrap();
        assert!(first_row.starts_with("-0.5,"));
        assert_eq!(text.lines().count(), 1 + g.state_lag + g.steps + 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_round_trip_on_horizon(vals in proptest::collection::vec(-5.0f64..5.0, 9), s in -2isize..=2) {
                let g = build_grid(2.0, 0.25, 0.5, 0.25).unwrap();
                let y = DelayedPath::new(
                    PathRole::Costate,
                    &g,
                    vec![],
                    vals.iter().map(|&x| v(x)).collect(),
                ).unwrap();
                let there = shift(&y, &g, s).unwrap();
                for node in 0..=g.steps as isize {
                    let target = node - s;
                    if target < 0 || target > y.readable_end() {
                        continue;
                    }
                    let back = there.get(target).unwrap();
                    prop_assert_eq!(back, y.get(node).unwrap());
                }
            }
        }
    }
}
