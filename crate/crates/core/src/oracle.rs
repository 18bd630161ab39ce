//! Exact small-grid oracle on a scenario tree.
//!
//! Each step branches on the signs of the Brownian increments (`±√h` per
//! active noise component), so conditional expectations are finite
//! averages over descendants. The discrete Hamiltonian system of the
//! representative agent is assembled into one linear system and solved
//! directly; an independent brute-force minimizer of the expected cost
//! provides a second formulation of the same problem.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::ModelSpec;
use crate::nce::NceField;

const MAX_UNKNOWNS: usize = 6000;

/// Branching structure. Node `(s, w)` has children `w·b + c`, `c < b`.
/// Within a branch digit `c`, the low `idio` bits carry the idiosyncratic
/// increment signs and the next `common` bits the common ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub depth: usize,
    pub idio: usize,
    pub common: usize,
}

impl ScenarioTree {
    pub fn new(depth: usize, idio: usize, common: usize) -> Self {
        Self { depth, idio, common }
    }

    /// Branches on every noise component whose coefficient is not identically zero.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let idio = if spec.has_idiosyncratic_noise() { spec.dims.m } else { 0 };
        let common = if spec.has_common_noise() { spec.dims.d } else { 0 };
        Self::new(spec.steps(), idio, common)
    }

    pub fn branching(&self) -> usize {
        1 << (self.idio + self.common)
    }

    pub fn width(&self, level: usize) -> usize {
        self.branching().pow(level as u32)
    }

    pub fn node_count(&self) -> usize {
        (0..=self.depth).map(|s| self.width(s)).sum()
    }

    /// Ancestor of `w` (at some level) `back` levels up.
    pub fn ancestor(&self, w: usize, back: usize) -> usize {
        w / self.width(back)
    }

    /// Descendants of `w` `ahead` levels down, as a half-open word range.
    pub fn descendants(&self, w: usize, ahead: usize) -> std::ops::Range<usize> {
        let span = self.width(ahead);
        w * span..(w + 1) * span
    }

    /// Increments `(ΔW, ΔW0)` of branch digit `c` with step `h`.
    pub fn increments(&self, c: usize, h: f64, m: usize, d: usize) -> (Vector, Vector) {
        let r = h.sqrt();
        let sign = |bit: usize| if (c >> bit) & 1 == 1 { -r } else { r };
        let dw = Vector::from_fn(m, |i, _| if i < self.idio { sign(i) } else { 0.0 });
        let dw0 = Vector::from_fn(d, |j, _| if j < self.common { sign(self.idio + j) } else { 0.0 });
        (dw, dw0)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.depth != spec.steps() {
            return Err(Error::InvalidParameter(format!(
                "tree depth {} must equal the number of grid steps {}",
                self.depth,
                spec.steps()
            )));
        }
        if self.idio > spec.dims.m || self.common > spec.dims.d {
            return Err(dim_err("tree noise components", spec.dims.m, self.idio));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeResiduals {
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
    pub stationarity: f64,
    /// Stationarity residual per control node.
    pub stationarity_nodes: Vec<Vec<f64>>,
}

impl TreeResiduals {
    pub fn max(&self) -> f64 {
        self.forward.max(self.backward).max(self.terminal).max(self.stationarity)
    }
}

/// Node values by level: `x` and `y` on levels `0..=K`, `u` on `0..K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSolution {
    pub tree: ScenarioTree,
    pub step: f64,
    pub x: Vec<Vec<Vector>>,
    pub y: Vec<Vec<Vector>>,
    pub u: Vec<Vec<Vector>>,
    pub residuals: TreeResiduals,
}

impl TreeSolution {
    fn mean_of(levels: &[Vec<Vector>]) -> Vec<Vector> {
        levels
            .iter()
            .map(|lvl| {
                let mut acc = Vector::zeros(lvl[0].len());
                for v in lvl {
                    acc += v;
                }
                acc / lvl.len() as f64
            })
            .collect()
    }

    pub fn mean_x(&self) -> Vec<Vector> {
        Self::mean_of(&self.x)
    }

    pub fn mean_y(&self) -> Vec<Vector> {
        Self::mean_of(&self.y)
    }

    pub fn mean_u(&self) -> Vec<Vector> {
        Self::mean_of(&self.u)
    }

    /// `z_s(w) = E_s[y_{s+1} ΔWᵀ] / h` for idiosyncratic (then common) components.
    pub fn martingale_integrand(&self, s: usize, w: usize, m: usize, d: usize) -> Mat {
        let b = self.tree.branching();
        let n = self.y[0][0].len();
        let mut z = Mat::zeros(n, m + d);
        for c in 0..b {
            let (dw, dw0) = self.tree.increments(c, self.step, m, d);
            let y = &self.y[s + 1][w * b + c];
            for i in 0..m {
                z.column_mut(i).axpy(dw[i] / (b as f64 * self.step), y, 1.0);
            }
            for j in 0..d {
                z.column_mut(m + j).axpy(dw0[j] / (b as f64 * self.step), y, 1.0);
            }
        }
        z
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn forcing(spec: &ModelSpec, m0: Option<&NceField>, s: usize) -> Vector {
    m0.map_or_else(|| Vector::zeros(spec.dims.n), |f| f.m0[s].clone())
}

fn conditional_mean(tree: &ScenarioTree, level: &[Vector], w: usize, ahead: usize) -> Vector {
    let range = tree.descendants(w, ahead);
    let count = range.len() as f64;
    let mut acc = Vector::zeros(level[0].len());
    for v in &level[range] {
        acc += v;
    }
    acc / count
}

/// Evaluates every discrete equation at the given node values.
pub fn tree_residuals(
    spec: &ModelSpec,
    tree: &ScenarioTree,
    m0: Option<&NceField>,
    x: &[Vec<Vector>],
    y: &[Vec<Vector>],
    u: &[Vec<Vector>],
) -> TreeResiduals {
    let k = tree.depth;
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let b = tree.branching();
    let mut r = TreeResiduals {
        stationarity_nodes: vec![Vec::new(); k],
        ..Default::default()
    };
    r.forward = (&x[0][0] - &spec.initial).amax();
    for s in 0..k {
        let f = forcing(spec, m0, s);
        for w in 0..tree.width(s) {
            let x_lag = if s < p { spec.state_history[s].clone() } else { x[s - p][tree.ancestor(w, p)].clone() };
            let u_lag = if s < q { spec.control_history[s].clone() } else { u[s - q][tree.ancestor(w, q)].clone() };
            let drift = &spec.drift[s] * &x[s][w]
                + &spec.drift_delayed[s] * x_lag
                + &spec.input[s] * &u[s][w]
                + &spec.input_delayed[s] * u_lag
                + &f;
            for c in 0..b {
                let (dw, dw0) = tree.increments(c, h, spec.dims.m, spec.dims.d);
                let next = &x[s][w] + &drift * h + &spec.sigma[s] * dw + &spec.sigma0[s] * dw0;
                r.forward = r.forward.max((&x[s + 1][w * b + c] - next).amax());
            }

            let ey = conditional_mean(tree, &y[s + 1], w, 1);
            let mut back = &ey + (spec.drift[s].transpose() * &ey + spec.running_state_weight(s) * &x[s][w]) * h;
            if s + p < k {
                back += spec.drift_delayed[s + p].transpose() * conditional_mean(tree, &y[s + p + 1], w, p + 1) * h;
            }
            r.backward = r.backward.max((&y[s][w] - back).amax());

            let mut stat = spec.control_weight_sum(s) * &u[s][w] + spec.input[s].transpose() * &ey;
            if s + q < k {
                stat += spec.input_delayed[s + q].transpose() * conditional_mean(tree, &y[s + q + 1], w, q + 1);
            }
            let res = stat.amax();
            r.stationarity = r.stationarity.max(res);
            r.stationarity_nodes[s].push(res);
        }
    }
    for w in 0..tree.width(k) {
        r.terminal = r.terminal.max((&y[k][w] - &spec.terminal_weight * &x[k][w]).amax());
    }
    r
}

struct Layout {
    n: usize,
    k: usize,
    x_off: Vec<usize>,
    y_off: Vec<usize>,
    u_off: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(tree: &ScenarioTree, n: usize, k: usize) -> Self {
        let mut cursor = 0;
        let mut x_off = Vec::new();
        let mut y_off = Vec::new();
        let mut u_off = Vec::new();
        for s in 0..=tree.depth {
            x_off.push(cursor);
            cursor += tree.width(s) * n;
        }
        for s in 0..=tree.depth {
            y_off.push(cursor);
            cursor += tree.width(s) * n;
        }
        for s in 0..tree.depth {
            u_off.push(cursor);
            cursor += tree.width(s) * k;
        }
        Self {
            n,
            k,
            x_off,
            y_off,
            u_off,
            total: cursor,
        }
    }

    fn x(&self, s: usize, w: usize) -> usize {
        self.x_off[s] + w * self.n
    }

    fn y(&self, s: usize, w: usize) -> usize {
        self.y_off[s] + w * self.n
    }

    fn u(&self, s: usize, w: usize) -> usize {
        self.u_off[s] + w * self.k
    }
}

fn add_block(a: &mut DMatrix<f64>, row: usize, col: usize, block: &Mat, scale: f64) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            a[(row + i, col + j)] += scale * block[(i, j)];
        }
    }
}

fn add_identity(a: &mut DMatrix<f64>, row: usize, col: usize, n: usize, scale: f64) {
    for i in 0..n {
        a[(row + i, col + i)] += scale;
    }
}

/// Assembles and solves the discrete Hamiltonian system on the tree.
///
/// `m0 = None` drops the population forcing.
pub fn tree_solve_hamiltonian(spec: &ModelSpec, tree: &ScenarioTree, m0: Option<&NceField>) -> Result<TreeSolution> {
    tree.check(spec)?;
    let n = spec.dims.n;
    let kd = spec.dims.k;
    let k = tree.depth;
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let b = tree.branching();
    let layout = Layout::new(tree, n, kd);
    if layout.total > MAX_UNKNOWNS {
        return Err(Error::InvalidParameter(format!(
            "tree system has {} unknowns, above the limit {MAX_UNKNOWNS}",
            layout.total
        )));
    }
    let mut a = DMatrix::<f64>::zeros(layout.total, layout.total);
    let mut rhs = DVector::<f64>::zeros(layout.total);
    let eye = Mat::identity(n, n);

    // Forward rows sit at the x block of the child node; x_0 = a.
    add_identity(&mut a, layout.x(0, 0), layout.x(0, 0), n, 1.0);
    rhs.rows_mut(layout.x(0, 0), n).copy_from(&spec.initial);
    for s in 0..k {
        let phi = &eye + &spec.drift[s] * h;
        let f = forcing(spec, m0, s);
        for w in 0..tree.width(s) {
            let mut known = &f * h;
            if s < p {
                known += &spec.drift_delayed[s] * &spec.state_history[s] * h;
            }
            if s < q {
                known += &spec.input_delayed[s] * &spec.control_history[s] * h;
            }
            for c in 0..b {
                let row = layout.x(s + 1, w * b + c);
                let (dw, dw0) = tree.increments(c, h, spec.dims.m, spec.dims.d);
                add_identity(&mut a, row, row, n, 1.0);
                add_block(&mut a, row, layout.x(s, w), &phi, -1.0);
                add_block(&mut a, row, layout.u(s, w), &spec.input[s], -h);
                if s >= p {
                    add_block(&mut a, row, layout.x(s - p, tree.ancestor(w, p)), &spec.drift_delayed[s], -h);
                }
                if s >= q {
                    add_block(&mut a, row, layout.u(s - q, tree.ancestor(w, q)), &spec.input_delayed[s], -h);
                }
                let value = &known + &spec.sigma[s] * dw + &spec.sigma0[s] * dw0;
                rhs.rows_mut(row, n).copy_from(&value);
            }
        }
    }

    // Backward rows at the y block of each node.
    for w in 0..tree.width(k) {
        let row = layout.y(k, w);
        add_identity(&mut a, row, row, n, 1.0);
        add_block(&mut a, row, layout.x(k, w), &spec.terminal_weight, -1.0);
    }
    for s in 0..k {
        let phi_t = (&eye + &spec.drift[s] * h).transpose();
        let q_s = spec.running_state_weight(s);
        for w in 0..tree.width(s) {
            let row = layout.y(s, w);
            add_identity(&mut a, row, row, n, 1.0);
            add_block(&mut a, row, layout.x(s, w), &q_s, -h);
            let children = tree.descendants(w, 1);
            let share = 1.0 / children.len() as f64;
            for c in children {
                add_block(&mut a, row, layout.y(s + 1, c), &phi_t, -share);
            }
            if s + p < k {
                let at = spec.drift_delayed[s + p].transpose();
                let range = tree.descendants(w, p + 1);
                let share = 1.0 / range.len() as f64;
                for d in range {
                    add_block(&mut a, row, layout.y(s + p + 1, d), &at, -h * share);
                }
            }
        }
    }

    // Stationarity rows at the u block.
    for s in 0..k {
        let weight = spec.control_weight_sum(s);
        let bt = spec.input[s].transpose();
        for w in 0..tree.width(s) {
            let row = layout.u(s, w);
            add_block(&mut a, row, row, &weight, 1.0);
            let children = tree.descendants(w, 1);
            let share = 1.0 / children.len() as f64;
            for c in children {
                add_block(&mut a, row, layout.y(s + 1, c), &bt, share);
            }
            if s + q < k {
                let btt = spec.input_delayed[s + q].transpose();
                let range = tree.descendants(w, q + 1);
                let share = 1.0 / range.len() as f64;
                for d in range {
                    add_block(&mut a, row, layout.y(s + q + 1, d), &btt, share);
                }
            }
        }
    }

    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("tree Hamiltonian system (check the spec and grid)".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("tree Hamiltonian system produced non-finite values".into()));
    }
    let read = |off: &[usize], levels: usize, dim: usize| -> Vec<Vec<Vector>> {
        (0..levels)
            .map(|s| {
                (0..tree.width(s))
                    .map(|w| sol.rows(off[s] + w * dim, dim).into_owned())
                    .collect()
            })
            .collect()
    };
    let x = read(&layout.x_off, k + 1, n);
    let y = read(&layout.y_off, k + 1, n);
    let u = read(&layout.u_off, k, kd);
    let residuals = tree_residuals(spec, tree, m0, &x, &y, &u);
    Ok(TreeSolution {
        tree: *tree,
        step: h,
        x,
        y,
        u,
        residuals,
    })
}

fn add_columns(target: &mut Mat, col: usize, block: &Mat, scale: f64) {
    let mut view = target.columns_mut(col, block.ncols());
    view += block * scale;
}

/// Affine representation `x = S v + c` of every state node in the stacked
/// control vector `v`.
struct Sensitivity {
    lin: Vec<Vec<Mat>>,
    off: Vec<Vec<Vector>>,
}

fn control_index(tree: &ScenarioTree, kd: usize) -> (Vec<usize>, usize) {
    let mut offs = Vec::new();
    let mut cursor = 0;
    for s in 0..tree.depth {
        offs.push(cursor);
        cursor += tree.width(s) * kd;
    }
    (offs, cursor)
}

fn sensitivities(spec: &ModelSpec, tree: &ScenarioTree, m0: Option<&NceField>, u_offs: &[usize], total: usize) -> Sensitivity {
    let n = spec.dims.n;
    let kd = spec.dims.k;
    let k = tree.depth;
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let b = tree.branching();
    let mut lin: Vec<Vec<Mat>> = vec![vec![Mat::zeros(n, total)]];
    let mut off: Vec<Vec<Vector>> = vec![vec![spec.initial.clone()]];
    for s in 0..k {
        let phi = Mat::identity(n, n) + &spec.drift[s] * h;
        let f = forcing(spec, m0, s);
        let mut next_lin = Vec::with_capacity(tree.width(s + 1));
        let mut next_off = Vec::with_capacity(tree.width(s + 1));
        for w in 0..tree.width(s) {
            let mut l = &phi * &lin[s][w];
            let mut o = &phi * &off[s][w] + &f * h;
            let col = u_offs[s] + w * kd;
            add_columns(&mut l, col, &spec.input[s], h);
            if s < p {
                o += &spec.drift_delayed[s] * &spec.state_history[s] * h;
            } else {
                let anc = tree.ancestor(w, p);
                l += &spec.drift_delayed[s] * &lin[s - p][anc] * h;
                o += &spec.drift_delayed[s] * &off[s - p][anc] * h;
            }
            if s < q {
                o += &spec.input_delayed[s] * &spec.control_history[s] * h;
            } else {
                let col = u_offs[s - q] + tree.ancestor(w, q) * kd;
                add_columns(&mut l, col, &spec.input_delayed[s], h);
            }
            for c in 0..b {
                let (dw, dw0) = tree.increments(c, h, spec.dims.m, spec.dims.d);
                next_lin.push(l.clone());
                next_off.push(&o + &spec.sigma[s] * dw + &spec.sigma0[s] * dw0);
            }
        }
        lin.push(next_lin);
        off.push(next_off);
    }
    Sensitivity { lin, off }
}

/// Expected cost `E[½Σ h(...) + ½ x_Kᵀ M x_K]` on the tree for node controls `u`.
pub fn tree_expected_cost(spec: &ModelSpec, tree: &ScenarioTree, m0: Option<&NceField>, u: &[Vec<Vector>]) -> Result<f64> {
    tree.check(spec)?;
    let x = forward_on_tree(spec, tree, m0, u)?;
    let k = tree.depth;
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let quad = |m: &Mat, v: &Vector| v.dot(&(m * v));
    let mut total = 0.0;
    for s in 0..k {
        let width = tree.width(s);
        let prob = 1.0 / width as f64;
        for w in 0..width {
            let x_lag = if s < p { &spec.state_history[s] } else { &x[s - p][tree.ancestor(w, p)] };
            let u_lag = if s < q { &spec.control_history[s] } else { &u[s - q][tree.ancestor(w, q)] };
            total += 0.5 * h * prob
                * (quad(&spec.state_weight[s], &x[s][w])
                    + quad(&spec.state_weight_delayed[s], x_lag)
                    + quad(&spec.control_weight[s], &u[s][w])
                    + quad(&spec.control_weight_delayed[s], u_lag));
        }
    }
    let width = tree.width(k);
    for w in 0..width {
        total += 0.5 * quad(&spec.terminal_weight, &x[k][w]) / width as f64;
    }
    Ok(total)
}

/// States on the tree under given node controls.
pub fn forward_on_tree(
    spec: &ModelSpec,
    tree: &ScenarioTree,
    m0: Option<&NceField>,
    u: &[Vec<Vector>],
) -> Result<Vec<Vec<Vector>>> {
    let k = tree.depth;
    if u.len() != k || (0..k).any(|s| u[s].len() != tree.width(s)) {
        return Err(dim_err("tree controls", k, u.len()));
    }
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let b = tree.branching();
    let mut x: Vec<Vec<Vector>> = vec![vec![spec.initial.clone()]];
    for s in 0..k {
        let f = forcing(spec, m0, s);
        let mut next = Vec::with_capacity(tree.width(s + 1));
        for w in 0..tree.width(s) {
            let x_lag = if s < p { spec.state_history[s].clone() } else { x[s - p][tree.ancestor(w, p)].clone() };
            let u_lag = if s < q { spec.control_history[s].clone() } else { u[s - q][tree.ancestor(w, q)].clone() };
            let drift = &spec.drift[s] * &x[s][w]
                + &spec.drift_delayed[s] * x_lag
                + &spec.input[s] * &u[s][w]
                + &spec.input_delayed[s] * u_lag
                + &f;
            for c in 0..b {
                let (dw, dw0) = tree.increments(c, h, spec.dims.m, spec.dims.d);
                next.push(&x[s][w] + &drift * h + &spec.sigma[s] * dw + &spec.sigma0[s] * dw0);
            }
        }
        x.push(next);
    }
    Ok(x)
}

/// Costate on the tree implied by the states through the backward equations.
fn backward_on_tree(spec: &ModelSpec, tree: &ScenarioTree, x: &[Vec<Vector>]) -> Vec<Vec<Vector>> {
    let k = tree.depth;
    let p = spec.state_lag();
    let h = spec.grid.step;
    let mut y: Vec<Vec<Vector>> = (0..=k).map(|s| vec![Vector::zeros(spec.dims.n); tree.width(s)]).collect();
    for w in 0..tree.width(k) {
        y[k][w] = &spec.terminal_weight * &x[k][w];
    }
    for s in (0..k).rev() {
        for w in 0..tree.width(s) {
            let ey = conditional_mean(tree, &y[s + 1], w, 1);
            let mut v = &ey + (spec.drift[s].transpose() * &ey + spec.running_state_weight(s) * &x[s][w]) * h;
            if s + p < k {
                v += spec.drift_delayed[s + p].transpose() * conditional_mean(tree, &y[s + p + 1], w, p + 1) * h;
            }
            y[s][w] = v;
        }
    }
    y
}

/// Minimizes the expected discrete cost over all node controls by solving
/// the normal equations of the convex quadratic directly.
pub fn brute_force_optimize(spec: &ModelSpec, tree: &ScenarioTree, m0: Option<&NceField>) -> Result<TreeSolution> {
    tree.check(spec)?;
    let kd = spec.dims.k;
    let k = tree.depth;
    let (p, q) = (spec.state_lag(), spec.control_lag());
    let h = spec.grid.step;
    let (u_offs, total) = control_index(tree, kd);
    if total > MAX_UNKNOWNS {
        return Err(Error::InvalidParameter(format!("{total} control unknowns exceed {MAX_UNKNOWNS}")));
    }
    let sens = sensitivities(spec, tree, m0, &u_offs, total);

    let mut hess = DMatrix::<f64>::zeros(total, total);
    let mut grad = DVector::<f64>::zeros(total);
    // Adds weight · E-term ½(Sv + c)ᵀ Q (Sv + c).
    let mut add_state = |lin: &Mat, off: &Vector, weight: &Mat, scale: f64| {
        let ql = weight * lin;
        hess.gemm_tr(scale, lin, &ql, 1.0);
        grad.gemv_tr(scale, lin, &(weight * off), 1.0);
    };
    for s in 0..k {
        let width = tree.width(s);
        let prob = 1.0 / width as f64;
        for w in 0..width {
            add_state(&sens.lin[s][w], &sens.off[s][w], &spec.state_weight[s], h * prob);
            if s >= p {
                let anc = tree.ancestor(w, p);
                add_state(&sens.lin[s - p][anc], &sens.off[s - p][anc], &spec.state_weight_delayed[s], h * prob);
            }
        }
    }
    let width = tree.width(k);
    for w in 0..width {
        add_state(&sens.lin[k][w], &sens.off[k][w], &spec.terminal_weight, 1.0 / width as f64);
    }
    for s in 0..k {
        let width = tree.width(s);
        let prob = 1.0 / width as f64;
        for w in 0..width {
            let col = u_offs[s] + w * kd;
            let nw = &spec.control_weight[s] * (h * prob);
            for i in 0..kd {
                for j in 0..kd {
                    hess[(col + i, col + j)] += nw[(i, j)];
                }
            }
            if s >= q {
                let col = u_offs[s - q] + tree.ancestor(w, q) * kd;
                let nt = &spec.control_weight_delayed[s] * (h * prob);
                for i in 0..kd {
                    for j in 0..kd {
                        hess[(col + i, col + j)] += nt[(i, j)];
                    }
                }
            }
        }
    }

    let chol = Cholesky::new(hess).ok_or_else(|| {
        Error::Assumption("expected-cost Hessian is not positive definite".into())
    })?;
    let v = chol.solve(&(-grad));
    let u: Vec<Vec<Vector>> = (0..k)
        .map(|s| (0..tree.width(s)).map(|w| v.rows(u_offs[s] + w * kd, kd).into_owned()).collect())
        .collect();
    let x = forward_on_tree(spec, tree, m0, &u)?;
    let y = backward_on_tree(spec, tree, &x);
    let residuals = tree_residuals(spec, tree, m0, &x, &y, &u);
    Ok(TreeSolution {
        tree: *tree,
        step: h,
        x,
        y,
        u,
        residuals,
    })
}

/// Initial data split `a = a1 + a2`, `ξ = ξ1 + ξ2` (one sample per history node).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub a1: Vector,
    pub a2: Vector,
    pub xi1: Vec<Vector>,
    pub xi2: Vec<Vector>,
}

/// Solves the full problem and its two parts (idiosyncratic noise with
/// control history and no population forcing; common noise with the
/// forcing and zero control history) and returns the largest
/// `|x - (x1 + x2)| + |y - (y1 + y2)|` over matched nodes.
pub fn decomposition_check(spec: &ModelSpec, m0: Option<&NceField>, split: &Split) -> Result<f64> {
    let n = spec.dims.n;
    let p = spec.state_lag();
    if split.a1.len() != n || split.a2.len() != n {
        return Err(dim_err("split initial state", n, split.a1.len().max(split.a2.len())));
    }
    if split.xi1.len() != p || split.xi2.len() != p || split.xi1.iter().chain(&split.xi2).any(|v| v.len() != n) {
        return Err(dim_err("split history", p, split.xi1.len()));
    }
    let tol = 1e-12 * (1.0 + spec.initial.amax());
    if (&split.a1 + &split.a2 - &spec.initial).amax() > tol {
        return Err(Error::InvalidParameter("a1 + a2 differs from a".into()));
    }
    for s in 0..p {
        if (&split.xi1[s] + &split.xi2[s] - &spec.state_history[s]).amax() > tol {
            return Err(Error::InvalidParameter("xi1 + xi2 differs from xi".into()));
        }
    }

    let full_tree = ScenarioTree::for_spec(spec);
    let full = tree_solve_hamiltonian(spec, &full_tree, m0)?;

    let mut part1 = spec.clone();
    part1.initial = split.a1.clone();
    part1.state_history = split.xi1.clone();
    for s in part1.sigma0.iter_mut() {
        s.fill(0.0);
    }
    let tree1 = ScenarioTree::new(full_tree.depth, full_tree.idio, 0);
    let sol1 = tree_solve_hamiltonian(&part1, &tree1, None)?;

    let mut part2 = spec.clone();
    part2.initial = split.a2.clone();
    part2.state_history = split.xi2.clone();
    for v in part2.control_history.iter_mut() {
        v.fill(0.0);
    }
    for s in part2.sigma.iter_mut() {
        s.fill(0.0);
    }
    let tree2 = ScenarioTree::new(full_tree.depth, 0, full_tree.common);
    let sol2 = tree_solve_hamiltonian(&part2, &tree2, m0)?;

    let b = full_tree.branching();
    let idio_mask = (1usize << full_tree.idio) - 1;
    let (b1, b2) = (tree1.branching(), tree2.branching());
    let mut worst: f64 = 0.0;
    for s in 0..=full_tree.depth {
        for w in 0..full_tree.width(s) {
            let (mut w1, mut w2, mut rest) = (0usize, 0usize, w);
            let mut place1 = 1usize;
            let mut place2 = 1usize;
            for _ in 0..s {
                let digit = rest % b;
                rest /= b;
                w1 += (digit & idio_mask) * place1;
                w2 += (digit >> full_tree.idio) * place2;
                place1 *= b1;
                place2 *= b2;
            }
            let dx = (&full.x[s][w] - &sol1.x[s][w1] - &sol2.x[s][w2]).amax();
            let dy = (&full.y[s][w] - &sol1.y[s][w1] - &sol2.y[s][w2]).amax();
            worst = worst.max(dx + dy);
        }
    }
    Ok(worst)
}
