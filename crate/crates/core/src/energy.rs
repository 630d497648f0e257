//! Discretised path energy of mixture trajectories and constrained optimisers
//! over global and per-cell schedule classes.
//!
//! Cells are the flattened `C x H x W` entries of a [`DomainPair`]. On the
//! uniform grid `t_k = k / M` the energy of a path is
//!
//! `sum_k h a_{k+1/2} ((d_{k+1} - d_k) / h)^2 + sum_k w_k h m (d_k - u_k)^2`
//!
//! with `a_{k+1/2}` the interval average of the metric and `w_k` trapezoid
//! weights. The objective is a convex quadratic in the path, minimised by
//! accelerated projected gradient with an exact projection onto monotone
//! paths in `[0, 1]` with pinned endpoints.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::DomainPair;

pub const DEFAULT_GRID: usize = 128;
pub const DEFAULT_RESTARTS: usize = 5;
const DEGENERATE_CONTRAST: f64 = 1e-12;

/// Kinetic metric, quadratic potential and grid for every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    /// Metric `a_{c,p}(t_k)`, one row per cell.
    pub a: Array2<f64>,
    /// Potential curvature `m_{c,p}`.
    pub mass: Array1<f64>,
    /// Moving potential target `u_{c,p}(t_k)`, one row per cell.
    pub target: Array2<f64>,
}

impl EnergySpec {
    pub fn new(a: Array2<f64>, mass: Array1<f64>, target: Array2<f64>) -> Result<Self> {
        let spec = Self { a, mass, target };
        spec.validate()?;
        Ok(spec)
    }

    /// Same metric, curvature and target function for `cells` cells.
    pub fn homogeneous(cells: usize, grid: usize, a: f64, mass: f64, target: impl Fn(f64) -> f64) -> Result<Self> {
        let row = Array1::from_shape_fn(grid + 1, |k| target(k as f64 / grid as f64));
        Self::new(
            Array2::from_elem((cells, grid + 1), a),
            Array1::from_elem(cells, mass),
            Array2::from_shape_fn((cells, grid + 1), |(_, k)| row[k]),
        )
    }

    pub fn grid(&self) -> usize {
        self.a.ncols() - 1
    }

    pub fn cells(&self) -> usize {
        self.a.nrows()
    }

    fn validate(&self) -> Result<()> {
        if self.a.ncols() < 2 {
            return Err(Error::param("M", "grid needs at least one interval"));
        }
        if self.a.dim() != self.target.dim() || self.mass.len() != self.a.nrows() {
            return Err(Error::dims(self.a.shape(), self.target.shape()));
        }
        if self.a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::param("a", "kinetic metric must be positive"));
        }
        if self.mass.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("m", "curvature must be non-negative"));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("u", "non-finite potential target"));
        }
        Ok(())
    }

    fn check_pair(&self, pair: &DomainPair) -> Result<()> {
        if pair.x_src.len() != self.cells() {
            return Err(Error::dims(&[self.cells()], &[pair.x_src.len()]));
        }
        Ok(())
    }

    /// Quadratic model of one cell.
    fn cell(&self, c: usize, x_tgt: f64, contrast: f64) -> CellProblem<'_> {
        CellProblem {
            a: self.a.row(c),
            u: self.target.row(c),
            mass: self.mass[c],
            x_tgt,
            contrast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathClass {
    Global,
    Pixelwise,
}

/// Trajectories `Lambda(t_k)`, one row per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePath {
    pub values: Array2<f64>,
    pub class: PathClass,
}

impl SchedulePath {
    /// The shared path `eta` replicated for every cell.
    pub fn global(eta: &Array1<f64>, cells: usize) -> Self {
        Self {
            values: Array2::from_shape_fn((cells, eta.len()), |(_, k)| eta[k]),
            class: PathClass::Global,
        }
    }

    pub fn linear(cells: usize, grid: usize, class: PathClass) -> Self {
        Self {
            values: Array2::from_shape_fn((cells, grid + 1), |(_, k)| k as f64 / grid as f64),
            class,
        }
    }

    /// Every violated invariant, empty when feasible.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let last = self.values.ncols() - 1;
        for (c, row) in self.values.outer_iter().enumerate() {
            if row[0] != 0.0 {
                out.push(format!("cell {c}: Lambda(0) = {} != 0", row[0]));
            }
            if row[last] != 1.0 {
                out.push(format!("cell {c}: Lambda(1) = {} != 1", row[last]));
            }
            if let Some(k) = (0..last).find(|&k| row[k + 1] < row[k]) {
                out.push(format!("cell {c}: decreasing at k = {k}"));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                out.push(format!("cell {c}: value outside [0, 1]"));
            }
        }
        if self.class == PathClass::Global {
            let first = self.values.row(0);
            if self.values.outer_iter().any(|r| r != first) {
                out.push("global path differs across cells".into());
            }
        }
        out
    }
}

struct CellProblem<'a> {
    a: ArrayView1<'a, f64>,
    u: ArrayView1<'a, f64>,
    mass: f64,
    x_tgt: f64,
    contrast: f64,
}

impl CellProblem<'_> {
    fn grid(&self) -> usize {
        self.a.len() - 1
    }

    fn trapezoid(&self, k: usize) -> f64 {
        if k == 0 || k == self.grid() {
            0.5
        } else {
            1.0
        }
    }

    fn kinetic(&self, path: ArrayView1<f64>) -> f64 {
        let m = self.grid();
        let h = 1.0 / m as f64;
        (0..m)
            .map(|k| {
                let a_mid = 0.5 * (self.a[k] + self.a[k + 1]);
                let v = self.contrast * (path[k + 1] - path[k]) / h;
                h * a_mid * v * v
            })
            .sum()
    }

    fn potential(&self, path: ArrayView1<f64>) -> f64 {
        let m = self.grid();
        let h = 1.0 / m as f64;
        (0..=m)
            .map(|k| {
                let e = self.x_tgt + path[k] * self.contrast - self.u[k];
                self.trapezoid(k) * h * self.mass * e * e
            })
            .sum()
    }

    fn energy(&self, path: ArrayView1<f64>) -> f64 {
        self.kinetic(path) + self.potential(path)
    }

    /// Gradient with respect to every grid value (endpoints included).
    fn add_gradient(&self, path: ArrayView1<f64>, grad: &mut [f64]) {
        let m = self.grid();
        let h = 1.0 / m as f64;
        let d2 = self.contrast * self.contrast;
        for k in 0..m {
            let a_mid = 0.5 * (self.a[k] + self.a[k + 1]);
            let g = 2.0 * a_mid * d2 * (path[k + 1] - path[k]) / h;
            grad[k + 1] += g;
            grad[k] -= g;
        }
        for k in 0..=m {
            let e = self.x_tgt + path[k] * self.contrast - self.u[k];
            grad[k] += 2.0 * self.trapezoid(k) * h * self.mass * e * self.contrast;
        }
    }

    /// Gershgorin bound on the Hessian's largest eigenvalue.
    fn lipschitz(&self) -> f64 {
        let m = self.grid();
        let h = 1.0 / m as f64;
        let d2 = self.contrast * self.contrast;
        (0..=m)
            .map(|k| {
                let left = if k > 0 { 0.5 * (self.a[k - 1] + self.a[k]) } else { 0.0 };
                let right = if k < m { 0.5 * (self.a[k] + self.a[k + 1]) } else { 0.0 };
                4.0 * (left + right) * d2 / h + 2.0 * self.trapezoid(k) * h * self.mass * d2
            })
            .fold(0.0, f64::max)
    }
}

/// Pool-adjacent-violators: least-squares nondecreasing fit.
pub fn isotonic_regression(values: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(values.len());
    let mut sizes: Vec<usize> = Vec::with_capacity(values.len());
    for &v in values {
        means.push(v);
        sizes.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, s2) = (means.pop().unwrap(), sizes.pop().unwrap());
            let (m1, s1) = (means.pop().unwrap(), sizes.pop().unwrap());
            let s = s1 + s2;
            means.push((m1 * s1 as f64 + m2 * s2 as f64) / s as f64);
            sizes.push(s);
        }
    }
    means
        .iter()
        .zip(&sizes)
        .flat_map(|(&m, &s)| std::iter::repeat_n(m, s))
        .collect()
}

/// Euclidean projection onto nondecreasing paths in `[0, 1]` with
/// `path[0] = 0` and `path[M] = 1`.
pub fn project_monotone(path: &mut [f64]) {
    let m = path.len() - 1;
    let interior = isotonic_regression(&path[1..m]);
    for (p, v) in path[1..m].iter_mut().zip(interior) {
        *p = v.clamp(0.0, 1.0);
    }
    path[0] = 0.0;
    path[m] = 1.0;
}

/// Outcome of one constrained minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub path: SchedulePath,
    pub energy: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Stopping rule for the projected-gradient solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Tolerance on the projected-gradient norm.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200_000,
            tol: 1e-6,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

/// Random feasible starting path (sorted uniforms).
fn random_start<R: Rng + ?Sized>(grid: usize, rng: &mut R) -> Vec<f64> {
    let mut interior: Vec<f64> = (1..grid).map(|_| rng.random::<f64>()).collect();
    interior.sort_by(f64::total_cmp);
    let mut p = vec![0.0];
    p.extend(interior);
    p.push(1.0);
    p
}

/// FISTA with monotone projection and adaptive restart on a convex quadratic
/// given by `energy` and `gradient`.
fn minimise(
    start: Vec<f64>,
    lipschitz: f64,
    opts: &SolverOptions,
    energy: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64], &mut [f64]),
) -> (Vec<f64>, f64, bool, usize) {
    let n = start.len();
    let step = 1.0 / lipschitz;
    let mut x = start;
    project_monotone(&mut x);
    let mut y = x.clone();
    let mut theta = 1.0_f64;
    let mut grad = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut f_prev = energy(&x);
    for it in 1..=opts.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        gradient(&y, &mut grad);
        for i in 0..n {
            next[i] = y[i] - step * grad[i];
        }
        project_monotone(&mut next);
        // Gradient mapping norm at y.
        let gm = (0..n).map(|i| (y[i] - next[i]).powi(2)).sum::<f64>().sqrt() * lipschitz;
        let f_next = energy(&next);
        if f_next > f_prev && theta > 1.0 {
            // Momentum overshot: restart from the last accepted point.
            theta = 1.0;
            y.copy_from_slice(&x);
            continue;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = (theta - 1.0) / theta_next;
        for i in 0..n {
            y[i] = next[i] + momentum * (next[i] - x[i]);
        }
        std::mem::swap(&mut x, &mut next);
        theta = theta_next;
        f_prev = f_next.min(f_prev);
        if gm < opts.tol {
            let f = energy(&x);
            return (x, f, true, it);
        }
    }
    let f = energy(&x);
    (x, f, false, opts.max_iter)
}

/// `(x_tgt, contrast)` per cell; the caller has checked the cell count.
fn cells_of(pair: &DomainPair) -> Vec<(f64, f64)> {
    pair.x_tgt
        .iter()
        .zip(pair.x_src.iter())
        .map(|(&t, &s)| (t, s - t))
        .collect()
}

/// Discretised energy of a feasible path.
pub fn path_energy(spec: &EnergySpec, path: &SchedulePath, pair: &DomainPair) -> Result<f64> {
    spec.check_pair(pair)?;
    if path.values.dim() != spec.a.dim() {
        return Err(Error::dims(spec.a.shape(), path.values.shape()));
    }
    let violations = path.violations();
    if !violations.is_empty() {
        return Err(Error::ConstraintViolation(violations.join("; ")));
    }
    Ok(cells_of(pair)
        .iter()
        .enumerate()
        .map(|(c, &(t, d))| spec.cell(c, t, d).energy(path.values.row(c)))
        .sum())
}

/// Kinetic and potential parts of the energy, summed over cells.
pub fn energy_parts(spec: &EnergySpec, path: &SchedulePath, pair: &DomainPair) -> Result<(f64, f64)> {
    path_energy(spec, path, pair)?;
    Ok(cells_of(pair)
        .iter()
        .enumerate()
        .map(|(c, &(t, d))| {
            let cell = spec.cell(c, t, d);
            (cell.kinetic(path.values.row(c)), cell.potential(path.values.row(c)))
        })
        .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1)))
}

/// Best spatially and channel-constant path.
pub fn optimize_global(spec: &EnergySpec, pair: &DomainPair, opts: &SolverOptions) -> Result<OptimResult> {
    spec.check_pair(pair)?;
    let cells = cells_of(pair);
    let problems: Vec<CellProblem> = cells
        .iter()
        .enumerate()
        .map(|(c, &(t, d))| spec.cell(c, t, d))
        .collect();
    let grid = spec.grid();
    if problems.iter().all(|p| p.contrast.abs() < DEGENERATE_CONTRAST) {
        let path = SchedulePath::linear(spec.cells(), grid, PathClass::Global);
        let energy = path_energy(spec, &path, pair)?;
        return Ok(OptimResult { path, energy, converged: true, iterations: 0 });
    }
    let lipschitz: f64 = problems.iter().map(|p| p.lipschitz()).sum();
    let energy = |x: &[f64]| {
        let v = ArrayView1::from(x);
        problems.iter().map(|p| p.energy(v)).sum::<f64>()
    };
    let gradient = |x: &[f64], g: &mut [f64]| {
        let v = ArrayView1::from(x);
        problems.iter().for_each(|p| p.add_gradient(v, g));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
    for r in 0..opts.restarts.max(1) {
        let start = if r == 0 {
            (0..=grid).map(|k| k as f64 / grid as f64).collect()
        } else {
            random_start(grid, &mut rng)
        };
        let res = minimise(start, lipschitz, opts, energy, gradient);
        if best.as_ref().is_none_or(|b| res.1 < b.1) {
            best = Some(res);
        }
    }
    let (eta, energy, converged, iterations) = best.expect("at least one restart");
    Ok(OptimResult {
        path: SchedulePath::global(&Array1::from(eta), spec.cells()),
        energy,
        converged,
        iterations,
    })
}

/// Best per-cell paths; the energy separates, so cells are solved
/// independently.
pub fn optimize_pixelwise(spec: &EnergySpec, pair: &DomainPair, opts: &SolverOptions) -> Result<OptimResult> {
    spec.check_pair(pair)?;
    let cells = cells_of(pair);
    let grid = spec.grid();
    let solved: Vec<(Vec<f64>, f64, bool, usize)> = cells
        .par_iter()
        .enumerate()
        .map(|(c, &(t, d))| {
            let p = spec.cell(c, t, d);
            if d.abs() < DEGENERATE_CONTRAST {
                let lin: Vec<f64> = (0..=grid).map(|k| k as f64 / grid as f64).collect();
                let e = p.energy(ArrayView1::from(&lin));
                return (lin, e, true, 0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let energy = |x: &[f64]| p.energy(ArrayView1::from(x));
            let gradient = |x: &[f64], g: &mut [f64]| p.add_gradient(ArrayView1::from(x), g);
            let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
            for r in 0..opts.restarts.max(1) {
                let start = if r == 0 {
                    (0..=grid).map(|k| k as f64 / grid as f64).collect()
                } else {
                    random_start(grid, &mut rng)
                };
                let res = minimise(start, p.lipschitz(), opts, energy, gradient);
                if best.as_ref().is_none_or(|b| res.1 < b.1) {
                    best = Some(res);
                }
            }
            best.expect("at least one restart")
        })
        .collect();
    let mut values = Array2::zeros((spec.cells(), grid + 1));
    let mut energy = 0.0;
    let mut converged = true;
    let mut iterations = 0;
    for (c, (path, e, ok, it)) in solved.into_iter().enumerate() {
        values.row_mut(c).assign(&Array1::from(path));
        energy += e;
        converged &= ok;
        iterations = iterations.max(it);
    }
    Ok(OptimResult {
        path: SchedulePath {
            values,
            class: PathClass::Pixelwise,
        },
        energy,
        converged,
        iterations,
    })
}

/// Raised cosine supported on the middle third of `[0, 1]`.
pub fn bump(t: f64) -> f64 {
    if t <= 1.0 / 3.0 || t >= 2.0 / 3.0 {
        0.0
    } else {
        0.5 * (1.0 - (6.0 * PI * (t - 1.0 / 3.0)).cos())
    }
}

/// Energy change of the bump perturbation `-eps sgn(D_c) psi` applied to the
/// global optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentCertificate {
    /// Directional derivative of each cell's energy along `psi`.
    pub directional: Vec<f64>,
    /// `(eps, energy change)` for every probed size.
    pub changes: Vec<(f64, f64)>,
    /// Predicted first-order change per unit `eps`, `-sum_c |D_c|`.
    pub slope: f64,
    pub feasible: bool,
    /// Mixing weight towards the linear path used to make room for the bump.
    pub regularisation: f64,
}

impl DescentCertificate {
    /// Every probed change is negative and the ratio between the largest and
    /// smallest probe matches the ratio of sizes within `rel_tol`.
    pub fn is_linear_descent(&self, rel_tol: f64) -> bool {
        if !self.feasible || self.changes.iter().any(|&(_, d)| !(d < 0.0)) {
            return false;
        }
        let (e0, d0) = self.changes[0];
        let (e1, d1) = self.changes[self.changes.len() - 1];
        ((d1 / d0) / (e1 / e0) - 1.0).abs() < rel_tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationReport {
    pub e_glob: f64,
    pub e_pix: f64,
    pub gap: f64,
    pub homogeneous: bool,
    pub global: OptimResult,
    pub pixelwise: OptimResult,
    pub certificate: Option<DescentCertificate>,
}

impl DominationReport {
    pub fn note(&self) -> &'static str {
        if self.homogeneous {
            "homogeneous instance; strict gap not required"
        } else {
            "heterogeneous instance"
        }
    }
}

/// Whether all cells share metric, potential and contrast.
pub fn is_homogeneous(spec: &EnergySpec, pair: &DomainPair) -> bool {
    let cells = cells_of(pair);
    let (t0, d0) = cells[0];
    (1..spec.cells()).all(|c| {
        spec.a.row(c) == spec.a.row(0)
            && spec.target.row(c) == spec.target.row(0)
            && spec.mass[c] == spec.mass[0]
            && cells[c] == (t0, d0)
    })
}

/// Bump-perturbation certificate around a global path for sizes `eps_list`.
pub fn descent_certificate(
    spec: &EnergySpec,
    pair: &DomainPair,
    global: &SchedulePath,
    eps_list: &[f64],
) -> Result<DescentCertificate> {
    let cells = cells_of(pair);
    let grid = spec.grid();
    let psi: Vec<f64> = (0..=grid).map(|k| bump(k as f64 / grid as f64)).collect();
    let eps_max = eps_list.iter().copied().fold(0.0, f64::max);
    let linear: Vec<f64> = (0..=grid).map(|k| k as f64 / grid as f64).collect();
    let eta0: Vec<f64> = global.values.row(0).to_vec();

    // Shrink towards the linear path until the largest bump keeps the path
    // monotone and inside [0, 1].
    let fits = |eta: &[f64]| {
        let max_slope = psi.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        (0..grid).all(|k| eta[k + 1] - eta[k] >= 2.0 * eps_max * max_slope)
            && (0..=grid).all(|k| psi[k] == 0.0 || (eta[k] >= eps_max && eta[k] <= 1.0 - eps_max))
    };
    let mut kappa = 0.0;
    let mut eta = eta0.clone();
    while !fits(&eta) && kappa < 1.0 {
        kappa = if kappa == 0.0 { 1e-3 } else { (kappa * 2.0_f64).min(1.0) };
        eta = eta0
            .iter()
            .zip(&linear)
            .map(|(e, l)| (1.0 - kappa) * e + kappa * l)
            .collect();
    }
    let feasible = fits(&eta);

    let base = SchedulePath::global(&Array1::from(eta.clone()), spec.cells());
    let directional: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(c, &(t, d))| {
            let mut g = vec![0.0; grid + 1];
            spec.cell(c, t, d).add_gradient(ArrayView1::from(&eta), &mut g);
            g.iter().zip(&psi).map(|(a, b)| a * b).sum()
        })
        .collect();
    let e_base = path_energy(spec, &base, pair)?;
    let mut changes = Vec::new();
    for &eps in eps_list {
        let mut values = base.values.clone();
        for (c, mut row) in values.outer_iter_mut().enumerate() {
            let s = directional[c].signum();
            for k in 0..=grid {
                row[k] -= eps * s * psi[k];
            }
        }
        let perturbed = SchedulePath {
            values,
            class: PathClass::Pixelwise,
        };
        let e = path_energy(spec, &perturbed, pair)?;
        changes.push((eps, e - e_base));
    }
    Ok(DescentCertificate {
        slope: -directional.iter().map(|d| d.abs()).sum::<f64>(),
        directional,
        changes,
        feasible,
        regularisation: kappa,
    })
}

/// Solve both classes and, on heterogeneous instances, certify descent from
/// the global optimum.
pub fn verify_strict_domination(
    spec: &EnergySpec,
    pair: &DomainPair,
    opts: &SolverOptions,
) -> Result<DominationReport> {
    let global = optimize_global(spec, pair, opts)?;
    let pixelwise = optimize_pixelwise(spec, pair, opts)?;
    let homogeneous = is_homogeneous(spec, pair);
    let certificate = if homogeneous {
        None
    } else {
        Some(descent_certificate(spec, pair, &global.path, &[1e-3, 1e-2])?)
    };
    Ok(DominationReport {
        e_glob: global.energy,
        e_pix: pixelwise.energy,
        gap: global.energy - pixelwise.energy,
        homogeneous,
        global,
        pixelwise,
        certificate,
    })
}

/// Two cells with unit contrast whose potentials pull towards an early and a
/// late trajectory respectively; with `heterogeneous = false` both cells use
/// the late target.
pub fn reference_instance(grid: usize, heterogeneous: bool) -> (EnergySpec, DomainPair) {
    let early = |t: f64| 1.0 - (1.0 - t).powi(3);
    let late = |t: f64| t.powi(3);
    let mass = 50.0;
    let target = Array2::from_shape_fn((2, grid + 1), |(c, k)| {
        let t = k as f64 / grid as f64;
        if c == 0 && heterogeneous {
            early(t)
        } else {
            late(t)
        }
    });
    let spec = EnergySpec::new(Array2::ones((2, grid + 1)), Array1::from_elem(2, mass), target)
        .expect("reference instance is valid");
    let pair = DomainPair::new(
        crate::field::Field::ones((1, 1, 2)),
        crate::field::Field::zeros((1, 1, 2)),
    )
    .expect("shapes match");
    (spec, pair)
}
