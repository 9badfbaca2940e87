//! Finite-difference solution of `Δu = f·χ{u>ψ}` on boxes and balls in ℝ³.

mod grid;
pub mod linear;

pub use grid::{sidecar_path, Field, GridHeader, Polynomial, ScalarGrid};
pub use linear::{discrete_laplacian, LinearStats, Poisson};

use crate::error::{Error, Result};
use crate::quadform::{QuadraticForm, Sign};
use crate::zp::{build_zp, ZpField, DEFAULT_LMAX};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Right-hand side `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Constant { value: f64 },
    Affine { value: f64, gradient: [f64; 3] },
    /// `value + coefficient·|x|^exponent`, modulus of continuity `t^exponent`.
    RadialSmooth { value: f64, coefficient: f64, exponent: f64 },
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SourceSpec::Constant { value } => value.is_finite(),
            SourceSpec::Affine { value, gradient } => value.is_finite() && gradient.iter().all(|g| g.is_finite()),
            SourceSpec::RadialSmooth { value, coefficient, exponent } => {
                value.is_finite() && coefficient.is_finite() && exponent > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid source {self:?}")))
        }
    }
}

impl Field for SourceSpec {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        match *self {
            SourceSpec::Constant { value } => value,
            SourceSpec::Affine { value, gradient } => value + Vector3::from(gradient).dot(x),
            SourceSpec::RadialSmooth { value, coefficient, exponent } => value + coefficient * x.norm().powf(exponent),
        }
    }
}

/// Obstacle `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleSpec {
    #[default]
    Zero,
    Quadratic { coeffs: [f64; 6] },
    /// `amplitude·|x|^exponent` with `exponent ≥ 2`.
    Power { amplitude: f64, exponent: f64 },
    /// Raw grid with sidecar; must share the problem layout.
    Grid { path: String },
    #[serde(skip)]
    Sampled(ScalarGrid),
}

impl ObstacleSpec {
    /// Checks `sup_{0<r≤1/4} sup_{B₁} |ψ(rx)/r²| ≤ c_psi` for analytic entries.
    pub fn check_scaling(&self, c_psi: f64) -> Result<()> {
        let bound = match *self {
            ObstacleSpec::Zero => 0.0,
            ObstacleSpec::Quadratic { coeffs } => QuadraticForm::from_coeffs(coeffs).sup_norm(),
            ObstacleSpec::Power { amplitude, exponent } => {
                if !(exponent >= 2.0) {
                    return Err(Error::Invalid(format!("obstacle exponent must be ≥ 2, got {exponent}")));
                }
                amplitude.abs() * 0.25f64.powf(exponent - 2.0)
            }
            ObstacleSpec::Grid { .. } | ObstacleSpec::Sampled(_) => return Ok(()),
        };
        if bound > c_psi {
            return Err(Error::Invalid(format!("obstacle violates |ψ_r| ≤ {c_psi} (bound {bound})")));
        }
        Ok(())
    }

    fn sample(&self, layout: &ScalarGrid) -> Result<ScalarGrid> {
        let mut g = layout.like(0.0);
        match self {
            ObstacleSpec::Zero => {}
            ObstacleSpec::Quadratic { coeffs } => g.fill(&QuadraticForm::from_coeffs(*coeffs)),
            ObstacleSpec::Power { amplitude, exponent } => {
                let (a, e) = (*amplitude, *exponent);
                g.fill(&move |x: &Vector3<f64>| a * x.norm().powf(e))
            }
            ObstacleSpec::Grid { path } => g = load_matching(path, layout)?,
            ObstacleSpec::Sampled(s) => {
                if !s.same_layout(layout) {
                    return Err(Error::Invalid("obstacle grid layout differs from problem grid".into()));
                }
                g = s.clone();
            }
        }
        Ok(g)
    }
}

fn load_matching(path: &str, layout: &ScalarGrid) -> Result<ScalarGrid> {
    let g = ScalarGrid::read(std::path::Path::new(path))?;
    if !g.same_layout(layout) {
        return Err(Error::Invalid(format!("grid {path} does not match the problem layout")));
    }
    Ok(g)
}

/// `u* = τ·sign·p_δ(Qx) + a·Z(x)` for the same form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManufacturedSpec {
    pub tau: f64,
    pub delta: f64,
    #[serde(default = "plus")]
    pub sign: Sign,
    /// Row-major rotation `Q`; identity when absent.
    #[serde(default)]
    pub rotation: Option<[[f64; 3]; 3]>,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "default_lmax")]
    pub lmax: usize,
}

fn plus() -> Sign {
    Sign::Plus
}
fn one() -> f64 {
    1.0
}
fn default_lmax() -> usize {
    DEFAULT_LMAX
}

impl ManufacturedSpec {
    pub fn new(tau: f64, delta: f64) -> Self {
        Self { tau, delta, sign: Sign::Plus, rotation: None, amplitude: 1.0, lmax: DEFAULT_LMAX }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        match self.rotation {
            Some(r) => Matrix3::from_fn(|i, j| r[i][j]),
            None => Matrix3::identity(),
        }
    }

    pub fn build(&self) -> Result<ManufacturedField> {
        ManufacturedField::new(self.tau, self.delta, self.sign, &self.rotation_matrix(), self.amplitude, self.lmax)
    }
}

/// Near-singular model solution of `Δu = −a·χ{u>0}`.
#[derive(Debug, Clone)]
pub struct ManufacturedField {
    pub tau: f64,
    pub form: QuadraticForm,
    pub zp: ZpField,
}

impl ManufacturedField {
    pub fn new(tau: f64, delta: f64, sign: Sign, q: &Matrix3<f64>, amplitude: f64, lmax: usize) -> Result<Self> {
        if !(amplitude > 0.0) {
            return Err(Error::Invalid(format!("amplitude must be positive, got {amplitude}")));
        }
        if !(tau >= 10.0 * amplitude) {
            return Err(Error::Invalid(format!("tau must be ≥ 10·amplitude, got {tau}")));
        }
        if !(0.0..=0.5).contains(&delta) {
            return Err(Error::Invalid(format!("delta must lie in [0, 1/2], got {delta}")));
        }
        let form = QuadraticForm::p_delta(delta).scale(sign.value()).rotate(q)?;
        let zp = build_zp(&form, amplitude, lmax)?;
        Ok(Self { tau, form, zp })
    }
}

impl Field for ManufacturedField {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.tau * self.form.evaluate(x) + self.zp.value(x)
    }
}

/// Samples the manufactured field on `n³` nodes of `[−R, R]³`.
pub fn manufactured(spec: &ManufacturedSpec, n: usize, radius: f64) -> Result<ScalarGrid> {
    let f = spec.build()?;
    let mut g = ScalarGrid::cube(Vector3::zeros(), radius, n)?;
    g.fill(&f);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Constant { value: f64 },
    Polynomial(Polynomial),
    Manufactured(ManufacturedSpec),
}

impl BoundarySpec {
    fn sample_into(&self, g: &mut ScalarGrid) -> Result<()> {
        match self {
            BoundarySpec::Constant { value } => g.values.iter_mut().for_each(|v| *v = *value),
            BoundarySpec::Polynomial(p) => g.fill(p),
            BoundarySpec::Manufactured(m) => g.fill(&m.build()?),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Harmonic function with the boundary data.
    #[default]
    HarmonicExtension,
    /// Boundary descriptor evaluated at every node.
    Boundary,
    Polynomial(Polynomial),
    Grid { path: String },
    #[serde(skip)]
    Sampled(ScalarGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    /// All interior nodes of the grid box.
    #[default]
    Box,
    /// Nodes strictly inside the ball; outside nodes carry Dirichlet data.
    Ball { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    /// `n³` nodes on `[−R, R]³`.
    pub fn cube(half_width: f64, n: usize) -> Self {
        Self { origin: [-half_width; 3], spacing: 2.0 * half_width / (n.max(2) - 1) as f64, dims: [n; 3] }
    }

    pub fn layout(&self) -> Result<ScalarGrid> {
        ScalarGrid::new(Vector3::from(self.origin), self.spacing, self.dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub periodic: [bool; 3],
    pub f: SourceSpec,
    #[serde(default)]
    pub psi: ObstacleSpec,
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default = "default_tol_outer")]
    pub tol_outer: f64,
    /// Max-norm residual of each linear solve, relative to `max(‖f‖∞, 1)`.
    #[serde(default = "default_tol_inner")]
    pub tol_inner: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "one")]
    pub c_psi: f64,
}

fn default_tol_outer() -> f64 {
    1e-6
}
fn default_tol_inner() -> f64 {
    1e-8
}
fn default_max_outer() -> usize {
    200
}
fn default_damping() -> f64 {
    0.6
}

impl ProblemSpec {
    pub fn new(grid: GridSpec, f: SourceSpec, boundary: BoundarySpec) -> Self {
        Self {
            grid,
            domain: DomainSpec::Box,
            periodic: [false; 3],
            f,
            psi: ObstacleSpec::Zero,
            boundary,
            initial: InitialSpec::HarmonicExtension,
            tol_outer: default_tol_outer(),
            tol_inner: default_tol_inner(),
            max_outer: default_max_outer(),
            damping: default_damping(),
            c_psi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.layout()?;
        self.f.validate()?;
        self.psi.check_scaling(self.c_psi)?;
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol_outer > 0.0 && self.tol_inner > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Invalid("max_outer must be ≥ 1".into()));
        }
        if let DomainSpec::Ball { radius, .. } = self.domain {
            if !(radius > 0.0) {
                return Err(Error::Invalid(format!("ball radius must be positive, got {radius}")));
            }
        }
        Ok(())
    }

    /// Unknown-node mask.
    pub fn free_mask(&self, layout: &ScalarGrid) -> Vec<bool> {
        (0..layout.len())
            .into_par_iter()
            .map(|id| {
                let c = layout.coords(id);
                let on_face = (0..3).any(|a| !self.periodic[a] && (c[a] == 0 || c[a] + 1 == layout.dims[a]));
                if on_face {
                    return false;
                }
                match self.domain {
                    DomainSpec::Box => true,
                    DomainSpec::Ball { center, radius } => (layout.point_of(id) - Vector3::from(center)).norm() < radius,
                }
            })
            .collect()
    }

    pub fn poisson(&self) -> Result<(ScalarGrid, Poisson)> {
        self.validate()?;
        let layout = self.grid.layout()?;
        let free = self.free_mask(&layout);
        let p = Poisson::new(layout.dims, layout.h, self.periodic, free)?;
        Ok((layout, p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub last_change: f64,
    /// `max |Δ_h u − f·χ{u>ψ}|` over unknown nodes.
    pub residual_max: f64,
    /// Same, restricted to nodes at least `2h` from `{u = ψ}`.
    pub residual_away_from_interface: f64,
    pub positive_nodes: usize,
    pub free_nodes: usize,
    pub multigrid: bool,
    /// Minimum of `u` over unknown nodes is attained on `{u>ψ}` or not below the boundary minimum
    /// (only checked when `f ≤ 0`).
    pub max_principle_ok: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub u: ScalarGrid,
    pub report: SolveReport,
}

/// Runs the damped fixed-point iteration; non-convergence is reported, not raised.
pub fn solve_detailed(spec: &ProblemSpec) -> Result<SolveOutcome> {
    let (layout, poisson) = spec.poisson()?;
    let free = poisson.free().to_vec();
    let mut data = layout.like(0.0);
    spec.boundary.sample_into(&mut data)?;
    let psi = spec.psi.sample(&layout)?;
    let mut fgrid = layout.like(0.0);
    fgrid.fill(&spec.f);
    let tol = spec.tol_inner * fgrid.max_abs().max(1.0);
    let zeros = vec![0.0; layout.len()];
    let mut inner = 0;

    let mut u = match &spec.initial {
        InitialSpec::HarmonicExtension => {
            let (v, st) = poisson.solve(&zeros, &data.values, None, tol)?;
            inner += st.iterations;
            v
        }
        InitialSpec::Boundary => data.values.clone(),
        InitialSpec::Polynomial(p) => {
            let mut g = layout.like(0.0);
            g.fill(p);
            g.values
        }
        InitialSpec::Grid { path } => load_matching(path, &layout)?.values,
        InitialSpec::Sampled(g) => {
            if !g.same_layout(&layout) {
                return Err(Error::Invalid("initial grid layout differs from problem grid".into()));
            }
            g.values.clone()
        }
    };
    for (v, (&f, d)) in u.iter_mut().zip(free.iter().zip(&data.values)) {
        if !f {
            *v = *d;
        }
    }

    let theta = spec.damping;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    let mut outer = 0;
    let mut v_prev: Option<Vec<f64>> = None;
    while outer < spec.max_outer {
        outer += 1;
        let rhs: Vec<f64> = (0..u.len())
            .into_par_iter()
            .map(|i| if u[i] > psi.values[i] { fgrid.values[i] } else { 0.0 })
            .collect();
        let guess = v_prev.as_deref().unwrap_or(&u);
        let (v, st) = poisson.solve(&rhs, &data.values, Some(guess), tol)?;
        inner += st.iterations;
        last_change = theta * u.par_iter().zip(&v).map(|(a, b)| (a - b).abs()).reduce(|| 0.0, f64::max);
        if last_change <= spec.tol_outer {
            u = v;
            converged = true;
            break;
        }
        u.par_iter_mut().zip(&v).for_each(|(a, b)| *a = (1.0 - theta) * *a + theta * b);
        v_prev = Some(v);
    }

    let ugrid = ScalarGrid { values: u, ..layout.clone() };
    if !ugrid.all_finite() {
        return Err(Error::InnerDivergence { residual: f64::NAN });
    }
    let lap = discrete_laplacian(layout.dims, layout.h, spec.periodic, &free, &ugrid.values);
    let positive: Vec<bool> = ugrid.values.iter().zip(&psi.values).map(|(a, b)| a > b).collect();
    let near = near_interface(&layout, &positive, spec.periodic);
    let mut residual_max = 0.0f64;
    let mut residual_away = 0.0f64;
    for i in 0..free.len() {
        if !free[i] {
            continue;
        }
        let r = (lap[i] - if positive[i] { fgrid.values[i] } else { 0.0 }).abs();
        residual_max = residual_max.max(r);
        if !near[i] {
            residual_away = residual_away.max(r);
        }
    }
    let max_principle_ok = if fgrid.values.iter().all(|&f| f <= 0.0) {
        let mut fmin = (f64::INFINITY, 0usize);
        let mut bmin = f64::INFINITY;
        for (i, &v) in ugrid.values.iter().enumerate() {
            if free[i] {
                if v < fmin.0 {
                    fmin = (v, i);
                }
            } else {
                bmin = bmin.min(v);
            }
        }
        let slack = 1e-9 * ugrid.max_abs().max(1.0);
        Some(fmin.0 >= bmin - slack || near[fmin.1] || positive[fmin.1])
    } else {
        None
    };
    let report = SolveReport {
        converged,
        outer_iterations: outer,
        inner_iterations: inner,
        last_change,
        residual_max,
        residual_away_from_interface: residual_away,
        positive_nodes: positive.iter().zip(&free).filter(|(p, f)| **p && **f).count(),
        free_nodes: free.iter().filter(|&&f| f).count(),
        multigrid: poisson.uses_multigrid(),
        max_principle_ok,
    };
    Ok(SolveOutcome { u: ugrid, report })
}

/// As [`solve_detailed`], raising `MaxIterations` when the fixed point is not reached.
pub fn solve(spec: &ProblemSpec) -> Result<(ScalarGrid, SolveReport)> {
    let out = solve_detailed(spec)?;
    if !out.report.converged {
        return Err(Error::MaxIterations { iterations: out.report.outer_iterations, last_change: out.report.last_change });
    }
    Ok((out.u, out.report))
}

/// Nodes within two cells (∞-norm) of a sign change of `positive`.
fn near_interface(layout: &ScalarGrid, positive: &[bool], periodic: [bool; 3]) -> Vec<bool> {
    let dims = layout.dims;
    let shift = |c: [usize; 3], a: usize, d: i64| -> Option<[usize; 3]> {
        let n = dims[a] as i64;
        let mut v = c[a] as i64 + d;
        if v < 0 || v >= n {
            if !periodic[a] {
                return None;
            }
            v = v.rem_euclid(n);
        }
        let mut o = c;
        o[a] = v as usize;
        Some(o)
    };
    let idx = |c: [usize; 3]| layout.index(c[0], c[1], c[2]);
    let edge: Vec<bool> = (0..positive.len())
        .into_par_iter()
        .map(|i| {
            let c = layout.coords(i);
            (0..3).any(|a| [-1, 1].iter().any(|&d| shift(c, a, d).is_some_and(|o| positive[idx(o)] != positive[i])))
        })
        .collect();
    (0..positive.len())
        .into_par_iter()
        .map(|i| {
            let c = layout.coords(i);
            for dk in -2i64..=2 {
                let Some(ck) = shift(c, 2, dk) else { continue };
                for dj in -2i64..=2 {
                    let Some(cj) = shift(ck, 1, dj) else { continue };
                    for di in -2i64..=2 {
                        if let Some(ci) = shift(cj, 0, di) {
                            if edge[idx(ci)] {
                                return true;
                            }
                        }
                    }
                }
            }
            false
        })
        .collect()
}

/// Result of [`residual_potential`].
#[derive(Debug, Clone)]
pub struct ResidualPotential {
    pub g: ScalarGrid,
    pub d2g_l2: f64,
    /// `Π(u_r, 1)`.
    pub pi: QuadraticForm,
    pub support_nodes: usize,
}

/// Solves `Δg = f(0)·χ{Π(u_r,1)>0} − f(rx)·χ{u_r>ψ_r}` in `B₁` with `g = 0` outside,
/// on `n³` nodes of `[−1, 1]³`, where `u_r(x) = u(rx)/r²`.
pub fn residual_potential<F: Field + ?Sized>(u: &F, r: f64, spec: &ProblemSpec, n: usize) -> Result<ResidualPotential> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("r must be positive, got {r}")));
    }
    spec.f.validate()?;
    let g0 = ScalarGrid::cube(Vector3::zeros(), 1.0, n)?;
    let h = g0.h;
    let ur = |x: &Vector3<f64>| u.value(&(x * r)) / (r * r);
    let wide = ScalarGrid::sample(Vector3::repeat(-1.0 - 2.0 * h), h, [n + 4; 3], &ur)?;
    let pi = crate::blowup::project(&wide, 1.0, &Vector3::zeros())?;
    let psi_full = spec.psi.sample_scaled(r, &g0)?;
    let f0 = spec.f.value(&Vector3::zeros());
    let mut rhs = g0.like(0.0);
    let pi_scale = pi.sup_norm();
    let urv = |i: usize| {
        let [a, b, c] = g0.coords(i);
        wide.get(a + 2, b + 2, c + 2)
    };
    rhs.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let x = g0.point_of(i);
        if x.norm() >= 1.0 {
            return;
        }
        // indicator threshold at rounding level so exact zeros of both sides agree
        let eta = 1e-12 * pi_scale * x.norm_squared();
        let a = if pi.evaluate(&x) > eta { f0 } else { 0.0 };
        let b = if urv(i) - psi_full.values[i] > eta { spec.f.value(&(x * r)) } else { 0.0 };
        *v = a - b;
    });
    let support_nodes = rhs.values.iter().filter(|v| **v != 0.0).count();
    let free: Vec<bool> = (0..g0.len())
        .map(|i| {
            let c = g0.coords(i);
            c.iter().all(|&v| v > 0 && v + 1 < n) && g0.point_of(i).norm() < 1.0
        })
        .collect();
    let poisson = Poisson::new(g0.dims, h, [false; 3], free.clone())?;
    let tol = spec.tol_inner * rhs.max_abs().max(1.0);
    let (gv, _) = poisson.solve(&rhs.values, &vec![0.0; g0.len()], None, tol)?;
    let g = ScalarGrid { values: gv, ..g0 };
    let d2g_l2 = hessian_l2(&g, &free);
    Ok(ResidualPotential { g, d2g_l2, pi, support_nodes })
}

impl ObstacleSpec {
    /// `ψ_r(x) = ψ(rx)/r²` on the layout nodes.
    fn sample_scaled(&self, r: f64, layout: &ScalarGrid) -> Result<ScalarGrid> {
        let mut g = layout.like(0.0);
        match self {
            ObstacleSpec::Zero => {}
            ObstacleSpec::Quadratic { coeffs } => g.fill(&QuadraticForm::from_coeffs(*coeffs)),
            ObstacleSpec::Power { amplitude, exponent } => {
                let (a, e) = (*amplitude, *exponent);
                g.fill(&move |x: &Vector3<f64>| a * (x * r).norm().powf(e) / (r * r))
            }
            ObstacleSpec::Grid { path } => {
                let s = ScalarGrid::read(std::path::Path::new(path))?;
                g.fill(&move |x: &Vector3<f64>| s.interpolate(&(x * r)) / (r * r))
            }
            ObstacleSpec::Sampled(s) => g.fill(&|x: &Vector3<f64>| s.interpolate(&(x * r)) / (r * r)),
        }
        Ok(g)
    }
}

/// Discrete `‖D²g‖_{L²}` over the given nodes (central differences).
pub fn hessian_l2(g: &ScalarGrid, nodes: &[bool]) -> f64 {
    let h2 = g.h * g.h;
    let [nx, ny, nz] = g.dims;
    let parts: Vec<f64> = (1..nz.saturating_sub(1))
        .into_par_iter()
        .map(|k| {
            let mut acc = 0.0;
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    if !nodes[g.index(i, j, k)] {
                        continue;
                    }
                    let m = hessian_at(g, i, j, k);
                    acc += m.iter().map(|v| v * v).sum::<f64>();
                }
            }
            acc
        })
        .collect();
    (parts.iter().sum::<f64>() * g.h * h2).sqrt()
}

/// Central-difference Hessian at an interior node (exact on quadratics).
pub fn hessian_at(g: &ScalarGrid, i: usize, j: usize, k: usize) -> Matrix3<f64> {
    let h2 = g.h * g.h;
    let c = [i, j, k];
    let at = |d: [i64; 3]| g.get((c[0] as i64 + d[0]) as usize, (c[1] as i64 + d[1]) as usize, (c[2] as i64 + d[2]) as usize);
    let u0 = at([0, 0, 0]);
    let mut m = Matrix3::zeros();
    for a in 0..3 {
        let mut e = [0i64; 3];
        e[a] = 1;
        let em = e.map(|v| -v);
        m[(a, a)] = (at(e) - 2.0 * u0 + at(em)) / h2;
        for b in (a + 1)..3 {
            let mut pp = [0i64; 3];
            pp[a] = 1;
            pp[b] = 1;
            let mut pm = [0i64; 3];
            pm[a] = 1;
            pm[b] = -1;
            let v = (at(pp) - at(pm) - at(pm.map(|v| -v)) + at(pp.map(|v| -v))) / (4.0 * h2);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Removes a smooth source `g` from `Δu = f·χ{u>ψ} + g`: returns the spec for `w = u + ψ̃`
/// (with obstacle `ψ + ψ̃`) and `ψ̃`, where `Δψ̃ = −g` with zero boundary data.
pub fn reduce_source(spec: &ProblemSpec, g: &SourceSpec) -> Result<(ProblemSpec, ScalarGrid)> {
    g.validate()?;
    let (layout, poisson) = spec.poisson()?;
    let mut rhs = layout.like(0.0);
    rhs.fill(g);
    rhs.values.iter_mut().for_each(|v| *v = -*v);
    let tol = spec.tol_inner * rhs.max_abs().max(1.0);
    let (shift, _) = poisson.solve(&rhs.values, &vec![0.0; layout.len()], None, tol)?;
    let shift = ScalarGrid { values: shift, ..layout.clone() };
    let mut psi = spec.psi.sample(&layout)?;
    psi.values.iter_mut().zip(&shift.values).for_each(|(a, b)| *a += b);
    let mut out = spec.clone();
    out.psi = ObstacleSpec::Sampled(psi);
    Ok((out, shift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(n: usize, initial: InitialSpec) -> ProblemSpec {
        let h = 1.0 / (n - 1) as f64;
        let grid = GridSpec { origin: [0.0; 3], spacing: h, dims: [2, 2, n] };
        let mut s = ProblemSpec::new(grid, SourceSpec::Constant { value: -1.0 }, BoundarySpec::Constant { value: 0.0 });
        s.periodic = [true, true, false];
        s.initial = initial;
        s
    }

    fn parabola() -> Polynomial {
        // z(1 − z)/2
        Polynomial { quadratic: [0.0, 0.0, -0.5, 0.0, 0.0, 0.0], linear: [0.0, 0.0, 0.5], constant: 0.0 }
    }

    #[test]
    fn one_dimensional_solutions_are_both_reachable() {
        let (u, rep) = solve(&one_d(65, InitialSpec::Polynomial(parabola()))).unwrap();
        assert!(rep.converged);
        let err = (0..u.len()).map(|i| (u.values[i] - parabola().value(&u.point_of(i))).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        let (u0, _) = solve(&one_d(65, InitialSpec::Boundary)).unwrap();
        assert!(u0.max_abs() < 1e-12);
    }

    #[test]
    fn negative_boundary_gives_empty_positive_set() {
        let s = ProblemSpec::new(GridSpec::cube(0.5, 17), SourceSpec::Constant { value: -1.0 }, BoundarySpec::Constant { value: -1.0 });
        let (u, rep) = solve(&s).unwrap();
        assert_eq!(rep.positive_nodes, 0);
        assert!(u.values.iter().all(|v| (v + 1.0).abs() < 1e-9));
        assert_eq!(rep.max_principle_ok, Some(true));
    }

    #[test]
    fn obstacle_scaling_check() {
        assert!(ObstacleSpec::Quadratic { coeffs: [0.5, 0.5, -1.0, 0.0, 0.0, 0.0] }.check_scaling(1.0).is_ok());
        assert!(ObstacleSpec::Quadratic { coeffs: [2.0, 0.0, 0.0, 0.0, 0.0, 0.0] }.check_scaling(1.0).is_err());
        assert!(ObstacleSpec::Power { amplitude: 3.0, exponent: 2.5 }.check_scaling(2.0).is_ok());
        assert!(ObstacleSpec::Power { amplitude: 1.0, exponent: 1.5 }.check_scaling(2.0).is_err());
    }

    #[test]
    fn reduce_source_zero_is_identity() {
        let s = ProblemSpec::new(GridSpec::cube(1.0, 17), SourceSpec::Constant { value: -1.0 }, BoundarySpec::Constant { value: 0.0 });
        let (_, shift) = reduce_source(&s, &SourceSpec::Constant { value: 0.0 }).unwrap();
        assert_eq!(shift.max_abs(), 0.0);
    }

    #[test]
    fn reduce_source_radial_oracle() {
        let mut s = ProblemSpec::new(GridSpec::cube(1.2, 49), SourceSpec::Constant { value: -1.0 }, BoundarySpec::Constant { value: 0.0 });
        s.domain = DomainSpec::Ball { center: [0.0; 3], radius: 1.0 };
        let (_, shift) = reduce_source(&s, &SourceSpec::Constant { value: 6.0 }).unwrap();
        let mut err = 0.0f64;
        for i in 0..shift.len() {
            let x = shift.point_of(i);
            if x.norm() < 0.8 {
                err = err.max((shift.values[i] - (1.0 - x.norm_squared())).abs());
            }
        }
        // first-order boundary placement dominates: O(h)
        assert!(err < 2.0 * shift.h, "{err}");
    }

    #[test]
    fn residual_potential_vanishes_on_pure_quadratic() {
        let s = ProblemSpec::new(GridSpec::cube(1.0, 17), SourceSpec::Constant { value: -1.0 }, BoundarySpec::Constant { value: 0.0 });
        let p = QuadraticForm::p0().scale(30.0);
        let rp = residual_potential(&p, 0.5, &s, 33).unwrap();
        assert_eq!(rp.support_nodes, 0);
        assert_eq!(rp.d2g_l2, 0.0);
        assert!(rp.pi.max_abs_diff(&p) < 1e-9);
    }

    #[test]
    fn manufactured_requires_large_tau() {
        assert!(ManufacturedSpec::new(5.0, 0.0).build().is_err());
        assert!(ManufacturedSpec::new(30.0, 0.0).build().is_ok());
    }
}
