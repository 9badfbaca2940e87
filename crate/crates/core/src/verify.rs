//! Registry of automated property checks with a deterministic text report.

use crate::blowup::{self, ClassifierParams, CubeConvention, FitMode, FitParams, Label};
use crate::error::Result;
use crate::linalg::random_rotation;
use crate::pde::{self, BoundarySpec, DomainSpec, GridSpec, ManufacturedSpec, ProblemSpec, ScalarGrid, SourceSpec};
use crate::quadform::QuadraticForm;
use crate::renorm::{rate_fit, NoiseModel, Renormalizer};
use crate::sphere::BandQuadrature;
use crate::zp::{self, a_coefficients, build_zp, default_delta_grid, eta0_estimate, kappa, pi_of_zp};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub seed: u64,
    /// Nodes per axis of the PDE and blow-up grids on `[−1, 1]³`.
    #[serde(default = "pde_n")]
    pub pde_n: usize,
    /// Nodes per axis of the residual-potential grid.
    #[serde(default = "residual_n")]
    pub residual_n: usize,
    #[serde(default = "mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "renorm_steps")]
    pub renorm_steps: usize,
    /// Multiplies every tolerance.
    #[serde(default = "unit")]
    pub tol_scale: f64,
}

fn pde_n() -> usize {
    129
}
fn residual_n() -> usize {
    65
}
fn mc_samples() -> usize {
    1_000_000
}
fn renorm_steps() -> usize {
    5000
}
fn unit() -> f64 {
    1.0
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, pde_n: pde_n(), residual_n: residual_n(), mc_samples: mc_samples(), renorm_steps: renorm_steps(), tol_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.into(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    pub fn render(&self) -> String {
        let mut s: String = self.outcomes.iter().map(|o| o.line() + "\n").collect();
        let failed = self.outcomes.iter().filter(|o| !o.pass).count();
        s.push_str(&format!("{} checks, {} failed\n", self.outcomes.len(), failed));
        s
    }
}

/// Shared expensive inputs, computed on first use.
pub struct Context<'a> {
    pub cfg: &'a VerifyConfig,
    s1_solution: OnceLock<std::result::Result<(ScalarGrid, ScalarGrid), String>>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a VerifyConfig) -> Self {
        Self { cfg, s1_solution: OnceLock::new() }
    }

    fn tol(&self, t: f64) -> f64 {
        t * self.cfg.tol_scale
    }

    /// Numerical solution with manufactured `(30, 0)` boundary data on `B₁`, and the manufactured field.
    pub fn s1_solution(&self) -> Result<&(ScalarGrid, ScalarGrid)> {
        self.s1_solution
            .get_or_init(|| {
                let m = ManufacturedSpec::new(30.0, 0.0);
                let exact = pde::manufactured(&m, self.cfg.pde_n, 1.0).map_err(|e| e.to_string())?;
                let spec = s1_problem(self.cfg.pde_n);
                let (u, _) = pde::solve(&spec).map_err(|e| e.to_string())?;
                Ok((u, exact))
            })
            .as_ref()
            .map_err(|e| crate::Error::Invalid(e.clone()))
    }
}

/// Ball problem `Δu = −χ{u>0}` with boundary data from manufactured `(30, 0)`.
pub fn s1_problem(n: usize) -> ProblemSpec {
    let mut spec = ProblemSpec::new(
        GridSpec::cube(1.0, n),
        SourceSpec::Constant { value: -1.0 },
        BoundarySpec::Manufactured(ManufacturedSpec::new(30.0, 0.0)),
    );
    spec.domain = DomainSpec::Ball { center: [0.0; 3], radius: 1.0 };
    spec
}

type CheckFn = fn(&Context) -> Result<Vec<CheckOutcome>>;

/// `(name, runner)`; names are matched by the substring filter.
pub fn registry() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("coeffs.golden", check_coeffs),
        ("zp.pi_closed_form", check_pi_closed_form),
        ("zp.pi_grid_projection", check_pi_grid),
        ("kappa.bounds", check_kappa),
        ("kappa.eta0", check_eta0),
        ("renorm.dynamics", check_renorm),
        ("pde.manufactured_ball", check_pde),
        ("blowup.s1", check_blowup_s1),
        ("blowup.s2_cross", check_blowup_s2),
        ("blowup.free_boundary_cone", check_cone),
        ("sublevel.bound", check_sublevel),
        ("projection.laws", check_laws),
        ("pde.residual_decay", check_residual_decay),
    ]
}

/// Runs every check whose name contains `filter`; a check that errors is reported as failed.
pub fn run(cfg: &VerifyConfig, filter: Option<&str>) -> VerifyReport {
    let ctx = Context::new(cfg);
    let mut outcomes = Vec::new();
    for (name, f) in registry() {
        if filter.is_some_and(|s| !name.contains(s)) {
            continue;
        }
        match f(&ctx) {
            Ok(mut v) => outcomes.append(&mut v),
            Err(e) => outcomes.push(CheckOutcome::new(name, false, format!("error: {e}"))),
        }
    }
    VerifyReport { outcomes }
}

fn e(v: f64) -> String {
    format!("{v:.6e}")
}

fn check_coeffs(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let rule = BandQuadrature::new(zp::DEFAULT_BAND_LEVEL)?;
    let t0 = a_coefficients(0.0, &rule)?;
    let th = a_coefficients(0.5, &rule)?;
    let s3 = 3f64.sqrt();
    let errs = [
        (t0.a - (-4.0 * PI / s3)).abs(),
        (t0.a_z - (-4.0 * PI / (9.0 * s3))).abs(),
        (th.a - (-2.0 * PI)).abs(),
        (th.a_y - (-2.0 * PI / 3.0)).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let tol = ctx.tol(1e-6);
    Ok(vec![CheckOutcome::new("coeffs.golden", worst <= tol, format!("max error {} (tol {})", e(worst), e(tol)))])
}

fn check_pi_closed_form(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let c = LN_2 / (3.0 * 3f64.sqrt());
    let p0 = QuadraticForm::p0();
    let err = pi_of_zp(&p0, 0.5, 1.0)?.sub(&p0.scale(c)).sup_norm();
    let tol = ctx.tol(1e-6);
    Ok(vec![CheckOutcome::new("zp.pi_closed_form", err <= tol, format!("error {} (tol {})", e(err), e(tol)))])
}

fn check_pi_grid(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let z = build_zp(&QuadraticForm::p0(), 1.0, zp::DEFAULT_LMAX)?;
    let mut g = ScalarGrid::cube(Vector3::zeros(), 1.0, ctx.cfg.pde_n)?;
    g.fill(&|x: &Vector3<f64>| z.value(x));
    let pi = blowup::project(&g, 0.5, &Vector3::zeros())?.trace_free();
    let c = LN_2 / (3.0 * 3f64.sqrt());
    let err = pi.sub(&QuadraticForm::p0().scale(c)).sup_norm();
    let tol = ctx.tol(1e-2);
    Ok(vec![CheckOutcome::new("zp.pi_grid_projection", err <= tol, format!("error {} (tol {})", e(err), e(tol)))])
}

/// `(δ, κ(δ))` on `0.005, 0.01, …, 0.495`.
pub fn kappa_sweep() -> Result<Vec<(f64, f64)>> {
    (1..=99).map(|k| k as f64 * 0.005).map(|d| kappa(d).map(|v| (d, v))).collect()
}

/// Largest grid point `c₀` with `κ ≥ 2δ − slack` on every grid point `≤ c₀`.
pub fn kappa_lower_extent(sweep: &[(f64, f64)], slack: f64) -> f64 {
    let mut c0 = 0.0;
    for &(d, k) in sweep {
        if k < 2.0 * d - slack {
            break;
        }
        c0 = d;
    }
    c0
}

fn check_kappa(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let sweep = kappa_sweep()?;
    let slack = ctx.tol(1e-4);
    let upper = sweep.iter().map(|&(d, k)| k - 4.0 * d).fold(f64::NEG_INFINITY, f64::max);
    let c0 = kappa_lower_extent(&sweep, slack);
    Ok(vec![
        CheckOutcome::new("kappa.upper", upper <= slack, format!("max κ−4δ {} (tol {})", e(upper), e(slack))),
        CheckOutcome::new("kappa.lower", c0 >= 0.05, format!("κ ≥ 2δ−{} holds on (0, {c0:.3}] (need c0 ≥ 0.05)", e(slack))),
    ])
}

fn check_eta0(_: &Context) -> Result<Vec<CheckOutcome>> {
    let eta = eta0_estimate(10.0, &default_delta_grid())?;
    Ok(vec![CheckOutcome::new("kappa.eta0", eta >= 0.05, format!("eta0(C=10) {} (need ≥ 0.05)", e(eta)))])
}

fn check_renorm(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let r = Renormalizer::new();
    let (min_inc, max_inc) = r.increment_bounds(1.0, &default_delta_grid())?;
    let steps = ctx.cfg.renorm_steps;
    let mut worst_delta: f64 = 0.0;
    let mut monotone = true;
    let mut inc_ok = true;
    let mut fit_ok = true;
    let mut fit_notes = Vec::new();
    for k in 1..=9 {
        let d0 = 0.05 * k as f64;
        let t = r.simulate(&QuadraticForm::p_delta(d0).scale(30.0), 1.0, steps, NoiseModel::None, ctx.cfg.seed)?;
        worst_delta = worst_delta.max(t.records.iter().map(|x| x.delta).fold(f64::INFINITY, f64::min));
        monotone &= t.monotone;
        let n = t.records.len();
        inc_ok &= t.records[..n - 1].iter().all(|x| x.increment >= min_inc * 0.99 && x.increment <= max_inc * 1.01);
        match rate_fit(&t) {
            Ok(f) => {
                fit_ok &= f.c > 0.0 && f.residual < 0.1;
                fit_notes.push(format!("{d0:.2}:c={:.3}", f.c));
            }
            Err(err) => {
                fit_ok = false;
                fit_notes.push(format!("{d0:.2}:{err}"));
            }
        }
    }
    let ray = r.simulate(&QuadraticForm::p3().scale(30.0), 1.0, 100, NoiseModel::None, ctx.cfg.seed)?;
    let ray_dev = ray.records.iter().map(|x| (x.delta - 0.5).abs()).fold(0.0, f64::max);
    Ok(vec![
        CheckOutcome::new(
            "renorm.delta_decay",
            worst_delta < 1e-3,
            format!("largest min-δ over δ0=0.05..0.45 within {steps} steps {} (need < 1e-3)", e(worst_delta)),
        ),
        CheckOutcome::new("renorm.monotone_tau", monotone, format!("tau strictly increasing: {monotone}")),
        CheckOutcome::new(
            "renorm.increments",
            inc_ok,
            format!("increments inside [{}, {}]·(0.99, 1.01): {inc_ok}", e(min_inc), e(max_inc)),
        ),
        CheckOutcome::new("renorm.p3_ray", ray_dev <= ctx.tol(1e-10), format!("max |δ−1/2| {} over 100 steps", e(ray_dev))),
        CheckOutcome::new("renorm.rate_fit", fit_ok, fit_notes.join(" ")),
    ])
}

fn check_pde(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let (u, exact) = ctx.s1_solution()?;
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for i in 0..u.len() {
        if u.point_of(i).norm() <= 0.8 {
            err = err.max((u.values[i] - exact.values[i]).abs());
            scale = scale.max(exact.values[i].abs());
        }
    }
    let rel = err / scale;
    let tol = ctx.tol(0.02);
    Ok(vec![CheckOutcome::new("pde.manufactured_ball", rel <= tol, format!("relative max error on |x|≤0.8 {} (tol {})", e(rel), e(tol)))])
}

fn check_blowup_s1(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let (u, _) = ctx.s1_solution()?;
    let res = blowup::blowup_sequence(u, &Vector3::zeros(), 0.5, 2, &ClassifierParams::default())?;
    let c = LN_2 / (3.0 * 3f64.sqrt());
    let tau: Vec<f64> = res.records.iter().map(|r| r.canonical.tau).collect();
    let incs: Vec<f64> = tau.windows(2).map(|w| w[1] - w[0]).collect();
    let inc_ok = incs.len() == 2 && incs.iter().all(|i| (i - c).abs() <= ctx.tol(0.25) * c);
    let delta = res.classification.final_delta;
    let pass = inc_ok && delta <= ctx.tol(0.05) && res.classification.label == Label::S1Plus;
    Ok(vec![CheckOutcome::new(
        "blowup.s1",
        pass,
        format!(
            "increments [{}] vs {}; delta {}; label {}",
            incs.iter().map(|v| e(*v)).collect::<Vec<_>>().join(", "),
            e(c),
            e(delta),
            res.classification.label.as_str()
        ),
    )])
}

/// Angle in degrees between two unit normals, ignoring orientation.
fn normal_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).abs().min(1.0).acos().to_degrees()
}

fn check_blowup_s2(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let g = pde::manufactured(&ManufacturedSpec::new(30.0, 0.5), ctx.cfg.pde_n, 1.0)?;
    let res = blowup::blowup_sequence(&g, &Vector3::zeros(), 0.5, 2, &ClassifierParams::default())?;
    let mesh = blowup::free_boundary(&g, &g.like(0.0))?;
    let fit = blowup::cone_fit(&mesh, &Vector3::zeros(), FitMode::Cross, &FitParams::default())?;
    let refs = [Vector3::new(1.0, 0.0, -1.0).normalize(), Vector3::new(1.0, 0.0, 1.0).normalize()];
    let normals = fit.plane_normals.expect("cross mode fits planes").map(Vector3::from);
    let plane_err = normals
        .iter()
        .map(|n| refs.iter().map(|r| normal_angle(n, r)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let dihedral = fit.dihedral_deg.unwrap_or(f64::NAN);
    let tol = ctx.tol(2.0);
    let pass = res.classification.label == Label::S2 && plane_err <= tol && (dihedral - 90.0).abs() <= tol;
    Ok(vec![CheckOutcome::new(
        "blowup.s2_cross",
        pass,
        format!("label {}; plane error {} deg; dihedral {} deg", res.classification.label.as_str(), e(plane_err), e(dihedral)),
    )])
}

/// Distance from `x` to the cone `{x² + y² = 2z²}`.
pub fn cone_distance(x: &Vector3<f64>) -> f64 {
    let rho = (x.x * x.x + x.y * x.y).sqrt();
    (rho / 3f64.sqrt() - x.z.abs() * (2.0f64 / 3.0).sqrt()).abs()
}

fn check_cone(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let (u, _) = ctx.s1_solution()?;
    let mesh = blowup::free_boundary(u, &u.like(0.0))?;
    let dist = mesh
        .vertices
        .iter()
        .filter(|v| (0.05..=0.3).contains(&v.norm()))
        .map(cone_distance)
        .fold(0.0, f64::max);
    let fit = blowup::cone_fit(&mesh, &Vector3::zeros(), FitMode::Cone, &FitParams::default())?;
    let ladder = &fit.defect_ladder;
    let decreasing = ladder.len() == 3 && ladder.windows(2).all(|w| w[0].1 < w[1].1);
    let tol = ctx.tol(2.0) * u.h;
    Ok(vec![
        CheckOutcome::new("blowup.free_boundary_distance", dist <= tol, format!("max distance to cone {} (tol {})", e(dist), e(tol))),
        CheckOutcome::new(
            "blowup.graph_c1_defect",
            decreasing,
            format!("defects [{}] at rho 0.1, 0.2, 0.3", ladder.iter().map(|l| e(l.1)).collect::<Vec<_>>().join(", ")),
        ),
    ])
}

/// `p₀`, `p₃` and ten seeded random quadratics.
pub fn sublevel_forms(seed: u64) -> Vec<QuadraticForm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![QuadraticForm::p0(), QuadraticForm::p3()];
    for _ in 0..10 {
        let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let q = random_rotation(&mut rng);
        let p = QuadraticForm::from_coeffs(c).rotate(&q).expect("rotation is orthogonal");
        v.push(p.scale(1.0 / blowup::cube_sup(&p, 0.5)));
    }
    v
}

fn check_sublevel(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let eps = [1e-1, 1e-2, 1e-3, 1e-4];
    let mut c_max = 0.0f64;
    let mut monotone = true;
    for (k, p) in sublevel_forms(ctx.cfg.seed).iter().enumerate() {
        let mut prev = f64::INFINITY;
        for (j, &ep) in eps.iter().enumerate() {
            let est = blowup::sublevel_measure(p, ep, ctx.cfg.mc_samples, ctx.cfg.seed ^ ((k as u64) << 8 | j as u64), CubeConvention::Half)?;
            c_max = c_max.max(est.measure / ep.powf(0.25));
            monotone &= est.measure <= prev;
            prev = est.measure;
        }
    }
    Ok(vec![CheckOutcome::new(
        "sublevel.bound",
        c_max <= 10.0 && monotone,
        format!("max measure/eps^(1/4) {} (need ≤ 10); monotone in eps: {monotone}", e(c_max)),
    )])
}

fn check_laws(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let rep = blowup::projection_laws_check(&blowup::default_law_samples())?;
    let idem = rep.results.iter().map(|r| r.idempotence).fold(0.0, f64::max);
    let inv = rep.results.iter().filter(|r| r.harmonic).map(|r| r.invariance).fold(0.0, f64::max);
    let ctrl = rep.results.iter().filter(|r| !r.harmonic).map(|r| r.invariance).fold(0.0, f64::max);
    let tol = ctx.tol(1e-8);
    Ok(vec![CheckOutcome::new(
        "projection.laws",
        idem <= ctx.tol(1e-10) && inv <= tol && ctrl <= tol,
        format!("idempotence {}; harmonic invariance {}; |x|^2 trace-free invariance {} (tol {})", e(idem), e(inv), e(ctrl), e(tol)),
    )])
}

fn check_residual_decay(ctx: &Context) -> Result<Vec<CheckOutcome>> {
    let m = ManufacturedSpec::new(30.0, 0.0);
    let field = m.build()?;
    let spec = s1_problem(ctx.cfg.residual_n);
    let vals: Vec<f64> = (1..=3)
        .map(|k| pde::residual_potential(&field, 0.5f64.powi(k), &spec, ctx.cfg.residual_n).map(|r| r.d2g_l2))
        .collect::<Result<_>>()?;
    let ok = vals.windows(2).all(|w| w[1] <= w[0]) && vals[0] <= 0.5;
    Ok(vec![CheckOutcome::new(
        "pde.residual_decay",
        ok,
        format!("d2g_l2 at r=1/2,1/4,1/8: [{}]", vals.iter().map(|v| e(*v)).collect::<Vec<_>>().join(", ")),
    )])
}
