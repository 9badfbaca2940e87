//! Analysis of numerical solutions: the projection `Π(u, r, x⁰)`, dyadic blow-ups and their
//! classification, free-boundary meshes with cone/cross fits, and sublevel-set measures.

use crate::error::{Error, Result};
use crate::io::ply_ascii;
use crate::linalg::sym_eigen3;
use crate::pde::{hessian_at, Field, ScalarGrid};
use crate::quadform::{CanonicalForm, QuadraticForm, Sign};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Minimum nodes per radius for [`project`].
pub const MIN_NODES_PER_RADIUS: f64 = 8.0;
const SUBCELL: usize = 8;

/// Fraction of the cell `[x − h/2, x + h/2]³` lying in `B_r(c)`.
fn cell_fraction(x: &Vector3<f64>, c: &Vector3<f64>, r: f64, h: f64) -> f64 {
    let d = (x - c).norm();
    let half_diag = 0.5 * 3f64.sqrt() * h;
    if d + half_diag <= r {
        return 1.0;
    }
    if d - half_diag >= r {
        return 0.0;
    }
    let mut inside = 0usize;
    for a in 0..SUBCELL {
        for b in 0..SUBCELL {
            for e in 0..SUBCELL {
                let off = Vector3::new(a as f64, b as f64, e as f64).map(|t| ((t + 0.5) / SUBCELL as f64 - 0.5) * h);
                if (x + off - c).norm_squared() < r * r {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (SUBCELL * SUBCELL * SUBCELL) as f64
}

/// Index range of nodes whose cells can meet `B_r(c)`; errors if a Hessian stencil would leave the grid.
fn node_box(u: &ScalarGrid, c: &Vector3<f64>, r: f64) -> Result<[(usize, usize); 3]> {
    let lo = u.locate(&(c - Vector3::repeat(r + u.h)));
    let hi = u.locate(&(c + Vector3::repeat(r + u.h)));
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let l = lo[a].floor();
        let h = hi[a].ceil();
        if l < 1.0 || h > (u.dims[a] - 2) as f64 {
            return Err(Error::Invalid(format!("ball of radius {r} around {c:?} leaves the grid")));
        }
        out[a] = (l as usize, h as usize);
    }
    Ok(out)
}

/// `Π(u, r, x⁰)`: half the cell-volume-weighted ball average of the discrete Hessian.
pub fn project(u: &ScalarGrid, r: f64, x0: &Vector3<f64>) -> Result<QuadraticForm> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {r}")));
    }
    if r / u.h < MIN_NODES_PER_RADIUS {
        return Err(Error::TooCoarse(format!("r/h = {:.2} < {MIN_NODES_PER_RADIUS}", r / u.h)));
    }
    let b = node_box(u, x0, r)?;
    let parts: Vec<(Matrix3<f64>, f64)> = (b[2].0..=b[2].1)
        .into_par_iter()
        .map(|k| {
            let mut acc = Matrix3::zeros();
            let mut wsum = 0.0;
            for j in b[1].0..=b[1].1 {
                for i in b[0].0..=b[0].1 {
                    let w = cell_fraction(&u.point(i, j, k), x0, r, u.h);
                    if w > 0.0 {
                        acc += hessian_at(u, i, j, k) * w;
                        wsum += w;
                    }
                }
            }
            (acc, wsum)
        })
        .collect();
    let (mut m, mut w) = (Matrix3::zeros(), 0.0);
    for (a, b) in parts {
        m += a;
        w += b;
    }
    Ok(QuadraticForm::from_matrix(m / (2.0 * w)))
}

/// One harmonic (or control) polynomial for [`projection_laws_check`].
pub struct LawSample {
    pub name: String,
    pub field: Box<dyn Field>,
    pub harmonic: bool,
}

/// Harmonic polynomials of degree ≤ 4 plus the non-harmonic control `|x|²`.
pub fn default_law_samples() -> Vec<LawSample> {
    let s = |name: &str, harmonic: bool, f: fn(&Vector3<f64>) -> f64| LawSample { name: name.into(), field: Box::new(f), harmonic };
    vec![
        s("3z^2-|x|^2", true, |x| 3.0 * x.z * x.z - x.norm_squared()),
        s("x^3-3xz^2", true, |x| x.x.powi(3) - 3.0 * x.x * x.z * x.z),
        s("xyz", true, |x| x.x * x.y * x.z),
        s("x^4-6x^2y^2+y^4", true, |x| x.x.powi(4) - 6.0 * x.x * x.x * x.y * x.y + x.y.powi(4)),
        s("mixed", true, |x| {
            0.3 * (x.x * x.x - x.y * x.y) + x.y * x.z + 0.5 * x.x * x.y * (x.x * x.x - x.y * x.y) + x.z.powi(3) - 1.5 * x.z * (x.x * x.x + x.y * x.y) + 0.7 * x.x
        }),
        s("|x|^2", false, |x| x.norm_squared()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawResult {
    pub name: String,
    pub harmonic: bool,
    /// `‖Π(Π(u,1),1) − Π(u,1)‖`.
    pub idempotence: f64,
    /// `max_{r,s} ‖Π(u,r) − Π(u,s)‖` (trace-free part for the control).
    pub invariance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawsReport {
    pub radii: Vec<f64>,
    pub spacing: f64,
    pub results: Vec<LawResult>,
}

/// Idempotence and harmonic radius-invariance of [`project`] on sampled polynomials.
pub fn projection_laws_check(samples: &[LawSample]) -> Result<LawsReport> {
    let h = 1.0 / 32.0;
    let radii = vec![0.25, 0.5, 1.0];
    let n = 64 + 5;
    let origin = Vector3::repeat(-1.0 - 2.0 * h);
    let mut results = Vec::new();
    for s in samples {
        let g = ScalarGrid::sample(origin, h, [n; 3], s.field.as_ref())?;
        let forms: Vec<QuadraticForm> = radii.iter().map(|&r| project(&g, r, &Vector3::zeros())).collect::<Result<_>>()?;
        let pi1 = forms[2];
        let again = project(&ScalarGrid::sample(origin, h, [n; 3], &pi1)?, 1.0, &Vector3::zeros())?;
        let mut inv = 0.0f64;
        for a in &forms {
            for b in &forms {
                let d = if s.harmonic { a.sub(b) } else { a.trace_free().sub(&b.trace_free()) };
                inv = inv.max(d.sup_norm());
            }
        }
        results.push(LawResult { name: s.name.clone(), harmonic: s.harmonic, idempotence: again.sub(&pi1).sup_norm(), invariance: inv });
    }
    Ok(LawsReport { radii, spacing: h, results })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    #[serde(default = "d_s1")]
    pub delta_s1: f64,
    #[serde(default = "d_s2")]
    pub delta_s2: f64,
    /// Threshold on `sup_{B_r}|u|/r²`.
    #[serde(default = "k_reg")]
    pub k: f64,
    /// Largest per-halving amplitude growth still counted as bounded.
    #[serde(default = "g_tol")]
    pub growth_tol: f64,
}

fn d_s1() -> f64 {
    0.15
}
fn d_s2() -> f64 {
    0.35
}
fn k_reg() -> f64 {
    100.0
}
fn g_tol() -> f64 {
    0.05
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self { delta_s1: d_s1(), delta_s2: d_s2(), k: k_reg(), growth_tol: g_tol() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "S1_plus")]
    S1Plus,
    #[serde(rename = "S1_minus")]
    S1Minus,
    S2,
    #[serde(rename = "regular")]
    Regular,
    #[serde(rename = "undetermined")]
    Undetermined,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::S1Plus => "S1_plus",
            Label::S1Minus => "S1_minus",
            Label::S2 => "S2",
            Label::Regular => "regular",
            Label::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: Label,
    pub final_delta: f64,
    /// `+`, `-`, or `n/a` when δ > 0.45.
    pub final_sign: String,
    /// Least-squares slope of `δ_j` in `j`.
    pub delta_slope: f64,
    /// Least-squares slope of `τ_j` in `j`.
    pub growth_slope: f64,
    pub max_sup_u: f64,
    pub params: ClassifierParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowupRecord {
    pub j: usize,
    pub r: f64,
    pub pi: QuadraticForm,
    pub canonical: CanonicalForm,
    pub sup_u: f64,
    pub residue: f64,
}

#[derive(Debug, Clone)]
pub struct BlowupResult {
    pub records: Vec<BlowupRecord>,
    pub classification: Classification,
    /// Records stopped early because `r_j` fell below the resolution limit.
    pub truncated: bool,
    /// Fitted `u(x⁰)` and `∇u(x⁰)` that were subtracted.
    pub affine_value: f64,
    pub affine_gradient: Vector3<f64>,
}

impl BlowupResult {
    /// Rows `j,r,tau,delta,sign,sup_u,residue`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,r,tau,delta,sign,sup_u,residue\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.j,
                r.r,
                r.canonical.tau,
                r.canonical.delta,
                sign_label(r.canonical.sign, r.canonical.delta),
                r.sup_u,
                r.residue
            ));
        }
        s
    }
}

fn sign_label(s: Sign, delta: f64) -> &'static str {
    if delta > 0.45 {
        "n/a"
    } else if s == Sign::Plus {
        "+"
    } else {
        "-"
    }
}

/// Least-squares value and gradient of `u` over nodes in `B_{4h}(x⁰)`.
pub fn fit_affine(u: &ScalarGrid, x0: &Vector3<f64>) -> Result<(f64, Vector3<f64>)> {
    let r = 4.0 * u.h;
    let b = node_box(u, x0, r)?;
    let mut ata = SMatrix::<f64, 4, 4>::zeros();
    let mut atb = SVector::<f64, 4>::zeros();
    for k in b[2].0..=b[2].1 {
        for j in b[1].0..=b[1].1 {
            for i in b[0].0..=b[0].1 {
                let d = u.point(i, j, k) - x0;
                if d.norm() > r {
                    continue;
                }
                let row = SVector::<f64, 4>::new(1.0, d.x, d.y, d.z);
                ata += row * row.transpose();
                atb += row * u.get(i, j, k);
            }
        }
    }
    let sol = ata.cholesky().ok_or_else(|| Error::TooCoarse("affine fit has too few nodes".into()))?.solve(&atb);
    Ok((sol[0], Vector3::new(sol[1], sol[2], sol[3])))
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        sxy += (i as f64 - mx) * (y - my);
        sxx += (i as f64 - mx).powi(2);
    }
    sxy / sxx
}

/// Dyadic blow-ups `u_{r_j, x⁰}` for `r_j = 2^{-j} r₀`, `j = 0..=J`, after removing the fitted affine part.
pub fn blowup_sequence(u: &ScalarGrid, x0: &Vector3<f64>, r0: f64, levels: usize, params: &ClassifierParams) -> Result<BlowupResult> {
    if r0 / u.h < MIN_NODES_PER_RADIUS {
        return Err(Error::TooCoarse(format!("r0/h = {} < {MIN_NODES_PER_RADIUS}", r0 / u.h)));
    }
    let (c, g) = fit_affine(u, x0)?;
    let mut w = u.clone();
    w.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let x = u.point_of(i);
        *v -= c + g.dot(&(x - x0));
    });
    let mut records = Vec::new();
    let mut truncated = false;
    for j in 0..=levels {
        let r = r0 * 0.5f64.powi(j as i32);
        let pi = match project(&w, r, x0) {
            Ok(p) => p,
            Err(Error::TooCoarse(msg)) => {
                if j == 0 {
                    return Err(Error::TooCoarse(msg));
                }
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let canonical = pi.trace_free().canonicalize()?;
        let b = node_box(&w, x0, r)?;
        let mut sup_u = 0.0f64;
        let mut residue = 0.0f64;
        for k in b[2].0..=b[2].1 {
            for jj in b[1].0..=b[1].1 {
                for i in b[0].0..=b[0].1 {
                    let d = w.point(i, jj, k) - x0;
                    if d.norm() > r {
                        continue;
                    }
                    let ur = w.get(i, jj, k) / (r * r);
                    sup_u = sup_u.max(ur.abs());
                    residue = residue.max((ur - pi.evaluate(&(d / r))).abs());
                }
            }
        }
        records.push(BlowupRecord { j, r, pi, canonical, sup_u, residue });
    }
    let taus: Vec<f64> = records.iter().map(|r| r.canonical.tau).collect();
    let deltas: Vec<f64> = records.iter().map(|r| r.canonical.delta).collect();
    let last = records.last().expect("j = 0 is always recorded");
    let max_sup_u = records.iter().map(|r| r.sup_u).fold(0.0, f64::max);
    let growth_slope = slope(&taus);
    let final_delta = last.canonical.delta;
    let label = if max_sup_u <= params.k && growth_slope <= params.growth_tol {
        Label::Regular
    } else if final_delta <= params.delta_s1 {
        if last.canonical.sign == Sign::Plus {
            Label::S1Plus
        } else {
            Label::S1Minus
        }
    } else if final_delta >= params.delta_s2 {
        Label::S2
    } else {
        Label::Undetermined
    };
    let classification = Classification {
        label,
        final_delta,
        final_sign: sign_label(last.canonical.sign, final_delta).to_string(),
        delta_slope: slope(&deltas),
        growth_slope,
        max_sup_u,
        params: *params,
    };
    Ok(BlowupResult { records, classification, truncated, affine_value: c, affine_gradient: g })
}

/// Triangle mesh of a level set.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn to_ply(&self, comments: &[String]) -> String {
        ply_ascii(&self.vertices, &self.triangles, comments)
    }

    /// One third of the incident triangle area per vertex.
    pub fn vertex_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            for &i in t {
                w[i] += area / 3.0;
            }
        }
        w
    }
}

// Six tetrahedra sharing the cube diagonal 0–7; corner bits are (x, y, z).
const TETS: [[usize; 4]; 6] = [[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]];

/// Zero level set of `u − ψ` by marching tetrahedra with linear edge interpolation.
pub fn free_boundary(u: &ScalarGrid, psi: &ScalarGrid) -> Result<Mesh> {
    if !u.same_layout(psi) {
        return Err(Error::Invalid("u and psi grids differ in layout".into()));
    }
    let w: Vec<f64> = u.values.iter().zip(&psi.values).map(|(a, b)| a - b).collect();
    let [nx, ny, nz] = u.dims;
    // per-slab triangle lists keyed by grid edges, merged in slab order
    let slabs: Vec<Vec<[(usize, usize); 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let corner: [usize; 8] = std::array::from_fn(|c| u.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                    for tet in TETS {
                        let ids = tet.map(|c| corner[c]);
                        let ins: Vec<usize> = ids.iter().copied().filter(|&id| w[id] > 0.0).collect();
                        let outs: Vec<usize> = ids.iter().copied().filter(|&id| w[id] <= 0.0).collect();
                        let e = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
                        match ins.len() {
                            1 => tris.push([e(ins[0], outs[0]), e(ins[0], outs[1]), e(ins[0], outs[2])]),
                            3 => tris.push([e(outs[0], ins[0]), e(outs[0], ins[1]), e(outs[0], ins[2])]),
                            2 => {
                                let q = [e(ins[0], outs[0]), e(ins[0], outs[1]), e(ins[1], outs[1]), e(ins[1], outs[0])];
                                tris.push([q[0], q[1], q[2]]);
                                tris.push([q[0], q[2], q[3]]);
                            }
                            _ => {}
                        }
                    }
                }
            }
            tris
        })
        .collect();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mesh = Mesh::default();
    for tris in slabs {
        for t in tris {
            let mut tri = [0usize; 3];
            for (slot, &(a, b)) in tri.iter_mut().zip(&t) {
                *slot = *index.entry((a, b)).or_insert_with(|| {
                    let (wa, wb) = (w[a], w[b]);
                    let s = wa / (wa - wb);
                    let p = u.point_of(a) + (u.point_of(b) - u.point_of(a)) * s;
                    mesh.vertices.push(p);
                    mesh.vertices.len() - 1
                });
            }
            mesh.triangles.push(tri);
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Cone,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitParams {
    #[serde(default = "r_min")]
    pub r_min: f64,
    #[serde(default = "r_max")]
    pub r_max: f64,
    /// Aperture of `K_c = {y² < c(x² + z²)}` in cross mode.
    #[serde(default = "c_cross")]
    pub c: f64,
    #[serde(default = "ladder")]
    pub rho_ladder: Vec<f64>,
    /// Half-width of each ρ shell.
    #[serde(default = "shell")]
    pub shell: f64,
}

fn r_min() -> f64 {
    0.05
}
fn r_max() -> f64 {
    0.3
}
fn c_cross() -> f64 {
    0.5
}
fn ladder() -> Vec<f64> {
    vec![0.1, 0.2, 0.3]
}
fn shell() -> f64 {
    0.04
}

impl Default for FitParams {
    fn default() -> Self {
        Self { r_min: r_min(), r_max: r_max(), c: c_cross(), rho_ladder: ladder(), shell: shell() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeFit {
    pub mode: FitMode,
    /// Rows are the fitted frame axes `x', y', z'`.
    pub rotation: [[f64; 3]; 3],
    pub residual_rms: f64,
    /// Largest entry of `defect_ladder` (cone mode).
    pub graph_c1_defect: Option<f64>,
    /// `(ρ, RMS |∇g − ∇(ρ/√2)|)` over both nappes.
    pub defect_ladder: Vec<(f64, f64)>,
    pub axis: Option<[f64; 3]>,
    /// Unit normals of the two fitted planes (cross mode).
    pub plane_normals: Option<[[f64; 3]; 2]>,
    pub dihedral_deg: Option<f64>,
    pub vertices_used: usize,
}

/// Frobenius-orthonormal basis of trace-free symmetric 3×3 matrices.
fn trace_free_basis() -> [Matrix3<f64>; 5] {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let s6 = 1.0 / 6f64.sqrt();
    [
        Matrix3::new(s2, 0.0, 0.0, 0.0, -s2, 0.0, 0.0, 0.0, 0.0),
        Matrix3::new(s6, 0.0, 0.0, 0.0, s6, 0.0, 0.0, 0.0, -2.0 * s6),
        Matrix3::new(0.0, s2, 0.0, s2, 0.0, 0.0, 0.0, 0.0, 0.0),
        Matrix3::new(0.0, 0.0, s2, 0.0, 0.0, 0.0, s2, 0.0, 0.0),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, s2, 0.0, s2, 0.0),
    ]
}

/// Trace-free `M` minimizing `Σ w (ŷᵀMŷ)²` with `‖M‖_F = 1`.
fn fit_quadric(dirs: &[Vector3<f64>], weights: &[f64]) -> Result<Matrix3<f64>> {
    let basis = trace_free_basis();
    let mut gram = SMatrix::<f64, 5, 5>::zeros();
    for (y, &w) in dirs.iter().zip(weights) {
        let phi = SVector::<f64, 5>::from_fn(|k, _| (y.transpose() * basis[k] * y)[0]);
        gram += phi * phi.transpose() * w;
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 4.0 * l0.max(0.0)) || l1 <= 0.0 {
        return Err(Error::DegenerateFit(format!("quadric fit is ill-conditioned (eigenvalues {l0:e}, {l1:e})")));
    }
    let v = eig.eigenvectors.column(order[0]);
    Ok((0..5).fold(Matrix3::zeros(), |m, k| m + basis[k] * v[k]))
}

fn frame_from(axes: [Vector3<f64>; 3]) -> Matrix3<f64> {
    let mut q = Matrix3::from_rows(&[axes[0].transpose(), axes[1].transpose(), axes[2].transpose()]);
    if q.determinant() < 0.0 {
        q.set_row(1, &(-axes[1]).transpose());
    }
    q
}

fn rows(q: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| q[(i, j)]))
}

/// Fits `{x² + y² = 2z²}` (cone) or `{x = ±z}` (cross) up to rotation about `apex`.
pub fn cone_fit(mesh: &Mesh, apex: &Vector3<f64>, mode: FitMode, params: &FitParams) -> Result<ConeFit> {
    let weights = mesh.vertex_weights();
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    for (v, &w) in mesh.vertices.iter().zip(&weights) {
        let d = v - apex;
        let r = d.norm();
        if r >= params.r_min && r <= params.r_max && w > 0.0 {
            pts.push(d);
            ws.push(w);
        }
    }
    if pts.len() < 20 {
        return Err(Error::DegenerateFit(format!("only {} vertices in the fit annulus", pts.len())));
    }
    let dirs: Vec<Vector3<f64>> = pts.iter().map(|p| p.normalize()).collect();
    match mode {
        FitMode::Cone => {
            let m = fit_quadric(&dirs, &ws)?;
            let e = sym_eigen3(&m);
            // axis: the eigenvalue of largest magnitude
            let ia = (0..3).max_by(|&a, &b| e.values[a].abs().total_cmp(&e.values[b].abs())).unwrap();
            let axis = e.vectors.column(ia).into_owned();
            let others: Vec<usize> = (0..3).filter(|&k| k != ia).collect();
            let q = frame_from([e.vectors.column(others[0]).into_owned(), e.vectors.column(others[1]).into_owned(), axis]);
            let (ca, sa) = (1.0 / 3f64.sqrt(), (2.0f64 / 3.0).sqrt());
            let mut num = 0.0;
            let mut den = 0.0;
            for (p, &w) in pts.iter().zip(&ws) {
                let y = q * p;
                let rho = (y.x * y.x + y.y * y.y).sqrt();
                let d = rho * ca - y.z.abs() * sa;
                num += w * d * d;
                den += w;
            }
            let ladder = graph_defects(mesh, apex, &q, params);
            let graph_c1_defect = ladder.iter().map(|l| l.1).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            Ok(ConeFit {
                mode,
                rotation: rows(&q),
                residual_rms: (num / den).sqrt(),
                graph_c1_defect,
                defect_ladder: ladder,
                axis: Some([axis.x, axis.y, axis.z]),
                plane_normals: None,
                dihedral_deg: None,
                vertices_used: pts.len(),
            })
        }
        FitMode::Cross => {
            let mut sel: Vec<usize> = (0..pts.len()).collect();
            let mut q = Matrix3::identity();
            for _ in 0..4 {
                let d: Vec<Vector3<f64>> = sel.iter().map(|&i| dirs[i]).collect();
                let w: Vec<f64> = sel.iter().map(|&i| ws[i]).collect();
                let e = sym_eigen3(&fit_quadric(&d, &w)?);
                q = frame_from([e.vectors.column(0).into_owned(), e.vectors.column(1).into_owned(), e.vectors.column(2).into_owned()]);
                sel = (0..pts.len())
                    .filter(|&i| {
                        let y = q * dirs[i];
                        y.y * y.y < params.c * (y.x * y.x + y.z * y.z)
                    })
                    .collect();
                if sel.len() < 20 {
                    return Err(Error::DegenerateFit("too few vertices inside K_c".into()));
                }
            }
            let mut groups = [Matrix3::zeros(), Matrix3::zeros()];
            for &i in &sel {
                let y = q * pts[i];
                let g = if y.x * y.z > 0.0 { 0 } else { 1 };
                groups[g] += pts[i] * pts[i].transpose() * ws[i];
            }
            let normals: Vec<Vector3<f64>> = groups
                .iter()
                .map(|m| {
                    let e = sym_eigen3(m);
                    e.vectors.column(2).into_owned()
                })
                .collect();
            let mut num = 0.0;
            let mut den = 0.0;
            for &i in &sel {
                let d = normals.iter().map(|n| n.dot(&pts[i]).abs()).fold(f64::INFINITY, f64::min);
                num += ws[i] * d * d;
                den += ws[i];
            }
            let cosang = normals[0].dot(&normals[1]).abs().min(1.0);
            Ok(ConeFit {
                mode,
                rotation: rows(&q),
                residual_rms: (num / den).sqrt(),
                graph_c1_defect: None,
                defect_ladder: Vec::new(),
                axis: None,
                plane_normals: Some([normals[0].into(), normals[1].into()].map(|v: [f64; 3]| v)),
                dihedral_deg: Some(cosang.acos().to_degrees()),
                vertices_used: sel.len(),
            })
        }
    }
}

/// Per shell `ρ ± w` and azimuth bin: linear fit of the nappe height against `ρ` gives `∂_ρ g`,
/// differences of bin heights give `ρ⁻¹ ∂_φ g`; returns RMS deviation from `±∇(ρ/√2)`.
fn graph_defects(mesh: &Mesh, apex: &Vector3<f64>, q: &Matrix3<f64>, params: &FitParams) -> Vec<(f64, f64)> {
    const BINS: usize = 24;
    let local: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| q * (v - apex)).collect();
    let slope0 = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::new();
    for &rho in &params.rho_ladder {
        let mut sq = 0.0;
        let mut count = 0usize;
        for nappe in [1.0f64, -1.0] {
            // (Σ1, Σρ, Σz, Σρ², Σρz) per bin
            let mut acc = vec![[0.0f64; 5]; BINS];
            for y in &local {
                if y.z * nappe <= 0.0 {
                    continue;
                }
                let r = (y.x * y.x + y.y * y.y).sqrt();
                if (r - rho).abs() > params.shell {
                    continue;
                }
                let phi = y.y.atan2(y.x).rem_euclid(std::f64::consts::TAU);
                let b = ((phi / std::f64::consts::TAU) * BINS as f64) as usize % BINS;
                let (dr, z) = (r - rho, y.z * nappe);
                let a = &mut acc[b];
                a[0] += 1.0;
                a[1] += dr;
                a[2] += z;
                a[3] += dr * dr;
                a[4] += dr * z;
            }
            let fits: Vec<Option<(f64, f64)>> = acc
                .iter()
                .map(|a| {
                    let det = a[0] * a[3] - a[1] * a[1];
                    if a[0] < 4.0 || det <= 0.0 {
                        return None;
                    }
                    let s = (a[0] * a[4] - a[1] * a[2]) / det;
                    let c = (a[2] - s * a[1]) / a[0];
                    Some((c, s))
                })
                .collect();
            let dphi = std::f64::consts::TAU / BINS as f64;
            for b in 0..BINS {
                let (Some((_, s)), Some((cm, _)), Some((cp, _))) = (fits[b], fits[(b + BINS - 1) % BINS], fits[(b + 1) % BINS]) else {
                    continue;
                };
                let tangential = (cp - cm) / (2.0 * dphi * rho);
                sq += (s - slope0).powi(2) + tangential * tangential;
                count += 1;
            }
        }
        if count > 0 {
            out.push((rho, (sq / count as f64).sqrt()));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CubeConvention {
    /// `[−1/2, 1/2]³`.
    #[default]
    Half,
    /// `[−1, 1]³`.
    Unit,
}

impl CubeConvention {
    pub fn half_width(self) -> f64 {
        match self {
            CubeConvention::Half => 0.5,
            CubeConvention::Unit => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CubeConvention::Half => "[-1/2,1/2]^3",
            CubeConvention::Unit => "[-1,1]^3",
        }
    }
}

/// `max |xᵀMx|` over `[−s, s]³` from vertices, edge and face critical points.
pub fn cube_sup(p: &QuadraticForm, s: f64) -> f64 {
    let m = p.matrix();
    let mut best = 0.0f64;
    let mut consider = |x: Vector3<f64>| {
        if x.iter().all(|v| v.abs() <= s * (1.0 + 1e-12)) {
            best = best.max(p.evaluate(&x).abs());
        }
    };
    let signs = [-s, s];
    for &a in &signs {
        for &b in &signs {
            for &c in &signs {
                consider(Vector3::new(a, b, c));
            }
        }
    }
    for free in 0..3 {
        let fixed: Vec<usize> = (0..3).filter(|&k| k != free).collect();
        for &a in &signs {
            for &b in &signs {
                let mut x = Vector3::zeros();
                x[fixed[0]] = a;
                x[fixed[1]] = b;
                // d/dt of (x + t e)ᵀM(x + t e) = 0
                if m[(free, free)] != 0.0 {
                    x[free] = -(m[(free, fixed[0])] * a + m[(free, fixed[1])] * b) / m[(free, free)];
                    consider(x);
                }
            }
        }
    }
    for fixed in 0..3 {
        let f: Vec<usize> = (0..3).filter(|&k| k != fixed).collect();
        let a2 = nalgebra::Matrix2::new(m[(f[0], f[0])], m[(f[0], f[1])], m[(f[1], f[0])], m[(f[1], f[1])]);
        for &a in &signs {
            let rhs = nalgebra::Vector2::new(-m[(f[0], fixed)] * a, -m[(f[1], fixed)] * a);
            if let Some(sol) = a2.lu().solve(&rhs) {
                let mut x = Vector3::zeros();
                x[fixed] = a;
                x[f[0]] = sol[0];
                x[f[1]] = sol[1];
                consider(x);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SublevelEstimate {
    /// Volume of `{|p| ≤ ε} ∩ Q₁`.
    pub measure: f64,
    pub std_error: f64,
    /// Divisor applied so that `sup_{Q₁}|p| ≤ 1`.
    pub scale: f64,
    pub convention: CubeConvention,
}

const MC_BLOCK: usize = 1 << 16;

/// Monte Carlo volume of `{|p| ≤ ε}` in the cube after scaling `p` to `sup_{Q₁}|p| ≤ 1`.
pub fn sublevel_measure(p: &QuadraticForm, eps: f64, samples: usize, seed: u64, convention: CubeConvention) -> Result<SublevelEstimate> {
    if samples == 0 || !(eps >= 0.0) {
        return Err(Error::Invalid("need samples ≥ 1 and ε ≥ 0".into()));
    }
    let s = convention.half_width();
    let scale = cube_sup(p, s).max(1.0);
    let q = p.scale(1.0 / scale);
    let blocks = samples.div_ceil(MC_BLOCK);
    let hits: Vec<usize> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let n = MC_BLOCK.min(samples - b * MC_BLOCK);
            (0..n)
                .filter(|_| {
                    let x = Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
                    q.evaluate(&x).abs() <= eps
                })
                .count()
        })
        .collect();
    let frac = hits.iter().sum::<usize>() as f64 / samples as f64;
    let vol = (2.0 * s).powi(3);
    Ok(SublevelEstimate {
        measure: vol * frac,
        std_error: vol * (frac * (1.0 - frac) / samples as f64).sqrt(),
        scale,
        convention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{axis_angle, random_rotation};

    fn grid_of<F: Field>(f: &F, n: usize, half: f64) -> ScalarGrid {
        let mut g = ScalarGrid::cube(Vector3::zeros(), half, n).unwrap();
        g.fill(f);
        g
    }

    #[test]
    fn project_is_exact_on_quadratics() {
        let q = QuadraticForm::from_coeffs([1.0, -0.3, 0.2, 0.7, -0.1, 0.4]);
        let g = grid_of(&q, 41, 1.0);
        let p = project(&g, 0.6, &Vector3::new(0.1, 0.0, -0.05)).unwrap();
        assert!(p.max_abs_diff(&q) < 1e-10);
    }

    #[test]
    fn project_kills_odd_harmonic() {
        let f = |x: &Vector3<f64>| x.x.powi(3) - 3.0 * x.x * x.z * x.z;
        let g = grid_of(&f, 41, 1.0);
        assert!(project(&g, 0.8, &Vector3::zeros()).unwrap().sup_norm() < 1e-8);
    }

    #[test]
    fn project_rejects_coarse_radius() {
        let g = grid_of(&QuadraticForm::p0(), 17, 1.0);
        assert!(matches!(project(&g, 0.5, &Vector3::zeros()), Err(Error::TooCoarse(_))));
    }

    #[test]
    fn projection_laws_hold() {
        let rep = projection_laws_check(&default_law_samples()).unwrap();
        for r in &rep.results {
            assert!(r.idempotence < 1e-10, "{r:?}");
            assert!(r.invariance < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn smooth_quadratic_is_regular() {
        let g = grid_of(&QuadraticForm::p0().scale(30.0), 65, 1.0);
        let res = blowup_sequence(&g, &Vector3::zeros(), 0.5, 2, &ClassifierParams::default()).unwrap();
        assert_eq!(res.classification.label, Label::Regular);
        assert!(res.records.iter().all(|r| (r.canonical.tau - 30.0).abs() < 1e-8));
        assert!(res.to_csv().starts_with("j,r,tau,delta,sign,sup_u,residue\n0,0.5,"));
    }

    #[test]
    fn plane_recovered_exactly() {
        let g = grid_of(&|x: &Vector3<f64>| x.z, 17, 1.0);
        let mesh = free_boundary(&g, &g.like(0.0)).unwrap();
        assert!(mesh.vertices.iter().all(|v| v.z.abs() < 1e-15));
    }

    #[test]
    fn empty_surface_is_an_error() {
        let g = grid_of(&|_: &Vector3<f64>| 1.0, 9, 1.0);
        assert!(matches!(free_boundary(&g, &g.like(0.0)), Err(Error::EmptySurface)));
    }

    #[test]
    fn exact_cone_fit_recovers_axis() {
        let q = axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.4);
        let p = QuadraticForm::p0().rotate(&q).unwrap();
        let g = grid_of(&p, 65, 0.5);
        let mesh = free_boundary(&g, &g.like(0.0)).unwrap();
        let h = g.h;
        for v in &mesh.vertices {
            let y = q * v;
            let d = ((y.x * y.x + y.y * y.y).sqrt() / 3f64.sqrt() - y.z.abs() * (2.0f64 / 3.0).sqrt()).abs();
            assert!(d < h, "{d}");
        }
        let fit = cone_fit(&mesh, &Vector3::zeros(), FitMode::Cone, &FitParams::default()).unwrap();
        assert!(fit.residual_rms < h);
        let axis = Vector3::from(fit.axis.unwrap());
        let expect = q.row(2).transpose();
        assert!(axis.dot(&expect).abs() > 1f64.to_radians().cos());
    }

    #[test]
    fn exact_cross_fit() {
        let g = grid_of(&QuadraticForm::p3(), 65, 0.5);
        let mesh = free_boundary(&g, &g.like(0.0)).unwrap();
        let fit = cone_fit(&mesh, &Vector3::zeros(), FitMode::Cross, &FitParams::default()).unwrap();
        assert!((fit.dihedral_deg.unwrap() - 90.0).abs() < 0.5);
        assert!(fit.residual_rms < g.h);
    }

    #[test]
    fn cube_sup_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let p = QuadraticForm::from_coeffs(c).rotate(&random_rotation(&mut rng)).unwrap();
            let exact = cube_sup(&p, 0.5);
            let mut sampled = 0.0f64;
            for _ in 0..20000 {
                let x = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                sampled = sampled.max(p.evaluate(&x).abs());
            }
            assert!(sampled <= exact + 1e-12 && sampled > 0.8 * exact, "{sampled} {exact}");
        }
    }

    #[test]
    fn sublevel_examples() {
        let whole = sublevel_measure(&QuadraticForm::p3(), 1.0, 10000, 1, CubeConvention::Half).unwrap();
        assert_eq!(whole.measure, 1.0);
        let slab = sublevel_measure(&QuadraticForm::diagonal(1.0, 0.0, 0.0), 0.01, 200_000, 2, CubeConvention::Half).unwrap();
        assert!((slab.measure - 0.2).abs() < 3.0 * slab.std_error, "{slab:?}");
        let a = sublevel_measure(&QuadraticForm::p0(), 0.1, 50_000, 9, CubeConvention::Half).unwrap();
        let b = sublevel_measure(&QuadraticForm::p0(), 0.1, 50_000, 9, CubeConvention::Half).unwrap();
        assert_eq!(a, b);
    }
}
