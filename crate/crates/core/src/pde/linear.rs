//! Masked 7-point Poisson solves: conjugate gradients preconditioned by a
//! red-black multigrid V-cycle (or by Jacobi when the grid does not coarsen).

use crate::error::{Error, Result};
use rayon::prelude::*;

const CHUNK: usize = 4096;
const MG_SWEEPS: usize = 2;

#[derive(Clone, Copy)]
struct SharedMut(*mut f64);
// Red-black sweeps write one colour while reading only the other.
unsafe impl Send for SharedMut {}
unsafe impl Sync for SharedMut {}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let parts: Vec<f64> = a.par_chunks(CHUNK).zip(b.par_chunks(CHUNK)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect();
    parts.iter().sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.par_chunks(CHUNK).map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).reduce(|| 0.0, f64::max)
}

/// Grid shape plus the set of unknown ("free") nodes; every other node carries Dirichlet data.
#[derive(Debug, Clone)]
struct Level {
    dims: [usize; 3],
    periodic: [bool; 3],
    free: Vec<bool>,
}

impl Level {
    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Six neighbours of a free node (free nodes never sit on a non-periodic face).
    #[inline]
    fn neighbours(&self, i: usize, j: usize, k: usize) -> [usize; 6] {
        let [nx, ny, nz] = self.dims;
        let m = |v: usize, n: usize| if v == 0 { n - 1 } else { v - 1 };
        let p = |v: usize, n: usize| if v + 1 == n { 0 } else { v + 1 };
        [
            self.idx(m(i, nx), j, k),
            self.idx(p(i, nx), j, k),
            self.idx(i, m(j, ny), k),
            self.idx(i, p(j, ny), k),
            self.idx(i, j, m(k, nz)),
            self.idx(i, j, p(k, nz)),
        ]
    }

    /// `out = A x` with `A = 6I − (free adjacency)`; zero on fixed nodes.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let [nx, ny, _] = self.dims;
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let id = self.idx(i, j, k);
                    let o = &mut slab[i + nx * j];
                    if !self.free[id] {
                        *o = 0.0;
                        continue;
                    }
                    let mut s = 6.0 * x[id];
                    for n in self.neighbours(i, j, k) {
                        if self.free[n] {
                            s -= x[n];
                        }
                    }
                    *o = s;
                }
            }
        });
    }

    fn sweep_colour(&self, x: &mut [f64], b: &[f64], colour: usize) {
        let [nx, ny, nz] = self.dims;
        let ptr = SharedMut(x.as_mut_ptr());
        (0..nz).into_par_iter().for_each(|k| {
            let p = ptr;
            for j in 0..ny {
                let start = (colour + j + k) % 2;
                for i in (start..nx).step_by(2) {
                    let id = self.idx(i, j, k);
                    if !self.free[id] {
                        continue;
                    }
                    let mut s = b[id];
                    for n in self.neighbours(i, j, k) {
                        if self.free[n] {
                            // SAFETY: n has the opposite colour, which no thread writes during this pass.
                            s += unsafe { *p.0.add(n) };
                        }
                    }
                    // SAFETY: each node of this colour is written by exactly one thread.
                    unsafe { *p.0.add(id) = s / 6.0 };
                }
            }
        });
    }

    fn coarsen(&self) -> Option<Level> {
        if self.periodic.iter().any(|&p| p) || self.dims.iter().any(|&n| n % 2 == 0 || n < 5) {
            return None;
        }
        let dims = self.dims.map(|n| (n - 1) / 2 + 1);
        let mut free = vec![false; dims[0] * dims[1] * dims[2]];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    free[i + dims[0] * (j + dims[1] * k)] = self.free[self.idx(2 * i, 2 * j, 2 * k)];
                }
            }
        }
        Some(Level { dims, periodic: self.periodic, free })
    }

    fn len(&self) -> usize {
        self.free.len()
    }
}

/// `r_c = Pᵀ r_f / 2`, the full-weighting transpose of trilinear prolongation scaled to the coarse operator.
fn restrict(fine: &Level, coarse: &Level, r: &[f64], out: &mut [f64]) {
    let [cx, cy, _] = coarse.dims;
    let [fx, fy, fz] = fine.dims;
    out.par_chunks_mut(cx * cy).enumerate().for_each(|(kc, slab)| {
        for jc in 0..cy {
            for ic in 0..cx {
                let o = &mut slab[ic + cx * jc];
                if !coarse.free[coarse.idx(ic, jc, kc)] {
                    *o = 0.0;
                    continue;
                }
                let mut s = 0.0;
                for dk in -1i64..=1 {
                    let kf = (2 * kc) as i64 + dk;
                    if kf < 0 || kf >= fz as i64 {
                        continue;
                    }
                    for dj in -1i64..=1 {
                        let jf = (2 * jc) as i64 + dj;
                        if jf < 0 || jf >= fy as i64 {
                            continue;
                        }
                        for di in -1i64..=1 {
                            let if_ = (2 * ic) as i64 + di;
                            if if_ < 0 || if_ >= fx as i64 {
                                continue;
                            }
                            let w = 0.5f64.powi((di != 0) as i32 + (dj != 0) as i32 + (dk != 0) as i32);
                            s += w * r[fine.idx(if_ as usize, jf as usize, kf as usize)];
                        }
                    }
                }
                *o = 0.5 * s;
            }
        }
    });
}

/// `x_f += P x_c` on free fine nodes.
fn prolong_add(fine: &Level, coarse: &Level, xc: &[f64], x: &mut [f64]) {
    let [fx, fy, _] = fine.dims;
    x.par_chunks_mut(fx * fy).enumerate().for_each(|(k, slab)| {
        let ks: &[usize] = if k % 2 == 0 { &[k / 2, k / 2] } else { &[k / 2, k / 2 + 1] };
        for j in 0..fy {
            let js: &[usize] = if j % 2 == 0 { &[j / 2, j / 2] } else { &[j / 2, j / 2 + 1] };
            for i in 0..fx {
                if !fine.free[fine.idx(i, j, k)] {
                    continue;
                }
                let is: &[usize] = if i % 2 == 0 { &[i / 2, i / 2] } else { &[i / 2, i / 2 + 1] };
                let mut s = 0.0;
                for &a in ks {
                    for &b in js {
                        for &c in is {
                            s += xc[coarse.idx(c, b, a)];
                        }
                    }
                }
                slab[i + fx * j] += s / 8.0;
            }
        }
    });
}

#[derive(Debug, Clone)]
enum Preconditioner {
    Jacobi,
    Multigrid(Vec<Level>),
}

/// Symmetric V-cycle applied to `b` from a zero initial guess.
fn vcycle(levels: &[Level], b: &[f64]) -> Vec<f64> {
    let lv = &levels[0];
    let mut x = vec![0.0; lv.len()];
    if levels.len() == 1 {
        let sweeps = 4 * lv.dims.iter().max().copied().unwrap_or(3);
        for _ in 0..sweeps {
            lv.sweep_colour(&mut x, b, 0);
            lv.sweep_colour(&mut x, b, 1);
        }
        for _ in 0..sweeps {
            lv.sweep_colour(&mut x, b, 1);
            lv.sweep_colour(&mut x, b, 0);
        }
        return x;
    }
    for _ in 0..MG_SWEEPS {
        lv.sweep_colour(&mut x, b, 0);
        lv.sweep_colour(&mut x, b, 1);
    }
    let mut ax = vec![0.0; lv.len()];
    lv.apply(&x, &mut ax);
    let r: Vec<f64> = b.par_iter().zip(&ax).map(|(p, q)| p - q).collect();
    let mut bc = vec![0.0; levels[1].len()];
    restrict(lv, &levels[1], &r, &mut bc);
    let xc = vcycle(&levels[1..], &bc);
    prolong_add(lv, &levels[1], &xc, &mut x);
    for _ in 0..MG_SWEEPS {
        lv.sweep_colour(&mut x, b, 1);
        lv.sweep_colour(&mut x, b, 0);
    }
    x
}

/// Discrete problem `Δ_h u = rhs` on free nodes with `u` prescribed elsewhere.
#[derive(Debug, Clone)]
pub struct Poisson {
    level: Level,
    h: f64,
    pre: Preconditioner,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearStats {
    pub iterations: usize,
    /// `max |Δ_h u − rhs|` over free nodes.
    pub residual: f64,
}

impl Poisson {
    pub fn new(dims: [usize; 3], h: f64, periodic: [bool; 3], free: Vec<bool>) -> Result<Self> {
        if free.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Invalid("mask size does not match grid".into()));
        }
        if !free.iter().any(|&f| f) {
            return Err(Error::Invalid("no unknown nodes in the domain".into()));
        }
        if periodic.iter().all(|&p| p) {
            return Err(Error::Invalid("at least one axis must carry Dirichlet data".into()));
        }
        let level = Level { dims, periodic, free };
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let on_face = [(i, 0), (j, 1), (k, 2)]
                        .iter()
                        .any(|&(v, a)| !periodic[a] && (v == 0 || v + 1 == dims[a]));
                    if on_face && level.free[level.idx(i, j, k)] {
                        return Err(Error::Invalid("unknown node on a non-periodic face".into()));
                    }
                }
            }
        }
        let mut levels = vec![level.clone()];
        while let Some(c) = levels.last().unwrap().coarsen() {
            levels.push(c);
        }
        let pre = if levels.len() >= 2 { Preconditioner::Multigrid(levels) } else { Preconditioner::Jacobi };
        Ok(Self { level, h, pre })
    }

    pub fn uses_multigrid(&self) -> bool {
        matches!(self.pre, Preconditioner::Multigrid(_))
    }

    pub fn free(&self) -> &[bool] {
        &self.level.free
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        match &self.pre {
            Preconditioner::Jacobi => r.par_iter().map(|v| v / 6.0).collect(),
            Preconditioner::Multigrid(levels) => vcycle(levels, r),
        }
    }

    /// Solves with `u = data` on fixed nodes; `guess` warm-starts the free nodes.
    /// Stops when the max-norm residual of the Δ equation is ≤ `tol`.
    pub fn solve(&self, rhs: &[f64], data: &[f64], guess: Option<&[f64]>, tol: f64) -> Result<(Vec<f64>, LinearStats)> {
        let lv = &self.level;
        let n = lv.len();
        if rhs.len() != n || data.len() != n || guess.is_some_and(|g| g.len() != n) {
            return Err(Error::Invalid("vector sizes do not match grid".into()));
        }
        let h2 = self.h * self.h;
        let [nx, ny, _] = lv.dims;
        // b = −h²·rhs + Σ fixed neighbour data
        let mut b = vec![0.0; n];
        b.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let id = lv.idx(i, j, k);
                    if !lv.free[id] {
                        continue;
                    }
                    let mut s = -h2 * rhs[id];
                    for nb in lv.neighbours(i, j, k) {
                        if !lv.free[nb] {
                            s += data[nb];
                        }
                    }
                    slab[i + nx * j] = s;
                }
            }
        });
        let mut x: Vec<f64> = match guess {
            Some(g) => g.iter().zip(&lv.free).map(|(v, &f)| if f { *v } else { 0.0 }).collect(),
            None => vec![0.0; n],
        };
        let mut ax = vec![0.0; n];
        lv.apply(&x, &mut ax);
        let mut r: Vec<f64> = b.par_iter().zip(&ax).map(|(p, q)| p - q).collect();
        let cap = match self.pre {
            Preconditioner::Multigrid(_) => 500,
            Preconditioner::Jacobi => 50 * n.max(100),
        };
        let mut z = self.precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut it = 0;
        loop {
            let res = max_abs(&r) / h2;
            if !res.is_finite() {
                return Err(Error::InnerDivergence { residual: res });
            }
            if res <= tol {
                break;
            }
            if it >= cap {
                return Err(Error::InnerDivergence { residual: res });
            }
            lv.apply(&p, &mut ax);
            let pap = dot(&p, &ax);
            if !(pap > 0.0) {
                return Err(Error::InnerDivergence { residual: res });
            }
            let alpha = rz / pap;
            x.par_iter_mut().zip(&p).for_each(|(a, q)| *a += alpha * q);
            r.par_iter_mut().zip(&ax).for_each(|(a, q)| *a -= alpha * q);
            z = self.precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut().zip(&z).for_each(|(a, q)| *a = q + beta * *a);
            it += 1;
        }
        // recompute the true residual to guard against recurrence drift
        lv.apply(&x, &mut ax);
        let residual = b.iter().zip(&ax).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / h2;
        for (v, (&f, d)) in x.iter_mut().zip(lv.free.iter().zip(data)) {
            if !f {
                *v = *d;
            }
        }
        Ok((x, LinearStats { iterations: it, residual }))
    }
}

/// `Δ_h u` at free nodes (zero elsewhere).
pub fn discrete_laplacian(dims: [usize; 3], h: f64, periodic: [bool; 3], free: &[bool], u: &[f64]) -> Vec<f64> {
    let lv = Level { dims, periodic, free: free.to_vec() };
    let [nx, ny, _] = dims;
    let mut out = vec![0.0; u.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let id = lv.idx(i, j, k);
                if !lv.free[id] {
                    continue;
                }
                let s: f64 = lv.neighbours(i, j, k).iter().map(|&n| u[n]).sum();
                slab[i + nx * j] = (s - 6.0 * u[id]) / (h * h);
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_mask(dims: [usize; 3]) -> Vec<bool> {
        let mut m = vec![false; dims[0] * dims[1] * dims[2]];
        for k in 1..dims[2] - 1 {
            for j in 1..dims[1] - 1 {
                for i in 1..dims[0] - 1 {
                    m[i + dims[0] * (j + dims[1] * k)] = true;
                }
            }
        }
        m
    }

    fn quadratic_case(n: usize) -> (Poisson, Vec<f64>, Vec<f64>, Vec<f64>) {
        let dims = [n, n, n];
        let h = 1.0 / (n - 1) as f64;
        let p = Poisson::new(dims, h, [false; 3], box_mask(dims)).unwrap();
        let exact: Vec<f64> = (0..n * n * n)
            .map(|id| {
                let (i, j, k) = (id % n, (id / n) % n, id / (n * n));
                let (x, y, z) = (i as f64 * h, j as f64 * h, k as f64 * h);
                x * x + 2.0 * y * y - z * z + x * y
            })
            .collect();
        (p, vec![4.0; n * n * n], exact.clone(), exact)
    }

    #[test]
    fn multigrid_pcg_recovers_quadratic() {
        let (p, rhs, data, exact) = quadratic_case(33);
        assert!(p.uses_multigrid());
        let (u, st) = p.solve(&rhs, &data, None, 1e-9).unwrap();
        assert!(st.iterations < 30, "{st:?}");
        let err = u.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn jacobi_path_matches() {
        let (p, rhs, data, exact) = quadratic_case(10);
        assert!(!p.uses_multigrid());
        let (u, _) = p.solve(&rhs, &data, None, 1e-9).unwrap();
        let err = u.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn vcycle_is_symmetric() {
        let n = 17;
        let p = Poisson::new([n, n, n], 1.0, [false; 3], box_mask([n, n, n])).unwrap();
        let Preconditioner::Multigrid(levels) = &p.pre else { panic!() };
        let free = &levels[0].free;
        let a: Vec<f64> = (0..n * n * n).map(|i| if free[i] { ((i * 7919) % 101) as f64 - 50.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..n * n * n).map(|i| if free[i] { ((i * 104729) % 37) as f64 - 18.0 } else { 0.0 }).collect();
        let ma = vcycle(levels, &a);
        let mb = vcycle(levels, &b);
        let l = dot(&b, &ma);
        let r = dot(&a, &mb);
        assert!((l - r).abs() < 1e-10 * l.abs().max(1.0), "{l} {r}");
    }

    #[test]
    fn rejects_free_face_node() {
        let mut m = box_mask([5, 5, 5]);
        m[0] = true;
        assert!(Poisson::new([5, 5, 5], 0.1, [false; 3], m).is_err());
    }
}
