//! Quadrature on S² and expansions in real orthonormal spherical harmonics.
//!
//! Harmonics are indexed `l² + l + m`; `m > 0` carries `cos(mφ)`, `m < 0` carries
//! `sin(|m|φ)`, and no Condon–Shortley phase is applied.

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, gauss_legendre};
use crate::quadform::QuadraticForm;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI};

/// Product rule: Gauss–Legendre in `cos θ` times the uniform rule in `φ`.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    pub nodes: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

impl SphereQuadrature {
    /// `level` Gauss nodes in `cos θ` and `2·level` azimuths; exact through degree `2·level − 1`.
    pub fn build(level: usize) -> Result<Self> {
        if level == 0 {
            return Err(Error::Invalid("quadrature level must be ≥ 1".into()));
        }
        let (zs, wz) = gauss_legendre(level);
        let nphi = 2 * level;
        let dphi = 2.0 * PI / nphi as f64;
        let mut nodes = Vec::with_capacity(level * nphi);
        let mut weights = Vec::with_capacity(level * nphi);
        for (z, w) in zs.iter().zip(&wz) {
            let s = (1.0 - z * z).max(0.0).sqrt();
            for k in 0..nphi {
                let phi = (k as f64 + 0.5) * dphi;
                nodes.push(Vector3::new(s * phi.cos(), s * phi.sin(), *z));
                weights.push(w * dphi);
            }
        }
        Ok(Self { nodes, weights, exact_degree: 2 * level - 1 })
    }

    pub fn integrate<F: Fn(&Vector3<f64>) -> f64 + Sync>(&self, f: F) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .par_iter()
            .zip(self.weights.par_iter())
            .map(|(x, w)| w * f(x))
            .collect();
        compensated_sum(terms)
    }
}

#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

#[inline]
fn plm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Fully normalised associated Legendre functions `P̄_l^m(z)` for `0 ≤ m ≤ l ≤ lmax`,
/// scaled so that `∫_{S²} (P̄_l^m cos mφ)² dS = 1/2` for `m > 0` and `1` for `m = 0`.
pub fn normalized_legendre(lmax: usize, z: f64) -> Vec<f64> {
    let mut p = vec![0.0; (lmax + 1) * (lmax + 2) / 2];
    let s = (1.0 - z * z).max(0.0).sqrt();
    p[0] = 1.0 / (4.0 * PI).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            let mf = m as f64;
            p[plm_index(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[plm_index(m - 1, m - 1)];
        }
        if m < lmax {
            p[plm_index(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * z * p[plm_index(m, m)];
        }
        for l in (m + 2)..=lmax {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[plm_index(l, m)] = a * (z * p[plm_index(l - 1, m)] - b * p[plm_index(l - 2, m)]);
        }
    }
    p
}

/// All real orthonormal harmonics `Y_{l,m}(x)` for a unit vector `x`.
pub fn real_harmonics(lmax: usize, x: &Vector3<f64>) -> Vec<f64> {
    let p = normalized_legendre(lmax, x.z.clamp(-1.0, 1.0));
    let phi = x.y.atan2(x.x);
    let mut y = vec![0.0; (lmax + 1) * (lmax + 1)];
    let sqrt2 = std::f64::consts::SQRT_2;
    for m in 0..=lmax {
        let (sm, cm) = (m as f64 * phi).sin_cos();
        for l in m..=lmax {
            let v = p[plm_index(l, m)];
            if m == 0 {
                y[sh_index(l, 0)] = v;
            } else {
                y[sh_index(l, m as i64)] = sqrt2 * v * cm;
                y[sh_index(l, -(m as i64))] = sqrt2 * v * sm;
            }
        }
    }
    y
}

/// Fast evaluation of a fixed expansion: precomputed recurrence factors, orders with
/// all-zero coefficients skipped, no allocation per call.
#[derive(Debug, Clone)]
pub struct HarmonicSum {
    lmax: usize,
    coeffs: Vec<f64>,
    /// `(a, b)` of the three-term recurrence in `l`, indexed like `P̄_l^m`.
    rec: Vec<(f64, f64)>,
    active: Vec<bool>,
}

impl HarmonicSum {
    pub fn new(e: &HarmonicExpansion) -> Self {
        let lmax = e.lmax;
        let mut rec = vec![(0.0, 0.0); (lmax + 1) * (lmax + 2) / 2];
        for m in 0..=lmax {
            for l in (m + 2)..=lmax {
                let (lf, mf) = (l as f64, m as f64);
                let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
                rec[plm_index(l, m)] = (a, b);
            }
        }
        let active = (0..=lmax)
            .map(|m| (m..=lmax).any(|l| e.get(l, m as i64) != 0.0 || (m > 0 && e.get(l, -(m as i64)) != 0.0)))
            .collect();
        Self { lmax, coeffs: e.coeffs.clone(), rec, active }
    }

    /// `Σ c_{l,m} Y_{l,m}(x)` for a unit vector `x` (not checked).
    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let z = x.z.clamp(-1.0, 1.0);
        let s = (1.0 - z * z).max(0.0).sqrt();
        // e^{iφ} without atan2
        let (c1, s1) = if s > 0.0 { (x.x / s, x.y / s) } else { (1.0, 0.0) };
        let (mut cm, mut sm) = (1.0, 0.0);
        let mut pmm = 1.0 / (4.0 * PI).sqrt();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut acc = 0.0;
        for m in 0..=self.lmax {
            if m > 0 {
                let mf = m as f64;
                pmm *= ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
                let c = cm * c1 - sm * s1;
                sm = sm * c1 + cm * s1;
                cm = c;
            }
            if !self.active[m] {
                continue;
            }
            let (wc, ws) = if m == 0 { (1.0, 0.0) } else { (sqrt2 * cm, sqrt2 * sm) };
            let mut term = |l: usize, p: f64| {
                let mut t = self.coeffs[sh_index(l, m as i64)] * wc;
                if m > 0 {
                    t += self.coeffs[sh_index(l, -(m as i64))] * ws;
                }
                acc += t * p;
            };
            let mut p2 = pmm;
            term(m, p2);
            if m == self.lmax {
                continue;
            }
            let mut p1 = (2.0 * m as f64 + 3.0).sqrt() * z * pmm;
            term(m + 1, p1);
            for l in (m + 2)..=self.lmax {
                let (a, b) = self.rec[plm_index(l, m)];
                let p = a * (z * p1 - b * p2);
                term(l, p);
                p2 = p1;
                p1 = p;
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicExpansion {
    pub lmax: usize,
    pub coeffs: Vec<f64>,
}

impl HarmonicExpansion {
    pub fn zeros(lmax: usize) -> Self {
        Self { lmax, coeffs: vec![0.0; (lmax + 1) * (lmax + 1)] }
    }

    pub fn get(&self, l: usize, m: i64) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: i64, v: f64) {
        self.coeffs[sh_index(l, m)] = v;
    }

    /// Σ c_{l,m}² over all stored coefficients.
    pub fn energy(&self) -> f64 {
        compensated_sum(self.coeffs.iter().map(|c| c * c))
    }

    pub fn eval(&self, x: &Vector3<f64>) -> Result<f64> {
        let n = x.norm();
        if (n - 1.0).abs() > 1e-10 {
            return Err(Error::NotUnit { norm: n });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &Vector3<f64>) -> f64 {
        let y = real_harmonics(self.lmax, x);
        compensated_sum(y.iter().zip(&self.coeffs).map(|(a, b)| a * b))
    }

    /// The trace-free form whose restriction to S² is the `l = 2` part.
    pub fn degree2_form(&self) -> Result<QuadraticForm> {
        if self.lmax < 2 {
            return Err(Error::Invalid("degree2_form needs lmax ≥ 2".into()));
        }
        let k0 = (5.0 / (16.0 * PI)).sqrt();
        let k1 = (15.0 / (4.0 * PI)).sqrt();
        let k2 = (15.0 / (16.0 * PI)).sqrt();
        let c20 = self.get(2, 0);
        let c21 = self.get(2, 1); // xz
        let c2m1 = self.get(2, -1); // yz
        let c22 = self.get(2, 2); // x² − y²
        let c2m2 = self.get(2, -2); // xy
        let m = Matrix3::new(
            -k0 * c20 + k2 * c22,
            0.5 * k1 * c2m2,
            0.5 * k1 * c21,
            0.5 * k1 * c2m2,
            -k0 * c20 - k2 * c22,
            0.5 * k1 * c2m1,
            0.5 * k1 * c21,
            0.5 * k1 * c2m1,
            2.0 * k0 * c20,
        );
        Ok(QuadraticForm::from_matrix(m))
    }

    /// Rows `l,m,coeff`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,m,coeff\n");
        for l in 0..=self.lmax {
            for m in -(l as i64)..=(l as i64) {
                out.push_str(&format!("{},{},{}\n", l, m, self.get(l, m)));
            }
        }
        out
    }
}

/// `c_{l,m} = ∫ f·Y_{l,m} dS` by plain weighting with `q`.
pub fn expand<F: Fn(&Vector3<f64>) -> f64 + Sync>(f: F, lmax: usize, q: &SphereQuadrature) -> HarmonicExpansion {
    let ncoef = (lmax + 1) * (lmax + 1);
    const CHUNK: usize = 256;
    let partials: Vec<Vec<f64>> = q
        .nodes
        .par_chunks(CHUNK)
        .zip(q.weights.par_chunks(CHUNK))
        .map(|(xs, ws)| {
            let mut acc = vec![0.0; ncoef];
            for (x, w) in xs.iter().zip(ws) {
                let fw = f(x) * w;
                if fw == 0.0 {
                    continue;
                }
                let y = real_harmonics(lmax, x);
                for (a, yi) in acc.iter_mut().zip(&y) {
                    *a += fw * yi;
                }
            }
            acc
        })
        .collect();
    let coeffs = (0..ncoef).map(|k| compensated_sum(partials.iter().map(|p| p[k]))).collect();
    HarmonicExpansion { lmax, coeffs }
}

/// Azimuthal rule on `[0, π/2]` for integrating over "band" sets
/// `{|z| < z*(φ)}` that are symmetric under `x ↦ −x` and `y ↦ −y`.
///
/// The polar direction is integrated exactly up to the band edge, so the only
/// quadrature error comes from the smooth azimuthal integrand.
#[derive(Debug, Clone)]
pub struct BandQuadrature {
    pub phi: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BandQuadrature {
    /// `level` equal panels of an 8-point Gauss rule on `[0, π/2]`.
    pub fn new(level: usize) -> Result<Self> {
        if level == 0 {
            return Err(Error::Invalid("band quadrature level must be ≥ 1".into()));
        }
        let (t, w) = gauss_legendre(8);
        let width = FRAC_PI_2 / level as f64;
        let mut phi = Vec::with_capacity(8 * level);
        let mut weights = Vec::with_capacity(8 * level);
        for k in 0..level {
            let a = k as f64 * width;
            for (ti, wi) in t.iter().zip(&w) {
                phi.push(a + 0.5 * width * (ti + 1.0));
                weights.push(0.5 * width * wi);
            }
        }
        Ok(Self { phi, weights })
    }

    /// `∫_{S²} χ_{|z|<z*(φ)} g(z², φ) dS` where `inner(z*, φ)` returns `∫_{-z*}^{z*} g dz`.
    pub fn integrate<Z, G>(&self, zstar: Z, inner: G) -> f64
    where
        Z: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64,
    {
        4.0 * compensated_sum(self.phi.iter().zip(&self.weights).map(|(&p, &w)| w * inner(zstar(p), p)))
    }
}

/// Expansion of the band indicator `χ_{|z|<z*(φ)}` using the band rule.
///
/// Only even `l` and even, non-negative `m` survive the reflection symmetries, and
/// for those `P̄_l^m` is a polynomial in `z`, so the polar integral is exact.
pub fn expand_band<Z: Fn(f64) -> f64 + Sync>(zstar: Z, lmax: usize, rule: &BandQuadrature) -> HarmonicExpansion {
    let (tz, wz) = gauss_legendre(lmax / 2 + 2);
    let ncoef = (lmax + 1) * (lmax + 1);
    let partials: Vec<Vec<f64>> = rule
        .phi
        .par_iter()
        .zip(rule.weights.par_iter())
        .map(|(&phi, &w)| {
            let zs = zstar(phi);
            let mut acc = vec![0.0; ncoef];
            // ∫_{-z*}^{z*} P̄ dz = 2 ∫_0^{z*} P̄ dz for even integrands
            for (t, wt) in tz.iter().zip(&wz) {
                let z = 0.5 * zs * (t + 1.0);
                let wzz = zs * wt; // factor 2 · (z*/2)
                let p = normalized_legendre(lmax, z);
                for m in (0..=lmax).step_by(2) {
                    let trig = if m == 0 { 1.0 } else { std::f64::consts::SQRT_2 * (m as f64 * phi).cos() };
                    for l in (m..=lmax).step_by(2) {
                        acc[sh_index(l, m as i64)] += 4.0 * w * wzz * trig * p[plm_index(l, m)];
                    }
                }
            }
            acc
        })
        .collect();
    let coeffs = (0..ncoef).map(|k| compensated_sum(partials.iter().map(|p| p[k]))).collect();
    HarmonicExpansion { lmax, coeffs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_sum_matches_direct_evaluation() {
        let mut e = HarmonicExpansion::zeros(12);
        for (k, c) in e.coeffs.iter_mut().enumerate() {
            *c = if k % 3 == 0 { 0.0 } else { ((k * 37) % 11) as f64 - 5.0 };
        }
        let fast = HarmonicSum::new(&e);
        for x in [Vector3::new(0.3, -0.4, 0.2), Vector3::new(0.0, 0.0, 1.0), Vector3::new(-1.0, 2.0, -0.5)] {
            let x = x.normalize();
            assert!((fast.eval(&x) - e.eval(&x).unwrap()).abs() < 1e-12);
        }
    }
    use crate::linalg::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadrature_moments() {
        let q = SphereQuadrature::build(1).unwrap();
        assert!((q.weights.iter().sum::<f64>() - 4.0 * PI).abs() < 1e-12);
        let q = SphereQuadrature::build(16).unwrap();
        assert!((q.integrate(|x| x.z * x.z) - 4.0 * PI / 3.0).abs() < 1e-12);
        assert!((q.integrate(|x| x.x * x.x * x.y * x.y) - 4.0 * PI / 15.0).abs() < 1e-12);
        assert!(SphereQuadrature::build(0).is_err());
    }

    #[test]
    fn harmonics_are_orthonormal() {
        let lmax = 8;
        let q = SphereQuadrature::build(lmax + 2).unwrap();
        let n = (lmax + 1) * (lmax + 1);
        let mut gram = vec![0.0; n * n];
        for (x, w) in q.nodes.iter().zip(&q.weights) {
            let y = real_harmonics(lmax, x);
            for i in 0..n {
                for j in 0..n {
                    gram[i * n + j] += w * y[i] * y[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * n + j] - expect).abs() < 1e-12, "({i},{j}) = {}", gram[i * n + j]);
            }
        }
    }

    #[test]
    fn expand_constant_and_z2() {
        let q = SphereQuadrature::build(16).unwrap();
        let e = expand(|_| 1.0, 6, &q);
        assert!((e.get(0, 0) - (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!(e.coeffs[1..].iter().all(|c| c.abs() < 1e-12));
        let x = Vector3::new(0.3, -0.4, 0.5).normalize();
        assert!((e.eval(&x).unwrap() - 1.0).abs() < 1e-12);

        let e = expand(|x| x.z * x.z, 6, &q);
        assert!((e.get(0, 0) - (4.0 * PI / 3.0) / (4.0 * PI).sqrt()).abs() < 1e-12);
        for l in 0..=6 {
            for m in -(l as i64)..=(l as i64) {
                if l != 0 && l != 2 {
                    assert!(e.get(l, m).abs() < 1e-12);
                }
            }
        }
        assert!((e.eval(&Vector3::z()).unwrap() - 1.0).abs() < 1e-10);
        assert!(matches!(e.eval(&Vector3::new(0.0, 0.0, 1.1)), Err(Error::NotUnit { .. })));
    }

    #[test]
    fn degree2_form_examples() {
        let q = SphereQuadrature::build(8).unwrap();
        let e = expand(|x| 3.0 * x.z * x.z - 1.0, 4, &q);
        assert!(e.degree2_form().unwrap().max_abs_diff(&QuadraticForm::diagonal(-1.0, -1.0, 2.0)) < 1e-12);
        let e = expand(|x| x.x * x.y, 4, &q);
        assert!(e.degree2_form().unwrap().max_abs_diff(&QuadraticForm::from_coeffs([0.0, 0.0, 0.0, 0.5, 0.0, 0.0])) < 1e-12);
        let e = expand(|x| x.x * x.z - 2.0 * x.y * x.z + x.x * x.x - x.y * x.y, 4, &q);
        let f = e.degree2_form().unwrap();
        assert!(f.max_abs_diff(&QuadraticForm::from_coeffs([1.0, -1.0, 0.0, 0.0, 0.5, -1.0])) < 1e-12);
        assert!(HarmonicExpansion::zeros(1).degree2_form().is_err());
    }

    #[test]
    fn rotation_covariance_of_degree2_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = SphereQuadrature::build(12).unwrap();
        let f = |x: &Vector3<f64>| x.x * x.x * x.y + 0.3 * x.z * x.z - x.x * x.z + x.y.powi(4);
        let base = expand(f, 6, &q).degree2_form().unwrap();
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let rotated = expand(|x| f(&(r * x)), 6, &q).degree2_form().unwrap();
            assert!(rotated.max_abs_diff(&base.rotate(&r).unwrap()) < 1e-8);
        }
    }

    #[test]
    fn band_rule_matches_plain_rule_on_smooth_band() {
        // z*(φ) ≡ 1 covers the whole sphere
        let rule = BandQuadrature::new(8).unwrap();
        let e = expand_band(|_| 1.0, 6, &rule);
        assert!((e.get(0, 0) - (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!(e.coeffs[1..].iter().all(|c| c.abs() < 1e-12));
        let area = rule.integrate(|_| 0.5, |zs, _| 2.0 * zs);
        assert!((area - 2.0 * PI).abs() < 1e-12);
    }
}
