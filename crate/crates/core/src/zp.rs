//! The log-resonant solutions `Z_p` of `ΔZ = −χ{p>0}` and the sphere coefficients
//! `A_x, A_y, A_z, A` that determine `Π(Z_p, r)`.
//!
//! With `σ = −χ{p>0}` expanded as `Σ c_{l,m} Y_{l,m}` on S², the solution that
//! vanishes to first order at the origin, grows sub-cubically and has
//! `Π(Z_p, 1) = 0` (trace-free part) is
//!
//! ```text
//! Z_p(x) = (1/5)·S₂(x)·ln|x| − S₂(x)/25 + |x|² Σ_{l≠2} c_{l,m}/((3+l)(2−l))·Y_{l,m}(x/|x|)
//! ```
//!
//! where `S₂` is the 2-homogeneous extension of the `l = 2` part of `σ`. The
//! `−S₂/25` shift cancels the mean Hessian of `S₂·ln|x|` over the unit ball.

use crate::error::{Error, Result};
use crate::quadform::{CanonicalForm, QuadraticForm, Sign};
use crate::sphere::{expand_band, sh_index, BandQuadrature, HarmonicExpansion, HarmonicSum};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use std::f64::consts::PI;

pub const DEFAULT_LMAX: usize = 40;
pub const DEFAULT_BAND_LEVEL: usize = 64;

/// Sphere integrals of `−χ{p_δ>0}` against `x², y², z², 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub delta: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    pub a: f64,
    pub kappa: f64,
}

impl CoefficientTable {
    /// Trace-free degree-2 part `S₂` of `−χ{p_δ>0}` in the diagonal frame:
    /// `S₂ = (5/8π)·Σ (3A_i − A)·x_i²`.
    pub fn degree2_form(&self) -> QuadraticForm {
        let k = 5.0 / (8.0 * PI);
        QuadraticForm::diagonal(
            k * (3.0 * self.a_x - self.a),
            k * (3.0 * self.a_y - self.a),
            k * (3.0 * self.a_z - self.a),
        )
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&delta) {
        return Err(Error::Invalid(format!("delta must lie in [0, 1/2], got {delta}")));
    }
    Ok(())
}

/// Half-height `z*(φ)` of the band `{p_δ > 0} ∩ S² = {|z| < z*(φ)}`.
///
/// On the sphere `p_δ = a(φ)(1 − z²) − z²` with `a(φ) = 1/2 + δ cos 2φ ≥ 0`.
pub fn band_half_height(delta: f64) -> impl Fn(f64) -> f64 + Sync + Copy {
    move |phi: f64| {
        let a = (0.5 + delta * (2.0 * phi).cos()).max(0.0);
        (a / (1.0 + a)).sqrt()
    }
}

pub fn a_coefficients(delta: f64, rule: &BandQuadrature) -> Result<CoefficientTable> {
    check_delta(delta)?;
    let zs = band_half_height(delta);
    // ∫_{-z*}^{z*} dz, z² dz and (1 − z²) dz
    let one = |s: f64| 2.0 * s;
    let zz = |s: f64| 2.0 * s * s * s / 3.0;
    let a = -rule.integrate(zs, |s, _| one(s));
    let a_z = -rule.integrate(zs, |s, _| zz(s));
    let a_x = -rule.integrate(zs, |s, p| (one(s) - zz(s)) * p.cos().powi(2));
    let a_y = -rule.integrate(zs, |s, p| (one(s) - zz(s)) * p.sin().powi(2));
    let kappa = kappa_from(delta, a_x, a_y, a);
    Ok(CoefficientTable { delta, a_x, a_y, a_z, a, kappa })
}

fn kappa_from(delta: f64, a_x: f64, a_y: f64, a: f64) -> f64 {
    (1.0 + 2.0 * delta) * (3.0 * a_y - a) / (3.0 * a_x - a) - 1.0 + 2.0 * delta
}

/// `κ(δ) = (1+2δ)(3A_y − A)/(3A_x − A) − 1 + 2δ` with the default band rule.
pub fn kappa(delta: f64) -> Result<f64> {
    let rule = BandQuadrature::new(DEFAULT_BAND_LEVEL)?;
    Ok(a_coefficients(delta, &rule)?.kappa)
}

/// Evaluable representation of `amplitude·Z_P`.
#[derive(Debug, Clone)]
pub struct ZpField {
    pub source_form: QuadraticForm,
    /// `S₂` in world coordinates.
    pub log_form: QuadraticForm,
    /// Expansion of `σ` in the canonical frame `y = Qx` with the `l = 2` band removed.
    pub tail: HarmonicExpansion,
    pub amplitude: f64,
    pub canonical: CanonicalForm,
    /// `Σ c_{l,m}/((3+l)(2−l)) Y_{l,m}`.
    scaled_tail: HarmonicSum,
    /// Full expansion of `σ` in the canonical frame (for the analytic Laplacian).
    sigma: HarmonicExpansion,
}

/// Expansion of `σ = −χ{sign·p_δ > 0}` in the diagonal frame of `p_δ`.
fn sigma_expansion(sign: Sign, delta: f64, lmax: usize, rule: &BandQuadrature) -> HarmonicExpansion {
    let band = expand_band(band_half_height(delta), lmax, rule);
    let mut e = band;
    match sign {
        Sign::Plus => e.coeffs.iter_mut().for_each(|c| *c = -*c),
        // −χ{p_δ<0} = χ{p_δ>0} − 1 up to a null set
        Sign::Minus => {
            let c00 = e.get(0, 0) - (4.0 * PI).sqrt();
            e.set(0, 0, c00);
        }
    }
    e
}

pub fn build_zp(p: &QuadraticForm, amplitude: f64, lmax: usize) -> Result<ZpField> {
    build_zp_with(p, amplitude, lmax, &BandQuadrature::new(DEFAULT_BAND_LEVEL)?)
}

pub fn build_zp_with(p: &QuadraticForm, amplitude: f64, lmax: usize, rule: &BandQuadrature) -> Result<ZpField> {
    if !(amplitude > 0.0) {
        return Err(Error::Invalid(format!("amplitude must be positive, got {amplitude}")));
    }
    if lmax < 2 {
        return Err(Error::Invalid("lmax must be ≥ 2".into()));
    }
    let canonical = p.canonicalize()?;
    let sigma = sigma_expansion(canonical.sign, canonical.delta, lmax, rule);
    let s2_canonical = sigma.degree2_form()?;
    let log_form = s2_canonical.rotate(&canonical.rotation)?;
    let mut tail = sigma.clone();
    for m in -2..=2 {
        tail.set(2, m, 0.0);
    }
    let mut scaled_tail = tail.coeffs.clone();
    for l in 0..=lmax {
        for m in -(l as i64)..=(l as i64) {
            let k = sh_index(l, m);
            scaled_tail[k] = if l == 2 {
                0.0
            } else {
                tail.coeffs[k] / ((3.0 + l as f64) * (2.0 - l as f64))
            };
        }
    }
    let scaled_tail = HarmonicSum::new(&HarmonicExpansion { lmax, coeffs: scaled_tail });
    Ok(ZpField { source_form: *p, log_form, tail, amplitude, canonical, scaled_tail, sigma })
}

/// Value, gradient or Hessian of a [`ZpField`].
#[derive(Debug, Clone, PartialEq)]
pub enum ZpValue {
    Value(f64),
    Gradient(Vector3<f64>),
    Hessian(Matrix3<f64>),
}

impl ZpField {
    pub fn lmax(&self) -> usize {
        self.tail.lmax
    }

    /// Angular tail sum `Σ c_{l,m}/((3+l)(2−l)) Y_{l,m}(Qx̂)`.
    fn tail_angular(&self, x: &Vector3<f64>, r: f64) -> f64 {
        self.scaled_tail.eval(&(self.canonical.rotation * x / r))
    }

    fn tail_value(&self, x: &Vector3<f64>) -> f64 {
        let r2 = x.norm_squared();
        if r2 == 0.0 {
            return 0.0;
        }
        r2 * self.tail_angular(x, r2.sqrt())
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let r = x.norm();
        if r == 0.0 {
            return 0.0;
        }
        let s = self.log_form.evaluate(x);
        self.amplitude * (0.2 * s * r.ln() - s / 25.0 + r * r * self.tail_angular(x, r))
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        let r2 = x.norm_squared();
        if r2 == 0.0 {
            return Err(Error::OriginDerivative);
        }
        let s = self.log_form.evaluate(x);
        let gs = self.log_form.gradient(x);
        let log_part = (gs * (0.5 * r2.ln()) + x * (s / r2)) * 0.2 - gs / 25.0;
        let h = 1e-3 * r2.sqrt();
        let mut g = Vector3::zeros();
        for i in 0..3 {
            let e = Vector3::ith(i, h);
            let f = |t: f64| self.tail_value(&(x + e * t));
            g[i] = (8.0 * (f(1.0) - f(-1.0)) - (f(2.0) - f(-2.0))) / (12.0 * h);
        }
        Ok((log_part + g) * self.amplitude)
    }

    pub fn hessian(&self, x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let r2 = x.norm_squared();
        if r2 == 0.0 {
            return Err(Error::OriginDerivative);
        }
        let m = self.log_form.matrix();
        let s = self.log_form.evaluate(x);
        let gs = self.log_form.gradient(x);
        let outer = gs * x.transpose() + x * gs.transpose();
        let log_part = (m * (r2.ln()) + outer / r2 + (Matrix3::identity() / r2 - x * x.transpose() * (2.0 / (r2 * r2))) * s)
            * 0.2
            - m * (2.0 / 25.0);
        let h = 1e-3 * r2.sqrt();
        let f = |d: Vector3<f64>| self.tail_value(&(x + d));
        let mut t = Matrix3::zeros();
        let c = [(-2.0, -1.0 / 12.0), (-1.0, 4.0 / 3.0), (1.0, 4.0 / 3.0), (2.0, -1.0 / 12.0)];
        let f0 = f(Vector3::zeros());
        for i in 0..3 {
            let ei = Vector3::ith(i, h);
            let mut acc = -2.5 * f0;
            for (k, w) in c {
                acc += w * f(ei * k);
            }
            t[(i, i)] = acc / (h * h);
            for j in (i + 1)..3 {
                let ej = Vector3::ith(j, h);
                // fourth-order mixed difference from two second-order ones
                let mixed = |s: f64| {
                    (f((ei + ej) * s) - f((ei - ej) * s) - f((-ei + ej) * s) + f((-ei - ej) * s)) / (4.0 * s * s * h * h)
                };
                let v = (4.0 * mixed(1.0) - mixed(2.0)) / 3.0;
                t[(i, j)] = v;
                t[(j, i)] = v;
            }
        }
        Ok((log_part + t) * self.amplitude)
    }

    pub fn eval(&self, x: &Vector3<f64>, derivative_order: u8) -> Result<ZpValue> {
        match derivative_order {
            0 => Ok(ZpValue::Value(self.value(x))),
            1 => self.gradient(x).map(ZpValue::Gradient),
            2 => self.hessian(x).map(ZpValue::Hessian),
            k => Err(Error::Invalid(format!("derivative order {k} not supported"))),
        }
    }

    /// `ΔZ` from the truncated expansion: `amplitude·σ_lmax(x/|x|)`.
    pub fn laplacian(&self, x: &Vector3<f64>) -> Result<f64> {
        let r = x.norm();
        if r == 0.0 {
            return Err(Error::OriginDerivative);
        }
        let y = self.canonical.rotation * x / r;
        Ok(self.amplitude * self.sigma.eval_unchecked(&y))
    }

    /// `Π(Z, r)` (trace-free): `amplitude·(ln r / 5)·S₂`.
    pub fn pi(&self, r: f64) -> Result<QuadraticForm> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Invalid(format!("r must lie in (0, 1], got {r}")));
        }
        Ok(self.log_form.scale(self.amplitude * r.ln() / 5.0))
    }
}

/// Degree-2 part `S₂` of `−χ{P>0}` in world coordinates (only `l ≤ 2` is expanded).
pub fn log_form(p: &QuadraticForm) -> Result<QuadraticForm> {
    log_form_with(p, &BandQuadrature::new(DEFAULT_BAND_LEVEL)?)
}

pub fn log_form_with(p: &QuadraticForm, rule: &BandQuadrature) -> Result<QuadraticForm> {
    let c = p.canonicalize()?;
    let s2 = a_coefficients(c.delta, rule)?.degree2_form();
    // −χ{p_δ<0} = χ{p_δ>0} − 1 and constants have no degree-2 part
    let s2 = match c.sign {
        Sign::Plus => s2,
        Sign::Minus => s2.scale(-1.0),
    };
    s2.rotate(&c.rotation)
}

/// `Π(Z_P, r)` scaled by `amplitude`.
pub fn pi_of_zp(p: &QuadraticForm, r: f64, amplitude: f64) -> Result<QuadraticForm> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Invalid(format!("r must lie in (0, 1], got {r}")));
    }
    Ok(log_form(p)?.scale(amplitude * r.ln() / 5.0))
}

/// `min_δ sup|C·p_δ + Π(Z_{p_δ}, 1/2)| − C` over the grid.
pub fn eta0_estimate(c: f64, delta_grid: &[f64]) -> Result<f64> {
    if !(c >= 10.0) {
        return Err(Error::Invalid(format!("C must be ≥ 10, got {c}")));
    }
    if delta_grid.is_empty() {
        return Err(Error::Invalid("empty δ grid".into()));
    }
    let mut best = f64::INFINITY;
    for &d in delta_grid {
        check_delta(d)?;
        let p = QuadraticForm::p_delta(d);
        let v = p.scale(c).add(&pi_of_zp(&p, 0.5, 1.0)?).sup_norm() - c;
        best = best.min(v);
    }
    Ok(best)
}

/// `δ = 0, 0.01, …, 0.5`.
pub fn default_delta_grid() -> Vec<f64> {
    (0..=50).map(|k| k as f64 / 100.0).collect()
}
