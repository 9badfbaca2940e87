//! Dyadic renormalisation of quadratic forms.
//!
//! One step models `Π(u_{r/2}, 1) ≈ Π(u_r, 1) + a·Π(Z_{Π(u_r,1)}, 1/2)`, optionally
//! perturbed by an explicit error form standing in for the `‖Π‖^{−α}` remainder.

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;
use crate::quadform::{QuadraticForm, Sign};
use crate::sphere::BandQuadrature;
use crate::zp::{log_form_with, DEFAULT_BAND_LEVEL};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenormState {
    pub p: QuadraticForm,
    pub k: usize,
    /// `a = |f(0)|`.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    #[default]
    None,
    /// Random trace-free form with sup-norm ≤ `c1·τ^{−alpha}` each step.
    Bounded { alpha: f64, c1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitClass {
    /// `±p₀(Q·)`; carries the sign.
    P0Plus,
    P0Minus,
    /// The cross profile `p₃(Q·)`, an unstable fixed ray.
    P3Ray,
}

impl LimitClass {
    pub fn label(self) -> &'static str {
        match self {
            LimitClass::P0Plus | LimitClass::P0Minus => "p0",
            LimitClass::P3Ray => "p3_ray",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub tau: f64,
    pub delta: f64,
    pub sign: Sign,
    pub rotation: Matrix3<f64>,
    /// `τ_{k+1} − τ_k` (zero on the last record).
    pub increment: f64,
    /// `‖P_k/‖P_k‖ − p_limit‖_sup`.
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub forms: Vec<QuadraticForm>,
    pub limit: LimitClass,
    pub limit_form: QuadraticForm,
    pub amplitude: f64,
    /// Stopped before the requested number of steps because δ and the direction settled.
    pub stopped_early: bool,
    /// τ strictly increased on every step.
    pub monotone: bool,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectory has at least one record")
    }

    /// Rows `k,tau,delta,increment,alignment,q11..q33`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,tau,delta,increment,alignment,q11,q12,q13,q21,q22,q23,q31,q32,q33\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}", r.k, r.tau, r.delta, r.increment, r.alignment));
            for i in 0..3 {
                for j in 0..3 {
                    out.push_str(&format!(",{}", r.rotation[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Exponent in `alignment ≈ C·(K + k ln 2)^{−c}`; `+∞` when the alignment is identically zero.
    pub c: f64,
    pub k_offset: f64,
    /// RMS misfit in `ln(alignment)`.
    pub residual: f64,
}

/// The renormalisation map with a cached azimuthal rule.
#[derive(Debug, Clone)]
pub struct Renormalizer {
    rule: BandQuadrature,
}

impl Default for Renormalizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Renormalizer {
    pub fn new() -> Self {
        Self { rule: BandQuadrature::new(DEFAULT_BAND_LEVEL).expect("positive level") }
    }

    /// `a·Π(Z_P, 1/2)` for the trace-free part of `P`.
    pub fn increment_form(&self, p: &QuadraticForm, amplitude: f64) -> Result<QuadraticForm> {
        let s2 = log_form_with(&p.trace_free(), &self.rule)?;
        Ok(s2.scale(amplitude * 0.5f64.ln() / 5.0))
    }

    pub fn step(&self, s: &RenormState, noise: Option<&QuadraticForm>) -> Result<RenormState> {
        let mut p = s.p.add(&self.increment_form(&s.p, s.amplitude)?);
        if let Some(n) = noise {
            p = p.add(n);
        }
        Ok(RenormState { p, k: s.k + 1, amplitude: s.amplitude })
    }

    pub fn simulate(
        &self,
        p0: &QuadraticForm,
        amplitude: f64,
        steps: usize,
        noise: NoiseModel,
        seed: u64,
    ) -> Result<Trajectory> {
        if steps == 0 {
            return Err(Error::Invalid("steps must be ≥ 1".into()));
        }
        if !(amplitude > 0.0) {
            return Err(Error::Invalid(format!("amplitude must be positive, got {amplitude}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = RenormState { p: *p0, k: 0, amplitude };
        let mut forms = vec![*p0];
        let mut canon = vec![p0.canonicalize()?];
        let mut stopped_early = false;
        for _ in 0..steps {
            let noise_form = match noise {
                NoiseModel::None => None,
                NoiseModel::Bounded { alpha, c1 } => {
                    let tau = canon.last().unwrap().tau;
                    Some(random_form(&mut rng, c1 * tau.powf(-alpha)))
                }
            };
            state = self.step(&state, noise_form.as_ref())?;
            let c = state.p.canonicalize()?;
            let prev = canon.last().unwrap();
            let moved = normalized(&state.p, c.tau).max_abs_diff(&normalized(forms.last().unwrap(), prev.tau));
            forms.push(state.p);
            canon.push(c);
            if c.delta < 1e-6 && moved < 1e-6 {
                stopped_early = true;
                break;
            }
        }

        let last = canon.last().unwrap();
        let limit = if last.delta >= 0.5 - 1e-9 {
            LimitClass::P3Ray
        } else if last.sign == Sign::Plus {
            LimitClass::P0Plus
        } else {
            LimitClass::P0Minus
        };
        let profile = match limit {
            LimitClass::P3Ray => QuadraticForm::p3(),
            LimitClass::P0Plus => QuadraticForm::p0(),
            LimitClass::P0Minus => QuadraticForm::p0().scale(-1.0),
        };
        let limit_form = profile.rotate(&last.rotation)?;

        let mut records = Vec::with_capacity(forms.len());
        let mut monotone = true;
        for (k, (f, c)) in forms.iter().zip(&canon).enumerate() {
            let increment = canon.get(k + 1).map_or(0.0, |n| n.tau - c.tau);
            if k + 1 < canon.len() && !(increment > 0.0) {
                monotone = false;
            }
            records.push(TrajectoryRecord {
                k,
                tau: c.tau,
                delta: c.delta,
                sign: c.sign,
                rotation: c.rotation,
                increment,
                alignment: normalized(f, c.tau).sub(&limit_form).sup_norm(),
            });
        }
        Ok(Trajectory { records, forms, limit, limit_form, amplitude, stopped_early, monotone })
    }

    /// `min/max` over the grid of `sup‖step(100·p_δ)‖ − 100`.
    pub fn increment_bounds(&self, amplitude: f64, delta_grid: &[f64]) -> Result<(f64, f64)> {
        if delta_grid.is_empty() {
            return Err(Error::Invalid("empty δ grid".into()));
        }
        let tau = 100.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &d in delta_grid {
            if !(0.0..=0.5).contains(&d) {
                return Err(Error::Invalid(format!("delta must lie in [0, 1/2], got {d}")));
            }
            let s = RenormState { p: QuadraticForm::p_delta(d).scale(tau), k: 0, amplitude };
            let inc = self.step(&s, None)?.p.sup_norm() - tau;
            lo = lo.min(inc);
            hi = hi.max(inc);
        }
        Ok((lo, hi))
    }
}

fn normalized(p: &QuadraticForm, tau: f64) -> QuadraticForm {
    p.trace_free().scale(1.0 / tau)
}

/// Trace-free symmetric form with sup-norm uniform in `[0, bound]`.
fn random_form(rng: &mut ChaCha8Rng, bound: f64) -> QuadraticForm {
    let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let f = QuadraticForm::from_coeffs(c).trace_free();
    let n = f.sup_norm();
    let size: f64 = rng.gen_range(0.0..1.0) * bound;
    if n == 0.0 {
        QuadraticForm::zero()
    } else {
        f.scale(size / n)
    }
}

/// Least-squares fit of `ln(alignment_k) ≈ b − c·ln(K + k·ln 2)` over `K`.
pub fn rate_fit(t: &Trajectory) -> Result<RateFit> {
    let final_alignment = t.last().alignment;
    if !(final_alignment < 0.1) {
        return Err(Error::NotConverged { alignment: final_alignment });
    }
    let pts: Vec<(f64, f64)> = t
        .records
        .iter()
        .filter(|r| r.alignment > 0.0)
        .map(|r| (r.k as f64, r.alignment.ln()))
        .collect();
    if pts.len() < 3 || t.records.iter().all(|r| r.alignment < 1e-14) {
        return Ok(RateFit { c: f64::INFINITY, k_offset: 0.0, residual: 0.0 });
    }
    fit_power_law(&pts)
}

/// Fit `y ≈ b − c·ln(K + k ln 2)`; returns the best `(c, K, rms)`.
pub fn fit_power_law(pts: &[(f64, f64)]) -> Result<RateFit> {
    let ln2 = std::f64::consts::LN_2;
    let fit_for = |kk: f64| -> (f64, f64, f64) {
        let xs: Vec<f64> = pts.iter().map(|(k, _)| (kk + k * ln2).ln()).collect();
        let n = pts.len() as f64;
        let mx = compensated_sum(xs.iter().copied()) / n;
        let my = compensated_sum(pts.iter().map(|p| p.1)) / n;
        let sxx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
        let sxy = compensated_sum(xs.iter().zip(pts).map(|(x, p)| (x - mx) * (p.1 - my)));
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let b = my - slope * mx;
        let rss = compensated_sum(xs.iter().zip(pts).map(|(x, p)| (p.1 - b - slope * x).powi(2)));
        (-slope, b, (rss / n).sqrt())
    };
    // coarse log-spaced scan, then golden-section refinement in ln K
    let mut best = (f64::INFINITY, 1.0);
    let mut lk = -2.0f64;
    while lk <= 5.0 {
        let kk = 10f64.powf(lk);
        let (_, _, res) = fit_for(kk);
        if res < best.0 {
            best = (res, lk);
        }
        lk += 0.05;
    }
    let (mut a, mut b) = (best.1 - 0.05, best.1 + 0.05);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if fit_for(10f64.powf(x1)).2 < fit_for(10f64.powf(x2)).2 {
            b = x2;
        } else {
            a = x1;
        }
    }
    let kk = 10f64.powf(0.5 * (a + b));
    let (c, _, residual) = fit_for(kk);
    if !c.is_finite() {
        return Err(Error::DegenerateFit("power-law fit produced a non-finite exponent".into()));
    }
    Ok(RateFit { c, k_offset: kk, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_rotation;

    fn c0() -> f64 {
        2f64.ln() / (3.0 * 3f64.sqrt())
    }

    #[test]
    fn step_on_p0_adds_closed_form_increment() {
        let r = Renormalizer::new();
        let s = RenormState { p: QuadraticForm::p0().scale(30.0), k: 0, amplitude: 1.0 };
        let n = r.step(&s, None).unwrap();
        assert_eq!(n.k, 1);
        assert!(n.p.max_abs_diff(&QuadraticForm::p0().scale(30.0 + c0())) < 1e-12);
        assert!((30.0 + c0() - 30.1334).abs() < 1e-4);
    }

    #[test]
    fn step_keeps_p3_ray() {
        let r = Renormalizer::new();
        let s = RenormState { p: QuadraticForm::p3().scale(17.0), k: 0, amplitude: 1.0 };
        let n = r.step(&s, None).unwrap();
        let c = n.p.canonicalize().unwrap();
        assert!((c.delta - 0.5).abs() < 1e-12);
        assert!(c.tau > 17.0);
    }

    #[test]
    fn step_is_rotation_equivariant() {
        let r = Renormalizer::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_rotation(&mut rng);
        let base = r.step(&RenormState { p: QuadraticForm::p0().scale(30.0), k: 0, amplitude: 1.0 }, None).unwrap();
        let rot = r
            .step(&RenormState { p: QuadraticForm::p0().scale(30.0).rotate(&q).unwrap(), k: 0, amplitude: 1.0 }, None)
            .unwrap();
        assert!(rot.p.max_abs_diff(&base.p.rotate(&q).unwrap()) < 1e-10);
    }

    #[test]
    fn increment_bounds_scale_with_amplitude() {
        let r = Renormalizer::new();
        let (lo, hi) = r.increment_bounds(1.0, &[0.0]).unwrap();
        assert!((lo - c0()).abs() < 1e-10 && (hi - c0()).abs() < 1e-10);
        let (lo2, hi2) = r.increment_bounds(2.0, &[0.0]).unwrap();
        assert!((lo2 - 2.0 * c0()).abs() < 1e-10 && (hi2 - 2.0 * c0()).abs() < 1e-10);
        assert!(r.increment_bounds(1.0, &[]).is_err());
    }

    #[test]
    fn p3_trajectory_holds_the_ray() {
        let r = Renormalizer::new();
        let t = r.simulate(&QuadraticForm::p3().scale(30.0), 1.0, 100, NoiseModel::None, 0).unwrap();
        assert_eq!(t.limit, LimitClass::P3Ray);
        assert!(t.records.iter().all(|rec| (rec.delta - 0.5).abs() < 1e-10));
        let fit = rate_fit(&t).unwrap();
        assert!(fit.c.is_infinite());
    }

    #[test]
    fn synthetic_rate_fit_recovers_exponent() {
        let pts: Vec<(f64, f64)> = (0..200).map(|k| (k as f64, -(5.0 + k as f64 * std::f64::consts::LN_2).ln())).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.c - 1.0).abs() < 1e-6, "{fit:?}");
        assert!(fit.residual < 1e-6);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let r = Renormalizer::new();
        let noise = NoiseModel::Bounded { alpha: 0.2, c1: 1.0 };
        let p = QuadraticForm::p_delta(0.3).scale(30.0);
        let a = r.simulate(&p, 1.0, 50, noise, 42).unwrap();
        let b = r.simulate(&p, 1.0, 50, noise, 42).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = r.simulate(&p, 1.0, 50, noise, 43).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn simulate_rejects_bad_input() {
        let r = Renormalizer::new();
        assert!(r.simulate(&QuadraticForm::p0(), 1.0, 0, NoiseModel::None, 0).is_err());
        assert!(r.simulate(&QuadraticForm::zero(), 1.0, 5, NoiseModel::None, 0).is_err());
    }
}
