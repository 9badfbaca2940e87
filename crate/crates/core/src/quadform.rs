//! Homogeneous quadratic forms `p(x) = xᵀMx` on ℝ³.
//!
//! Every trace-free form can be written as `±τ·p_δ(Qx)` with
//! `p_δ = (1/2+δ)x² + (1/2−δ)y² − z²`, `δ ∈ [0, 1/2]`, a rotation `Q` and an
//! amplitude `τ` equal to the sup-norm on the unit ball. [`QuadraticForm::canonicalize`]
//! computes that parametrisation.

use crate::error::{Error, Result};
use crate::linalg::sym_eigen3;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticForm {
    m: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// The `(sign, δ, Q, τ)` parametrisation of a quadratic form plus its removed trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalForm {
    pub sign: Sign,
    pub delta: f64,
    /// Proper rotation with `P(x) = sign·τ·p_δ(Qx) + trace_part/3·|x|²`.
    pub rotation: Matrix3<f64>,
    pub tau: f64,
    pub trace_part: f64,
}

impl CanonicalForm {
    pub fn reconstruct(&self) -> QuadraticForm {
        let d = Matrix3::from_diagonal(&Vector3::new(0.5 + self.delta, 0.5 - self.delta, -1.0));
        let m = self.rotation.transpose() * d * self.rotation * (self.sign.value() * self.tau)
            + Matrix3::identity() * (self.trace_part / 3.0);
        QuadraticForm::from_matrix(m)
    }

    /// Row `sign,delta,tau,q11..q33` (row-major Q).
    pub fn csv_row(&self) -> String {
        let q = &self.rotation;
        let mut s = format!("{},{},{}", self.sign.value() as i32, self.delta, self.tau);
        for i in 0..3 {
            for j in 0..3 {
                s.push_str(&format!(",{}", q[(i, j)]));
            }
        }
        s
    }
}

impl QuadraticForm {
    /// Symmetrises `m`.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Self { m: (m + m.transpose()) * 0.5 }
    }

    pub fn diagonal(a: f64, b: f64, c: f64) -> Self {
        Self::from_matrix(Matrix3::from_diagonal(&Vector3::new(a, b, c)))
    }

    pub fn zero() -> Self {
        Self::from_matrix(Matrix3::zeros())
    }

    /// `|x|²`.
    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity())
    }

    /// `[m11, m22, m33, m12, m13, m23]`.
    pub fn from_coeffs(c: [f64; 6]) -> Self {
        Self::from_matrix(Matrix3::new(c[0], c[3], c[4], c[3], c[1], c[5], c[4], c[5], c[2]))
    }

    pub fn coeffs(&self) -> [f64; 6] {
        let m = &self.m;
        [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
    }

    /// The normalised profile `p_δ` with the `+` sign.
    pub fn p_delta(delta: f64) -> Self {
        Self::diagonal(0.5 + delta, 0.5 - delta, -1.0)
    }

    /// `p₀ = (x² + y²)/2 − z²`.
    pub fn p0() -> Self {
        Self::p_delta(0.0)
    }

    /// `p₃ = x² − z²`.
    pub fn p3() -> Self {
        Self::p_delta(0.5)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn evaluate(&self, x: &Vector3<f64>) -> f64 {
        x.dot(&(self.m * x))
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.m * x * 2.0
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn trace_free(&self) -> Self {
        Self::from_matrix(self.m - Matrix3::identity() * (self.m.trace() / 3.0))
    }

    /// `max_{B₁} |p|`, the spectral radius of the matrix.
    pub fn sup_norm(&self) -> f64 {
        let e = sym_eigen3(&self.m);
        e.values[0].abs().max(e.values[2].abs())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { m: self.m * s }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { m: self.m + other.m }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { m: self.m - other.m }
    }

    /// `p(Q·)`, i.e. the matrix `QᵀMQ`.
    pub fn rotate(&self, q: &Matrix3<f64>) -> Result<Self> {
        let defect = (q.transpose() * q - Matrix3::identity()).abs().max();
        if !(defect <= 1e-10) {
            return Err(Error::NotOrthogonal { defect });
        }
        Ok(Self::from_matrix(q.transpose() * self.m * q))
    }

    pub fn default_tol(&self) -> f64 {
        1e-10 * self.m.abs().max().max(1.0)
    }

    pub fn canonicalize(&self) -> Result<CanonicalForm> {
        self.canonicalize_with(self.default_tol())
    }

    pub fn canonicalize_with(&self, tol: f64) -> Result<CanonicalForm> {
        let trace_part = self.m.trace();
        let tf = self.trace_free();
        let e = sym_eigen3(&tf.m);
        let (l1, l2, l3) = (e.values[0], e.values[1], e.values[2]);
        let v = e.vectors;
        let scale = l1.abs().max(l3.abs());
        if !(scale >= tol) {
            return Err(Error::ZeroForm { tau: scale, tol });
        }
        // Exact ties |λ₃| = λ₁ (δ = 1/2) resolve to the + sign.
        let tie = 4.0 * f64::EPSILON * scale;
        let (sign, tau, top, mid, rows) = if l3.abs() >= l1 - tie {
            (Sign::Plus, -l3, l1, l2, [v.column(0), v.column(1), v.column(2)])
        } else {
            (Sign::Minus, l1, -l3, -l2, [v.column(2), v.column(1), v.column(0)])
        };
        let delta = ((top - mid) / (2.0 * tau)).clamp(0.0, 0.5);
        let mut rotation = Matrix3::from_rows(&[
            rows[0].transpose(),
            rows[1].transpose(),
            rows[2].transpose(),
        ]);
        if rotation.determinant() < 0.0 {
            let r = -rotation.row(0);
            rotation.set_row(0, &r);
        }
        Ok(CanonicalForm { sign, delta, rotation, tau, trace_part })
    }

    /// Row `m11,m22,m33,m12,m13,m23`.
    pub fn csv_row(&self) -> String {
        let c = self.coeffs();
        format!("{},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4], c[5])
    }

    pub fn parse_csv_row(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("bad form row {s:?}: {e}")))?;
        let arr: [f64; 6] = vals
            .try_into()
            .map_err(|_| Error::Invalid(format!("form row needs 6 numbers: {s:?}")))?;
        Ok(Self::from_coeffs(arr))
    }

    /// Largest absolute coefficient difference between the matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.m - other.m).abs().max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{axis_angle, random_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evaluate_examples() {
        assert_eq!(QuadraticForm::p0().evaluate(&Vector3::new(0.0, 0.0, 1.0)), -1.0);
        assert_eq!(QuadraticForm::identity().evaluate(&Vector3::new(1.0, 1.0, 1.0)), 3.0);
        let s = 0.5f64.sqrt();
        assert!(QuadraticForm::p3().evaluate(&Vector3::new(s, 0.0, s)).abs() < 1e-15);
    }

    #[test]
    fn sup_norm_examples() {
        assert!((QuadraticForm::p0().sup_norm() - 1.0).abs() < 1e-14);
        assert!((QuadraticForm::p3().sup_norm() - 1.0).abs() < 1e-14);
        assert!((QuadraticForm::p0().scale(7.0).sup_norm() - 7.0).abs() < 1e-13);
    }

    #[test]
    fn canonicalize_p0_and_p3() {
        let c = QuadraticForm::p0().canonicalize().unwrap();
        assert_eq!(c.sign, Sign::Plus);
        assert!(c.delta.abs() < 1e-14);
        assert!((c.tau - 1.0).abs() < 1e-14);
        // third row is the ±z axis; with δ = 0 the first two rows are a gauge choice
        assert!((c.rotation.row(2)[2].abs() - 1.0).abs() < 1e-14);
        assert!(c.reconstruct().max_abs_diff(&QuadraticForm::p0()) < 1e-14);

        let c = QuadraticForm::p3().canonicalize().unwrap();
        assert_eq!(c.sign, Sign::Plus);
        assert!((c.delta - 0.5).abs() < 1e-14);
        assert!((c.tau - 1.0).abs() < 1e-14);
        let c = QuadraticForm::p3().scale(-1.0).canonicalize().unwrap();
        assert_eq!(c.sign, Sign::Plus);
        assert!((c.delta - 0.5).abs() < 1e-14);
    }

    #[test]
    fn canonicalize_negative_profile() {
        let p = QuadraticForm::p_delta(0.2).scale(-3.0);
        let c = p.canonicalize().unwrap();
        assert_eq!(c.sign, Sign::Minus);
        assert!((c.delta - 0.2).abs() < 1e-13);
        assert!((c.tau - 3.0).abs() < 1e-13);
        assert!(c.reconstruct().max_abs_diff(&p) < 1e-13);
    }

    #[test]
    fn canonicalize_random_rotation_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_rotation(&mut rng);
        let p = QuadraticForm::diagonal(0.75, 0.25, -1.0).rotate(&q).unwrap();
        let c = p.canonicalize().unwrap();
        assert!((c.delta - 0.25).abs() < 1e-12);
        assert!((c.tau - 1.0).abs() < 1e-12);
        // rows agree with Q up to sign
        for i in 0..3 {
            let d = c.rotation.row(i).dot(&q.row(i)).abs();
            assert!((d - 1.0).abs() < 1e-10);
        }
        assert!(c.reconstruct().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn zero_form_rejected() {
        assert!(matches!(QuadraticForm::zero().canonicalize(), Err(Error::ZeroForm { .. })));
        // pure trace is also "zero" after removing the trace
        assert!(matches!(QuadraticForm::identity().canonicalize(), Err(Error::ZeroForm { .. })));
    }

    #[test]
    fn rotate_examples() {
        let q = axis_angle(Vector3::z(), 0.7);
        assert!(QuadraticForm::p0().rotate(&q).unwrap().max_abs_diff(&QuadraticForm::p0()) < 1e-15);
        let swap = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let r = QuadraticForm::p3().rotate(&swap).unwrap();
        assert!(r.max_abs_diff(&QuadraticForm::p3().scale(-1.0)) < 1e-15);
        let bad = Matrix3::identity() * 1.1;
        assert!(matches!(QuadraticForm::p0().rotate(&bad), Err(Error::NotOrthogonal { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let p = QuadraticForm::from_coeffs(c);
        let q = random_rotation(&mut rng);
        let back = p.rotate(&q).unwrap().rotate(&q.transpose()).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-14);
    }

    #[test]
    fn csv_rows() {
        let p = QuadraticForm::from_coeffs([1.0, 2.0, 3.0, 0.5, -0.25, 4.0]);
        let row = p.csv_row();
        assert_eq!(row, "1,2,3,0.5,-0.25,4");
        assert_eq!(QuadraticForm::parse_csv_row(&row).unwrap(), p);
        assert!(QuadraticForm::parse_csv_row("1,2").is_err());
        let c = QuadraticForm::p0().canonicalize().unwrap();
        assert_eq!(c.csv_row().split(',').count(), 12);
    }
}
