//! Small dense helpers: a closed-form symmetric 3×3 eigensolver, Gauss–Legendre
//! rules, rotations and compensated summation.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use std::f64::consts::PI;

/// Eigen-decomposition of a symmetric 3×3 matrix.
///
/// `values` are sorted descending and `vectors` holds the matching unit
/// eigenvectors as columns, forming a proper rotation (det = +1).
#[derive(Debug, Clone, Copy)]
pub struct SymEigen3 {
    pub values: Vector3<f64>,
    pub vectors: Matrix3<f64>,
}

fn char_poly(a: &Matrix3<f64>) -> (f64, f64, f64) {
    // det(λI − A) = λ³ − c2 λ² + c1 λ − c0
    let c2 = a.trace();
    let c1 = a[(0, 0)] * a[(1, 1)] + a[(0, 0)] * a[(2, 2)] + a[(1, 1)] * a[(2, 2)]
        - a[(0, 1)] * a[(0, 1)]
        - a[(0, 2)] * a[(0, 2)]
        - a[(1, 2)] * a[(1, 2)];
    let c0 = a.determinant();
    (c2, c1, c0)
}

fn newton_polish(lambda: f64, c: (f64, f64, f64)) -> f64 {
    let (c2, c1, c0) = c;
    let f = ((lambda - c2) * lambda + c1) * lambda - c0;
    let df = (3.0 * lambda - 2.0 * c2) * lambda + c1;
    if df.abs() > 1e-8 {
        let next = lambda - f / df;
        if next.is_finite() && (next - lambda).abs() < 1e-6 * (1.0 + lambda.abs()) {
            return next;
        }
    }
    lambda
}

fn trig_eigenvalues(a: &Matrix3<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q, q, q];
    }
    let b = (a - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

/// Unit vector spanning the null space of the (rank ≤ 2) matrix `m`, taken as the
/// largest cross product of two of its rows.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r0 = m.row(0).transpose();
    let r1 = m.row(1).transpose();
    let r2 = m.row(2).transpose();
    let cands = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = cands
        .iter()
        .copied()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let n = best.norm();
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if n <= 1e-14 * scale * scale {
        None
    } else {
        Some(best / n)
    }
}

/// Any unit vector orthogonal to `v`.
pub fn orthogonal_unit(v: &Vector3<f64>) -> Vector3<f64> {
    let axis = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
        Vector3::x()
    } else if v.y.abs() <= v.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    v.cross(&axis).normalize()
}

/// Closed-form eigen-decomposition of a symmetric 3×3 matrix.
///
/// Eigenvalues come from the trigonometric solution of the characteristic cubic
/// with one Newton step each. The eigenvector of the most isolated extreme
/// eigenvalue is taken from a null-space cross product; the remaining pair is
/// resolved exactly by a 2×2 Jacobi rotation in the orthogonal plane, which keeps
/// repeated eigenvalues well conditioned.
pub fn sym_eigen3(a: &Matrix3<f64>) -> SymEigen3 {
    let a = (a + a.transpose()) * 0.5;
    // Work with the trace-free part so that clustered spectra keep relative accuracy.
    let shift = a.trace() / 3.0;
    let a = a - Matrix3::identity() * shift;
    let scale = a.abs().max();
    if scale == 0.0 || !scale.is_finite() {
        return SymEigen3 {
            values: Vector3::repeat(if scale.is_finite() { shift } else { f64::NAN }),
            vectors: Matrix3::identity(),
        };
    }
    let s = a / scale;
    let coeffs = char_poly(&s);
    let mut ev = trig_eigenvalues(&s);
    for e in ev.iter_mut() {
        *e = newton_polish(*e, coeffs);
    }
    ev.sort_by(|x, y| y.total_cmp(x));

    // Most isolated extreme eigenvalue first.
    let (iso, iso_idx) = if ev[0] - ev[1] >= ev[1] - ev[2] {
        (ev[0], 0)
    } else {
        (ev[2], 2)
    };
    let v_iso = null_vector(&(s - Matrix3::identity() * iso)).unwrap_or_else(|| {
        // all three eigenvalues coincide
        if iso_idx == 0 {
            Vector3::x()
        } else {
            Vector3::z()
        }
    });
    let e1 = orthogonal_unit(&v_iso);
    let e2 = v_iso.cross(&e1);
    let b11 = e1.dot(&(s * e1));
    let b22 = e2.dot(&(s * e2));
    let b12 = e1.dot(&(s * e2));
    let (c, sn) = if b12 == 0.0 {
        (1.0, 0.0)
    } else {
        let theta = 0.5 * (2.0 * b12).atan2(b11 - b22);
        (theta.cos(), theta.sin())
    };
    let w1 = e1 * c + e2 * sn;
    let w2 = -e1 * sn + e2 * c;

    let mut pairs = [
        (v_iso.dot(&(s * v_iso)), v_iso),
        (w1.dot(&(s * w1)), w1),
        (w2.dot(&(s * w2)), w2),
    ];
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut vectors = Matrix3::from_columns(&[pairs[0].1, pairs[1].1, pairs[2].1]);
    if vectors.determinant() < 0.0 {
        vectors.set_column(2, &(-pairs[2].1));
    }
    SymEigen3 {
        values: Vector3::new(pairs[0].0, pairs[1].0, pairs[2].0) * scale + Vector3::repeat(shift),
        vectors,
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1] (Newton on the three-term recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = z;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Rotation by `angle` about the unit `axis` (right-hand rule).
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Uniformly distributed rotation (Shoemake's quaternion method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Angle in radians between two rotations (geodesic distance on SO(3)).
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Neumaier compensated sum in slice order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
