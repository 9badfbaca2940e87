//! Uniform node grids and point-evaluable fields.

use crate::error::{Error, Result};
use crate::quadform::QuadraticForm;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Anything that can be sampled at a point of ℝ³.
pub trait Field: Sync {
    fn value(&self, x: &Vector3<f64>) -> f64;
}

impl<F: Fn(&Vector3<f64>) -> f64 + Sync> Field for F {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self(x)
    }
}

impl Field for QuadraticForm {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.evaluate(x)
    }
}

/// `xᵀMx + b·x + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Polynomial {
    /// `[m11, m22, m33, m12, m13, m23]`.
    #[serde(default)]
    pub quadratic: [f64; 6],
    #[serde(default)]
    pub linear: [f64; 3],
    #[serde(default)]
    pub constant: f64,
}

impl Polynomial {
    pub fn form(&self) -> QuadraticForm {
        QuadraticForm::from_coeffs(self.quadratic)
    }
}

impl Field for Polynomial {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.form().evaluate(x) + Vector3::from(self.linear).dot(x) + self.constant
    }
}

/// Sidecar written next to a raw grid file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
    pub byte_order: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Node values on `origin + h·(i, j, k)`, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub origin: Vector3<f64>,
    pub h: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(origin: Vector3<f64>, h: f64, dims: [usize; 3]) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Invalid(format!("grid spacing must be positive, got {h}")));
        }
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Invalid(format!("grid needs at least 2 nodes per axis, got {dims:?}")));
        }
        Ok(Self { origin, h, dims, values: vec![0.0; dims[0] * dims[1] * dims[2]] })
    }

    /// `n³` nodes spanning `[c − R, c + R]³`.
    pub fn cube(center: Vector3<f64>, half_width: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid("grid needs at least 2 nodes per axis".into()));
        }
        let h = 2.0 * half_width / (n - 1) as f64;
        Self::new(center - Vector3::repeat(half_width), h, [n, n, n])
    }

    pub fn sample<F: Field + ?Sized>(origin: Vector3<f64>, h: f64, dims: [usize; 3], f: &F) -> Result<Self> {
        let mut g = Self::new(origin, h, dims)?;
        g.fill(f);
        Ok(g)
    }

    /// Same layout, values from `f`.
    pub fn fill<F: Field + ?Sized>(&mut self, f: &F) {
        let (o, h, [nx, ny, _]) = (self.origin, self.h, self.dims);
        self.values.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let x = o + Vector3::new(i as f64, j as f64, k as f64) * h;
                    slab[i + nx * j] = f.value(&x);
                }
            }
        });
    }

    pub fn like(&self, value: f64) -> Self {
        Self { origin: self.origin, h: self.h, dims: self.dims, values: vec![value; self.values.len()] }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.dims == other.dims && self.h == other.h && self.origin == other.origin
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.h
    }

    #[inline]
    pub fn point_of(&self, idx: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(idx);
        self.point(i, j, k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Upper corner of the box.
    pub fn upper(&self) -> Vector3<f64> {
        self.origin + Vector3::new((self.dims[0] - 1) as f64, (self.dims[1] - 1) as f64, (self.dims[2] - 1) as f64) * self.h
    }

    /// Fractional node coordinates of `x`.
    pub fn locate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (x - self.origin) / self.h
    }

    /// Trilinear interpolation; points outside the box are clamped onto it.
    pub fn interpolate(&self, x: &Vector3<f64>) -> f64 {
        let t = self.locate(x);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let s = t[a].clamp(0.0, (n - 1) as f64);
            let b = (s.floor() as usize).min(n - 2);
            base[a] = b;
            frac[a] = s - b as f64;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
                    acc += w * self.get(base[0] + di, base[1] + dj, base[2] + dk);
                }
            }
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            origin: [self.origin.x, self.origin.y, self.origin.z],
            spacing: self.h,
            dims: self.dims,
            byte_order: "little".into(),
            dtype: "float64".into(),
            schema_version: None,
            config_digest: None,
        }
    }

    /// Raw little-endian `f64` block.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(header: &GridHeader, bytes: &[u8]) -> Result<Self> {
        if header.byte_order != "little" || header.dtype != "float64" {
            return Err(Error::Invalid(format!(
                "unsupported grid encoding {}/{}",
                header.byte_order, header.dtype
            )));
        }
        let mut g = Self::new(Vector3::from(header.origin), header.spacing, header.dims)?;
        if bytes.len() != 8 * g.values.len() {
            return Err(Error::Invalid(format!(
                "grid file holds {} bytes, expected {}",
                bytes.len(),
                8 * g.values.len()
            )));
        }
        for (v, c) in g.values.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
        }
        Ok(g)
    }

    /// Writes `path` (raw) and `path.json` (sidecar).
    pub fn write(&self, path: &Path) -> Result<()> {
        self.write_with_header(path, &self.header())
    }

    /// As [`ScalarGrid::write`] with a caller-supplied sidecar; layout fields must match.
    pub fn write_with_header(&self, path: &Path, header: &GridHeader) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes())?;
        let header = serde_json::to_string_pretty(header).map_err(|e| Error::Io(e.to_string()))?;
        crate::io::atomic_write(&sidecar_path(path), header.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let header: GridHeader = serde_json::from_str(&text).map_err(|e| Error::Invalid(e.to_string()))?;
        let bytes = std::fs::read(path)?;
        Self::from_parts(&header, &bytes)
    }
}

impl Field for ScalarGrid {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.interpolate(x)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
