//! Spherical microphone array, complex spherical harmonics and the spherical Fourier transform.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::signal::Spectrum;
use crate::SPEED_OF_SOUND;

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_RADIUS: f64 = 0.042;
/// Maximum radial equalization gain relative to `b_0(0)`, 40 dB.
pub const DEFAULT_MAX_GAIN: f64 = 100.0;

/// Number of coefficients up to and including `order`.
pub fn sh_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// Flat index of `(n, m)`.
pub fn sh_index(n: usize, m: i64) -> usize {
    (n * n) + (n as i64 + m) as usize
}

/// Order `n` of each flat index.
pub fn sh_orders(order: usize) -> Vec<usize> {
    (0..=order).flat_map(|n| std::iter::repeat_n(n, 2 * n + 1)).collect()
}

/// Orthonormal complex spherical harmonics `Y_n^m(direction)` with the Condon-Shortley phase,
/// laid out by [`sh_index`].
pub fn sh_basis(direction: Vec3, order: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); sh_count(order)];
    sh_basis_into(direction, order, &mut out);
    out
}

pub fn sh_basis_into(direction: Vec3, order: usize, out: &mut [Complex64]) {
    let (theta, phi) = direction.to_spherical();
    let x = theta.cos();
    let s = theta.sin();
    let p = legendre_table(order, x, s);
    for n in 0..=order {
        for m in 0..=n {
            let norm = ((2 * n + 1) as f64 / (4.0 * PI) * factorial_ratio(n - m, n + m)).sqrt();
            let y = Complex64::from_polar(norm * p[n][m], m as f64 * phi);
            out[sh_index(n, m as i64)] = y;
            if m > 0 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                out[sh_index(n, -(m as i64))] = y.conj() * sign;
            }
        }
    }
}

/// `(a)! / (b)!` for `a ≤ b`.
fn factorial_ratio(a: usize, b: usize) -> f64 {
    ((a + 1)..=b).fold(1.0, |acc, k| acc / k as f64)
}

/// Associated Legendre functions `P_n^m(x)` for `m ≥ 0`, including the Condon-Shortley phase.
fn legendre_table(order: usize, x: f64, s: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    p[0][0] = 1.0;
    for m in 1..=order {
        p[m][m] = -((2 * m - 1) as f64) * s * p[m - 1][m - 1];
    }
    for m in 0..order {
        p[m + 1][m] = (2 * m + 1) as f64 * x * p[m][m];
    }
    for m in 0..=order {
        for n in (m + 2)..=order {
            p[n][m] = ((2 * n - 1) as f64 * x * p[n - 1][m] - (n + m - 1) as f64 * p[n - 2][m])
                / (n - m) as f64;
        }
    }
    p
}

/// Spherical Bessel function of the first kind `j_n(x)`.
pub fn spherical_bessel_j(n: usize, x: f64) -> f64 {
    if x.abs() < n as f64 + 0.5 {
        // Ascending series, well conditioned below the turning point.
        let mut dfact = 1.0;
        for k in 0..=n {
            dfact *= (2 * k + 1) as f64;
        }
        let lead = x.powi(n as i32) / dfact;
        let q = -0.5 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..60 {
            term *= q / (k as f64 * (2 * n + 2 * k + 1) as f64);
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return lead * sum;
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    if n == 0 {
        return j0;
    }
    let mut jm = j0;
    let mut j = s / (x * x) - c / x;
    for k in 1..n {
        let next = (2 * k + 1) as f64 / x * j - jm;
        jm = j;
        j = next;
    }
    j
}

/// Open-sphere radial function `b_n(ka) = 4π iⁿ j_n(ka)`.
pub fn radial_open(n: usize, ka: f64) -> Complex64 {
    Complex64::new(0.0, 1.0).powu(n as u32) * (4.0 * PI * spherical_bessel_j(n, ka))
}

/// Soft-limited inverse of `b_n(ka)`. Magnitude never exceeds `max_gain / 4π`.
pub fn radial_equalizer(n: usize, ka: f64, max_gain: f64) -> Complex64 {
    let bt = radial_open(n, ka) / (4.0 * PI);
    let mag = bt.norm();
    let phase = if mag > 0.0 {
        bt.conj() / mag
    } else {
        Complex64::new(0.0, 1.0).powu(n as u32).conj()
    };
    let lim = if mag > 0.0 {
        (2.0 * max_gain / PI) * (PI / (2.0 * max_gain * mag)).atan()
    } else {
        max_gain
    };
    phase * lim / (4.0 * PI)
}

/// True when the limiter changes `|1/b_n|` by more than `tol` (relative).
pub fn radial_limited(n: usize, ka: f64, max_gain: f64, tol: f64) -> bool {
    let exact = 1.0 / radial_open(n, ka).norm();
    let eq = radial_equalizer(n, ka, max_gain).norm();
    !exact.is_finite() || (eq - exact).abs() > tol * exact
}

/// Microphone directions on a sphere plus the array pose in the room.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    /// Unit directions in the array's local frame.
    pub directions: Vec<Vec3>,
    /// Quadrature weights summing to 4π.
    pub weights: Vec<f64>,
    pub radius: f64,
    pub position: Vec3,
    pub orientation: Mat3,
}

impl ArrayGeometry {
    /// 32 capsules at the vertices of an icosahedron and its dual dodecahedron. With these
    /// weights the layout integrates polynomials up to degree 9 exactly.
    pub fn default_32(radius: f64) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut dirs = Vec::with_capacity(32);
        for &a in &[-1.0, 1.0] {
            for &b in &[-phi, phi] {
                dirs.push(Vec3::new(0.0, a, b));
                dirs.push(Vec3::new(a, b, 0.0));
                dirs.push(Vec3::new(b, 0.0, a));
            }
        }
        for &a in &[-1.0, 1.0] {
            for &b in &[-1.0, 1.0] {
                for &c in &[-1.0, 1.0] {
                    dirs.push(Vec3::new(a, b, c));
                }
            }
        }
        for &a in &[-1.0 / phi, 1.0 / phi] {
            for &b in &[-phi, phi] {
                dirs.push(Vec3::new(a, 0.0, b));
                dirs.push(Vec3::new(0.0, b, a));
                dirs.push(Vec3::new(b, a, 0.0));
            }
        }
        let dirs: Vec<Vec3> = dirs.into_iter().map(Vec3::normalized).collect();
        let weights = (0..32)
            .map(|i| 4.0 * PI * if i < 12 { 25.0 } else { 27.0 } / 840.0)
            .collect();
        Self {
            directions: dirs,
            weights,
            radius,
            position: Vec3::ZERO,
            orientation: Mat3::IDENTITY,
        }
    }

    /// Custom layout with equal quadrature weights.
    pub fn custom(directions: Vec<Vec3>, radius: f64) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Config("array needs at least one microphone".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Config(format!("array radius must be positive, got {radius}")));
        }
        let mut dirs = Vec::with_capacity(directions.len());
        for d in directions {
            dirs.push(
                d.try_normalize()
                    .ok_or_else(|| Error::Config("zero microphone direction".into()))?,
            );
        }
        let w = 4.0 * PI / dirs.len() as f64;
        Ok(Self {
            weights: vec![w; dirs.len()],
            directions: dirs,
            radius,
            position: Vec3::ZERO,
            orientation: Mat3::IDENTITY,
        })
    }

    pub fn with_pose(mut self, position: Vec3, orientation: Mat3) -> Self {
        self.position = position;
        self.orientation = orientation;
        self
    }

    pub fn mic_count(&self) -> usize {
        self.directions.len()
    }

    /// Microphone directions rotated into the room frame.
    pub fn world_directions(&self) -> Vec<Vec3> {
        self.directions
            .iter()
            .map(|&d| self.orientation.apply(d))
            .collect()
    }

    /// Largest deviation of the weighted discrete Gram matrix from the identity.
    pub fn orthonormality_error(&self, order: usize) -> f64 {
        let dim = sh_count(order);
        let ys: Vec<Vec<Complex64>> = self.directions.iter().map(|&d| sh_basis(d, order)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let g: Complex64 = ys
                    .iter()
                    .zip(&self.weights)
                    .map(|(y, &w)| y[i].conj() * y[j] * w)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).norm());
            }
        }
        worst
    }

    /// Checks the quadrature condition up to `order`.
    pub fn validate(&self, order: usize) -> Result<()> {
        if self.mic_count() < sh_count(order) {
            return Err(Error::Config(format!(
                "{} microphones cannot resolve order {order}",
                self.mic_count()
            )));
        }
        let e = self.orthonormality_error(order);
        if e > 1e-2 {
            return Err(Error::Config(format!(
                "microphone layout is not a quadrature to order {order} (error {e:.3e})"
            )));
        }
        Ok(())
    }
}

/// Harmonic coefficients per frequency bin, `dim = (order+1)²` entries per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    pub order: usize,
    pub data: Vec<Complex64>,
    pub sample_rate: f64,
    pub frame_length: usize,
    pub padded_length: usize,
}

impl ShCoefficients {
    pub fn dim(&self) -> usize {
        sh_count(self.order)
    }

    pub fn bin_count(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn bin(&self, k: usize) -> &[Complex64] {
        let d = self.dim();
        &self.data[k * d..(k + 1) * d]
    }

    pub fn bin_mut(&mut self, k: usize) -> &mut [Complex64] {
        let d = self.dim();
        &mut self.data[k * d..(k + 1) * d]
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.padded_length as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c *= s);
        out
    }
}

/// Precomputed least-squares encoder for one array.
#[derive(Debug, Clone)]
pub struct SphericalTransform {
    pub order: usize,
    pub radius: f64,
    pub max_gain: f64,
    /// `dim × Q` row-major encoder mapping mic pressures to pressure coefficients.
    encoder: Vec<Complex64>,
    /// `Q × dim` row-major synthesis matrix `Y_n^m(u_q)`.
    synth: Vec<Complex64>,
    mics: usize,
}

impl SphericalTransform {
    pub fn new(geom: &ArrayGeometry, order: usize, max_gain: f64) -> Result<Self> {
        geom.validate(order)?;
        let q = geom.mic_count();
        let dim = sh_count(order);
        let dirs = geom.world_directions();
        let y = DMatrix::from_fn(q, dim, |r, c| sh_basis(dirs[r], order)[c]);
        let mut yhw = y.adjoint();
        for r in 0..dim {
            for c in 0..q {
                yhw[(r, c)] *= geom.weights[c];
            }
        }
        let gram = &yhw * &y;
        let enc = gram
            .lu()
            .solve(&yhw)
            .ok_or_else(|| Error::Config("microphone layout gives a singular projection".into()))?;
        let encoder = (0..dim)
            .flat_map(|r| (0..q).map(move |c| (r, c)))
            .map(|(r, c)| enc[(r, c)])
            .collect();
        let synth = (0..q)
            .flat_map(|r| (0..dim).map(move |c| (r, c)))
            .map(|(r, c)| y[(r, c)])
            .collect();
        Ok(Self {
            order,
            radius: geom.radius,
            max_gain,
            encoder,
            synth,
            mics: q,
        })
    }

    pub fn dim(&self) -> usize {
        sh_count(self.order)
    }

    /// Pressure coefficients for one bin (no radial equalization).
    pub fn project(&self, pressures: &[Complex64]) -> Vec<Complex64> {
        let q = self.mics;
        (0..self.dim())
            .map(|r| {
                self.encoder[r * q..(r + 1) * q]
                    .iter()
                    .zip(pressures)
                    .map(|(e, p)| e * p)
                    .sum()
            })
            .collect()
    }

    /// Mic pressures from pressure coefficients.
    pub fn synthesize(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let d = self.dim();
        (0..self.mics)
            .map(|r| {
                self.synth[r * d..(r + 1) * d]
                    .iter()
                    .zip(coeffs)
                    .map(|(y, c)| y * c)
                    .sum()
            })
            .collect()
    }

    /// Radial equalizers per order at frequency `f`.
    pub fn equalizers(&self, f: f64) -> Vec<Complex64> {
        let ka = 2.0 * PI * f * self.radius / SPEED_OF_SOUND;
        (0..=self.order)
            .map(|n| radial_equalizer(n, ka, self.max_gain))
            .collect()
    }

    /// Plane-wave density coefficients `M[f]` for every bin of the mic spectra.
    pub fn transform(&self, mic_spectra: &[Spectrum]) -> Result<ShCoefficients> {
        self.transform_bins(mic_spectra, 0..=usize::MAX)
    }

    /// Like [`transform`](Self::transform) but leaves bins outside `bins` at zero.
    pub fn transform_bins(
        &self,
        mic_spectra: &[Spectrum],
        bins: std::ops::RangeInclusive<usize>,
    ) -> Result<ShCoefficients> {
        if mic_spectra.len() != self.mics {
            return Err(Error::Signal(format!(
                "expected {} channels, got {}",
                self.mics,
                mic_spectra.len()
            )));
        }
        let first = &mic_spectra[0];
        if mic_spectra.iter().any(|s| !s.same_grid(first) || s.bins.len() != first.bins.len()) {
            return Err(Error::Signal("channels do not share a bin grid".into()));
        }
        let nb = first.bins.len();
        let dim = self.dim();
        let orders = sh_orders(self.order);
        let mut out = ShCoefficients {
            order: self.order,
            data: vec![Complex64::new(0.0, 0.0); nb * dim],
            sample_rate: first.sample_rate,
            frame_length: first.frame_length,
            padded_length: first.padded_length,
        };
        let lo = *bins.start();
        let hi = (*bins.end()).min(nb - 1);
        let mut p = vec![Complex64::new(0.0, 0.0); self.mics];
        for k in lo..=hi {
            for (c, s) in p.iter_mut().zip(mic_spectra) {
                *c = s.bins[k];
            }
            let pnm = self.project(&p);
            let eq = self.equalizers(first.bin_frequency(k));
            for (i, (dst, v)) in out.bin_mut(k).iter_mut().zip(pnm).enumerate() {
                *dst = v * eq[orders[i]];
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper building a transform for `geom` and applying it.
pub fn spherical_ft(
    mic_spectra: &[Spectrum],
    geom: &ArrayGeometry,
    order: usize,
) -> Result<ShCoefficients> {
    SphericalTransform::new(geom, order, DEFAULT_MAX_GAIN)?.transform(mic_spectra)
}
