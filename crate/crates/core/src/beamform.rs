//! MVDR beam-energy maps, peak picking and separation signals in the harmonic domain.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::signal::{bin_range, inverse_dft, Spectrum, TimeSignal};
use crate::sphharm::{sh_basis, sh_count, ShCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformConfig {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub resolution_deg: f64,
    pub max_peaks: usize,
    pub floor_ratio: f64,
    /// Diagonal loading relative to the mean covariance eigenvalue.
    pub loading: f64,
    /// Band kept in separation signals.
    pub extract_lo_hz: f64,
    pub extract_hi_hz: f64,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            band_lo_hz: 2000.0,
            band_hi_hz: 8000.0,
            resolution_deg: 5.0,
            max_peaks: 10,
            floor_ratio: 0.3,
            loading: 1e-3,
            extract_lo_hz: 2000.0,
            extract_hi_hz: 8000.0,
        }
    }
}

impl BeamformConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("beamform: {m}")));
        if !(self.band_lo_hz >= 0.0 && self.band_hi_hz > self.band_lo_hz) {
            return bad("analysis band must satisfy 0 <= lo < hi");
        }
        if !(self.extract_lo_hz >= 0.0 && self.extract_hi_hz > self.extract_lo_hz) {
            return bad("extraction band must satisfy 0 <= lo < hi");
        }
        if !(self.resolution_deg > 0.0 && self.resolution_deg <= 90.0 && (180.0 / self.resolution_deg).fract().abs() < 1e-9) {
            return bad("resolution must divide 180 degrees");
        }
        if !(self.floor_ratio >= 0.0 && self.floor_ratio <= 1.0) {
            return bad("floor_ratio must lie in [0, 1]");
        }
        if !(self.loading > 0.0) {
            return bad("loading must be positive");
        }
        Ok(())
    }
}

/// Beam energy over an elevation × azimuth grid. Row 0 is the +z pole, the last row the -z pole.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamMap {
    pub resolution_deg: f64,
    pub n_theta: usize,
    pub n_phi: usize,
    pub energy: Vec<f64>,
}

impl BeamMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.energy[i * self.n_phi + j]
    }

    pub fn direction(&self, i: usize, j: usize) -> Vec3 {
        grid_direction(self.resolution_deg, i, j)
    }

    pub fn max(&self) -> f64 {
        self.energy.iter().copied().fold(0.0, f64::max)
    }

    /// CSV grid: one row per elevation, one column per azimuth.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "theta_deg")?;
        for j in 0..self.n_phi {
            write!(w, ",{}", j as f64 * self.resolution_deg)?;
        }
        writeln!(w)?;
        for i in 0..self.n_theta {
            write!(w, "{}", i as f64 * self.resolution_deg)?;
            for j in 0..self.n_phi {
                write!(w, ",{:.6e}", self.get(i, j))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn grid_shape(res: f64) -> (usize, usize) {
    let n_theta = (180.0 / res).round() as usize + 1;
    let n_phi = (360.0 / res).round() as usize;
    (n_theta, n_phi)
}

fn grid_direction(res: f64, i: usize, j: usize) -> Vec3 {
    let t = (i as f64 * res).to_radians();
    let p = (j as f64 * res).to_radians();
    Vec3::from_spherical(t, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionEstimate {
    pub direction: Vec3,
    pub energy: f64,
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationSignal {
    pub direction: Vec3,
    pub spectrum: Spectrum,
    pub signal: TimeSignal,
}

/// Steering vectors for a fixed grid and harmonic order.
#[derive(Debug, Clone)]
pub struct Beamformer {
    pub order: usize,
    pub config: BeamformConfig,
    n_theta: usize,
    n_phi: usize,
    /// `Y*(d)` per grid cell, rows of length `dim`.
    steering: Vec<Complex64>,
}

impl Beamformer {
    pub fn new(order: usize, config: BeamformConfig) -> Result<Self> {
        config.validate()?;
        let (n_theta, n_phi) = grid_shape(config.resolution_deg);
        let dim = sh_count(order);
        let mut steering = Vec::with_capacity(n_theta * n_phi * dim);
        for i in 0..n_theta {
            for j in 0..n_phi {
                let y = sh_basis(grid_direction(config.resolution_deg, i, j), order);
                steering.extend(y.iter().map(|c| c.conj()));
            }
        }
        Ok(Self {
            order,
            config,
            n_theta,
            n_phi,
            steering,
        })
    }

    /// Frequency-smoothed, diagonally loaded covariance of `m` over the analysis band.
    pub fn covariance(&self, m: &ShCoefficients) -> Result<DMatrix<Complex64>> {
        let dim = m.dim();
        let range = bin_range(m.padded_length, m.sample_rate, self.config.band_lo_hz, self.config.band_hi_hz);
        let hi = (*range.end()).min(m.bin_count() - 1);
        let lo = *range.start();
        if lo > hi {
            return Err(Error::Config("analysis band contains no bins".into()));
        }
        let mut r = DMatrix::<Complex64>::zeros(dim, dim);
        for k in lo..=hi {
            let v = DVector::from_column_slice(m.bin(k));
            r.ger(Complex64::new(1.0, 0.0), &v, &v.conjugate(), Complex64::new(1.0, 0.0));
        }
        r /= Complex64::new((hi - lo + 1) as f64, 0.0);
        let trace: f64 = (0..dim).map(|i| r[(i, i)].re).sum();
        if !(trace > 0.0) || !trace.is_finite() {
            return Err(Error::SingularCovariance);
        }
        let lambda = self.config.loading * trace / dim as f64;
        for i in 0..dim {
            r[(i, i)] += Complex64::new(lambda, 0.0);
        }
        Ok(r)
    }

    pub fn mvdr_map(&self, m: &ShCoefficients) -> Result<BeamMap> {
        if m.order != self.order {
            return Err(Error::Config(format!(
                "coefficients of order {} given to an order-{} beamformer",
                m.order, self.order
            )));
        }
        let r = self.covariance(m)?;
        let dim = m.dim();
        let rinv = Cholesky::new(r)
            .ok_or(Error::SingularCovariance)?
            .inverse();
        let rinv: Vec<Complex64> = rinv.iter().copied().collect(); // column-major
        let energy: Vec<f64> = self
            .steering
            .par_chunks(dim)
            .map(|v| {
                let mut q = Complex64::new(0.0, 0.0);
                for c in 0..dim {
                    let col = &rinv[c * dim..(c + 1) * dim];
                    let mut t = Complex64::new(0.0, 0.0);
                    for (rr, x) in col.iter().zip(v) {
                        t += x.conj() * rr;
                    }
                    q += t * v[c];
                }
                1.0 / q.re.max(f64::MIN_POSITIVE)
            })
            .collect();
        Ok(BeamMap {
            resolution_deg: self.config.resolution_deg,
            n_theta: self.n_theta,
            n_phi: self.n_phi,
            energy,
        })
    }

    /// All-zero map on this beamformer's grid.
    pub fn empty_map(&self) -> BeamMap {
        BeamMap {
            resolution_deg: self.config.resolution_deg,
            n_theta: self.n_theta,
            n_phi: self.n_phi,
            energy: vec![0.0; self.n_theta * self.n_phi],
        }
    }

    pub fn find_peaks(&self, map: &BeamMap) -> Vec<DirectionEstimate> {
        find_peaks(map, self.config.max_peaks, self.config.floor_ratio)
    }

    pub fn extract(&self, m: &ShCoefficients, direction: Vec3) -> SeparationSignal {
        extract_separation(m, direction, self.config.extract_lo_hz, self.config.extract_hi_hz)
    }
}

/// Neighbours of cell `(i, j)`; each pole row acts as one cell bordering the whole adjacent row.
fn neighbours(map: &BeamMap, i: usize, j: usize) -> Vec<(usize, usize)> {
    let (nt, np) = (map.n_theta, map.n_phi);
    let last = nt - 1;
    if i == 0 {
        return (0..np).map(|jj| (1, jj)).collect();
    }
    if i == last {
        return (0..np).map(|jj| (last - 1, jj)).collect();
    }
    let mut out = Vec::with_capacity(8);
    for di in [-1i64, 0, 1] {
        let ii = (i as i64 + di) as usize;
        if ii == 0 || ii == last {
            out.push((ii, 0));
            continue;
        }
        for dj in [-1i64, 0, 1] {
            if di == 0 && dj == 0 {
                continue;
            }
            let jj = (j as i64 + dj).rem_euclid(np as i64) as usize;
            out.push((ii, jj));
        }
    }
    out
}

/// Strict local maxima above `floor_ratio × max`, strongest first, at most `max_peaks`.
pub fn find_peaks(map: &BeamMap, max_peaks: usize, floor_ratio: f64) -> Vec<DirectionEstimate> {
    let global = map.max();
    if !(global > 0.0) {
        return Vec::new();
    }
    let floor = floor_ratio * global;
    let mut peaks = Vec::new();
    for i in 0..map.n_theta {
        let cols = if i == 0 || i == map.n_theta - 1 { 1 } else { map.n_phi };
        for j in 0..cols {
            let v = map.get(i, j);
            if v < floor {
                continue;
            }
            if neighbours(map, i, j).iter().all(|&(a, b)| map.get(a, b) < v) {
                peaks.push(DirectionEstimate {
                    direction: map.direction(i, j),
                    energy: v,
                    cell: (i, j),
                });
            }
        }
    }
    peaks.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.cell.cmp(&b.cell)));
    peaks.truncate(max_peaks);
    peaks
}

/// `S[f] = Σ M·W*` with the plane-wave decomposition pattern `W = 4π/(N+1)²·Y*(d)`, which passes
/// a unit plane wave from `direction` undistorted. Bins outside `[lo_hz, hi_hz]` are zeroed.
pub fn extract_separation(m: &ShCoefficients, direction: Vec3, lo_hz: f64, hi_hz: f64) -> SeparationSignal {
    let dim = m.dim();
    let scale = 4.0 * PI / dim as f64;
    let y = sh_basis(direction, m.order);
    let mut spectrum = Spectrum::zeros(m.padded_length, m.frame_length, m.sample_rate);
    let range = bin_range(m.padded_length, m.sample_rate, lo_hz, hi_hz);
    let top = spectrum.bins.len() - 1;
    for k in range {
        if k == 0 || k >= top || k >= m.bin_count() {
            continue;
        }
        // W* = scale·Y(d).
        spectrum.bins[k] = m
            .bin(k)
            .iter()
            .zip(&y)
            .map(|(c, yy)| c * yy)
            .sum::<Complex64>()
            * scale;
    }
    let signal = inverse_dft(&spectrum);
    SeparationSignal {
        direction: direction.normalized(),
        spectrum,
        signal,
    }
}
