//! Pairwise correlation of back-propagated signals at per-particle path points.
//!
//! Back-propagation only rotates phases by the travel distance and rescales octave bands, so the
//! circular correlation of two back-propagated signals is a fixed band-limited function of the
//! lag, `b(τ + Δ)`, shifted by `Δ = (l_m − l_n)·fs/c`. [`FastCorrelator`] precomputes `b` per pair
//! and per reflection-order combination; [`NaiveCorrelator`] back-propagates explicitly.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;

use crate::backprop::{back_propagate, bin_bands, reflection_amplification_bands, MaterialTable};
use crate::error::{Error, Result};
use crate::geometry::{PathPoint, RayPath};
use crate::signal::{circular_lags, fft_inverse, xcorr_peak_circular, CorrelationResult, Spectrum};
use crate::SPEED_OF_SOUND;

/// Computes `(a_cc, l_cc)` for every path pair at the given feet. Results are indexed by
/// [`pair_index`]; `None` marks a pair with a zero-energy signal.
pub trait PairCorrelator: Sync {
    fn path_count(&self) -> usize;
    fn correlate_all(&self, feet: &[PathPoint]) -> Result<Vec<Option<CorrelationResult>>>;
}

/// Index of the unordered pair `n < m` among `count` paths.
pub fn pair_index(n: usize, m: usize, count: usize) -> usize {
    debug_assert!(n < m && m < count);
    n * (2 * count - n - 1) / 2 + (m - n - 1)
}

pub fn pair_count(count: usize) -> usize {
    count * count.saturating_sub(1) / 2
}

/// Explicit back-propagation followed by a circular cross-correlation.
pub struct NaiveCorrelator<'a> {
    pub spectra: &'a [Spectrum],
    pub paths: &'a [RayPath],
    pub materials: &'a MaterialTable,
}

impl PairCorrelator for NaiveCorrelator<'_> {
    fn path_count(&self) -> usize {
        self.paths.len()
    }

    fn correlate_all(&self, feet: &[PathPoint]) -> Result<Vec<Option<CorrelationResult>>> {
        let n = self.paths.len();
        let bps = (0..n)
            .map(|i| back_propagate(&self.spectra[i], &self.paths[i], &feet[i], self.materials))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(pair_count(n));
        for a in 0..n {
            for b in a + 1..n {
                out.push(match xcorr_peak_circular(&bps[a].signal, &bps[b].signal) {
                    Ok(r) => Some(r),
                    Err(Error::ZeroEnergy) => None,
                    Err(e) => return Err(e),
                });
            }
        }
        Ok(out)
    }
}

/// Grid oversampling of the correlation tables.
const OVERSAMPLE: usize = 4;
/// Half-width, in samples, of the window searched around each table peak.
const REACH: f64 = 1.0 + 1.0 / OVERSAMPLE as f64;

struct Peak {
    /// Bound on `b` anywhere in this peak's basin.
    upper: f64,
    /// Grid position of the peak, in samples within `[0, N)`.
    at: f64,
    taylor: OnceLock<Vec<f64>>,
}

/// `b(t) = Re Σ_k c_k e^{jω_k t}` for one pair and one pair of reflection orders.
struct Table {
    norm: f64,
    /// Nonzero bins `(k, ω_k, c_k)`.
    terms: Vec<(usize, f64, Complex64)>,
    peaks: Vec<Peak>,
    degree: usize,
}

impl Table {
    fn build(sn: &Spectrum, sm: &Spectrum, gn: &[f64; 7], gm: &[f64; 7], bands: &[usize]) -> Table {
        let n = sn.padded_length;
        let nb = sn.bins.len();
        let weight = |k: usize| if k == 0 || (n.is_multiple_of(2) && k == nb - 1) { 1.0 } else { 2.0 };
        let mut en = 0.0;
        let mut em = 0.0;
        let mut terms = Vec::new();
        for k in 0..nb {
            let (a, b) = (sn.bins[k], sm.bins[k]);
            let (ga, gb) = (gn[bands[k]], gm[bands[k]]);
            let w = weight(k) / n as f64;
            en += w * a.norm_sqr() * ga * ga;
            em += w * b.norm_sqr() * gb * gb;
            let y = a.conj() * b * (ga * gb * w);
            if y != Complex64::new(0.0, 0.0) {
                terms.push((k, 2.0 * PI * k as f64 / n as f64, y));
            }
        }
        let norm = (en * em).sqrt();
        if !(norm > 0.0) {
            return Table {
                norm: 0.0,
                terms,
                peaks: Vec::new(),
                degree: 0,
            };
        }
        let abs_sum: f64 = terms.iter().map(|(_, _, c)| c.norm()).sum();
        let curvature: f64 = terms.iter().map(|(_, w, c)| c.norm() * w * w).sum();
        let omega_max = terms.iter().map(|t| t.1).fold(0.0, f64::max);

        let len = OVERSAMPLE * n;
        let mut grid = vec![Complex64::new(0.0, 0.0); len];
        for &(k, _, c) in &terms {
            grid[k] = c;
        }
        fft_inverse(len).process(&mut grid);
        let vals: Vec<f64> = grid.iter().map(|z| z.re).collect();

        let h = 1.0 / OVERSAMPLE as f64;
        // Interpolation slack plus a margin for rounding in the transform.
        let slack = curvature * h * h / 8.0 + 1e-12 * abs_sum;
        let mut peaks = Vec::new();
        for i in 0..len {
            let prev = vals[(i + len - 1) % len];
            let next = vals[(i + 1) % len];
            if vals[i] >= prev && vals[i] > next {
                peaks.push(Peak {
                    upper: vals[i] + slack,
                    at: i as f64 * h,
                    taylor: OnceLock::new(),
                });
            }
        }
        peaks.sort_by(|a, b| b.upper.total_cmp(&a.upper).then(a.at.total_cmp(&b.at)));

        // Smallest degree whose Lagrange remainder over the search window is negligible.
        let x = omega_max * REACH;
        let mut degree = 1;
        let mut term = x;
        while degree < 60 {
            term *= x / (degree + 1) as f64;
            if term * abs_sum < 1e-14 * norm {
                break;
            }
            degree += 1;
        }
        Table {
            norm,
            terms,
            peaks,
            degree,
        }
    }

    fn taylor<'s>(&'s self, peak: &'s Peak) -> &'s [f64] {
        peak.taylor.get_or_init(|| {
            let mut coef = vec![0.0; self.degree + 1];
            for &(_, w, c) in &self.terms {
                let mut z = c * Complex64::from_polar(1.0, w * peak.at);
                let step = Complex64::new(0.0, w);
                for (j, a) in coef.iter_mut().enumerate() {
                    *a += z.re;
                    z = z * step / (j + 1) as f64;
                }
            }
            coef
        })
    }

    /// Best integer lag of `b(τ + Δ)` over the circular lag range.
    fn best_lag(&self, shift: f64, n: usize) -> Option<CorrelationResult> {
        if self.norm == 0.0 {
            return None;
        }
        let lags = circular_lags(n);
        let mut best = (f64::NEG_INFINITY, 0i64);
        for peak in &self.peaks {
            if peak.upper < best.0 {
                break;
            }
            let coef = self.taylor(peak);
            let lo = (peak.at - REACH - shift).ceil() as i64;
            let hi = (peak.at + REACH - shift).floor() as i64;
            for tau in lo..=hi {
                let dx = tau as f64 + shift - peak.at;
                let v = coef.iter().rev().fold(0.0, |acc, &a| acc * dx + a);
                let lag = (tau - lags.start).rem_euclid(n as i64) + lags.start;
                if v > best.0 || (v == best.0 && lag.abs() < best.1.abs()) {
                    best = (v, lag);
                }
            }
        }
        Some(CorrelationResult {
            a_cc: (best.0 / self.norm).clamp(-1.0, 1.0),
            l_cc: best.1,
        })
    }
}

/// Lazily built correlation tables for one frame.
pub struct FastCorrelator<'a> {
    spectra: &'a [Spectrum],
    /// Per path, per segment order: band gains of the backward response.
    gains: Vec<Vec<[f64; 7]>>,
    bands: Vec<usize>,
    /// `pair × orders_n × orders_m`, flattened.
    tables: Vec<OnceLock<Table>>,
    max_orders: usize,
    padded_length: usize,
    sample_rate: f64,
}

impl<'a> FastCorrelator<'a> {
    pub fn new(spectra: &'a [Spectrum], paths: &'a [RayPath], materials: &MaterialTable) -> Result<Self> {
        if spectra.len() != paths.len() {
            return Err(Error::Config("one separation signal is needed per path".into()));
        }
        let first = spectra
            .first()
            .cloned()
            .unwrap_or_else(|| Spectrum::zeros(crate::PADDED_LENGTH, crate::FRAME_LENGTH, crate::signal::DEFAULT_SAMPLE_RATE));
        let gains = paths
            .iter()
            .map(|p| {
                (0..p.len())
                    .map(|k| reflection_amplification_bands(p, k, materials))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let max_orders = paths.iter().map(|p| p.len()).max().unwrap_or(0);
        let tables = (0..pair_count(paths.len()) * max_orders * max_orders)
            .map(|_| OnceLock::new())
            .collect();
        Ok(Self {
            spectra,
            gains,
            bands: bin_bands(first.padded_length, first.sample_rate),
            tables,
            max_orders,
            padded_length: first.padded_length,
            sample_rate: first.sample_rate,
        })
    }

    fn table(&self, a: usize, b: usize, ka: usize, kb: usize) -> &Table {
        let count = self.spectra.len();
        let idx = (pair_index(a, b, count) * self.max_orders + ka) * self.max_orders + kb;
        self.tables[idx].get_or_init(|| {
            Table::build(&self.spectra[a], &self.spectra[b], &self.gains[a][ka], &self.gains[b][kb], &self.bands)
        })
    }

    /// Number of tables built so far.
    pub fn built_tables(&self) -> usize {
        self.tables.iter().filter(|t| t.get().is_some()).count()
    }

    pub fn correlate(&self, a: usize, b: usize, fa: &PathPoint, fb: &PathPoint) -> Option<CorrelationResult> {
        let t = self.table(a, b, fa.segment_order, fb.segment_order);
        let shift = (fb.travel_distance - fa.travel_distance) * self.sample_rate / SPEED_OF_SOUND;
        t.best_lag(shift, self.padded_length)
    }
}

impl PairCorrelator for FastCorrelator<'_> {
    fn path_count(&self) -> usize {
        self.spectra.len()
    }

    fn correlate_all(&self, feet: &[PathPoint]) -> Result<Vec<Option<CorrelationResult>>> {
        let n = self.spectra.len();
        let mut out = Vec::with_capacity(pair_count(n));
        for a in 0..n {
            for b in a + 1..n {
                out.push(self.correlate(a, b, &feet[a], &feet[b]));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_indices_are_dense() {
        let n = 6;
        let mut seen = vec![];
        for a in 0..n {
            for b in a + 1..n {
                seen.push(pair_index(a, b, n));
            }
        }
        assert_eq!(seen, (0..pair_count(n)).collect::<Vec<_>>());
    }
}
