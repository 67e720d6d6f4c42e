//! Backward impulse responses and back-propagation signals.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{PathPoint, RayPath};
use crate::signal::{inverse_dft, Spectrum, TimeSignal};
use crate::SPEED_OF_SOUND;

/// Octave band centers in Hz.
pub const BANDS: [f64; 7] = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0];
/// Smallest reflectivity used when amplifying backwards (at most 20× per bounce).
pub const GAMMA_FLOOR: f64 = 0.05;

/// Octave band containing `f`. Frequencies beyond the outer bands map to them.
pub fn octave_band(f: f64) -> usize {
    let upper = |fc: f64| fc * std::f64::consts::SQRT_2;
    BANDS
        .iter()
        .position(|&fc| f < upper(fc))
        .unwrap_or(BANDS.len() - 1)
}

/// Band index of every bin of a one-sided grid.
pub fn bin_bands(padded_length: usize, sample_rate: f64) -> Vec<usize> {
    (0..=padded_length / 2)
        .map(|k| octave_band(k as f64 * sample_rate / padded_length as f64))
        .collect()
}

/// Per-band reflectivity for each material id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaterialTable {
    entries: BTreeMap<usize, [f64; 7]>,
}

impl MaterialTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: usize, gamma: [f64; 7]) -> Result<()> {
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::Config(format!(
                "material {id}: reflectivity {g} outside (0, 1]"
            )));
        }
        self.entries.insert(id, gamma);
        Ok(())
    }

    pub fn with(mut self, id: usize, gamma: [f64; 7]) -> Result<Self> {
        self.insert(id, gamma)?;
        Ok(self)
    }

    /// Same reflectivity in every band.
    pub fn flat(id: usize, gamma: f64) -> Result<Self> {
        Self::new().with(id, [gamma; 7])
    }

    pub fn get(&self, id: usize) -> Result<&[f64; 7]> {
        self.entries.get(&id).ok_or(Error::MissingMaterial(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `A^D(l) = 4π(1 + l)`.
pub fn distance_amplification(l: f64) -> Result<f64> {
    if !(l >= 0.0) {
        return Err(Error::Geometry(format!("travel distance {l} is negative")));
    }
    Ok(4.0 * PI * (1.0 + l))
}

/// Per-band `A^R`: product of floored reciprocal reflectivities of the first `k` hits.
pub fn reflection_amplification_bands(
    path: &RayPath,
    k: usize,
    materials: &MaterialTable,
) -> Result<[f64; 7]> {
    if k >= path.len() {
        return Err(Error::PathMismatch(format!(
            "order {k} on a path of {} segments",
            path.len()
        )));
    }
    let mut out = [1.0; 7];
    for seg in &path.segments()[..k] {
        let hit = seg.hit.ok_or_else(|| {
            Error::PathMismatch("reflected segment without a surface hit".into())
        })?;
        let g = materials.get(hit.material)?;
        for (o, &gb) in out.iter_mut().zip(g) {
            *o /= gb.max(GAMMA_FLOOR);
        }
    }
    Ok(out)
}

/// `A^R[path, k, f]` at a single frequency.
pub fn reflection_amplification(
    path: &RayPath,
    k: usize,
    materials: &MaterialTable,
    f: f64,
) -> Result<f64> {
    Ok(reflection_amplification_bands(path, k, materials)?[octave_band(f)])
}

/// Backward response for travel distance `l` and per-band gains, on a one-sided grid.
pub fn backward_response(
    l: f64,
    band_gain: &[f64; 7],
    padded_length: usize,
    frame_length: usize,
    sample_rate: f64,
) -> Result<Spectrum> {
    let ad = distance_amplification(l)?;
    let mut h = Spectrum::zeros(padded_length, frame_length, sample_rate);
    let bands = bin_bands(padded_length, sample_rate);
    let step = 2.0 * PI * sample_rate / padded_length as f64 * l / SPEED_OF_SOUND;
    for (k, b) in h.bins.iter_mut().enumerate() {
        *b = Complex64::from_polar(ad * band_gain[bands[k]], step * k as f64);
    }
    finish_symmetric(&mut h);
    Ok(h)
}

/// Keeps DC and Nyquist real so the time response is real.
fn finish_symmetric(h: &mut Spectrum) {
    h.bins[0].im = 0.0;
    if h.padded_length.is_multiple_of(2) {
        let last = h.bins.len() - 1;
        h.bins[last].im = 0.0;
    }
}

/// `H[f] = exp(j2πfl/c)·A^D(l)·A^R(path, k, f)` for `point` on `path`.
pub fn backward_impulse_response(
    path: &RayPath,
    point: &PathPoint,
    materials: &MaterialTable,
    grid: &Spectrum,
) -> Result<Spectrum> {
    path.validate_point(point)?;
    let gains = reflection_amplification_bands(path, point.segment_order, materials)?;
    backward_response(
        point.travel_distance,
        &gains,
        grid.padded_length,
        grid.frame_length,
        grid.sample_rate,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackPropSignal {
    pub point: PathPoint,
    pub spectrum: Spectrum,
    pub signal: TimeSignal,
}

/// Delay headroom of a padded grid, in meters of travel.
pub fn headroom_m(padded_length: usize, frame_length: usize, sample_rate: f64) -> f64 {
    padded_length.saturating_sub(frame_length) as f64 * SPEED_OF_SOUND / sample_rate
}

fn check_headroom(l: f64, s: &Spectrum) -> Result<()> {
    let headroom = headroom_m(s.padded_length, s.frame_length, s.sample_rate);
    if l > headroom {
        return Err(Error::HeadroomExceeded {
            distance: l,
            headroom,
        });
    }
    Ok(())
}

/// Bin-wise product `S·H`.
pub fn apply_response(s: &Spectrum, h: &Spectrum) -> Result<Spectrum> {
    if !s.same_grid(h) || s.bins.len() != h.bins.len() {
        return Err(Error::Signal("spectrum and response grids differ".into()));
    }
    Ok(Spectrum {
        bins: s.bins.iter().zip(&h.bins).map(|(a, b)| a * b).collect(),
        ..s.clone()
    })
}

/// `P = S·H` at `point`, returned in both domains.
pub fn back_propagate(
    s: &Spectrum,
    path: &RayPath,
    point: &PathPoint,
    materials: &MaterialTable,
) -> Result<BackPropSignal> {
    check_headroom(point.travel_distance, s)?;
    let h = backward_impulse_response(path, point, materials, s)?;
    let spectrum = apply_response(s, &h)?;
    let signal = inverse_dft(&spectrum);
    Ok(BackPropSignal {
        point: *point,
        spectrum,
        signal,
    })
}
