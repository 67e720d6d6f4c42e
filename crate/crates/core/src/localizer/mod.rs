//! Particle filter over source positions, weighted by ray-path proximity and the similarity of
//! back-propagated signals.

mod similarity;

pub use similarity::{pair_count, pair_index, FastCorrelator, NaiveCorrelator, PairCorrelator};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::MaterialTable;
use crate::beamform::SeparationSignal;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, PathPoint, RayPath, Vec3};
use crate::signal::{CorrelationResult, Spectrum};

/// Radius of a 3D isotropic Gaussian containing 95% of its mass, in units of σ.
pub const CHI3_95: f64 = 2.795_483_482_915_108;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    pub particles: usize,
    /// Similarity blend α.
    pub alpha: f64,
    pub sigma_w: f64,
    pub a_th: f64,
    /// Diffusion per frame, meters.
    pub sigma_m: f64,
    /// Resample when the effective sample size drops below this fraction of the particle count.
    pub resample_ess: f64,
    /// Alignment length `L` in the similarity term, samples. Zero means the padded signal length.
    pub align_length: usize,
    /// Path points closer than this to the array, in travel distance, are not considered.
    pub min_travel: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            alpha: 1.0,
            sigma_w: 0.5,
            a_th: 0.15,
            sigma_m: 0.2,
            resample_ess: 0.5,
            align_length: 480,
            min_travel: 1.0,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("localizer: {m}")));
        if self.particles == 0 {
            return bad("particles must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.sigma_w > 0.0) {
            return bad("sigma_w must be positive");
        }
        if !(self.a_th > 0.0 && self.a_th < 1.0) {
            return bad("a_th must lie in (0, 1)");
        }
        if !(self.sigma_m >= 0.0) {
            return bad("sigma_m must be non-negative");
        }
        if !(self.min_travel >= 0.0) {
            return bad("min_travel must be non-negative");
        }
        if !(self.resample_ess > 0.0 && self.resample_ess <= 1.0) {
            return bad("resample_ess must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: Vec3,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub position: Vec3,
    pub confidence_radius_95: f64,
    pub frame: usize,
    /// Carried over from an earlier frame because this one gave no usable evidence.
    pub stale: bool,
}

/// Evidence for one frame: one ray path and one separation signal per beamformer peak.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub paths: &'a [RayPath],
    pub separations: &'a [SeparationSignal],
    pub materials: &'a MaterialTable,
}

/// `exp(-d² / 2σ²)` with `d` the distance from `x` to its foot on `path`.
pub fn distance_weight(x: Vec3, path: &RayPath, sigma_w: f64) -> f64 {
    gaussian(path.perpendicular_foot(x, 0).distance, sigma_w)
}

fn gaussian(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Pairwise term `(L − |l_cc|)/L` if `a_cc > a_th`, else 0.
pub fn similarity_term(r: Option<CorrelationResult>, a_th: f64, align_length: usize) -> f64 {
    match r {
        Some(r) if r.a_cc > a_th => {
            let l = align_length as f64;
            ((l - r.l_cc.unsigned_abs() as f64) / l).max(0.0)
        }
        _ => 0.0,
    }
}

/// `w_s` for path `n` given the correlations of every pair (indexed by [`pair_index`]).
pub fn similarity_weight(
    n: usize,
    count: usize,
    pairs: &[Option<CorrelationResult>],
    a_th: f64,
    align_length: usize,
) -> f64 {
    if count < 2 {
        return 0.0;
    }
    let total: f64 = (0..count)
        .filter(|&m| m != n)
        .map(|m| {
            let (a, b) = if n < m { (n, m) } else { (m, n) };
            similarity_term(pairs[pair_index(a, b, count)], a_th, align_length)
        })
        .sum();
    total / (count - 1) as f64
}

/// Unnormalized score `Σ_n [w_d + α·w_s]` given each path's foot and the pair correlations.
pub fn particle_score(
    feet: &[PathPoint],
    pairs: &[Option<CorrelationResult>],
    cfg: &LocalizerConfig,
    align_length: usize,
) -> f64 {
    let count = feet.len();
    let mut s = 0.0;
    for (n, f) in feet.iter().enumerate() {
        s += gaussian(f.distance, cfg.sigma_w);
        if cfg.alpha > 0.0 {
            s += cfg.alpha * similarity_weight(n, count, pairs, cfg.a_th, align_length);
        }
    }
    s
}

/// Feet of `x` on every path, ignoring the first `min_travel` meters of each.
pub fn feet(x: Vec3, paths: &[RayPath], min_travel: f64) -> Vec<PathPoint> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| p.perpendicular_foot_beyond(x, i, min_travel))
        .collect()
}

/// Score of a single position under an observation.
pub fn particle_weight(x: Vec3, obs: &Observation<'_>, cfg: &LocalizerConfig, oracle: bool) -> Result<f64> {
    let spectra: Vec<Spectrum> = obs.separations.iter().map(|s| s.spectrum.clone()).collect();
    let f = feet(x, obs.paths, cfg.min_travel);
    let align = align_length(cfg, &spectra);
    let pairs = if cfg.alpha > 0.0 {
        if oracle {
            NaiveCorrelator { spectra: &spectra, paths: obs.paths, materials: obs.materials }.correlate_all(&f)?
        } else {
            FastCorrelator::new(&spectra, obs.paths, obs.materials)?.correlate_all(&f)?
        }
    } else {
        vec![None; pair_count(f.len())]
    };
    Ok(particle_score(&f, &pairs, cfg, align))
}

fn align_length(cfg: &LocalizerConfig, spectra: &[Spectrum]) -> usize {
    if cfg.align_length > 0 {
        cfg.align_length
    } else {
        spectra.first().map_or(crate::PADDED_LENGTH, |s| s.padded_length)
    }
}

/// Sequential importance resampling filter.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub config: LocalizerConfig,
    pub bounds: Aabb,
    particles: Vec<Particle>,
    last: Option<Estimate>,
    frame: usize,
    /// Use explicit back-propagation for the similarity term.
    pub oracle_correlation: bool,
    seed: u64,
}

const STREAM_INIT: u64 = 1;
const STREAM_FRAME: u64 = 2;

impl Localizer {
    /// Particles spread uniformly over `bounds`.
    pub fn new(config: LocalizerConfig, bounds: Aabb, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let w = 1.0 / config.particles as f64;
        let ext = bounds.extent();
        let particles = (0..config.particles)
            .map(|_| Particle {
                position: bounds.min
                    + Vec3::new(
                        ext.x * rng.random::<f64>(),
                        ext.y * rng.random::<f64>(),
                        ext.z * rng.random::<f64>(),
                    ),
                weight: w,
            })
            .collect();
        Ok(Self {
            config,
            bounds,
            particles,
            last: None,
            frame: 0,
            oracle_correlation: false,
            seed,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    fn frame_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(STREAM_FRAME);
        rng
    }

    fn diffuse(&mut self, rng: &mut ChaCha8Rng) {
        if self.config.sigma_m <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, self.config.sigma_m).unwrap();
        for p in &mut self.particles {
            let step = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            p.position = self.bounds.clamp(p.position + step);
        }
    }

    fn stale_estimate(&self) -> Estimate {
        let mut e = self.last.unwrap_or_else(|| self.estimate());
        e.frame = self.frame;
        e.stale = true;
        e
    }

    fn estimate(&self) -> Estimate {
        let mean = self
            .particles
            .iter()
            .fold(Vec3::ZERO, |acc, p| acc + p.position * p.weight);
        let var = self
            .particles
            .iter()
            .map(|p| p.weight * (p.position - mean).norm_squared())
            .sum::<f64>()
            / 3.0;
        Estimate {
            position: mean,
            confidence_radius_95: CHI3_95 * var.max(0.0).sqrt(),
            frame: self.frame,
            stale: false,
        }
    }

    /// Diffuses, weights, estimates and (when degenerate) resamples. Returns the frame estimate.
    pub fn step(&mut self, obs: &Observation<'_>) -> Result<Estimate> {
        if obs.paths.len() != obs.separations.len() {
            return Err(Error::Config("one separation signal is needed per path".into()));
        }
        let mut rng = self.frame_rng();
        self.diffuse(&mut rng);
        let est = if obs.paths.is_empty() {
            self.stale_estimate()
        } else {
            let scores = self.scores(obs)?;
            let total: f64 = self
                .particles
                .iter()
                .zip(&scores)
                .map(|(p, s)| p.weight * s)
                .sum();
            if total > 0.0 && total.is_finite() {
                for (p, s) in self.particles.iter_mut().zip(&scores) {
                    p.weight *= s / total;
                }
                let est = self.estimate();
                self.last = Some(est);
                est
            } else {
                let w = 1.0 / self.particles.len() as f64;
                self.particles.iter_mut().for_each(|p| p.weight = w);
                self.stale_estimate()
            }
        };
        let ess = 1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>();
        if ess < self.config.resample_ess * self.particles.len() as f64 {
            self.resample(&mut rng);
        }
        self.frame += 1;
        Ok(est)
    }

    fn scores(&self, obs: &Observation<'_>) -> Result<Vec<f64>> {
        let spectra: Vec<Spectrum> = obs.separations.iter().map(|s| s.spectrum.clone()).collect();
        let align = align_length(&self.config, &spectra);
        let cfg = self.config;
        let count = obs.paths.len();
        let fast;
        let naive;
        let corr: Option<&dyn PairCorrelator> = if cfg.alpha > 0.0 && count > 1 {
            if self.oracle_correlation {
                naive = NaiveCorrelator {
                    spectra: &spectra,
                    paths: obs.paths,
                    materials: obs.materials,
                };
                Some(&naive)
            } else {
                fast = FastCorrelator::new(&spectra, obs.paths, obs.materials)?;
                Some(&fast)
            }
        } else {
            None
        };
        self.particles
            .par_iter()
            .map(|p| {
                let f = feet(p.position, obs.paths, cfg.min_travel);
                let pairs = match corr {
                    Some(c) => c.correlate_all(&f)?,
                    None => vec![None; pair_count(count)],
                };
                Ok(particle_score(&f, &pairs, &cfg, align))
            })
            .collect()
    }

    /// Systematic (low-variance) resampling.
    fn resample(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut c = self.particles[0].weight;
        let mut i = 0;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            while u > c && i + 1 < n {
                i += 1;
                c += self.particles[i].weight;
            }
            out.push(Particle {
                position: self.particles[i].position,
                weight: step,
            });
            u += step;
        }
        self.particles = out;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RaySegment;

    fn line(origin: Vec3, dir: Vec3, len: f64) -> RayPath {
        RayPath::new(vec![RaySegment {
            origin,
            direction: dir.normalized(),
            length: len,
            hit: None,
        }])
        .unwrap()
    }

    fn corr(a_cc: f64, l_cc: i64) -> Option<CorrelationResult> {
        Some(CorrelationResult { a_cc, l_cc })
    }

    #[test]
    fn distance_weight_values() {
        let p = line(Vec3::ZERO, Vec3::X, 10.0);
        assert_eq!(distance_weight(Vec3::new(3.0, 0.0, 0.0), &p, 0.5), 1.0);
        let w = distance_weight(Vec3::new(3.0, 0.5, 0.0), &p, 0.5);
        assert!((w - (-0.5f64).exp()).abs() < 1e-12);
        let mut prev = 2.0;
        for i in 0..50 {
            let w = distance_weight(Vec3::new(3.0, i as f64 * 0.1, 0.0), &p, 0.5);
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn similarity_examples() {
        // Two identical aligned signals.
        assert_eq!(similarity_weight(0, 2, &[corr(1.0, 0)], 0.15, 8192), 1.0);
        // All pairs below threshold.
        assert_eq!(similarity_weight(0, 3, &[corr(0.1, 0), corr(0.05, 3), corr(0.0, 0)], 0.15, 8192), 0.0);
        // One aligned partner, one below threshold.
        let pairs = [corr(0.5, 0), corr(0.1, 0), corr(0.9, 0)];
        assert_eq!(similarity_weight(0, 3, &pairs, 0.15, 8192), 0.5);
        // No partners.
        assert_eq!(similarity_weight(0, 1, &[], 0.15, 8192), 0.0);
        // Lag sign does not matter.
        assert_eq!(
            similarity_weight(0, 2, &[corr(0.5, -40)], 0.15, 8192),
            similarity_weight(0, 2, &[corr(0.5, 40)], 0.15, 8192)
        );
    }

    #[test]
    fn pair_term_is_shared() {
        let pairs = [corr(0.5, 10), corr(0.7, -5), corr(0.3, 2)];
        // Sum of w_s over paths counts every pair twice.
        let total: f64 = (0..3).map(|n| similarity_weight(n, 3, &pairs, 0.15, 100)).sum();
        let direct: f64 = pairs.iter().map(|&p| similarity_term(p, 0.15, 100)).sum::<f64>() * 2.0 / 2.0;
        assert!((total - direct).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_is_distance_only() {
        let paths = [line(Vec3::ZERO, Vec3::X, 10.0), line(Vec3::ZERO, Vec3::Y, 10.0)];
        let x = Vec3::new(0.3, 0.4, 0.1);
        let f = feet(x, &paths, 0.0);
        let cfg = LocalizerConfig { alpha: 0.0, ..Default::default() };
        let s = particle_score(&f, &[corr(1.0, 0)], &cfg, 8192);
        let d: f64 = paths.iter().map(|p| distance_weight(x, p, 0.5)).sum();
        assert!((s - d).abs() < 1e-15);
    }

    #[test]
    fn far_particle_scores_near_zero() {
        let paths = [line(Vec3::ZERO, Vec3::X, 10.0), line(Vec3::ZERO, Vec3::Y, 10.0)];
        let f = feet(Vec3::new(0.0, 0.0, 8.0), &paths, 0.0);
        let s = particle_score(&f, &[corr(0.01, 0)], &LocalizerConfig::default(), 8192);
        assert!(s < 1e-50);
    }
}
