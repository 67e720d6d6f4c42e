//! Per-frame localization pipeline: render (or load), beamform, trace, localize.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::back_propagate;
use crate::beamform::{BeamMap, Beamformer, DirectionEstimate, SeparationSignal};
use crate::config::Setup;
use crate::error::{Error, Result};
use crate::forward_sim::{frame_spectra, render_frame};
use crate::geometry::{RayPath, Vec3};
use crate::localizer::{feet, Estimate, Localizer, LocalizerConfig, Observation};
use crate::raytrace::trace_all;
use crate::signal::{bin_range, xcorr_peak_circular, CorrelationResult, TimeSignal};
use crate::sphharm::SphericalTransform;

/// Beamformer output and traced paths for one frame. Independent of the localizer settings.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub index: usize,
    pub time_s: f64,
    pub truth: Option<Vec3>,
    pub peaks: Vec<DirectionEstimate>,
    pub paths: Vec<RayPath>,
    pub separations: Vec<SeparationSignal>,
    pub ms_beamform: f64,
    pub ms_trace: f64,
}

/// Spherical transform and beamformer for one setup.
pub struct Frontend<'a> {
    setup: &'a Setup,
    transform: SphericalTransform,
    beamformer: Beamformer,
    bins: std::ops::RangeInclusive<usize>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Frontend<'a> {
    pub fn new(setup: &'a Setup) -> Result<Self> {
        let s = &setup.scenario;
        let b = &setup.beamform;
        let lo = b.band_lo_hz.min(b.extract_lo_hz);
        let hi = b.band_hi_hz.max(b.extract_hi_hz);
        Ok(Self {
            setup,
            transform: SphericalTransform::new(&s.array, setup.sh_order, setup.max_gain)?,
            beamformer: Beamformer::new(setup.sh_order, setup.beamform)?,
            bins: bin_range(s.padded_length, s.sample_rate, lo, hi),
        })
    }

    /// Beam map and observation for one frame of capsule signals.
    pub fn observe_with_map(&self, index: usize, channels: &[TimeSignal]) -> Result<(FrameObservation, BeamMap)> {
        let s = &self.setup.scenario;
        let t0 = Instant::now();
        let spectra = frame_spectra(channels, s.frame_length)?;
        let m = self.transform.transform_bins(&spectra, self.bins.clone())?;
        // A silent frame has no covariance to invert and no directions to report.
        let (map, peaks) = match self.beamformer.mvdr_map(&m) {
            Ok(map) => {
                let peaks = self.beamformer.find_peaks(&map);
                (map, peaks)
            }
            Err(Error::SingularCovariance) => (self.beamformer.empty_map(), Vec::new()),
            Err(e) => return Err(e),
        };
        let separations: Vec<SeparationSignal> = peaks.iter().map(|p| self.beamformer.extract(&m, p.direction)).collect();
        let ms_beamform = ms(t0);
        let t1 = Instant::now();
        let dirs: Vec<Vec3> = peaks.iter().map(|p| p.direction).collect();
        let paths = trace_all(&s.mesh, s.array.position, &dirs, &self.setup.trace)?;
        let ms_trace = ms(t1);
        let obs = FrameObservation {
            index,
            time_s: s.frame_time(index),
            truth: s.truth(index),
            peaks,
            paths,
            separations,
            ms_beamform,
            ms_trace,
        };
        Ok((obs, map))
    }

    pub fn observe(&self, index: usize, channels: &[TimeSignal]) -> Result<FrameObservation> {
        Ok(self.observe_with_map(index, channels)?.0)
    }
}

/// Capsule signals of every frame, rendered by the oracle.
pub fn render_all(setup: &Setup, seed: u64) -> Result<Vec<Vec<TimeSignal>>> {
    (0..setup.scenario.frame_count())
        .map(|j| Ok(render_frame(&setup.scenario, j, seed)?.channels))
        .collect()
}

/// Splits concatenated per-frame channels (as written by `render`) back into frames.
pub fn split_frames(channels: &[TimeSignal], padded_length: usize) -> Result<Vec<Vec<TimeSignal>>> {
    let len = channels.first().map_or(0, |c| c.len());
    if !len.is_multiple_of(padded_length) {
        return Err(Error::Signal(format!(
            "audio length {len} is not a multiple of the padded frame length {padded_length}"
        )));
    }
    Ok((0..len / padded_length)
        .map(|j| {
            channels
                .iter()
                .map(|c| TimeSignal {
                    samples: c.samples[j * padded_length..(j + 1) * padded_length].to_vec(),
                    sample_rate: c.sample_rate,
                })
                .collect()
        })
        .collect())
}

/// Joins frames into one long signal per channel.
pub fn join_frames(frames: &[Vec<TimeSignal>]) -> Vec<TimeSignal> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|c| TimeSignal {
            samples: frames.iter().flat_map(|f| f[c].samples.iter().copied()).collect(),
            sample_rate: first[c].sample_rate,
        })
        .collect()
}

/// Renders (unless `audio` is given) and observes every frame.
pub fn observe_all(setup: &Setup, seed: u64, audio: Option<&[Vec<TimeSignal>]>) -> Result<Vec<FrameObservation>> {
    let front = Frontend::new(setup)?;
    let count = setup.scenario.frame_count();
    if let Some(a) = audio {
        if a.len() < count {
            return Err(Error::Signal(format!("audio holds {} frames, scenario needs {count}", a.len())));
        }
    }
    (0..count)
        .map(|j| match audio {
            Some(a) => front.observe(j, &a[j]),
            None => front.observe(j, &render_frame(&setup.scenario, j, seed)?.channels),
        })
        .collect()
}

/// One trace row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub frame: usize,
    pub time_s: f64,
    pub truth: Option<Vec3>,
    pub estimate: Estimate,
    pub error_m: Option<f64>,
    pub n_paths: usize,
    pub n_peaks: usize,
    pub ms_beamform: f64,
    pub ms_trace: f64,
    pub ms_localize: f64,
}

pub const TRACE_HEADER: &str =
    "frame,time_s,gt_x,gt_y,gt_z,est_x,est_y,est_z,err_m,n_paths,n_peaks,ms_beamform,ms_trace,ms_localize";

/// Seed of the particle filter for a run seed.
pub fn localizer_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x6C6F_6361_6C69_7A65
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub oracle_correlation: bool,
    /// Record wall-clock times; otherwise timing columns are zero so traces stay reproducible.
    pub timing: bool,
}

/// Runs the particle filter over prepared observations.
pub fn localize(
    setup: &Setup,
    config: LocalizerConfig,
    observations: &[FrameObservation],
    seed: u64,
    opts: RunOptions,
) -> Result<Vec<RunRecord>> {
    let s = &setup.scenario;
    let mut loc = Localizer::new(config, s.mesh.bounds(), localizer_seed(seed))?;
    loc.oracle_correlation = opts.oracle_correlation;
    let keep = |v: f64| if opts.timing { v } else { 0.0 };
    observations
        .iter()
        .map(|o| {
            let t = Instant::now();
            let est = loc.step(&Observation {
                paths: &o.paths,
                separations: &o.separations,
                materials: &s.materials,
            })?;
            let ms_localize = ms(t);
            Ok(RunRecord {
                frame: o.index,
                time_s: o.time_s,
                truth: o.truth,
                estimate: est,
                error_m: o.truth.map(|g| g.distance(est.position)),
                n_paths: o.paths.len(),
                n_peaks: o.peaks.len(),
                ms_beamform: keep(o.ms_beamform),
                ms_trace: keep(o.ms_trace),
                ms_localize: keep(ms_localize),
            })
        })
        .collect()
}

/// Full run with the setup's localizer settings.
pub fn run(setup: &Setup, seed: u64, audio: Option<&[Vec<TimeSignal>]>, opts: RunOptions) -> Result<Vec<RunRecord>> {
    let obs = observe_all(setup, seed, audio)?;
    localize(setup, setup.localizer, &obs, seed, opts)
}

pub fn write_trace<W: Write>(w: &mut W, records: &[RunRecord]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in records {
        let gt = match r.truth {
            Some(g) => format!("{:.6},{:.6},{:.6}", g.x, g.y, g.z),
            None => ",,".into(),
        };
        let err = r.error_m.map_or(String::new(), |e| format!("{e:.6}"));
        let e = r.estimate.position;
        writeln!(
            w,
            "{},{:.6},{gt},{:.6},{:.6},{:.6},{err},{},{},{:.3},{:.3},{:.3}",
            r.frame, r.time_s, e.x, e.y, e.z, r.n_paths, r.n_peaks, r.ms_beamform, r.ms_trace, r.ms_localize
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub final_error_m: f64,
    pub stale_frames: usize,
    pub mean_ms_beamform: f64,
    pub mean_ms_trace: f64,
    pub mean_ms_localize: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn summarize(records: &[RunRecord]) -> Summary {
    let errs: Vec<f64> = records.iter().filter_map(|r| r.error_m).collect();
    let col = |f: fn(&RunRecord) -> f64| mean(&records.iter().map(f).collect::<Vec<_>>());
    Summary {
        frames: records.len(),
        mean_error_m: mean(&errs),
        median_error_m: median(&errs),
        final_error_m: records.last().and_then(|r| r.error_m).unwrap_or(f64::NAN),
        stale_frames: records.iter().filter(|r| r.estimate.stale).count(),
        mean_ms_beamform: col(|r| r.ms_beamform),
        mean_ms_trace: col(|r| r.ms_trace),
        mean_ms_localize: col(|r| r.ms_localize),
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames          {}", self.frames)?;
        writeln!(f, "mean error m    {:.4}", self.mean_error_m)?;
        writeln!(f, "median error m  {:.4}", self.median_error_m)?;
        writeln!(f, "final error m   {:.4}", self.final_error_m)?;
        writeln!(f, "stale frames    {}", self.stale_frames)?;
        write!(
            f,
            "mean ms         beamform {:.2}  trace {:.2}  localize {:.2}",
            self.mean_ms_beamform, self.mean_ms_trace, self.mean_ms_localize
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    SigmaW,
    ATh,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::SigmaW => "sigma_w",
            SweepParam::ATh => "a_th",
        }
    }

    pub fn apply(self, cfg: &mut LocalizerConfig, v: f64) {
        match self {
            SweepParam::Alpha => cfg.alpha = v,
            SweepParam::SigmaW => cfg.sigma_w = v,
            SweepParam::ATh => cfg.a_th = v,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "sigma_w" => Ok(SweepParam::SigmaW),
            "a_th" => Ok(SweepParam::ATh),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (alpha, sigma_w, a_th)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Mean over frames, averaged over seeds.
    pub mean_error_m: f64,
    /// Final-frame error averaged over seeds.
    pub final_error_m: f64,
}

/// Mean error per parameter value averaged over seeds. Observations are computed once per seed
/// and shared across values.
pub fn sweep(setup: &Setup, spec: &SweepSpec, opts: RunOptions) -> Result<Vec<SweepRow>> {
    for &v in &spec.values {
        let mut cfg = setup.localizer;
        spec.param.apply(&mut cfg, v);
        cfg.validate()?;
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let per_seed: Vec<Vec<Summary>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let obs = observe_all(setup, seed, None)?;
            spec.values
                .iter()
                .map(|&v| {
                    let mut cfg = setup.localizer;
                    spec.param.apply(&mut cfg, v);
                    Ok(summarize(&localize(setup, cfg, &obs, seed, opts)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(spec
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| SweepRow {
            value,
            mean_error_m: mean(&per_seed.iter().map(|s| s[i].mean_error_m).collect::<Vec<_>>()),
            final_error_m: mean(&per_seed.iter().map(|s| s[i].final_error_m).collect::<Vec<_>>()),
        })
        .collect())
}

pub fn write_sweep<W: Write>(w: &mut W, param: SweepParam, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{:>10},{:>14},{:>14}", param.name(), "mean_err_m", "final_err_m")?;
    for r in rows {
        writeln!(w, "{:>10},{:>14.4},{:>14.4}", r.value, r.mean_error_m, r.final_error_m)?;
    }
    Ok(())
}

/// Pairwise correlation of one frame's signals.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub pairs: Vec<(usize, usize, CorrelationResult)>,
}

impl PairStats {
    pub fn mean_abs_lag(&self) -> f64 {
        mean(&self.pairs.iter().map(|p| p.2.l_cc.unsigned_abs() as f64).collect::<Vec<_>>())
    }

    pub fn mean_a_cc(&self) -> f64 {
        mean(&self.pairs.iter().map(|p| p.2.a_cc).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub frame: usize,
    pub point: Vec3,
    /// Paths whose perpendicular foot lies within the radius of the point.
    pub used_paths: Vec<usize>,
    pub total_paths: usize,
    pub separation: PairStats,
    pub back_propagated: PairStats,
}

fn pair_stats(signals: &[(usize, &TimeSignal)]) -> Result<PairStats> {
    let mut pairs = Vec::new();
    for (a, &(ia, sa)) in signals.iter().enumerate() {
        for &(ib, sb) in &signals[a + 1..] {
            match xcorr_peak_circular(sa, sb) {
                Ok(r) => pairs.push((ia, ib, r)),
                Err(Error::ZeroEnergy) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(PairStats { pairs })
}

/// Separation-signal versus back-propagated-signal alignment at `point` for one observed frame.
/// Only paths passing within `radius` of the point take part.
pub fn analyze_alignment(setup: &Setup, obs: &FrameObservation, point: Vec3, radius: f64) -> Result<AlignmentReport> {
    let ft = feet(point, &obs.paths, 0.0);
    let used: Vec<usize> = ft.iter().filter(|f| f.distance <= radius).map(|f| f.path_index).collect();
    let bps = used
        .iter()
        .map(|&i| back_propagate(&obs.separations[i].spectrum, &obs.paths[i], &ft[i], &setup.scenario.materials))
        .collect::<Result<Vec<_>>>()?;
    let sep: Vec<(usize, &TimeSignal)> = used.iter().map(|&i| (i, &obs.separations[i].signal)).collect();
    let bp: Vec<(usize, &TimeSignal)> = used.iter().zip(&bps).map(|(&i, b)| (i, &b.signal)).collect();
    Ok(AlignmentReport {
        frame: obs.index,
        point,
        used_paths: used,
        total_paths: obs.paths.len(),
        separation: pair_stats(&sep)?,
        back_propagated: pair_stats(&bp)?,
    })
}

impl std::fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = self.point;
        writeln!(f, "frame {} point ({:.3}, {:.3}, {:.3})", self.frame, p.x, p.y, p.z)?;
        writeln!(f, "paths near point: {} of {}", self.used_paths.len(), self.total_paths)?;
        if self.separation.pairs.is_empty() {
            return write!(f, "no signal pairs to compare (fewer than two paths near the point)");
        }
        writeln!(f, "pair      sep_a_cc  sep_l_cc    bp_a_cc   bp_l_cc")?;
        for (s, b) in self.separation.pairs.iter().zip(&self.back_propagated.pairs) {
            writeln!(
                f,
                "{:>2}-{:<2}  {:>10.4} {:>9} {:>10.4} {:>9}",
                s.0, s.1, s.2.a_cc, s.2.l_cc, b.2.a_cc, b.2.l_cc
            )?;
        }
        writeln!(
            f,
            "separation       mean a_cc {:.4}  mean |l_cc| {:.1}",
            self.separation.mean_a_cc(),
            self.separation.mean_abs_lag()
        )?;
        write!(
            f,
            "back-propagated  mean a_cc {:.4}  mean |l_cc| {:.1}",
            self.back_propagated.mean_a_cc(),
            self.back_propagated.mean_abs_lag()
        )
    }
}

/// Paths of an observation as CSV, one row per segment.
pub fn write_paths<W: Write>(w: &mut W, paths: &[RayPath]) -> std::io::Result<()> {
    writeln!(w, "path,order,x0,y0,z0,x1,y1,z1,length,triangle")?;
    for (i, p) in paths.iter().enumerate() {
        for (k, s) in p.segments().iter().enumerate() {
            let e = s.end();
            let tri = s.hit_triangle().map_or(String::new(), |t| t.to_string());
            writeln!(
                w,
                "{i},{k},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{tri}",
                s.origin.x, s.origin.y, s.origin.z, e.x, e.y, e.z, s.length
            )?;
        }
    }
    Ok(())
}
