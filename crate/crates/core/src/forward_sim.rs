//! Forward oracle: image-source paths and frame rendering at the array.
//!
//! Each frame is rendered on its own: the emitter's frame-long segment is zero-padded to the
//! transform length, delayed per path in the frequency domain and summed at every capsule.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{bin_bands, MaterialTable};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3, EPS_HIT};
use crate::signal::{forward_dft, inverse_dft, Spectrum, TimeSignal};
use crate::sphharm::ArrayGeometry;
use crate::SPEED_OF_SOUND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitterKind {
    Source,
    Noise,
}

/// What an emitter plays in each frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SignalKind {
    /// One exponentially decaying noise burst per frame at a random offset.
    Clap {
        #[serde(default = "default_burst_ms")]
        burst_ms: f64,
        #[serde(default = "default_decay_ms")]
        decay_ms: f64,
    },
    /// Continuous white noise.
    Noise,
    Silence,
}

fn default_burst_ms() -> f64 {
    20.0
}

fn default_decay_ms() -> f64 {
    5.0
}

impl SignalKind {
    pub fn clap() -> Self {
        SignalKind::Clap {
            burst_ms: default_burst_ms(),
            decay_ms: default_decay_ms(),
        }
    }

    /// One frame of this signal. Output has no Nyquist component, so any fractional delay of it
    /// is exactly representable on the padded grid.
    pub fn frame(&self, rng: &mut ChaCha8Rng, frame_length: usize, sample_rate: f64) -> TimeSignal {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut raw = vec![0.0; frame_length];
        match *self {
            SignalKind::Silence => {}
            SignalKind::Noise => {
                // The last two samples stay zero so the smoothing below is not truncated.
                let n = frame_length.saturating_sub(2);
                raw[..n].iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            SignalKind::Clap { burst_ms, decay_ms } => {
                let len = ((burst_ms * 1e-3 * sample_rate) as usize).clamp(1, frame_length.saturating_sub(2).max(1));
                let start = rng.random_range(0..=frame_length.saturating_sub(len + 2));
                let tau = decay_ms * 1e-3 * sample_rate;
                for i in 0..len {
                    raw[start + i] = normal.sample(rng) * (-(i as f64) / tau).exp();
                }
            }
        }
        TimeSignal {
            samples: binomial_smooth(&raw),
            sample_rate,
        }
    }
}

/// `[1, 2, 1] / 4` smoothing, truncated to the input length. Inputs whose last two samples are zero
/// come out with a zero at Nyquist on any padded grid.
fn binomial_smooth(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let at = |i: isize| if i >= 0 && (i as usize) < n { x[i as usize] } else { 0.0 };
    (0..n as isize)
        .map(|t| 0.25 * at(t) + 0.5 * at(t - 1) + 0.25 * at(t - 2))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emitter {
    pub kind: EmitterKind,
    /// `(time_s, position)` pairs in increasing time.
    pub waypoints: Vec<(f64, Vec3)>,
    pub signal: SignalKind,
    pub level: f64,
    /// Whether all propagation paths carry the same waveform. Incoherent emitters draw an
    /// independent realization per path.
    pub coherent: bool,
}

impl Emitter {
    pub fn stationary(kind: EmitterKind, position: Vec3, signal: SignalKind) -> Self {
        Self {
            kind,
            waypoints: vec![(0.0, position)],
            signal,
            level: 1.0,
            coherent: kind == EmitterKind::Source,
        }
    }

    /// Piecewise-linear position, held constant outside the waypoint span.
    pub fn position_at(&self, t: f64) -> Vec3 {
        let w = &self.waypoints;
        if t <= w[0].0 {
            return w[0].1;
        }
        for pair in w.windows(2) {
            let (t0, p0) = pair[0];
            let (t1, p1) = pair[1];
            if t <= t1 {
                let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                return p0 + (p1 - p0) * u;
            }
        }
        w[w.len() - 1].1
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::Config("emitter needs at least one waypoint".into()));
        }
        if self.waypoints.windows(2).any(|p| p[1].0 < p[0].0) {
            return Err(Error::Config("emitter waypoints must be ordered in time".into()));
        }
        if !(self.level >= 0.0) {
            return Err(Error::Config("emitter level must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything the oracle needs to render frames.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub mesh: Mesh,
    pub materials: MaterialTable,
    pub emitters: Vec<Emitter>,
    pub array: ArrayGeometry,
    pub duration_s: f64,
    pub frame_hop: usize,
    pub frame_length: usize,
    pub padded_length: usize,
    pub sample_rate: f64,
    /// Sensor noise level; `None` renders noiselessly.
    pub snr_db: Option<f64>,
    /// Highest reflection order rendered.
    pub max_order: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.frame_hop == 0 {
            return Err(Error::Config("frame hop must be positive".into()));
        }
        if self.padded_length < self.frame_length {
            return Err(Error::Config("padded length shorter than the frame".into()));
        }
        if !self.mesh.bounds().contains(self.array.position) {
            return Err(Error::Geometry(format!(
                "array position {} is outside the mesh bounds",
                self.array.position
            )));
        }
        for t in self.mesh.triangles() {
            self.materials.get(t.material)?;
        }
        for e in &self.emitters {
            e.validate()?;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        let total = (self.duration_s * self.sample_rate).round() as usize;
        if total < self.frame_length {
            return usize::from(total > 0);
        }
        (total - self.frame_length) / self.frame_hop + 1
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        (frame * self.frame_hop) as f64 / self.sample_rate
    }

    /// Position of the first source emitter in `frame`.
    pub fn truth(&self, frame: usize) -> Option<Vec3> {
        let t = self.frame_time(frame);
        self.emitters
            .iter()
            .find(|e| e.kind == EmitterKind::Source)
            .map(|e| e.position_at(t))
    }
}

/// Specular path from the source to the array, stored from the array outward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPath {
    /// Array, reflection points nearest the array first, then the source.
    pub points: Vec<Vec3>,
    pub length: f64,
    /// Triangle and material of each reflection, nearest the array first.
    pub hits: Vec<(usize, usize)>,
    /// Product of reflectivities per octave band.
    pub reflectivity: [f64; 7],
    /// Unit direction from the array toward where the sound arrives from.
    pub arrival: Vec3,
}

impl ForwardPath {
    pub fn order(&self) -> usize {
        self.hits.len()
    }

    /// Pressure gain per band: `ΠΓ / (4π(1+l))`.
    pub fn band_gain(&self) -> [f64; 7] {
        let d = 4.0 * PI * (1.0 + self.length);
        self.reflectivity.map(|g| g / d)
    }
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    normal: Vec3,
    offset: f64,
}

impl Plane {
    fn mirror(&self, x: Vec3) -> Vec3 {
        x - self.normal * (2.0 * (self.normal.dot(x) - self.offset))
    }
}

/// Coplanar triangle groups of a mesh.
fn mesh_planes(mesh: &Mesh) -> (Vec<Plane>, Vec<usize>) {
    let mut planes = Vec::new();
    let mut index: HashMap<(i64, i64, i64, i64), usize> = HashMap::new();
    let mut tri_plane = Vec::with_capacity(mesh.triangles().len());
    for t in mesh.triangles() {
        let mut n = t.normal;
        let lead = if n.x.abs() > 1e-9 { n.x } else if n.y.abs() > 1e-9 { n.y } else { n.z };
        if lead < 0.0 {
            n = -n;
        }
        let d = n.dot(t.vertices[0]);
        let q = |v: f64| (v * 1e6).round() as i64;
        let key = (q(n.x), q(n.y), q(n.z), q(d));
        let id = *index.entry(key).or_insert_with(|| {
            planes.push(Plane { normal: n, offset: d });
            planes.len() - 1
        });
        tri_plane.push(id);
    }
    (planes, tri_plane)
}

/// Image-source enumeration up to `max_order` reflections, validated against the mesh.
pub fn trace_forward_paths(
    mesh: &Mesh,
    materials: &MaterialTable,
    array: Vec3,
    source: Vec3,
    max_order: usize,
) -> Result<Vec<ForwardPath>> {
    if !mesh.bounds().contains(source) {
        return Err(Error::Geometry(format!("source {source} is outside the mesh")));
    }
    let (planes, tri_plane) = mesh_planes(mesh);
    let mut out = Vec::new();
    if mesh.visible(array, source) {
        if let Some(p) = build_path(mesh, materials, array, source, &[], &[], &[], &[])? {
            out.push(p);
        }
    }
    // Depth-first over plane sequences; `seq[i]` is the i-th reflection counted from the source.
    let mut seq: Vec<usize> = Vec::with_capacity(max_order);
    let mut images: Vec<Vec3> = vec![source];
    fn recurse(
        ctx: (&Mesh, &MaterialTable, &[Plane], &[usize], Vec3),
        seq: &mut Vec<usize>,
        images: &mut Vec<Vec3>,
        max_order: usize,
        out: &mut Vec<ForwardPath>,
    ) -> Result<()> {
        let (mesh, materials, planes, tri_plane, array) = ctx;
        for (pi, plane) in planes.iter().enumerate() {
            if seq.last() == Some(&pi) {
                continue;
            }
            // Source image and array must lie on the same side for a reflection to exist.
            let prev = *images.last().unwrap();
            let sa = plane.normal.dot(array) - plane.offset;
            let sp = plane.normal.dot(prev) - plane.offset;
            if sa * sp <= 0.0 {
                continue;
            }
            let img = plane.mirror(prev);
            seq.push(pi);
            images.push(img);
            if let Some(p) = build_path(mesh, materials, array, images[0], seq, images, planes, tri_plane)? {
                out.push(p);
            }
            if seq.len() < max_order {
                recurse(ctx, seq, images, max_order, out)?;
            }
            seq.pop();
            images.pop();
        }
        Ok(())
    }
    if max_order > 0 {
        recurse(
            (mesh, materials, &planes, &tri_plane, array),
            &mut seq,
            &mut images,
            max_order,
            &mut out,
        )?;
    }
    out.sort_by(|a, b| a.length.total_cmp(&b.length));
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
/// Walks from the array toward successive images, checking each reflection lands on the expected
/// plane and the final leg reaches the source unobstructed.
fn build_path(
    mesh: &Mesh,
    materials: &MaterialTable,
    array: Vec3,
    source: Vec3,
    seq: &[usize],
    images: &[Vec3],
    planes: &[Plane],
    tri_plane: &[usize],
) -> Result<Option<ForwardPath>> {
    let k = seq.len();
    let mut points = vec![array];
    let mut hits = Vec::with_capacity(k);
    let mut reflectivity = [1.0; 7];
    let mut p = array;
    for i in (1..=k).rev() {
        let target = images[i];
        let plane = planes[seq[i - 1]];
        let d = match (target - p).try_normalize() {
            Some(d) => d,
            None => return Ok(None),
        };
        let denom = plane.normal.dot(d);
        if denom.abs() < 1e-12 {
            return Ok(None);
        }
        let t = (plane.offset - plane.normal.dot(p)) / denom;
        if !(t > EPS_HIT) || t >= (target - p).norm() {
            return Ok(None);
        }
        let hit = match mesh.intersect(p, d) {
            Some(h) => h,
            None => return Ok(None),
        };
        if tri_plane[hit.triangle] != seq[i - 1] || (hit.distance - t).abs() > 1e-6 {
            return Ok(None);
        }
        let mat = mesh.triangle(hit.triangle).material;
        let g = materials.get(mat)?;
        for (r, &gb) in reflectivity.iter_mut().zip(g) {
            *r *= gb;
        }
        hits.push((hit.triangle, mat));
        p += d * t;
        points.push(p);
    }
    if k > 0 && !mesh.visible(p, source) {
        return Ok(None);
    }
    points.push(source);
    let length = if k == 0 {
        array.distance(source)
    } else {
        array.distance(images[k])
    };
    let arrival = match (points[1] - array).try_normalize() {
        Some(d) => d,
        None => return Ok(None),
    };
    Ok(Some(ForwardPath {
        points,
        length,
        hits,
        reflectivity,
        arrival,
    }))
}

/// Forward filter of one path at the array center: `e^{-j2πfl/c}·ΠΓ/(4π(1+l))`.
pub fn forward_path_filter(path: &ForwardPath, grid: &Spectrum) -> Spectrum {
    let gain = path.band_gain();
    let bands = bin_bands(grid.padded_length, grid.sample_rate);
    let step = -2.0 * PI * grid.sample_rate / grid.padded_length as f64 * path.length / SPEED_OF_SOUND;
    let mut h = Spectrum::zeros(grid.padded_length, grid.frame_length, grid.sample_rate);
    for (k, b) in h.bins.iter_mut().enumerate() {
        *b = Complex64::from_polar(gain[bands[k]], step * k as f64);
    }
    h.bins[0].im = 0.0;
    let last = h.bins.len() - 1;
    h.bins[last].im = 0.0;
    h
}

/// Signal arriving at the array center over one path, on a grid of `padded_length` samples.
pub fn render_path_signal(emitted: &TimeSignal, path: &ForwardPath, padded_length: usize) -> Result<TimeSignal> {
    let x = forward_dft(emitted, padded_length)?;
    let h = forward_path_filter(path, &x);
    let y = Spectrum {
        bins: x.bins.iter().zip(&h.bins).map(|(a, b)| a * b).collect(),
        ..x
    };
    Ok(inverse_dft(&y))
}

/// One plane-wave arrival at the array.
#[derive(Debug, Clone)]
pub struct Arrival<'a> {
    pub spectrum: &'a Spectrum,
    /// Unit direction toward the arriving sound.
    pub direction: Vec3,
    /// Propagation distance to the array center.
    pub distance: f64,
    pub band_gain: [f64; 7],
}

/// Sums plane-wave arrivals at every capsule (free-field inter-capsule delays, no scattering).
pub fn render_arrivals(array: &ArrayGeometry, arrivals: &[Arrival<'_>], grid: &Spectrum) -> Vec<Spectrum> {
    let n = grid.padded_length;
    let bands = bin_bands(n, grid.sample_rate);
    let nb = n / 2 + 1;
    let mics = array.world_directions();
    let band_gains: Vec<Vec<f64>> = arrivals
        .iter()
        .map(|a| bands.iter().map(|&b| a.band_gain[b]).collect())
        .collect();
    mics.par_iter()
        .map(|u| {
            let mut acc = vec![Complex64::new(0.0, 0.0); nb];
            for (a, g) in arrivals.iter().zip(&band_gains) {
                let delay = (a.distance - array.radius * u.dot(a.direction)) / SPEED_OF_SOUND;
                let w = Complex64::from_polar(1.0, -2.0 * PI * delay * grid.sample_rate / n as f64);
                let mut z = Complex64::new(1.0, 0.0);
                for k in 0..nb {
                    if k % 512 == 0 {
                        z = Complex64::from_polar(1.0, -2.0 * PI * delay * grid.sample_rate / n as f64 * k as f64);
                    }
                    acc[k] += a.spectrum.bins[k] * z * g[k];
                    z *= w;
                }
            }
            acc[0].im = 0.0;
            acc[nb - 1].im = 0.0;
            Spectrum {
                bins: acc,
                sample_rate: grid.sample_rate,
                frame_length: grid.frame_length,
                padded_length: n,
            }
        })
        .collect()
}

/// Seeded stream for one purpose within one frame.
pub fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Adds white noise so that mean signal power over the frame sits `snr_db` above it.
pub fn add_sensor_noise(channels: &mut [TimeSignal], snr_db: f64, rng: &mut ChaCha8Rng) {
    let total: usize = channels.iter().map(|c| c.len()).sum();
    let power = channels.iter().map(|c| c.energy()).sum::<f64>() / total.max(1) as f64;
    if power <= 0.0 || !snr_db.is_finite() {
        return;
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).unwrap();
    for c in channels {
        c.samples.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

/// Paths and capsule signals of one frame.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub index: usize,
    pub time_s: f64,
    /// Capsule signals of padded length.
    pub channels: Vec<TimeSignal>,
    /// Forward paths per emitter.
    pub paths: Vec<Vec<ForwardPath>>,
    pub truth: Option<Vec3>,
}

const STREAM_NOISE: u64 = 1;
const STREAM_EMITTER: u64 = 16;

/// Renders frame `frame` of the scenario.
pub fn render_frame(scn: &Scenario, frame: usize, seed: u64) -> Result<RenderedFrame> {
    let t = scn.frame_time(frame);
    let grid = Spectrum::zeros(scn.padded_length, scn.frame_length, scn.sample_rate);
    let mut spectra: Vec<Spectrum> = Vec::new();
    let mut meta: Vec<(usize, Vec3, f64, [f64; 7])> = Vec::new();
    let mut all_paths = Vec::with_capacity(scn.emitters.len());
    for (ei, e) in scn.emitters.iter().enumerate() {
        let pos = e.position_at(t);
        let paths = trace_forward_paths(&scn.mesh, &scn.materials, scn.array.position, pos, scn.max_order)?;
        let mut rng = frame_rng(seed, frame, STREAM_EMITTER + ei as u64);
        let draw = |rng: &mut ChaCha8Rng| -> Result<Spectrum> {
            let mut s = e.signal.frame(rng, scn.frame_length, scn.sample_rate);
            s.samples.iter_mut().for_each(|v| *v *= e.level);
            forward_dft(&s, scn.padded_length)
        };
        let shared = if e.coherent { Some(draw(&mut rng)?) } else { None };
        for p in &paths {
            let s = match &shared {
                Some(s) => s.clone(),
                None => draw(&mut rng)?,
            };
            spectra.push(s);
            meta.push((ei, p.arrival, p.length, p.band_gain()));
        }
        all_paths.push(paths);
    }
    let arrivals: Vec<Arrival<'_>> = spectra
        .iter()
        .zip(&meta)
        .map(|(s, &(_, direction, distance, band_gain))| Arrival {
            spectrum: s,
            direction,
            distance,
            band_gain,
        })
        .collect();
    let mic_spectra = render_arrivals(&scn.array, &arrivals, &grid);
    let mut channels: Vec<TimeSignal> = mic_spectra.iter().map(inverse_dft).collect();
    if let Some(snr) = scn.snr_db {
        let mut rng = frame_rng(seed, frame, STREAM_NOISE);
        add_sensor_noise(&mut channels, snr, &mut rng);
    }
    Ok(RenderedFrame {
        index: frame,
        time_s: t,
        channels,
        paths: all_paths,
        truth: scn.truth(frame),
    })
}

/// Spectra of capsule signals, tagged with the scenario's frame length so the padding headroom is known.
pub fn frame_spectra(channels: &[TimeSignal], frame_length: usize) -> Result<Vec<Spectrum>> {
    channels
        .iter()
        .map(|c| {
            let mut s = forward_dft(c, c.len())?;
            s.frame_length = frame_length;
            Ok(s)
        })
        .collect()
}
