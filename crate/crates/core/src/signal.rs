//! Sample buffers, one-sided DFTs and normalized cross-correlation.
//!
//! Lag convention: a positive lag means the second signal lags the first.

use std::cell::RefCell;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 48_000.0;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn fft_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Signal("empty signal".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::Signal(format!("bad sample rate {sample_rate}")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Signal(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

/// One-sided spectrum of a real signal: bins `0..=padded_length/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub sample_rate: f64,
    /// Length of the payload before zero padding.
    pub frame_length: usize,
    pub padded_length: usize,
}

impl Spectrum {
    pub fn zeros(padded_length: usize, frame_length: usize, sample_rate: f64) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); padded_length / 2 + 1],
            sample_rate,
            frame_length,
            padded_length,
        }
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.padded_length as f64
    }

    /// Inclusive bin range covering `[lo_hz, hi_hz]`, clipped to the spectrum.
    pub fn bin_range(&self, lo_hz: f64, hi_hz: f64) -> std::ops::RangeInclusive<usize> {
        bin_range(self.padded_length, self.sample_rate, lo_hz, hi_hz)
    }

    pub fn same_grid(&self, o: &Spectrum) -> bool {
        self.padded_length == o.padded_length && self.sample_rate == o.sample_rate
    }
}

pub fn bin_range(
    padded_length: usize,
    sample_rate: f64,
    lo_hz: f64,
    hi_hz: f64,
) -> std::ops::RangeInclusive<usize> {
    let df = sample_rate / padded_length as f64;
    let top = padded_length / 2;
    let lo = ((lo_hz / df).ceil().max(0.0) as usize).min(top);
    let hi = ((hi_hz / df).floor().max(0.0) as usize).min(top);
    lo..=hi
}

/// Zero-pads `s` to `pad_to` samples and returns its one-sided DFT.
pub fn forward_dft(s: &TimeSignal, pad_to: usize) -> Result<Spectrum> {
    if pad_to < s.len() {
        return Err(Error::Signal(format!(
            "pad length {pad_to} shorter than signal length {}",
            s.len()
        )));
    }
    let mut buf: Vec<Complex64> = Vec::with_capacity(pad_to);
    buf.extend(s.samples.iter().map(|&x| Complex64::new(x, 0.0)));
    buf.resize(pad_to, Complex64::new(0.0, 0.0));
    fft_forward(pad_to).process(&mut buf);
    buf.truncate(pad_to / 2 + 1);
    Ok(Spectrum {
        bins: buf,
        sample_rate: s.sample_rate,
        frame_length: s.len(),
        padded_length: pad_to,
    })
}

/// Real signal of `padded_length` samples from a one-sided spectrum.
pub fn inverse_dft(x: &Spectrum) -> TimeSignal {
    let n = x.padded_length;
    let mut buf = hermitian_full(&x.bins, n);
    fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    TimeSignal {
        samples: buf.iter().map(|c| c.re * scale).collect(),
        sample_rate: x.sample_rate,
    }
}

/// Conjugate-symmetric full-length spectrum from one-sided bins. DC and Nyquist keep only their real part.
pub(crate) fn hermitian_full(bins: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 0..=half.min(bins.len() - 1) {
        full[k] = bins[k];
    }
    full[0].im = 0.0;
    if n.is_multiple_of(2) {
        full[half].im = 0.0;
    }
    for k in 1..n - half {
        full[n - k] = full[k].conj();
    }
    full
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResult {
    /// Peak of the energy-normalized cross-correlation, in `[-1, 1]`.
    pub a_cc: f64,
    /// Lag of that peak in samples; positive when `q` lags `p`.
    pub l_cc: i64,
}

fn check_pair(p: &TimeSignal, q: &TimeSignal) -> Result<(f64, f64)> {
    if p.len() != q.len() {
        return Err(Error::Signal(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.sample_rate != q.sample_rate {
        return Err(Error::Signal("sample rate mismatch".into()));
    }
    let (ep, eq) = (p.energy(), q.energy());
    if ep <= 0.0 || eq <= 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok((ep, eq))
}

/// Picks the maximum over `(lag, value)` pairs, preferring the smaller |lag| on ties.
pub(crate) fn pick_peak(values: impl Iterator<Item = (i64, f64)>) -> (i64, f64) {
    let mut best = (0i64, f64::NEG_INFINITY);
    for (lag, v) in values {
        if v > best.1 || (v == best.1 && (lag.abs(), -lag) < (best.0.abs(), -best.0)) {
            best = (lag, v);
        }
    }
    best
}

/// Full linear cross-correlation peak over lags `-(n-1)..=(n-1)`.
pub fn xcorr_peak(p: &TimeSignal, q: &TimeSignal) -> Result<CorrelationResult> {
    let (ep, eq) = check_pair(p, q)?;
    let n = p.len();
    let m = (2 * n - 1).next_power_of_two();
    let c = circular_correlation_raw(&p.samples, &q.samples, m);
    let norm = 1.0 / (ep * eq).sqrt();
    let n = n as i64;
    let (lag, v) = pick_peak((-(n - 1)..n).map(|lag| {
        let idx = if lag >= 0 { lag as usize } else { (m as i64 + lag) as usize };
        (lag, c[idx])
    }));
    Ok(CorrelationResult {
        a_cc: (v * norm).clamp(-1.0, 1.0),
        l_cc: lag,
    })
}

/// Circular cross-correlation peak for signals that are periodic in their length.
/// Lags span `-n/2..n/2`.
pub fn xcorr_peak_circular(p: &TimeSignal, q: &TimeSignal) -> Result<CorrelationResult> {
    let (ep, eq) = check_pair(p, q)?;
    let n = p.len();
    let c = circular_correlation_raw(&p.samples, &q.samples, n);
    let norm = 1.0 / (ep * eq).sqrt();
    let (lag, v) = pick_peak(circular_lags(n).map(|lag| {
        let idx = lag.rem_euclid(n as i64) as usize;
        (lag, c[idx])
    }));
    Ok(CorrelationResult {
        a_cc: (v * norm).clamp(-1.0, 1.0),
        l_cc: lag,
    })
}

pub(crate) fn circular_lags(n: usize) -> std::ops::Range<i64> {
    let n = n as i64;
    -(n / 2)..(n - n / 2)
}

/// `c[τ] = Σ_t p[t]·q[t+τ]` over a period of `m` samples (inputs zero-padded to `m`).
fn circular_correlation_raw(p: &[f64], q: &[f64], m: usize) -> Vec<f64> {
    let mut a: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    a.resize(m, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = q.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    b.resize(m, Complex64::new(0.0, 0.0));
    let fwd = fft_forward(m);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = x.conj() * y;
    }
    fft_inverse(m).process(&mut a);
    let s = 1.0 / m as f64;
    a.iter().map(|c| c.re * s).collect()
}

/// Direct O(N²) transforms kept as references for the fast paths.
pub mod reference {
    use super::*;

    /// Direct one-sided DFT of `x` zero-padded to `n`.
    pub fn dft_direct(x: &[f64], n: usize) -> Vec<Complex64> {
        (0..=n / 2)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let ph = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                        Complex64::from_polar(v, ph)
                    })
                    .sum()
            })
            .collect()
    }

    /// Direct linear cross-correlation peak, same conventions as [`xcorr_peak`].
    pub fn xcorr_direct(p: &[f64], q: &[f64]) -> CorrelationResult {
        let n = p.len() as i64;
        let ep: f64 = p.iter().map(|v| v * v).sum();
        let eq: f64 = q.iter().map(|v| v * v).sum();
        let (lag, v) = pick_peak((-(n - 1)..n).map(|lag| {
            let mut acc = 0.0;
            for t in 0..n {
                let u = t + lag;
                if (0..n).contains(&u) {
                    acc += p[t as usize] * q[u as usize];
                }
            }
            (lag, acc)
        }));
        CorrelationResult {
            a_cc: v / (ep * eq).sqrt(),
            l_cc: lag,
        }
    }

    /// Direct circular cross-correlation peak, same conventions as [`xcorr_peak_circular`].
    pub fn xcorr_circular_direct(p: &[f64], q: &[f64]) -> CorrelationResult {
        let n = p.len();
        let ep: f64 = p.iter().map(|v| v * v).sum();
        let eq: f64 = q.iter().map(|v| v * v).sum();
        let (lag, v) = pick_peak(circular_lags(n).map(|lag| {
            let acc = (0..n)
                .map(|t| p[t] * q[(t as i64 + lag).rem_euclid(n as i64) as usize])
                .sum::<f64>();
            (lag, acc)
        }));
        CorrelationResult {
            a_cc: v / (ep * eq).sqrt(),
            l_cc: lag,
        }
    }
}

/// Writes channel-interleaved little-endian f32 audio behind a one-line text header.
pub fn write_raw(path: &Path, channels: &[TimeSignal]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_raw_to(&mut w, channels).map_err(|e| Error::io(path, e))
}

pub fn write_raw_to<W: Write>(w: &mut W, channels: &[TimeSignal]) -> std::io::Result<()> {
    let c = channels.len();
    let frames = channels.first().map_or(0, |s| s.len());
    let rate = channels.first().map_or(DEFAULT_SAMPLE_RATE, |s| s.sample_rate);
    if channels.iter().any(|s| s.len() != frames) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "channels differ in length",
        ));
    }
    writeln!(w, "channels={c} rate={} frames={frames}", rate.round() as u64)?;
    for t in 0..frames {
        for ch in channels {
            w.write_all(&(ch.samples[t] as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_raw(path: &Path) -> Result<Vec<TimeSignal>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_raw_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_raw_from<R: BufRead>(mut r: R, name: &str) -> Result<Vec<TimeSignal>> {
    let perr = |message: String| Error::Parse {
        file: name.to_string(),
        line: 1,
        message,
    };
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|e| Error::io(name, e))?;
    let (mut c, mut rate, mut frames) = (None, None, None);
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| perr(format!("bad header field `{field}`")))?;
        let val: u64 = v
            .parse()
            .map_err(|_| perr(format!("bad header value `{field}`")))?;
        match k {
            "channels" => c = Some(val as usize),
            "rate" => rate = Some(val as f64),
            "frames" => frames = Some(val as usize),
            _ => return Err(perr(format!("unknown header key `{k}`"))),
        }
    }
    let (c, rate, frames) = match (c, rate, frames) {
        (Some(c), Some(r), Some(f)) if c > 0 && r > 0.0 => (c, r, f),
        _ => return Err(perr("header needs channels, rate and frames".into())),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(name, e))?;
    if bytes.len() != c * frames * 4 {
        return Err(perr(format!(
            "expected {} bytes of samples, found {}",
            c * frames * 4,
            bytes.len()
        )));
    }
    let mut out = vec![Vec::with_capacity(frames); c];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        out[i % c].push(v);
    }
    out.into_iter()
        .map(|s| TimeSignal::new(s, rate))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::reference::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> TimeSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSignal::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 48_000.0).unwrap()
    }

    fn impulse(n: usize, at: usize) -> TimeSignal {
        let mut s = vec![0.0; n];
        s[at] = 1.0;
        TimeSignal::new(s, 48_000.0).unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let x = forward_dft(&impulse(16, 0), 32).unwrap();
        assert_eq!(x.bins.len(), 17);
        for b in &x.bins {
            assert!((b - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn bin_aligned_sinusoid_has_single_peak() {
        let n = 256;
        let s: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 10.0 * t as f64 / n as f64).cos())
            .collect();
        let x = forward_dft(&TimeSignal::new(s, 48_000.0).unwrap(), n).unwrap();
        for (k, b) in x.bins.iter().enumerate() {
            if k == 10 {
                assert!((b.norm() - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(b.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_direct_dft() {
        let s = noise(100, 1);
        let fast = forward_dft(&s, 160).unwrap();
        let slow = dft_direct(&s.samples, 160);
        for (a, b) in fast.bins.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn frame_round_trip() {
        let s = noise(3840, 2);
        let x = forward_dft(&s, 8192).unwrap();
        let back = inverse_dft(&x);
        assert_eq!(back.len(), 8192);
        let err: f64 = s
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            + back.samples[3840..].iter().map(|v| v * v).sum::<f64>();
        assert!((err / s.energy()).sqrt() < 1e-10);
    }

    #[test]
    fn flat_spectrum_inverts_to_impulse() {
        let x = Spectrum {
            bins: vec![Complex64::new(1.0, 0.0); 33],
            sample_rate: 48_000.0,
            frame_length: 64,
            padded_length: 64,
        };
        let s = inverse_dft(&x);
        assert!((s.samples[0] - 1.0).abs() < 1e-14);
        assert!(s.samples[1..].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn shifted_impulse_round_trips() {
        let x = forward_dft(&impulse(64, 7), 64).unwrap();
        let s = inverse_dft(&x);
        for (t, v) in s.samples.iter().enumerate() {
            let expect = if t == 7 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn parseval() {
        let s = noise(1000, 3);
        let n = 2048;
        let x = forward_dft(&s, n).unwrap();
        let half = n / 2;
        let mut e = x.bins[0].norm_sqr() + x.bins[half].norm_sqr();
        e += 2.0 * x.bins[1..half].iter().map(|b| b.norm_sqr()).sum::<f64>();
        e /= n as f64;
        assert!((e - s.energy()).abs() / s.energy() < 1e-9);
    }

    #[test]
    fn pad_shorter_than_signal_is_error() {
        assert!(forward_dft(&noise(10, 0), 8).is_err());
    }

    #[test]
    fn self_correlation_is_one_at_zero_lag() {
        let p = noise(500, 4);
        let r = xcorr_peak(&p, &p).unwrap();
        assert!((r.a_cc - 1.0).abs() < 1e-12);
        assert_eq!(r.l_cc, 0);
        let r = xcorr_peak_circular(&p, &p).unwrap();
        assert!((r.a_cc - 1.0).abs() < 1e-12);
        assert_eq!(r.l_cc, 0);
    }

    #[test]
    fn delayed_impulse_gives_positive_lag() {
        let p = impulse(64, 10);
        let q = impulse(64, 15);
        let r = xcorr_peak(&p, &q).unwrap();
        assert_eq!(r.l_cc, 5);
        assert!((r.a_cc - 1.0).abs() < 1e-12);
        let r = xcorr_peak(&q, &p).unwrap();
        assert_eq!(r.l_cc, -5);
        let r = xcorr_peak_circular(&p, &q).unwrap();
        assert_eq!(r.l_cc, 5);
    }

    #[test]
    fn zero_energy_is_error() {
        let z = TimeSignal::zeros(32, 48_000.0);
        assert!(matches!(xcorr_peak(&z, &noise(32, 0)), Err(Error::ZeroEnergy)));
    }

    #[test]
    fn fft_correlation_matches_direct() {
        for seed in 0..5 {
            let p = noise(200, seed);
            let q = noise(200, seed + 100);
            let fast = xcorr_peak(&p, &q).unwrap();
            let slow = xcorr_direct(&p.samples, &q.samples);
            assert_eq!(fast.l_cc, slow.l_cc);
            assert!((fast.a_cc - slow.a_cc).abs() < 1e-12);
            let fast = xcorr_peak_circular(&p, &q).unwrap();
            let slow = xcorr_circular_direct(&p.samples, &q.samples);
            assert_eq!(fast.l_cc, slow.l_cc);
            assert!((fast.a_cc - slow.a_cc).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_rarely_correlates() {
        // Threshold 0.1 at n = 8192; 200 trials here, the full 1000-trial estimate is in the integration tests.
        let mut over = 0;
        for seed in 0..200 {
            let r = xcorr_peak(&noise(8192, 2 * seed), &noise(8192, 2 * seed + 1)).unwrap();
            if r.a_cc >= 0.1 {
                over += 1;
            }
        }
        assert!(over <= 2, "{over} of 200 trials exceeded 0.1");
    }

    #[test]
    fn raw_audio_round_trip() {
        let chans = vec![noise(50, 1), noise(50, 2), noise(50, 3)];
        let mut buf = Vec::new();
        write_raw_to(&mut buf, &chans).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[..header_end], b"channels=3 rate=48000 frames=50");
        let back = read_raw_from(&buf[..], "mem").unwrap();
        for (a, b) in chans.iter().zip(&back) {
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn xcorr_swap_negates_lag(seed in 0u64..1000, n in 8usize..200) {
            let p = noise(n, seed);
            let q = noise(n, seed + 7919);
            let a = xcorr_peak(&p, &q).unwrap();
            let b = xcorr_peak(&q, &p).unwrap();
            prop_assert!((a.a_cc - b.a_cc).abs() < 1e-12);
            prop_assert_eq!(a.l_cc, -b.l_cc);
        }

        #[test]
        fn xcorr_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let p = noise(128, seed);
            let q = noise(128, seed + 1);
            let scaled = TimeSignal::new(p.samples.iter().map(|v| v * scale).collect(), p.sample_rate).unwrap();
            let a = xcorr_peak(&p, &q).unwrap();
            let b = xcorr_peak(&scaled, &q).unwrap();
            prop_assert!((a.a_cc - b.a_cc).abs() < 1e-12);
            prop_assert_eq!(a.l_cc, b.l_cc);
        }

        #[test]
        fn dft_round_trip(seed in 0u64..1000, n in 1usize..300, extra in 0usize..300) {
            let s = noise(n, seed);
            let back = inverse_dft(&forward_dft(&s, n + extra).unwrap());
            for (a, b) in s.samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
