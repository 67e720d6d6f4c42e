use bpssl::backprop::MaterialTable;
use bpssl::beamform::SeparationSignal;
use bpssl::geometry::{Aabb, Mesh, RayPath, Vec3};
use bpssl::localizer::{
    feet, pair_index, FastCorrelator, Localizer, LocalizerConfig, NaiveCorrelator, Observation, PairCorrelator,
};
use bpssl::raytrace::{trace_all, TraceConfig};
use bpssl::signal::{forward_dft, inverse_dft, Spectrum, TimeSignal, DEFAULT_SAMPLE_RATE};
use bpssl::{FRAME_LENGTH, PADDED_LENGTH};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn room() -> (Mesh, MaterialTable) {
    let mesh = Mesh::shoebox(Vec3::new(7.0, 6.0, 3.0), 0).unwrap();
    let mats = MaterialTable::new()
        .with(0, [0.9, 0.85, 0.8, 0.7, 0.6, 0.5, 0.45])
        .unwrap();
    (mesh, mats)
}

fn paths(mesh: &Mesh) -> Vec<RayPath> {
    let dirs = [
        Vec3::new(1.0, 0.2, 0.1),
        Vec3::new(-0.3, 1.0, -0.2),
        Vec3::new(-1.0, -0.6, 0.3),
        Vec3::new(0.2, -0.4, 1.0),
    ];
    trace_all(mesh, Vec3::new(3.0, 2.5, 1.4), &dirs, &TraceConfig::default()).unwrap()
}

/// Band-limited spectra sharing a common component, each delayed differently.
fn spectra(seed: u64, count: usize) -> Vec<Spectrum> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common: Vec<f64> = (0..FRAME_LENGTH).map(|_| rng.random::<f64>() - 0.5).collect();
    (0..count)
        .map(|i| {
            let delay = rng.random_range(0..600);
            let mut x = vec![0.0; FRAME_LENGTH];
            for t in delay..FRAME_LENGTH {
                x[t] = common[t - delay] + 0.7 * (rng.random::<f64>() - 0.5) * (i as f64 * 0.3);
            }
            let mut s = forward_dft(&TimeSignal::new(x, DEFAULT_SAMPLE_RATE).unwrap(), PADDED_LENGTH).unwrap();
            let band = s.bin_range(2000.0, 8000.0);
            for (k, b) in s.bins.iter_mut().enumerate() {
                if !band.contains(&k) {
                    *b = Complex64::new(0.0, 0.0);
                }
            }
            s
        })
        .collect()
}

#[test]
fn fast_matches_explicit_back_propagation() {
    let (mesh, mats) = room();
    let ps = paths(&mesh);
    let sp = spectra(3, ps.len());
    let fast = FastCorrelator::new(&sp, &ps, &mats).unwrap();
    let naive = NaiveCorrelator {
        spectra: &sp,
        paths: &ps,
        materials: &mats,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let x = Vec3::new(
            rng.random_range(0.0..7.0),
            rng.random_range(0.0..6.0),
            rng.random_range(0.0..3.0),
        );
        let f = feet(x, &ps, 0.0);
        let a = fast.correlate_all(&f).unwrap();
        let b = naive.correlate_all(&f).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            let (ra, rb) = (ra.unwrap(), rb.unwrap());
            assert!((ra.a_cc - rb.a_cc).abs() < 1e-6, "{ra:?} vs {rb:?}");
            if ra.l_cc != rb.l_cc {
                // Only a near tie may pick a different lag.
                assert!((ra.l_cc - rb.l_cc).abs() <= 1 || (ra.a_cc - rb.a_cc).abs() < 1e-9, "{ra:?} vs {rb:?}");
            }
        }
    }
    assert!(fast.built_tables() > 0);
}

#[test]
fn zero_signal_pairs_are_skipped() {
    let (mesh, mats) = room();
    let ps = paths(&mesh);
    let mut sp = spectra(5, ps.len());
    sp[1].bins.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
    let fast = FastCorrelator::new(&sp, &ps, &mats).unwrap();
    let f = feet(Vec3::new(2.0, 2.0, 1.0), &ps, 0.0);
    let r = fast.correlate_all(&f).unwrap();
    for a in 0..4 {
        for b in a + 1..4 {
            let involved = a == 1 || b == 1;
            assert_eq!(r[pair_index(a, b, 4)].is_none(), involved);
        }
    }
}

fn observation_parts(seed: u64) -> (Vec<RayPath>, Vec<SeparationSignal>, MaterialTable) {
    let (mesh, mats) = room();
    let ps = paths(&mesh);
    let seps = spectra(seed, ps.len())
        .into_iter()
        .zip(&ps)
        .map(|(s, p)| SeparationSignal {
            direction: p.segments()[0].direction,
            signal: inverse_dft(&s),
            spectrum: s,
        })
        .collect();
    (ps, seps, mats)
}

fn room_bounds() -> Aabb {
    room().0.bounds()
}

#[test]
fn filter_is_deterministic_per_seed() {
    let (ps, seps, mats) = observation_parts(9);
    let obs = Observation {
        paths: &ps,
        separations: &seps,
        materials: &mats,
    };
    let cfg = LocalizerConfig {
        particles: 300,
        ..Default::default()
    };
    let run = || {
        let mut l = Localizer::new(cfg, room_bounds(), 4).unwrap();
        (0..3).map(|_| l.step(&obs).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let mut other = Localizer::new(cfg, room_bounds(), 5).unwrap();
    assert_ne!(other.step(&obs).unwrap(), run()[0]);
}

#[test]
fn oracle_and_fast_filters_agree() {
    let (ps, seps, mats) = observation_parts(2);
    let obs = Observation {
        paths: &ps,
        separations: &seps,
        materials: &mats,
    };
    let cfg = LocalizerConfig {
        particles: 200,
        ..Default::default()
    };
    let mut a = Localizer::new(cfg, room_bounds(), 1).unwrap();
    let mut b = Localizer::new(cfg, room_bounds(), 1).unwrap();
    b.oracle_correlation = true;
    for _ in 0..2 {
        let (ea, eb) = (a.step(&obs).unwrap(), b.step(&obs).unwrap());
        assert!((ea.position - eb.position).norm() < 1e-3, "{ea:?} vs {eb:?}");
    }
}

#[test]
fn empty_observation_keeps_previous_estimate() {
    let (ps, seps, mats) = observation_parts(2);
    let cfg = LocalizerConfig {
        particles: 200,
        ..Default::default()
    };
    let mut l = Localizer::new(cfg, room_bounds(), 1).unwrap();
    let full = Observation {
        paths: &ps,
        separations: &seps,
        materials: &mats,
    };
    let e0 = l.step(&full).unwrap();
    assert!(!e0.stale);
    let empty = Observation {
        paths: &[],
        separations: &[],
        materials: &mats,
    };
    let e1 = l.step(&empty).unwrap();
    assert!(e1.stale);
    assert_eq!(e1.position, e0.position);
    assert_eq!(e1.frame, 1);
}

#[test]
fn far_evidence_resets_to_uniform() {
    let (_, seps, mats) = observation_parts(2);
    // Paths far outside the room: every particle scores exactly zero.
    let far = Mesh::shoebox(Vec3::new(7.0, 6.0, 3.0), 0).unwrap();
    let origin = Vec3::new(500.0, 500.0, 500.0);
    let ps = trace_all(&far, origin, &[Vec3::X; 4], &TraceConfig::default()).unwrap();
    let cfg = LocalizerConfig {
        particles: 100,
        alpha: 0.0,
        ..Default::default()
    };
    let mut l = Localizer::new(cfg, room_bounds(), 1).unwrap();
    let e = l
        .step(&Observation {
            paths: &ps,
            separations: &seps,
            materials: &mats,
        })
        .unwrap();
    assert!(e.stale);
    let w = l.particles()[0].weight;
    assert!(l.particles().iter().all(|p| (p.weight - w).abs() < 1e-15));
}

#[test]
fn converges_near_path_crossing() {
    // Two straight rays that cross at a known point.
    let mesh = Mesh::shoebox(Vec3::new(20.0, 20.0, 20.0), 0).unwrap();
    let mats = MaterialTable::flat(0, 0.9).unwrap();
    let target = Vec3::new(10.0, 12.0, 8.0);
    let o1 = Vec3::new(4.0, 5.0, 6.0);
    let o2 = Vec3::new(15.0, 6.0, 9.0);
    let mut ps = trace_all(&mesh, o1, &[target - o1], &TraceConfig::default()).unwrap();
    ps.extend(trace_all(&mesh, o2, &[target - o2], &TraceConfig::default()).unwrap());
    let (_, mut seps, _) = observation_parts(1);
    seps.truncate(2);
    let cfg = LocalizerConfig {
        particles: 2000,
        alpha: 0.0,
        sigma_m: 0.05,
        ..Default::default()
    };
    let mut l = Localizer::new(cfg, mesh.bounds(), 1).unwrap();
    let obs = Observation {
        paths: &ps,
        separations: &seps,
        materials: &mats,
    };
    let mut e = l.step(&obs).unwrap();
    for _ in 0..30 {
        e = l.step(&obs).unwrap();
    }
    assert!((e.position - target).norm() < 0.5, "{e:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_stay_normalized_and_inside(seed in 0u64..1000, alpha in 0.0f64..2.0) {
        let (ps, seps, mats) = observation_parts(seed % 7);
        let cfg = LocalizerConfig { particles: 64, alpha, ..Default::default() };
        let bounds = room_bounds();
        let mut l = Localizer::new(cfg, bounds, seed).unwrap();
        let obs = Observation { paths: &ps, separations: &seps, materials: &mats };
        for _ in 0..2 {
            let e = l.step(&obs).unwrap();
            prop_assert!(e.confidence_radius_95 >= 0.0);
            let total: f64 = l.particles().iter().map(|p| p.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(l.particles().iter().all(|p| p.weight >= 0.0 && bounds.contains(p.position)));
        }
    }
}
