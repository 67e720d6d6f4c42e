use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpssl::config::{parse_overrides, Setup};
use bpssl::forward_sim::render_frame;
use bpssl::geometry::Vec3;
use bpssl::pipeline::{
    analyze_alignment, join_frames, render_all, run, split_frames, summarize, sweep, write_paths,
    write_sweep, write_trace, Frontend, RunOptions, SweepParam, SweepSpec,
};
use bpssl::signal::{read_raw, write_raw};
use bpssl::{presets, Error, Result};
use clap::{Args, Parser, Subcommand};

/// Simulate a spherical microphone array in a room and localize the sound source.
#[derive(Parser)]
#[command(name = "bpssl", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file, or `preset:<static|moving|decoy>`.
    #[arg(long, default_value = "preset:static")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override a scenario key, e.g. `--set localizer.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Back-propagate every particle explicitly instead of using shifted correlation tables.
    #[arg(long)]
    oracle_correlation: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Render, beamform, trace and localize every frame; write trace.csv and summary.txt.
    Run {
        #[command(flatten)]
        common: Common,
        /// Localize pre-rendered audio (as written by `render`) instead of rendering.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Record per-phase wall-clock times in the trace.
        #[arg(long)]
        timing: bool,
    },
    /// Mean error per parameter value, averaged over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, sigma_w or a_th.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds as `a..b` (exclusive) or a comma-separated list.
        #[arg(long, default_value = "0")]
        seeds: String,
    },
    /// Compare separation and back-propagated signal alignment at a point for one frame.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// `x,y,z`; defaults to the true source position.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        point: Option<Vec<f64>>,
        /// Only paths passing this close to the point are compared, meters.
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
    },
    /// Dump the oracle's capsule signals and ground truth.
    Render {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<Setup> {
    presets::resolve(&common.scenario, &parse_overrides(&common.set)?)
}

fn out_dir(common: &Common) -> Result<Option<PathBuf>> {
    if let Some(d) = &common.out {
        std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.clone(), source: e })?;
    }
    Ok(common.out.clone())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_run(common: &Common, audio: Option<&Path>, timing: bool) -> Result<()> {
    let setup = load(common)?;
    let frames = match audio {
        Some(p) => Some(split_frames(&read_raw(p)?, setup.scenario.padded_length)?),
        None => None,
    };
    let opts = RunOptions { oracle_correlation: common.oracle_correlation, timing };
    let records = run(&setup, common.seed, frames.as_deref(), opts)?;
    let summary = summarize(&records);
    match out_dir(common)? {
        Some(d) => {
            let p = d.join("trace.csv");
            let mut w = create(&p)?;
            write_trace(&mut w, &records).and_then(|_| w.flush()).map_err(io(&p))?;
            let p = d.join("summary.txt");
            std::fs::write(&p, format!("{summary}\n")).map_err(io(&p))?;
            println!("{summary}");
        }
        None => {
            let mut out = std::io::stdout().lock();
            write_trace(&mut out, &records).map_err(io(Path::new("<stdout>")))?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn cmd_sweep(common: &Common, param: &str, values: &[f64], seeds: &str) -> Result<()> {
    let setup = load(common)?;
    let spec = SweepSpec { param: param.parse::<SweepParam>()?, values: values.to_vec(), seeds: parse_seeds(seeds)? };
    let rows = sweep(&setup, &spec, RunOptions { oracle_correlation: common.oracle_correlation, timing: false })?;
    let mut buf = Vec::new();
    write_sweep(&mut buf, spec.param, &rows).expect("writing to memory");
    if let Some(d) = out_dir(common)? {
        let p = d.join("sweep.csv");
        std::fs::write(&p, &buf).map_err(io(&p))?;
    }
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn cmd_analyze(common: &Common, frame: usize, point: Option<&[f64]>, radius: f64) -> Result<()> {
    let setup = load(common)?;
    let s = &setup.scenario;
    if frame >= s.frame_count() {
        return Err(Error::Config(format!("frame {frame} out of range (scenario has {})", s.frame_count())));
    }
    let point = match point {
        Some(p) => Vec3::new(p[0], p[1], p[2]),
        None => s.truth(frame).ok_or_else(|| Error::Config("no source emitter; pass --point".into()))?,
    };
    if !s.mesh.bounds().contains(point) {
        return Err(Error::Geometry(format!("point {point} is outside the room")));
    }
    let front = Frontend::new(&setup)?;
    let (obs, map) = front.observe_with_map(frame, &render_frame(s, frame, common.seed)?.channels)?;
    let report = analyze_alignment(&setup, &obs, point, radius)?;
    if let Some(d) = out_dir(common)? {
        let p = d.join("beam_map.csv");
        let mut w = create(&p)?;
        map.write_csv(&mut w).and_then(|_| w.flush()).map_err(io(&p))?;
        let p = d.join("paths.csv");
        let mut w = create(&p)?;
        write_paths(&mut w, &obs.paths).and_then(|_| w.flush()).map_err(io(&p))?;
        let p = d.join("alignment.txt");
        std::fs::write(&p, format!("{report}\n")).map_err(io(&p))?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_render(common: &Common) -> Result<()> {
    let setup = load(common)?;
    let d = out_dir(common)?.ok_or_else(|| Error::Config("render needs --out".into()))?;
    let frames = render_all(&setup, common.seed)?;
    let p = d.join("audio.raw");
    write_raw(&p, &join_frames(&frames))?;
    let p = d.join("truth.csv");
    let mut w = create(&p)?;
    let s = &setup.scenario;
    (|| -> std::io::Result<()> {
        writeln!(w, "frame,time_s,x,y,z")?;
        for j in 0..frames.len() {
            match s.truth(j) {
                Some(g) => writeln!(w, "{j},{:.6},{:.6},{:.6},{:.6}", s.frame_time(j), g.x, g.y, g.z)?,
                None => writeln!(w, "{j},{:.6},,,", s.frame_time(j))?,
            }
        }
        w.flush()
    })()
    .map_err(io(&p))?;
    println!("rendered {} frames of {} channels to {}", frames.len(), s.array.mic_count(), d.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.verb {
        Verb::Run { common, audio, timing } => cmd_run(common, audio.as_deref(), *timing),
        Verb::Sweep { common, param, values, seeds } => cmd_sweep(common, param, values, seeds),
        Verb::Analyze { common, frame, point, radius } => cmd_analyze(common, *frame, point.as_deref(), *radius),
        Verb::Render { common } => cmd_render(common),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
