//! Scenario files: TOML with `[world]`, `[materials]`, `[array]`, `[emitter.N]`, `[frames]`,
//! `[localizer]`, `[beamform]` and `[trace]` sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backprop::MaterialTable;
use crate::beamform::BeamformConfig;
use crate::error::{Error, Result};
use crate::forward_sim::{Emitter, EmitterKind, Scenario, SignalKind};
use crate::geometry::{Mat3, Mesh, Vec3};
use crate::localizer::LocalizerConfig;
use crate::raytrace::TraceConfig;
use crate::signal::DEFAULT_SAMPLE_RATE;
use crate::sphharm::{ArrayGeometry, DEFAULT_MAX_GAIN};
use crate::{FRAME_LENGTH, PADDED_LENGTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub world: World,
    #[serde(default)]
    pub materials: BTreeMap<String, Reflectivity>,
    pub array: ArraySection,
    #[serde(default)]
    pub emitter: BTreeMap<String, EmitterSection>,
    #[serde(default)]
    pub frames: Frames,
    #[serde(default)]
    pub localizer: LocalizerConfig,
    #[serde(default)]
    pub beamform: BeamformConfig,
    #[serde(default)]
    pub trace: TraceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    /// Mesh file, relative to the scenario file.
    pub mesh: Option<PathBuf>,
    /// Shoebox size `[x, y, z]` with one corner at the origin.
    pub room: Option<[f64; 3]>,
    #[serde(default)]
    pub room_material: usize,
    #[serde(default)]
    pub boxes: Vec<BoxSection>,
    /// Highest reflection order the oracle renders.
    #[serde(default = "default_render_order")]
    pub render_order: usize,
}

fn default_render_order() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub material: usize,
}

/// One value for every band, or seven per-band values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reflectivity {
    Flat(f64),
    Bands([f64; 7]),
}

impl Reflectivity {
    pub fn bands(self) -> [f64; 7] {
        match self {
            Reflectivity::Flat(g) => [g; 7],
            Reflectivity::Bands(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    pub position: [f64; 3],
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Yaw, pitch, roll in degrees.
    #[serde(default)]
    pub orientation_deg: [f64; 3],
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_max_gain")]
    pub max_gain: f64,
}

fn default_radius() -> f64 {
    0.042
}

fn default_order() -> usize {
    4
}

fn default_max_gain() -> f64 {
    DEFAULT_MAX_GAIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterSection {
    pub kind: EmitterKind,
    /// Fixed position; alternative to `waypoints`.
    pub position: Option<[f64; 3]>,
    /// `[t, x, y, z]` rows.
    pub waypoints: Option<Vec<[f64; 4]>>,
    pub signal: Option<SignalKind>,
    #[serde(default = "one")]
    pub level: f64,
    pub coherent: Option<bool>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Frames {
    pub hop: usize,
    pub length: usize,
    pub padded: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
    /// Sensor noise; absent means noiseless.
    pub snr_db: Option<f64>,
}

impl Default for Frames {
    fn default() -> Self {
        Self {
            hop: FRAME_LENGTH,
            length: FRAME_LENGTH,
            padded: PADDED_LENGTH,
            duration_s: 1.6,
            sample_rate: DEFAULT_SAMPLE_RATE,
            snr_db: None,
        }
    }
}

/// A scenario ready to render and localize.
#[derive(Debug, Clone)]
pub struct Setup {
    pub scenario: Scenario,
    pub localizer: LocalizerConfig,
    pub beamform: BeamformConfig,
    pub trace: TraceConfig,
    pub sh_order: usize,
    pub max_gain: f64,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, file: &str, e: &toml::de::Error) -> Error {
    Error::Parse {
        file: file.to_string(),
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    }
}

/// Sets `key` (dotted) in `table` to `value`, parsed as a TOML value or else kept as a string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses `key=value` pairs.
pub fn parse_overrides(pairs: &[String]) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
        })
        .collect()
}

impl ScenarioFile {
    /// Parses scenario text, then applies overrides. Errors in the text carry its line numbers.
    pub fn parse(text: &str, file: &str, overrides: &[(String, String)]) -> Result<Self> {
        let base: ScenarioFile = toml::from_str(text).map_err(|e| toml_error(text, file, &e))?;
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut table: toml::Table = text.parse().map_err(|e| toml_error(text, file, &e))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {}", e.message())))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text, &path.display().to_string(), overrides)?, base))
    }

    /// Builds the scene. `base` resolves a relative mesh path.
    pub fn build(&self, base: &Path) -> Result<Setup> {
        let mut materials = MaterialTable::new();
        for (id, r) in &self.materials {
            let id: usize = id
                .parse()
                .map_err(|_| Error::Config(format!("material id `{id}` is not a non-negative integer")))?;
            materials.insert(id, r.bands())?;
        }
        let boxes: Vec<(Vec3, Vec3, usize)> = self
            .world
            .boxes
            .iter()
            .map(|b| (Vec3::from(b.min), Vec3::from(b.max), b.material))
            .collect();
        let walls = match (&self.world.mesh, self.world.room) {
            (Some(p), None) => Mesh::load(&base.join(p))?.triangles().to_vec(),
            (None, Some(r)) => Mesh::shoebox(Vec3::from(r), self.world.room_material)?
                .triangles()
                .to_vec(),
            (Some(_), Some(_)) => return Err(Error::Config("world: give either mesh or room, not both".into())),
            (None, None) => return Err(Error::Config("world: mesh or room is required".into())),
        };
        let mesh = Mesh::with_boxes(walls, &boxes)?;

        let a = &self.array;
        let [yaw, pitch, roll] = a.orientation_deg.map(f64::to_radians);
        let array = ArrayGeometry::default_32(a.radius).with_pose(Vec3::from(a.position), Mat3::from_euler(yaw, pitch, roll));

        let mut emitters = Vec::with_capacity(self.emitter.len());
        let mut keys: Vec<&String> = self.emitter.keys().collect();
        // Numeric keys in numeric order, others after them alphabetically.
        keys.sort_by_key(|k| (k.parse::<u64>().map_or(u64::MAX, |v| v), (*k).clone()));
        for k in keys {
            let e = &self.emitter[k];
            let waypoints = match (&e.position, &e.waypoints) {
                (Some(p), None) => vec![(0.0, Vec3::from(*p))],
                (None, Some(w)) if !w.is_empty() => w.iter().map(|r| (r[0], Vec3::new(r[1], r[2], r[3]))).collect(),
                _ => {
                    return Err(Error::Config(format!(
                        "emitter.{k}: give exactly one of position or a non-empty waypoints list"
                    )))
                }
            };
            let signal = e.signal.unwrap_or(match e.kind {
                EmitterKind::Source => SignalKind::clap(),
                EmitterKind::Noise => SignalKind::Noise,
            });
            let em = Emitter {
                kind: e.kind,
                waypoints,
                signal,
                level: e.level,
                coherent: e.coherent.unwrap_or(e.kind == EmitterKind::Source),
            };
            em.validate().map_err(|err| Error::Config(format!("emitter.{k}: {err}")))?;
            emitters.push(em);
        }

        let f = &self.frames;
        let scenario = Scenario {
            mesh,
            materials,
            emitters,
            array,
            duration_s: f.duration_s,
            frame_hop: f.hop,
            frame_length: f.length,
            padded_length: f.padded,
            sample_rate: f.sample_rate,
            snr_db: f.snr_db,
            max_order: self.world.render_order,
        };
        scenario.validate()?;
        if !(f.sample_rate > 0.0) {
            return Err(Error::Config("frames.sample_rate must be positive".into()));
        }
        self.localizer.validate()?;
        self.beamform.validate()?;
        self.trace.validate()?;
        Ok(Setup {
            scenario,
            localizer: self.localizer,
            beamform: self.beamform,
            trace: self.trace,
            sh_order: a.order,
            max_gain: a.max_gain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[world]
room = [7.0, 7.0, 3.0]

[materials]
0 = 0.8

[array]
position = [3.5, 3.5, 1.5]

[emitter.0]
kind = "source"
position = [2.0, 5.0, 1.2]
"#;

    #[test]
    fn minimal_scenario_builds() {
        let f = ScenarioFile::parse(MINIMAL, "mem", &[]).unwrap();
        let s = f.build(Path::new(".")).unwrap();
        assert_eq!(s.scenario.mesh.triangles().len(), 12);
        assert_eq!(s.scenario.frame_count(), 20);
        assert_eq!(s.scenario.emitters[0].signal, SignalKind::clap());
        assert!(s.scenario.emitters[0].coherent);
        assert_eq!(s.localizer, LocalizerConfig::default());
    }

    #[test]
    fn syntax_error_reports_line() {
        let bad = MINIMAL.replace("position = [2.0, 5.0, 1.2]", "position = [2.0, 5.0,");
        match ScenarioFile::parse(&bad, "mem", &[]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }
        let unknown = MINIMAL.replace("[array]", "[array]\nradius_mm = 42");
        match ScenarioFile::parse(&unknown, "mem", &[]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_material_is_reported() {
        let bad = MINIMAL.replace("0 = 0.8", "1 = 0.8");
        let f = ScenarioFile::parse(&bad, "mem", &[]).unwrap();
        assert!(matches!(f.build(Path::new(".")), Err(Error::MissingMaterial(0))));
    }

    #[test]
    fn array_outside_room_is_rejected() {
        let bad = MINIMAL.replace("position = [3.5, 3.5, 1.5]", "position = [9.0, 3.5, 1.5]");
        let f = ScenarioFile::parse(&bad, "mem", &[]).unwrap();
        assert!(matches!(f.build(Path::new(".")), Err(Error::Geometry(_))));
    }

    #[test]
    fn overrides_apply() {
        let o = parse_overrides(&[
            "localizer.alpha=0".into(),
            "frames.snr_db = 20".into(),
            "emitter.0.signal.type=noise".into(),
        ])
        .unwrap();
        let f = ScenarioFile::parse(MINIMAL, "mem", &o).unwrap();
        assert_eq!(f.localizer.alpha, 0.0);
        assert_eq!(f.frames.snr_db, Some(20.0));
        assert_eq!(f.emitter["0"].signal, Some(SignalKind::Noise));
        assert!(parse_overrides(&["alpha".into()]).is_err());
        let bad = parse_overrides(&["localizer.bogus=1".into()]).unwrap();
        assert!(ScenarioFile::parse(MINIMAL, "mem", &bad).is_err());
    }

    #[test]
    fn per_band_materials_and_waypoints() {
        let text = MINIMAL
            .replace("0 = 0.8", "0 = [0.9, 0.9, 0.8, 0.8, 0.7, 0.7, 0.6]")
            .replace(
                "position = [2.0, 5.0, 1.2]",
                "waypoints = [[0.0, 1.0, 1.0, 1.0], [1.0, 3.0, 1.0, 1.0]]",
            );
        let s = ScenarioFile::parse(&text, "mem", &[]).unwrap().build(Path::new(".")).unwrap();
        assert_eq!(s.scenario.materials.get(0).unwrap()[6], 0.6);
        let p = s.scenario.emitters[0].position_at(0.5);
        assert!((p - Vec3::new(2.0, 1.0, 1.0)).norm() < 1e-12);
    }
}
