//! Backward acoustic ray tracing from the array along beamformer directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reflect, Mesh, RayPath, RaySegment, SurfaceHit, Vec3, EPS_HIT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    /// Maximum number of segments per path.
    pub max_order: usize,
    pub max_total_length: f64,
    pub eps_hit: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            max_order: 3,
            max_total_length: 30.0,
            eps_hit: EPS_HIT,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_order < 1 {
            return Err(Error::Config("trace.max_order must be at least 1".into()));
        }
        if !(self.max_total_length > 0.0) {
            return Err(Error::Config("trace.max_total_length must be positive".into()));
        }
        if !(self.eps_hit > 0.0) {
            return Err(Error::Config("trace.eps_hit must be positive".into()));
        }
        Ok(())
    }
}

/// Casts the primary ray from `origin` along `direction` and chains specular reflections.
pub fn trace_path(mesh: &Mesh, origin: Vec3, direction: Vec3, cfg: &TraceConfig) -> Result<RayPath> {
    let mut dir = direction
        .try_normalize()
        .ok_or_else(|| Error::Geometry("zero trace direction".into()))?;
    let mut o = origin;
    let mut remaining = cfg.max_total_length;
    let mut segments = Vec::with_capacity(cfg.max_order);
    while segments.len() < cfg.max_order && remaining > 0.0 {
        match mesh.intersect_within(o, dir, cfg.eps_hit, remaining) {
            Some(hit) => {
                let tri = mesh.triangle(hit.triangle);
                let normal = tri.normal;
                segments.push(RaySegment {
                    origin: o,
                    direction: dir,
                    length: hit.distance,
                    hit: Some(SurfaceHit {
                        triangle: hit.triangle,
                        material: tri.material,
                        normal,
                    }),
                });
                remaining -= hit.distance;
                o = hit.point;
                dir = reflect(dir, normal).normalized();
            }
            None => {
                segments.push(RaySegment {
                    origin: o,
                    direction: dir,
                    length: remaining,
                    hit: None,
                });
                break;
            }
        }
    }
    RayPath::new(segments)
}

/// Traces every direction, preserving order.
pub fn trace_all(
    mesh: &Mesh,
    origin: Vec3,
    directions: &[Vec3],
    cfg: &TraceConfig,
) -> Result<Vec<RayPath>> {
    directions
        .iter()
        .map(|&d| trace_path(mesh, origin, d, cfg))
        .collect()
}
