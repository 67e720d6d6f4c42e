use std::fmt::Write as _;
use std::path::Path;

use super::bvh::Bvh;
use super::Vec3;
use crate::error::{Error, Result};

/// Minimum hit distance along a ray. Keeps reflected rays from re-hitting the surface they start on.
pub const EPS_HIT: f64 = 1e-4;

const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub normal: Vec3,
    pub material: usize,
}

impl Triangle {
    pub fn new(a: Vec3, b: Vec3, c: Vec3, material: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(Error::Geometry("triangle has non-finite vertex".into()));
        }
        let n = (b - a).cross(c - a);
        let area = 0.5 * n.norm();
        if area <= MIN_TRIANGLE_AREA {
            return Err(Error::Geometry(format!(
                "degenerate triangle (area {area:e} m²)"
            )));
        }
        Ok(Self {
            vertices: [a, b, c],
            normal: n.normalized(),
            material,
        })
    }

    pub fn centroid(&self) -> Vec3 {
        (self.vertices[0] + self.vertices[1] + self.vertices[2]) / 3.0
    }

    pub fn bounds(&self) -> Aabb {
        let [a, b, c] = self.vertices;
        Aabb {
            min: a.min(b).min(c),
            max: a.max(b).max(c),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    pub fn union(self, o: Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn grow(self, p: Vec3) -> Aabb {
        Aabb {
            min: self.min.min(p),
            max: self.max.max(p),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        p.max(self.min).min(self.max)
    }

    pub fn surface_area(&self) -> f64 {
        let e = self.extent();
        if e.x < 0.0 {
            return 0.0;
        }
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    /// Slab test. Returns the entry distance if the ray overlaps `[t_min, t_max]` inside the box.
    pub(crate) fn ray_entry(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let mut lo = t_min;
        let mut hi = t_max;
        for axis in 0..3 {
            let inv = ray.inv_dir[axis];
            let o = ray.origin[axis];
            let mut t0 = (self.min[axis] - o) * inv;
            let mut t1 = (self.max[axis] - o) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            // NaN from 0 * inf (origin on a slab with a parallel ray) must not reject the box.
            if !t0.is_nan() {
                lo = lo.max(t0);
            }
            if !t1.is_nan() {
                hi = hi.min(t1);
            }
            if lo > hi {
                return None;
            }
        }
        Some(lo)
    }
}

/// Ray with the shear constants of the watertight triangle test precomputed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ray {
    pub origin: Vec3,
    pub inv_dir: Vec3,
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        let kz = dir.max_abs_axis();
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        Self {
            origin,
            inv_dir: Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z),
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
        }
    }

    /// Watertight ray/triangle test, two-sided. Returns the hit distance if it lies in `(t_min, t_max)`.
    pub fn hit_triangle(&self, tri: &Triangle, t_min: f64, t_max: f64) -> Option<f64> {
        let a = tri.vertices[0] - self.origin;
        let b = tri.vertices[1] - self.origin;
        let c = tri.vertices[2] - self.origin;
        let (kx, ky, kz) = (self.kx, self.ky, self.kz);

        let ax = a[kx] - self.sx * a[kz];
        let ay = a[ky] - self.sy * a[kz];
        let bx = b[kx] - self.sx * b[kz];
        let by = b[ky] - self.sy * b[kz];
        let cx = c[kx] - self.sx * c[kz];
        let cy = c[ky] - self.sy * c[kz];

        let u = cx * by - cy * bx;
        let v = ax * cy - ay * cx;
        let w = bx * ay - by * ax;
        if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
            return None;
        }
        let det = u + v + w;
        if det == 0.0 {
            return None;
        }
        let az = self.sz * a[kz];
        let bz = self.sz * b[kz];
        let cz = self.sz * c[kz];
        let t = (u * az + v * bz + w * cz) / det;
        if t > t_min && t < t_max {
            Some(t)
        } else {
            None
        }
    }
}

/// Nearest intersection of a ray with the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub triangle: usize,
    pub point: Vec3,
    pub distance: f64,
}

/// Triangle soup with a bounding-volume hierarchy.
#[derive(Debug, Clone)]
pub struct Mesh {
    triangles: Vec<Triangle>,
    bvh: Bvh,
    bounds: Aabb,
}

impl Mesh {
    pub fn new(triangles: Vec<Triangle>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Geometry("mesh has no triangles".into()));
        }
        let bounds = triangles
            .iter()
            .fold(Aabb::EMPTY, |b, t| b.union(t.bounds()));
        let bvh = Bvh::build(&triangles);
        Ok(Self {
            triangles,
            bvh,
            bounds,
        })
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn triangle(&self, i: usize) -> &Triangle {
        &self.triangles[i]
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Nearest hit with distance greater than [`EPS_HIT`].
    pub fn intersect(&self, origin: Vec3, direction: Vec3) -> Option<Hit> {
        self.intersect_within(origin, direction, EPS_HIT, f64::INFINITY)
    }

    /// Nearest hit with distance in `(t_min, t_max)`.
    pub fn intersect_within(
        &self,
        origin: Vec3,
        direction: Vec3,
        t_min: f64,
        t_max: f64,
    ) -> Option<Hit> {
        let ray = Ray::new(origin, direction);
        self.bvh
            .nearest(&ray, &self.triangles, t_min, t_max)
            .map(|(triangle, distance)| Hit {
                triangle,
                point: origin + direction * distance,
                distance,
            })
    }

    /// Reference implementation scanning every triangle. Ties go to the lowest triangle index.
    pub fn intersect_brute_force(&self, origin: Vec3, direction: Vec3) -> Option<Hit> {
        let ray = Ray::new(origin, direction);
        let mut best: Option<(usize, f64)> = None;
        for (i, tri) in self.triangles.iter().enumerate() {
            let limit = best.map_or(f64::INFINITY, |b| b.1);
            if let Some(t) = ray.hit_triangle(tri, EPS_HIT, limit) {
                best = Some((i, t));
            }
        }
        best.map(|(triangle, distance)| Hit {
            triangle,
            point: origin + direction * distance,
            distance,
        })
    }

    /// True when the open segment between `a` and `b` crosses no triangle.
    pub fn visible(&self, a: Vec3, b: Vec3) -> bool {
        let d = b - a;
        let len = d.norm();
        if len <= 2.0 * EPS_HIT {
            return true;
        }
        self.intersect_within(a, d / len, EPS_HIT, len - EPS_HIT)
            .is_none()
    }

    /// Axis-aligned room with its floor corner at the origin. Two triangles per wall.
    pub fn shoebox(size: Vec3, material: usize) -> Result<Self> {
        let mut tris = Vec::new();
        push_box(&mut tris, Vec3::ZERO, size, material)?;
        Mesh::new(tris)
    }

    /// Mesh from a triangle list plus extra boxes (obstacles).
    pub fn with_boxes(mut triangles: Vec<Triangle>, boxes: &[(Vec3, Vec3, usize)]) -> Result<Self> {
        for &(lo, hi, m) in boxes {
            push_box(&mut triangles, lo, hi, m)?;
        }
        Mesh::new(triangles)
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut verts = Vec::new();
        let mut tris = Vec::new();
        let err = |line: usize, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let tag = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            match tag {
                "v" => {
                    if rest.len() != 3 {
                        return Err(err(lineno, format!("vertex needs 3 coordinates, got {}", rest.len())));
                    }
                    let mut c = [0.0; 3];
                    for (k, s) in rest.iter().enumerate() {
                        c[k] = s
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| err(lineno, format!("bad coordinate `{s}`")))?;
                    }
                    verts.push(Vec3::from(c));
                }
                "f" => {
                    if rest.len() != 4 {
                        return Err(err(
                            lineno,
                            format!("face needs 3 vertex indices and a material, got {} fields", rest.len()),
                        ));
                    }
                    let mut idx = [0usize; 4];
                    for (k, s) in rest.iter().enumerate() {
                        idx[k] = s
                            .parse::<usize>()
                            .map_err(|_| err(lineno, format!("bad index `{s}`")))?;
                    }
                    let fetch = |j: usize| {
                        verts.get(j).copied().ok_or_else(|| {
                            err(lineno, format!("vertex {j} not defined (have {})", verts.len()))
                        })
                    };
                    let tri = Triangle::new(fetch(idx[0])?, fetch(idx[1])?, fetch(idx[2])?, idx[3])
                        .map_err(|e| err(lineno, e.to_string()))?;
                    tris.push(tri);
                }
                other => return Err(err(lineno, format!("unknown record type `{other}`"))),
            }
        }
        Mesh::new(tris).map_err(|e| err(text.lines().count(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::parse(&text, &path.display().to_string())
    }

    /// Serializes to the `v`/`f` text format. Vertices are not shared between triangles.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.triangles {
            for v in &t.vertices {
                let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            let _ = writeln!(out, "f {} {} {} {}", 3 * i, 3 * i + 1, 3 * i + 2, t.material);
        }
        out
    }
}

fn push_box(tris: &mut Vec<Triangle>, lo: Vec3, hi: Vec3, material: usize) -> Result<()> {
    let c = |x: bool, y: bool, z: bool| {
        Vec3::new(
            if x { hi.x } else { lo.x },
            if y { hi.y } else { lo.y },
            if z { hi.z } else { lo.z },
        )
    };
    // Quads as (a, b, c, d) corners in winding order.
    let quads = [
        [c(false, false, false), c(false, true, false), c(true, true, false), c(true, false, false)],
        [c(false, false, true), c(true, false, true), c(true, true, true), c(false, true, true)],
        [c(false, false, false), c(true, false, false), c(true, false, true), c(false, false, true)],
        [c(false, true, false), c(false, true, true), c(true, true, true), c(true, true, false)],
        [c(false, false, false), c(false, false, true), c(false, true, true), c(false, true, false)],
        [c(true, false, false), c(true, true, false), c(true, true, true), c(true, false, true)],
    ];
    for q in quads {
        tris.push(Triangle::new(q[0], q[1], q[2], material)?);
        tris.push(Triangle::new(q[0], q[2], q[3], material)?);
    }
    Ok(())
}
