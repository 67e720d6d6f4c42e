use super::Vec3;
use crate::error::{Error, Result};

/// Specular reflection of `direction` about the unit `normal`.
pub fn reflect(direction: Vec3, normal: Vec3) -> Vec3 {
    direction - normal * (2.0 * direction.dot(normal))
}

/// Surface struck at the end of a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub triangle: usize,
    pub material: usize,
    pub normal: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySegment {
    pub origin: Vec3,
    pub direction: Vec3,
    pub length: f64,
    /// Surface at the far end, `None` when the segment escaped or was capped.
    pub hit: Option<SurfaceHit>,
}

impl RaySegment {
    pub fn end(&self) -> Vec3 {
        self.origin + self.direction * self.length
    }

    pub fn hit_triangle(&self) -> Option<usize> {
        self.hit.map(|h| h.triangle)
    }
}

/// Chain of specular segments starting at the array. Segment `k` is the order-`k` ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPath {
    segments: Vec<RaySegment>,
    cumulative: Vec<f64>,
}

/// Point on a path closest to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub path_index: usize,
    pub segment_order: usize,
    pub point: Vec3,
    /// Distance travelled from the array along the path to `point`.
    pub travel_distance: f64,
    /// Euclidean distance from the query position to `point`.
    pub distance: f64,
}

impl RayPath {
    pub fn new(segments: Vec<RaySegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Geometry("ray path needs at least one segment".into()));
        }
        let mut cumulative = Vec::with_capacity(segments.len());
        let mut total = 0.0;
        for (k, s) in segments.iter().enumerate() {
            if !(s.length > 0.0) || !s.length.is_finite() {
                return Err(Error::Geometry(format!("segment {k} has length {}", s.length)));
            }
            if (s.direction.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Geometry(format!("segment {k} direction is not unit length")));
            }
            total += s.length;
            cumulative.push(total);
        }
        Ok(Self {
            segments,
            cumulative,
        })
    }

    pub fn segments(&self) -> &[RaySegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Prefix sums of segment lengths.
    pub fn cumulative_lengths(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Travel distance at the start of segment `k`.
    pub fn start_distance(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn origin(&self) -> Vec3 {
        self.segments[0].origin
    }

    /// Point at travel distance `l`, together with its segment order.
    pub fn point_at(&self, l: f64) -> (usize, Vec3) {
        let k = self
            .cumulative
            .iter()
            .position(|&c| l <= c)
            .unwrap_or(self.segments.len() - 1);
        let s = &self.segments[k];
        let t = (l - self.start_distance(k)).clamp(0.0, s.length);
        (k, s.origin + s.direction * t)
    }

    /// Closest point on the path to `x`, with projections clamped to segment ends.
    /// Ties resolve to the lowest segment order.
    pub fn perpendicular_foot(&self, x: Vec3, path_index: usize) -> PathPoint {
        self.perpendicular_foot_beyond(x, path_index, 0.0)
    }

    /// Like [`perpendicular_foot`](Self::perpendicular_foot) but only over the part of the path
    /// at least `min_travel` from its origin. A path shorter than that yields its end point.
    pub fn perpendicular_foot_beyond(&self, x: Vec3, path_index: usize, min_travel: f64) -> PathPoint {
        let min_travel = min_travel.clamp(0.0, self.total_length());
        let mut best: Option<PathPoint> = None;
        for (k, s) in self.segments.iter().enumerate() {
            let start = self.start_distance(k);
            if start + s.length < min_travel {
                continue;
            }
            let lo = (min_travel - start).clamp(0.0, s.length);
            let t = (x - s.origin).dot(s.direction).clamp(lo, s.length);
            let p = s.origin + s.direction * t;
            let d = (x - p).norm();
            if best.is_none_or(|b| d < b.distance) {
                best = Some(PathPoint {
                    path_index,
                    segment_order: k,
                    point: p,
                    travel_distance: start + t,
                    distance: d,
                });
            }
        }
        best.unwrap()
    }

    /// Checks that `point` lies on segment `segment_order` at the stated travel distance.
    pub fn validate_point(&self, point: &PathPoint) -> Result<()> {
        let k = point.segment_order;
        let s = self.segments.get(k).ok_or_else(|| {
            Error::PathMismatch(format!("segment order {k} but path has {} segments", self.len()))
        })?;
        let t = point.travel_distance - self.start_distance(k);
        let tol = 1e-6 * (1.0 + self.total_length());
        if t < -tol || t > s.length + tol {
            return Err(Error::PathMismatch(format!(
                "travel distance {:.6} outside segment {k}",
                point.travel_distance
            )));
        }
        let expect = s.origin + s.direction * t;
        if (expect - point.point).norm() > tol {
            return Err(Error::PathMismatch(format!(
                "point {} is not on segment {k}",
                point.point
            )));
        }
        Ok(())
    }

    /// Dense samples along the path at spacing `step`, with their travel distances.
    pub fn sample(&self, step: f64) -> Vec<(f64, Vec3)> {
        let total = self.total_length();
        let n = (total / step).ceil() as usize;
        (0..=n)
            .map(|i| {
                let l = (i as f64 * step).min(total);
                (l, self.point_at(l).1)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(origin: Vec3, dir: Vec3, length: f64) -> RaySegment {
        RaySegment {
            origin,
            direction: dir.normalized(),
            length,
            hit: None,
        }
    }

    #[test]
    fn reflect_head_on() {
        let r = reflect(Vec3::X, -Vec3::X);
        assert!((r - (-Vec3::X)).norm() < 1e-15);
    }

    #[test]
    fn reflect_mirror_about_floor() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = reflect(Vec3::new(s, -s, 0.0), Vec3::Y);
        assert!((r - Vec3::new(s, s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn reflect_is_involution() {
        let d = Vec3::new(0.2, -0.9, 0.4).normalized();
        let n = Vec3::new(-0.3, 0.5, 0.8).normalized();
        assert!((reflect(reflect(d, n), n) - d).norm() < 1e-14);
        assert!((reflect(d, n).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn foot_on_single_segment() {
        let p = RayPath::new(vec![seg(Vec3::ZERO, Vec3::X, 10.0)]).unwrap();
        let f = p.perpendicular_foot(Vec3::new(1.0, 1.0, 0.0), 0);
        assert!((f.point - Vec3::X).norm() < 1e-15);
        assert!((f.travel_distance - 1.0).abs() < 1e-15);
        assert!((f.distance - 1.0).abs() < 1e-15);

        let on = Vec3::new(4.0, 0.0, 0.0);
        let f = p.perpendicular_foot(on, 0);
        assert_eq!(f.distance, 0.0);
        assert_eq!(f.point, on);
    }

    #[test]
    fn foot_clamps_to_segment_start() {
        let p = RayPath::new(vec![seg(Vec3::ZERO, Vec3::X, 10.0)]).unwrap();
        let f = p.perpendicular_foot(Vec3::new(-3.0, 4.0, 0.0), 0);
        assert_eq!(f.point, Vec3::ZERO);
        assert!((f.distance - 5.0).abs() < 1e-15);
    }

    #[test]
    fn foot_on_l_shaped_path_matches_dense_sampling() {
        // Along +x for 4 m, then along +y for 4 m.
        let p = RayPath::new(vec![
            seg(Vec3::ZERO, Vec3::X, 4.0),
            seg(Vec3::new(4.0, 0.0, 0.0), Vec3::Y, 4.0),
        ])
        .unwrap();
        // Equidistant (1 m) from the interiors of both segments.
        let x = Vec3::new(3.0, 1.0, 0.0);
        let f = p.perpendicular_foot(x, 0);
        assert_eq!(f.segment_order, 0);
        assert!((f.distance - 1.0).abs() < 1e-12);
        assert!((f.travel_distance - 3.0).abs() < 1e-12);

        let dense = p
            .sample(1e-3)
            .into_iter()
            .map(|(_, q)| q.distance(x))
            .fold(f64::INFINITY, f64::min);
        assert!(f.distance <= dense + 1e-12);
        assert!(dense - f.distance < 1e-3);

        // A point nearer the second leg.
        let y = Vec3::new(3.5, 2.5, 0.0);
        let f = p.perpendicular_foot(y, 0);
        assert_eq!(f.segment_order, 1);
        assert!((f.travel_distance - 6.5).abs() < 1e-12);
        p.validate_point(&f).unwrap();
    }

    #[test]
    fn path_rejects_zero_length_segment() {
        assert!(RayPath::new(vec![seg(Vec3::ZERO, Vec3::X, 0.0)]).is_err());
        assert!(RayPath::new(vec![]).is_err());
    }
}
