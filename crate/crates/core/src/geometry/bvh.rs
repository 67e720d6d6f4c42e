//! Binned-SAH bounding volume hierarchy over mesh triangles.

use super::mesh::{Aabb, Ray, Triangle};

const LEAF_SIZE: usize = 4;
const BINS: usize = 12;

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(triangles: &[Triangle]) -> Self {
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let boxes: Vec<Aabb> = triangles.iter().map(|t| pad(t.bounds())).collect();
        let centroids: Vec<_> = boxes.iter().map(|b| b.center()).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, triangles.len(), &boxes, &centroids);
        Self { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Every triangle index reachable from the root, in leaf order.
    pub fn leaf_triangles(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match self.nodes[i].kind {
                NodeKind::Leaf { start, count } => out.extend_from_slice(&self.order[start..start + count]),
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out
    }

    /// Nearest hit in `(t_min, t_max)`; equal distances resolve to the lower triangle index.
    pub(crate) fn nearest(
        &self,
        ray: &Ray,
        triangles: &[Triangle],
        t_min: f64,
        t_max: f64,
    ) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut stack: Vec<(usize, f64)> = Vec::with_capacity(64);
        if let Some(t) = self.nodes[0].bounds.ray_entry(ray, t_min, t_max) {
            stack.push((0, t));
        }
        while let Some((i, entry)) = stack.pop() {
            let limit = best.map_or(t_max, |b| b.1);
            if entry > limit {
                continue;
            }
            match self.nodes[i].kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in &self.order[start..start + count] {
                        // Inclusive limit so an equal-distance hit with a lower index can replace the current best.
                        if let Some(t) = ray.hit_triangle(&triangles[tri], t_min, f64::INFINITY) {
                            let better = match best {
                                None => t < t_max,
                                Some((bi, bt)) => t < bt || (t == bt && tri < bi),
                            };
                            if better {
                                best = Some((tri, t));
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let limit = best.map_or(t_max, |b| b.1);
                    let l = self.nodes[left].bounds.ray_entry(ray, t_min, limit);
                    let r = self.nodes[right].bounds.ray_entry(ray, t_min, limit);
                    match (l, r) {
                        (Some(tl), Some(tr)) => {
                            if tl <= tr {
                                stack.push((right, tr));
                                stack.push((left, tl));
                            } else {
                                stack.push((left, tl));
                                stack.push((right, tr));
                            }
                        }
                        (Some(tl), None) => stack.push((left, tl)),
                        (None, Some(tr)) => stack.push((right, tr)),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }
}

/// Inflate a box slightly so grazing rays are never culled by slab round-off.
fn pad(b: Aabb) -> Aabb {
    let e = b.extent();
    let m = e.x.max(e.y).max(e.z).max(b.min.norm()).max(b.max.norm());
    let d = super::Vec3::splat(1e-9 * m + 1e-12);
    Aabb {
        min: b.min - d,
        max: b.max + d,
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[super::Vec3],
) -> usize {
    let bounds = order[start..end]
        .iter()
        .fold(Aabb::EMPTY, |b, &i| b.union(boxes[i]));
    let idx = nodes.len();
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf {
            start,
            count: end - start,
        },
    });
    let count = end - start;
    if count <= LEAF_SIZE {
        return idx;
    }

    let cbounds = order[start..end]
        .iter()
        .fold(Aabb::EMPTY, |b, &i| b.grow(centroids[i]));
    let ext = cbounds.extent();
    let axis = ext.max_abs_axis();
    if ext[axis] <= 0.0 {
        // All centroids coincide; split by count.
        let mid = start + count / 2;
        return finish_inner(nodes, idx, order, start, mid, end, boxes, centroids);
    }

    let lo = cbounds.min[axis];
    let scale = BINS as f64 / ext[axis];
    let bin_of = |i: usize| (((centroids[i][axis] - lo) * scale) as usize).min(BINS - 1);

    let mut bin_box = [Aabb::EMPTY; BINS];
    let mut bin_count = [0usize; BINS];
    for &i in &order[start..end] {
        let b = bin_of(i);
        bin_box[b] = bin_box[b].union(boxes[i]);
        bin_count[b] += 1;
    }
    let mut best_cost = f64::INFINITY;
    let mut best_split = BINS / 2;
    for split in 1..BINS {
        let (mut lb, mut lc) = (Aabb::EMPTY, 0);
        for b in 0..split {
            lb = lb.union(bin_box[b]);
            lc += bin_count[b];
        }
        let (mut rb, mut rc) = (Aabb::EMPTY, 0);
        for b in split..BINS {
            rb = rb.union(bin_box[b]);
            rc += bin_count[b];
        }
        if lc == 0 || rc == 0 {
            continue;
        }
        let cost = lb.surface_area() * lc as f64 + rb.surface_area() * rc as f64;
        if cost < best_cost {
            best_cost = cost;
            best_split = split;
        }
    }

    let slice = &mut order[start..end];
    let mut mid = 0;
    for k in 0..slice.len() {
        if bin_of(slice[k]) < best_split {
            slice.swap(k, mid);
            mid += 1;
        }
    }
    let mid = if mid == 0 || mid == count {
        start + count / 2
    } else {
        start + mid
    };
    finish_inner(nodes, idx, order, start, mid, end, boxes, centroids)
}

#[allow(clippy::too_many_arguments)]
fn finish_inner(
    nodes: &mut Vec<Node>,
    idx: usize,
    order: &mut [usize],
    start: usize,
    mid: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[super::Vec3],
) -> usize {
    let left = build_node(nodes, order, start, mid, boxes, centroids);
    let right = build_node(nodes, order, mid, end, boxes, centroids);
    nodes[idx].kind = NodeKind::Inner { left, right };
    idx
}
