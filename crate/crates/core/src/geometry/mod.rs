//! Triangle meshes, ray queries and ray paths.

mod bvh;
mod mesh;
mod path;
mod vec3;

pub use bvh::Bvh;
pub use mesh::{Aabb, Hit, Mesh, Triangle, EPS_HIT};
pub use path::{reflect, PathPoint, RayPath, RaySegment, SurfaceHit};
pub use vec3::{Mat3, Vec3};
