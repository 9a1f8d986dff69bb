use serde::{Deserialize, Serialize};

use crate::geom::Vec3;

/// Analytic convex solid expressed in its own frame (centered at the origin,
/// cylinders aligned with local z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl Primitive {
    /// Signed distance from a point given in the local frame.
    pub fn sdf_local(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => p.norm() - radius,
            Primitive::Box { half_extents: h } => {
                let q = Vec3::new(p.x.abs() - h[0], p.y.abs() - h[1], p.z.abs() - h[2]);
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Cylinder {
                radius,
                half_height,
            } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
        }
    }

    pub fn dims_positive(&self) -> bool {
        match *self {
            Primitive::Sphere { radius } => radius > 0.0,
            Primitive::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            Primitive::Cylinder {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
        }
    }

    /// Radius of the smallest origin-centered ball containing the solid.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius } => radius,
            Primitive::Box { half_extents: h } => Vec3::from(h).norm(),
            Primitive::Cylinder {
                radius,
                half_height,
            } => radius.hypot(half_height),
        }
    }

    /// Largest extent of the solid along unit direction `d` (local frame).
    pub fn support(&self, d: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => radius,
            Primitive::Box { half_extents: h } => {
                h[0] * d.x.abs() + h[1] * d.y.abs() + h[2] * d.z.abs()
            }
            Primitive::Cylinder {
                radius,
                half_height,
            } => half_height * d.z.abs() + radius * (d.x * d.x + d.y * d.y).sqrt(),
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            Primitive::Box { half_extents: h } => 8.0 * h[0] * h[1] * h[2],
            Primitive::Cylinder {
                radius,
                half_height,
            } => std::f64::consts::PI * radius * radius * 2.0 * half_height,
        }
    }

    /// Approximately uniform surface points (local frame) at roughly `pitch`
    /// spacing, including edges and corners for boxes.
    pub fn surface_lattice(&self, pitch: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        match *self {
            Primitive::Sphere { radius } => {
                let area = 4.0 * std::f64::consts::PI * radius * radius;
                let n = ((area / (pitch * pitch)).ceil() as usize).max(32);
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for i in 0..n {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    pts.push(Vec3::new(r * th.cos(), r * th.sin(), z) * radius);
                }
            }
            Primitive::Box { half_extents: h } => {
                let steps: Vec<usize> = h
                    .iter()
                    .map(|&e| ((2.0 * e / pitch).ceil() as usize).max(1))
                    .collect();
                let coord = |axis: usize, i: usize| -h[axis] + 2.0 * h[axis] * i as f64 / steps[axis] as f64;
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    for sign in [-1.0, 1.0] {
                        for i in 0..=steps[a] {
                            for j in 0..=steps[b] {
                                let mut p = [0.0; 3];
                                p[axis] = sign * h[axis];
                                p[a] = coord(a, i);
                                p[b] = coord(b, j);
                                pts.push(Vec3::from(p));
                            }
                        }
                    }
                }
            }
            Primitive::Cylinder {
                radius,
                half_height,
            } => {
                let around = ((2.0 * std::f64::consts::PI * radius / pitch).ceil() as usize).max(8);
                let along = ((2.0 * half_height / pitch).ceil() as usize).max(1);
                for k in 0..=along {
                    let z = -half_height + 2.0 * half_height * k as f64 / along as f64;
                    for i in 0..around {
                        let a = 2.0 * std::f64::consts::PI * i as f64 / around as f64;
                        pts.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
                    }
                }
                let rings = ((radius / pitch).ceil() as usize).max(1);
                for sign in [-1.0, 1.0] {
                    pts.push(Vec3::new(0.0, 0.0, sign * half_height));
                    for ring in 1..=rings {
                        let r = radius * ring as f64 / rings as f64;
                        let m = ((2.0 * std::f64::consts::PI * r / pitch).ceil() as usize).max(6);
                        for i in 0..m {
                            let a = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
                            pts.push(Vec3::new(r * a.cos(), r * a.sin(), sign * half_height));
                        }
                    }
                }
            }
        }
        pts
    }
}
