//! Procedural packed and pile scenes.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Primitive, Scene, SceneObject, DEFAULT_WORKSPACE};
use crate::geom::{Quat, RigidTransform, Vec3};
use crate::rng::{self, Rng};

/// Minimum surface gap between upright packed objects.
pub const PACKED_CLEARANCE: f64 = 0.005;
/// A dropped object stops once it is this close to support.
pub const CONTACT_TOLERANCE: f64 = 0.001;
const LATTICE_PITCH: f64 = 0.002;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Packed,
    Pile,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Packed => "packed",
            Scenario::Pile => "pile",
        }
    }

    pub fn generate(self, seed: u64, object_count: usize) -> Generated {
        match self {
            Scenario::Packed => gen_packed_scene(seed, object_count),
            Scenario::Pile => gen_pile_scene(seed, object_count),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "packed" => Ok(Scenario::Packed),
            "pile" => Ok(Scenario::Pile),
            other => Err(format!("unknown scenario `{other}` (expected packed|pile)")),
        }
    }
}

/// A generated scene; `placement_exhausted` is set when fewer objects than
/// requested could be placed.
#[derive(Debug, Clone)]
pub struct Generated {
    pub scene: Scene,
    pub placement_exhausted: bool,
}

fn tall_primitive(rng: &mut Rng) -> Primitive {
    if rng.random_bool(0.5) {
        let hx: f64 = rng.random_range(0.012..0.025);
        let hy = rng.random_range(0.012..0.025);
        let hz = rng.random_range(hx.max(hy) + 0.01..0.06);
        Primitive::Box {
            half_extents: [hx, hy, hz],
        }
    } else {
        let r = rng.random_range(0.015..0.028);
        let hh = rng.random_range(r + 0.01..0.06);
        Primitive::Cylinder {
            radius: r,
            half_height: hh,
        }
    }
}

fn any_primitive(rng: &mut Rng) -> Primitive {
    match rng.random_range(0..3) {
        0 => Primitive::Sphere {
            radius: rng.random_range(0.018..0.033),
        },
        1 => Primitive::Box {
            half_extents: [
                rng.random_range(0.012..0.03),
                rng.random_range(0.012..0.03),
                rng.random_range(0.012..0.035),
            ],
        },
        _ => Primitive::Cylinder {
            radius: rng.random_range(0.015..0.03),
            half_height: rng.random_range(0.015..0.04),
        },
    }
}

fn random_rotation(rng: &mut Rng) -> Quat {
    // Shoemake's uniform quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    );
    Quat::new_normalize(q)
}

fn footprint_radius(p: &Primitive) -> f64 {
    match *p {
        Primitive::Sphere { radius } => radius,
        Primitive::Box { half_extents: h } => h[0].hypot(h[1]),
        Primitive::Cylinder { radius, .. } => radius,
    }
}

fn upright_height(p: &Primitive) -> f64 {
    match *p {
        Primitive::Sphere { radius } => radius,
        Primitive::Box { half_extents: h } => h[2],
        Primitive::Cylinder { half_height, .. } => half_height,
    }
}

/// Upright tall objects at non-overlapping table positions.
pub fn gen_packed_scene(seed: u64, object_count: usize) -> Generated {
    let l = DEFAULT_WORKSPACE;
    let mut rng = rng::stream(seed, "packed", 0);
    let mut scene = Scene::new(l);
    let mut footprints: Vec<(Vec3, f64)> = Vec::new();
    let (lo, hi) = (0.2 * l, 0.8 * l);
    for _ in 0..object_count {
        let prim = tall_primitive(&mut rng);
        let yaw = rng.random_range(0.0..2.0 * PI);
        let r = footprint_radius(&prim);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = Vec3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), 0.0);
            if footprints
                .iter()
                .all(|(o, ro)| (c - o).norm() - r - ro >= PACKED_CLEARANCE)
            {
                let pose = RigidTransform::new(
                    Quat::from_axis_angle(&Vec3::z_axis(), yaw),
                    Vec3::new(c.x, c.y, upright_height(&prim)),
                );
                scene.push(prim, pose);
                footprints.push((c, r));
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("packed scene {seed}: could not place object {}", scene.len());
            return Generated {
                scene,
                placement_exhausted: true,
            };
        }
    }
    Generated {
        scene,
        placement_exhausted: false,
    }
}

/// Randomly oriented objects lowered one by one onto the table or the pile.
pub fn gen_pile_scene(seed: u64, object_count: usize) -> Generated {
    let l = DEFAULT_WORKSPACE;
    let mut rng = rng::stream(seed, "pile", 0);
    let mut scene = Scene::new(l);
    let spread = 0.2 * l;
    for _ in 0..object_count {
        let prim = any_primitive(&mut rng);
        let mut placed = false;
        for _ in 0..50 {
            let rot = random_rotation(&mut rng);
            let xy = [
                0.5 * l + rng.random_range(-spread..spread),
                0.5 * l + rng.random_range(-spread..spread),
            ];
            if let Some(pose) = drop_object(&scene, &prim, rot, xy) {
                scene.push(prim, pose);
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("pile scene {seed}: could not place object {}", scene.len());
            return Generated {
                scene,
                placement_exhausted: true,
            };
        }
    }
    Generated {
        scene,
        placement_exhausted: false,
    }
}

/// Lower `prim` with orientation `rot` at horizontal position `xy` until it
/// comes within [`CONTACT_TOLERANCE`] of the table or an existing object.
///
/// Clearance to other objects is measured on surface lattices of both
/// solids, and each step moves down by the measured gap minus half the
/// tolerance, so the lattice clearance never goes negative. Returns `None`
/// when the resting pose leaves the workspace.
pub fn drop_object(scene: &Scene, prim: &Primitive, rot: Quat, xy: [f64; 2]) -> Option<RigidTransform> {
    let l = scene.workspace_size;
    let local_pts = prim.surface_lattice(LATTICE_PITCH);
    let others: Vec<(&SceneObject, Vec<Vec3>)> = scene
        .objects
        .iter()
        .map(|o| {
            let pts = o
                .primitive
                .surface_lattice(LATTICE_PITCH)
                .iter()
                .map(|p| o.pose.apply(p))
                .collect();
            (o, pts)
        })
        .collect();

    let down = rot.inverse_transform_vector(&Vec3::new(0.0, 0.0, -1.0));
    let below = prim.support(&down);
    let top = scene
        .objects
        .iter()
        .map(|o| o.aabb().1.z)
        .fold(0.0, f64::max);
    let mut z = top + below + 0.01;
    let radius = prim.bounding_radius();

    for _ in 0..5000 {
        let pose = RigidTransform::new(rot, Vec3::new(xy[0], xy[1], z));
        let obj = SceneObject {
            id: u32::MAX,
            primitive: *prim,
            pose,
        };
        let mut gap = z - below;
        let world: Vec<Vec3> = local_pts.iter().map(|p| pose.apply(p)).collect();
        for (other, pts) in &others {
            let lower = (other.center() - pose.translation).norm()
                - radius
                - other.primitive.bounding_radius();
            if lower > gap {
                continue;
            }
            for p in &world {
                gap = gap.min(other.sdf(p));
            }
            for p in pts {
                gap = gap.min(obj.sdf(p));
            }
        }
        if gap <= CONTACT_TOLERANCE {
            let (lo, hi) = obj.aabb();
            let inside = lo.x >= 0.0 && lo.y >= 0.0 && hi.x <= l && hi.y <= l && hi.z <= l;
            return inside.then_some(pose);
        }
        z -= (gap - 0.5 * CONTACT_TOLERANCE).max(1e-4);
    }
    None
}
