//! Analytic signed-distance scenes: ground truth for occupancy, rendering,
//! and grasp evaluation.

mod generate;
mod primitive;

pub use generate::{drop_object, gen_packed_scene, gen_pile_scene, Generated, Scenario};
pub use primitive::Primitive;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, TransformRepr, Vec3};
use crate::rng;

pub const DEFAULT_WORKSPACE: f64 = 0.30;

/// A posed primitive with a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub primitive: Primitive,
    pub pose: RigidTransform,
}

impl SceneObject {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitive.sdf_local(&self.pose.apply_inverse(p))
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    /// World-space axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut ext = Vec3::zeros();
        for axis in 0..3 {
            let mut d = Vec3::zeros();
            d[axis] = 1.0;
            let local = self.pose.rotation.inverse_transform_vector(&d);
            ext[axis] = self.primitive.support(&local);
        }
        (self.center() - ext, self.center() + ext)
    }

    /// Height of the lowest point of the solid.
    pub fn lowest_z(&self) -> f64 {
        let down = self.pose.rotation.inverse_transform_vector(&Vec3::new(0.0, 0.0, -1.0));
        self.center().z - self.primitive.support(&down)
    }
}

/// Posed objects on a table at z = 0 inside a cubic workspace `[0, l]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub workspace_size: f64,
    pub objects: Vec<SceneObject>,
}

/// A point with its ground-truth occupancy label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub point: Vec3,
    pub occupied: bool,
}

impl Scene {
    pub fn new(workspace_size: f64) -> Self {
        Self {
            workspace_size,
            objects: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    /// Value returned by [`Scene::sdf`] when there is nothing in the scene.
    pub fn empty_sdf(&self) -> f64 {
        10.0 * self.workspace_size
    }

    pub fn center(&self) -> Vec3 {
        Vec3::repeat(0.5 * self.workspace_size)
    }

    pub fn next_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id + 1).max().unwrap_or(0)
    }

    pub fn push(&mut self, primitive: Primitive, pose: RigidTransform) -> u32 {
        let id = self.next_id();
        self.objects.push(SceneObject {
            id,
            primitive,
            pose,
        });
        id
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Union signed distance (minimum over objects); the table is not part of it.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.objects
            .iter()
            .map(|o| o.sdf(p))
            .fold(self.empty_sdf(), f64::min)
    }

    /// Union distance and the id of the closest object.
    pub fn sdf_with_id(&self, p: &Vec3) -> (f64, Option<u32>) {
        let mut best = (self.empty_sdf(), None);
        for o in &self.objects {
            let d = o.sdf(p);
            if d < best.0 {
                best = (d, Some(o.id));
            }
        }
        best
    }

    /// Minimum distance over all objects except `skip`.
    pub fn sdf_excluding(&self, p: &Vec3, skip: Option<u32>) -> f64 {
        self.objects
            .iter()
            .filter(|o| Some(o.id) != skip)
            .map(|o| o.sdf(p))
            .fold(self.empty_sdf(), f64::min)
    }

    pub fn occupancy(&self, p: &Vec3) -> bool {
        self.sdf(p) <= 0.0
    }

    /// Normalized central-difference gradient of the union SDF.
    pub fn normal(&self, p: &Vec3) -> Result<Vec3> {
        const H: f64 = 1e-6;
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            let mut d = Vec3::zeros();
            d[axis] = H;
            g[axis] = (self.sdf(&(p + d)) - self.sdf(&(p - d))) / (2.0 * H);
        }
        let n = g.norm();
        if n < 1e-9 {
            return Err(Error::NoNormal([p.x, p.y, p.z]));
        }
        Ok(g / n)
    }

    /// Union bounds of all objects.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        self.objects.iter().map(SceneObject::aabb).reduce(|a, b| {
            (a.0.inf(&b.0), a.1.sup(&b.1))
        })
    }

    /// `n` points on the union surface with their outward normals.
    ///
    /// Points are drawn uniformly in the union AABB, kept when they fall in a
    /// 1 mm shell around the surface, then Newton-projected onto it.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<(Vec3, Vec3)>> {
        const SHELL: f64 = 1e-3;
        let Some((lo, hi)) = self.bounds() else {
            return Err(Error::SamplingExhausted {
                wanted: n,
                found: 0,
                attempts: 0,
            });
        };
        let lo = lo - Vec3::repeat(SHELL);
        let hi = hi + Vec3::repeat(SHELL);
        let mut rng = rng::from_seed(seed);
        let budget = 20_000 * n.max(1) + 100_000;
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            if attempts >= budget {
                return Err(Error::SamplingExhausted {
                    wanted: n,
                    found: out.len(),
                    attempts,
                });
            }
            attempts += 1;
            let mut p = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            if self.sdf(&p).abs() > SHELL {
                continue;
            }
            let mut ok = false;
            for _ in 0..8 {
                let d = self.sdf(&p);
                if d.abs() <= 1e-9 {
                    ok = true;
                    break;
                }
                let Ok(nrm) = self.normal(&p) else { break };
                p -= nrm * d;
            }
            if !ok && self.sdf(&p).abs() > 1e-6 {
                continue;
            }
            if let Ok(nrm) = self.normal(&p) {
                out.push((p, nrm));
            }
        }
        Ok(out)
    }

    /// Scene without object `id`; remaining poses unchanged.
    pub fn remove_object(&self, id: u32) -> Result<Scene> {
        if self.object(id).is_none() {
            return Err(Error::NotFound(id));
        }
        Ok(Scene {
            workspace_size: self.workspace_size,
            objects: self.objects.iter().filter(|o| o.id != id).cloned().collect(),
        })
    }

    /// Uniform workspace points labeled by occupancy.
    pub fn sample_occupancy(&self, n: usize, seed: u64) -> Vec<OccupancySample> {
        let mut rng = rng::from_seed(seed);
        let l = self.workspace_size;
        (0..n)
            .map(|_| {
                let p = Vec3::new(
                    rng.random_range(0.0..l),
                    rng.random_range(0.0..l),
                    rng.random_range(0.0..l),
                );
                OccupancySample {
                    point: p,
                    occupied: self.occupancy(&p),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SceneRepr::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        let repr: SceneRepr = serde_json::from_str(s)?;
        repr.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ObjectRepr {
    id: u32,
    #[serde(flatten)]
    primitive: Primitive,
    quat: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneRepr {
    workspace_size: f64,
    objects: Vec<ObjectRepr>,
}

impl From<&Scene> for SceneRepr {
    fn from(s: &Scene) -> Self {
        SceneRepr {
            workspace_size: s.workspace_size,
            objects: s
                .objects
                .iter()
                .map(|o| {
                    let t = TransformRepr::from(&o.pose);
                    ObjectRepr {
                        id: o.id,
                        primitive: o.primitive,
                        quat: t.quat,
                        translation: t.translation,
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneRepr> for Scene {
    type Error = Error;

    fn try_from(r: SceneRepr) -> Result<Scene> {
        let mut objects = Vec::with_capacity(r.objects.len());
        for o in r.objects {
            if !o.primitive.dims_positive() {
                return Err(Error::Format(format!("object {} has non-positive dims", o.id)));
            }
            if objects.iter().any(|x: &SceneObject| x.id == o.id) {
                return Err(Error::Format(format!("duplicate object id {}", o.id)));
            }
            let pose = RigidTransform::from(&TransformRepr {
                quat: o.quat,
                translation: o.translation,
            });
            objects.push(SceneObject {
                id: o.id,
                primitive: o.primitive,
                pose,
            });
        }
        Ok(Scene {
            workspace_size: r.workspace_size,
            objects,
        })
    }
}
