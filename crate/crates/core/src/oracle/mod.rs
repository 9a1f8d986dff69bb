//! Analytic grasp trials: an antipodal friction-cone test plus finger and
//! palm collision checks stand in for a physics simulator.

mod dataset;

pub use dataset::{
    balance_dataset, build_dataset, build_scene_record, label_location, read_dataset, read_grasps,
    read_occupancy, sample_grasp_candidates, sample_occupancy_points, write_scene_record,
    DatasetConfig, DatasetManifest, SceneRecord,
};

use serde::{Deserialize, Serialize};

use crate::geom::{quat_from_axes, quat_from_wxyz, quat_to_wxyz, Quat, Vec3};
use crate::scene::{Scene, SceneObject};

pub const DEFAULT_FRICTION: f64 = 0.5;
/// Ray-march step along the closing axis.
pub const CONTACT_STEP: f64 = 5e-4;
/// Lattice pitch for finger and palm collision shells.
pub const SHELL_PITCH: f64 = 2e-3;

/// Parallel-jaw gripper geometry.
///
/// In the gripper frame x is the closing axis and z the approach axis. Fingers
/// span `z in [-(finger_depth - tip_overhang), tip_overhang]`, so the grasp
/// center sits `tip_overhang` behind the fingertips; the palm is a box behind
/// the fingers, as wide as the fully open hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    pub max_width: f64,
    pub finger_depth: f64,
    pub finger_thickness: f64,
    pub finger_width: f64,
    pub tip_overhang: f64,
    /// Palm extent along approach (z).
    pub palm_depth: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        Self {
            max_width: 0.08,
            finger_depth: 0.05,
            finger_thickness: 0.01,
            finger_width: 0.02,
            tip_overhang: 0.01,
            palm_depth: 0.02,
        }
    }
}

impl GripperModel {
    pub fn is_valid(&self) -> bool {
        [
            self.max_width,
            self.finger_depth,
            self.finger_thickness,
            self.finger_width,
            self.palm_depth,
        ]
        .iter()
        .all(|v| *v > 0.0)
            && (0.0..self.finger_depth).contains(&self.tip_overhang)
    }

    /// Openings tried in order when choosing a width.
    pub fn width_sweep(&self) -> [f64; 4] {
        [0.25, 0.5, 0.75, 1.0].map(|f| f * self.max_width)
    }

    fn finger_z_range(&self) -> (f64, f64) {
        (self.tip_overhang - self.finger_depth, self.tip_overhang)
    }

    /// Finger box for side `s = +-1` at opening `w` as (center, half extents).
    pub fn finger_box(&self, side: f64, width: f64) -> (Vec3, Vec3) {
        let (z0, z1) = self.finger_z_range();
        let half = Vec3::new(self.finger_thickness / 2.0, self.finger_width / 2.0, (z1 - z0) / 2.0);
        let center = Vec3::new(side * (width / 2.0 + half.x), 0.0, (z0 + z1) / 2.0);
        (center, half)
    }

    pub fn palm_box(&self) -> (Vec3, Vec3) {
        let (z0, _) = self.finger_z_range();
        let half = Vec3::new(
            self.max_width / 2.0 + self.finger_thickness,
            self.finger_width / 2.0,
            self.palm_depth / 2.0,
        );
        (Vec3::new(0.0, 0.0, z0 - half.z), half)
    }

    /// Region strictly between the fingers at opening `w` (center, half extents).
    pub fn closing_region(&self, width: f64) -> (Vec3, Vec3) {
        let (z0, z1) = self.finger_z_range();
        (
            Vec3::new(0.0, 0.0, (z0 + z1) / 2.0),
            Vec3::new(width / 2.0, self.finger_width / 2.0, (z1 - z0) / 2.0),
        )
    }
}

/// Grasp pose and opening. The rotation maps gripper-frame axes to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp {
    pub center: Vec3,
    pub rotation: Quat,
    pub width: f64,
}

impl Grasp {
    pub fn new(center: Vec3, rotation: Quat, width: f64) -> Self {
        Self { center, rotation, width }
    }

    /// Build from world closing and approach axes (approach is
    /// re-orthogonalized against closing).
    pub fn from_axes(center: Vec3, closing: &Vec3, approach: &Vec3, width: f64) -> Self {
        let x = closing.normalize();
        let z = (approach - x * approach.dot(&x)).normalize();
        let y = z.cross(&x);
        Self::new(center, quat_from_axes(&x, &y, &z), width)
    }

    pub fn closing_axis(&self) -> Vec3 {
        self.rotation * Vec3::x()
    }

    pub fn approach_axis(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.center + self.rotation * p
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(p - self.center))
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        quat_to_wxyz(&self.rotation)
    }

    pub fn from_wxyz(center: Vec3, q: [f64; 4], width: f64) -> Self {
        Self::new(center, quat_from_wxyz(q), width)
    }
}

/// A grasp with its binary trial outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspLabel {
    pub grasp: Grasp,
    pub success: bool,
}

/// Why a trial failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Failure {
    /// Open fingers or palm overlap an object or the table.
    Collision,
    /// A finger swept into the table or closed without touching anything.
    NoContact,
    /// Fingers touched two different objects.
    DifferentObjects,
    /// A contact normal lies outside the friction cone.
    Slip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub point: Vec3,
    pub normal: Vec3,
    pub object: u32,
    /// Distance the finger travelled from its open position.
    pub travel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub failure: Option<Failure>,
    pub contacts: Option<[Contact; 2]>,
}

impl Evaluation {
    pub fn success(&self) -> bool {
        self.failure.is_none()
    }

    fn fail(f: Failure) -> Self {
        Self { failure: Some(f), contacts: None }
    }
}

/// Reusable evaluator with precomputed shell lattices.
#[derive(Debug, Clone)]
pub struct GraspEvaluator {
    pub gripper: GripperModel,
    pub friction: f64,
    finger_shell: Vec<Vec3>,
    palm_shell: Vec<Vec3>,
    /// Finger inner-face lattice in (y, z).
    face: Vec<(f64, f64)>,
}

fn axis_ticks(lo: f64, hi: f64, pitch: f64) -> Vec<f64> {
    let n = ((hi - lo) / pitch).ceil().max(1.0) as usize;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Points on the surface of an origin-centered box, edges and corners included.
pub(crate) fn box_shell(half: &Vec3, pitch: f64) -> Vec<Vec3> {
    let ticks: Vec<Vec<f64>> = (0..3).map(|a| axis_ticks(-half[a], half[a], pitch)).collect();
    let mut out = Vec::new();
    for (i, &x) in ticks[0].iter().enumerate() {
        for (j, &y) in ticks[1].iter().enumerate() {
            for (k, &z) in ticks[2].iter().enumerate() {
                let on_face = i == 0
                    || i + 1 == ticks[0].len()
                    || j == 0
                    || j + 1 == ticks[1].len()
                    || k == 0
                    || k + 1 == ticks[2].len();
                if on_face {
                    out.push(Vec3::new(x, y, z));
                }
            }
        }
    }
    out
}

fn object_normal(o: &SceneObject, p: &Vec3) -> Vec3 {
    const H: f64 = 1e-6;
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let mut d = Vec3::zeros();
        d[a] = H;
        g[a] = o.sdf(&(p + d)) - o.sdf(&(p - d));
    }
    let n = g.norm();
    if n > 0.0 {
        g / n
    } else {
        Vec3::zeros()
    }
}

impl GraspEvaluator {
    pub fn new(gripper: GripperModel, friction: f64) -> Self {
        let (_, fh) = gripper.finger_box(1.0, 0.0);
        let (_, ph) = gripper.palm_box();
        let (z0, z1) = gripper.finger_z_range();
        let ys = axis_ticks(-gripper.finger_width / 2.0, gripper.finger_width / 2.0, SHELL_PITCH);
        let zs = axis_ticks(z0, z1, SHELL_PITCH);
        let face = zs.iter().flat_map(|&z| ys.iter().map(move |&y| (y, z))).collect();
        Self {
            gripper,
            friction,
            finger_shell: box_shell(&fh, SHELL_PITCH),
            palm_shell: box_shell(&ph, SHELL_PITCH),
            face,
        }
    }

    /// Objects whose bounding sphere meets the ball `(center, radius)`.
    fn nearby<'a>(scene: &'a Scene, center: &Vec3, radius: f64) -> Vec<&'a SceneObject> {
        scene
            .objects
            .iter()
            .filter(|o| (o.center() - center).norm() < radius + o.primitive.bounding_radius())
            .collect()
    }

    /// True when a box placed in the gripper frame overlaps an object or the table.
    fn box_collides(&self, scene: &Scene, g: &Grasp, center: &Vec3, half: &Vec3, shell: &[Vec3]) -> bool {
        let wc = g.to_world(center);
        // the lowest shell point is a corner, so this is exact for the table
        let extent_z: f64 = (0..3)
            .map(|a| {
                let mut e = Vec3::zeros();
                e[a] = half[a];
                (g.rotation * e).z.abs()
            })
            .sum();
        if wc.z - extent_z <= 0.0 {
            return true;
        }
        let near = Self::nearby(scene, &wc, half.norm());
        if near.is_empty() {
            return false;
        }
        shell.iter().any(|p| {
            let w = g.to_world(&(center + p));
            near.iter().any(|o| o.sdf(&w) <= 0.0)
        })
    }

    /// Open-hand collision test at the grasp's width.
    pub fn collides(&self, scene: &Scene, g: &Grasp) -> bool {
        let (pc, ph) = self.gripper.palm_box();
        if self.box_collides(scene, g, &pc, &ph, &self.palm_shell) {
            return true;
        }
        [1.0, -1.0].iter().any(|&s| {
            let (c, h) = self.gripper.finger_box(s, g.width);
            self.box_collides(scene, g, &c, &h, &self.finger_shell)
        })
    }

    /// First opening from the width sweep that is collision-free.
    pub fn choose_width(&self, scene: &Scene, center: Vec3, rotation: Quat) -> Option<f64> {
        self.gripper
            .width_sweep()
            .into_iter()
            .find(|&w| !self.collides(scene, &Grasp::new(center, rotation, w)))
    }

    /// Close one finger: the inner face moves along `-side * x` until any
    /// face point touches geometry. `Err` reports an unusable sweep.
    fn close_finger(&self, scene: &Scene, g: &Grasp, side: f64) -> Result<Contact, Failure> {
        let dir = g.rotation * Vec3::new(-side, 0.0, 0.0);
        let max_travel = g.width;
        let (z0, z1) = self.gripper.finger_z_range();
        let sweep_center = g.to_world(&Vec3::new(0.0, 0.0, (z0 + z1) / 2.0));
        let sweep_radius = Vec3::new(g.width / 2.0, self.gripper.finger_width / 2.0, (z1 - z0) / 2.0).norm();
        let near = Self::nearby(scene, &sweep_center, sweep_radius);
        let sdf = |p: &Vec3| -> (f64, usize) {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, o) in near.iter().enumerate() {
                let d = o.sdf(p);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best
        };

        // (travel, which object or None for the table, start point)
        let mut best: Option<(f64, Option<usize>, Vec3)> = None;
        for &(y, z) in &self.face {
            let start = g.to_world(&Vec3::new(side * g.width / 2.0, y, z));
            let limit = best.map_or(max_travel, |b| b.0.min(max_travel));
            if dir.z < 0.0 {
                let t_table = start.z / -dir.z;
                if t_table < limit && best.is_none_or(|b| t_table < b.0) {
                    best = Some((t_table, None, start));
                }
            }
            if near.is_empty() {
                continue;
            }
            let limit = best.map_or(max_travel, |b| b.0.min(max_travel));
            let mut t = 0.0;
            let (mut d, mut idx) = sdf(&start);
            if d <= 0.0 {
                best = Some((0.0, Some(idx), start));
                continue;
            }
            let mut prev = 0.0;
            while t < limit {
                prev = t;
                t += d.max(CONTACT_STEP);
                (d, idx) = sdf(&(start + dir * t.min(limit)));
                if d <= 0.0 {
                    break;
                }
            }
            if d > 0.0 {
                continue;
            }
            // bisect to the surface
            let (mut lo, mut hi) = (prev, t.min(limit));
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let (dm, im) = sdf(&(start + dir * mid));
                if dm <= 0.0 {
                    hi = mid;
                    idx = im;
                } else {
                    lo = mid;
                }
            }
            if best.is_none_or(|b| hi < b.0) {
                best = Some((hi, Some(idx), start));
            }
        }
        match best {
            Some((travel, Some(i), start)) => {
                let point = start + dir * travel;
                Ok(Contact {
                    point,
                    normal: object_normal(near[i], &point),
                    object: near[i].id,
                    travel,
                })
            }
            _ => Err(Failure::NoContact),
        }
    }

    pub fn evaluate(&self, scene: &Scene, g: &Grasp) -> Evaluation {
        if self.collides(scene, g) {
            return Evaluation::fail(Failure::Collision);
        }
        let mut contacts = [None, None];
        for (k, side) in [1.0, -1.0].into_iter().enumerate() {
            match self.close_finger(scene, g, side) {
                Ok(c) => contacts[k] = Some(c),
                Err(f) => return Evaluation::fail(f),
            }
        }
        let [Some(a), Some(b)] = contacts else { unreachable!() };
        if a.object != b.object || a.travel + b.travel > g.width + 1e-9 {
            return Evaluation::fail(Failure::DifferentObjects);
        }
        let cos_cone = self.friction.atan().cos();
        let x = g.closing_axis();
        if a.normal.dot(&x) < cos_cone || b.normal.dot(&-x) < cos_cone {
            return Evaluation {
                failure: Some(Failure::Slip),
                contacts: Some([a, b]),
            };
        }
        Evaluation { failure: None, contacts: Some([a, b]) }
    }
}

/// Binary trial outcome for one grasp.
pub fn evaluate_grasp(scene: &Scene, gripper: &GripperModel, g: &Grasp, friction: f64) -> bool {
    GraspEvaluator::new(*gripper, friction).evaluate(scene, g).success()
}

#[cfg(test)]
mod tests;
