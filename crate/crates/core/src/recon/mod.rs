//! Mesh extraction and reconstruction metrics.

mod mc_tables;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::oracle::{Grasp, GripperModel};
use crate::rng;
use crate::scene::Scene;
use mc_tables::{EDGE_TABLE, TRI_TABLE};

/// Scalar samples on a regular lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    /// Sample `f` at every lattice point.
    pub fn from_fn(dims: [usize; 3], origin: Vec3, spacing: f64, f: impl Fn(&Vec3) -> f64 + Sync) -> Self {
        let mut g = Self { dims, origin, spacing, values: Vec::new() };
        let n = dims[0] * dims[1] * dims[2];
        g.values = crate::par::map_range(n, |i| {
            let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
            f(&g.point(x, y, z))
        });
        g
    }

    /// All lattice points in storage order.
    pub fn points(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.point(x, y, z));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: &[u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, t: &[u32; 3]) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    /// Signed enclosed volume; positive when faces wind outward.
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// ASCII PLY with vertex positions and triangle faces.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "ply\nformat ascii 1.0")?;
        writeln!(f, "element vertex {}", self.vertices.len())?;
        writeln!(f, "property float x\nproperty float y\nproperty float z")?;
        writeln!(f, "element face {}", self.triangles.len())?;
        writeln!(f, "property list uchar int vertex_indices\nend_header")?;
        for v in &self.vertices {
            writeln!(f, "{} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(f, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Cube corner offsets and edge endpoints in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Isosurface of `field` at `iso`. Faces are wound so their normals point
/// toward increasing field values; a field without crossings gives an empty
/// mesh.
pub fn marching_cubes(field: &ScalarGrid, iso: f64) -> Result<TriangleMesh> {
    let [nx, ny, nz] = field.dims;
    if nx < 2 || ny < 2 || nz < 2 || field.values.len() != nx * ny * nz {
        return Err(Error::ContractViolation(format!(
            "marching cubes needs at least 2 samples per axis and {} values, got {:?} / {}",
            nx * ny * nz,
            field.dims,
            field.values.len()
        )));
    }
    let mut mesh = TriangleMesh::default();
    // vertex per lattice edge, keyed by (lower lattice index, axis)
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let idx: [[usize; 3]; 8] = CORNERS.map(|c| [x + c[0], y + c[1], z + c[2]]);
                let val = idx.map(|p| field.values[field.index(p[0], p[1], p[2])]);
                let mut case = 0usize;
                for (k, v) in val.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << k;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [0u32; 12];
                for (e, [a, b]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (pa, pb) = (idx[*a], idx[*b]);
                    let axis = (0..3).find(|k| pa[*k] != pb[*k]).expect("edge spans one axis");
                    let lo = if pa[axis] < pb[axis] { pa } else { pb };
                    let key = (field.index(lo[0], lo[1], lo[2]), axis);
                    edge_vertex[e] = *welded.entry(key).or_insert_with(|| {
                        let (va, vb) = (val[*a], val[*b]);
                        let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                        let qa = field.point(pa[0], pa[1], pa[2]);
                        let qb = field.point(pb[0], pb[1], pb[2]);
                        mesh.vertices.push(qa + (qb - qa) * t);
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    // table winding faces the low side; swap to face up-gradient
                    let t = [
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[2] as usize],
                        edge_vertex[tri[1] as usize],
                    ];
                    if mesh.face_normal(&t).norm() > 2e-12 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Monte-Carlo IoU with its counts. Points where prediction and truth are
/// both empty do not enter the union.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouEstimate {
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    pub samples: usize,
}

impl IouEstimate {
    fn from_counts(intersection: usize, union: usize, samples: usize) -> Self {
        let iou = if union == 0 {
            log::warn!("empty union over {samples} samples, IoU defined as 1");
            1.0
        } else {
            intersection as f64 / union as f64
        };
        Self { iou, intersection, union, samples }
    }

    /// Binomial standard error of the ratio given the union count.
    pub fn std_error(&self) -> f64 {
        if self.union == 0 {
            return 0.0;
        }
        (self.iou * (1.0 - self.iou) / self.union as f64).sqrt()
    }
}

const IOU_BATCH: usize = 4096;

/// Occupancy decision for a probability.
pub fn occupied(p: f64) -> bool {
    p >= 0.5
}

fn count_iou(
    scene: &Scene,
    points: &[Vec3],
    predictor: &(dyn Fn(&[Vec3]) -> Result<Vec<f64>> + Sync),
) -> Result<(usize, usize)> {
    let pred = predictor(points)?;
    if pred.len() != points.len() {
        return Err(Error::ContractViolation("predictor returned the wrong number of values".into()));
    }
    let (mut i, mut u) = (0, 0);
    for (p, o) in points.iter().zip(pred) {
        let (a, b) = (occupied(o), scene.occupancy(p));
        i += usize::from(a && b);
        u += usize::from(a || b);
    }
    Ok((i, u))
}

fn batched_iou(
    n: usize,
    scene: &Scene,
    predictor: &(dyn Fn(&[Vec3]) -> Result<Vec<f64>> + Sync),
    sample: impl Fn(usize, usize) -> Vec<Vec3> + Sync + Send,
) -> Result<IouEstimate> {
    if n == 0 {
        return Err(Error::ContractViolation("IoU needs at least one sample".into()));
    }
    let batches = n.div_ceil(IOU_BATCH);
    let counts = crate::par::map_range(batches, |b| {
        let len = IOU_BATCH.min(n - b * IOU_BATCH);
        count_iou(scene, &sample(b, len), predictor)
    });
    let (mut i, mut u) = (0, 0);
    for c in counts {
        let (a, b) = c?;
        i += a;
        u += b;
    }
    Ok(IouEstimate::from_counts(i, u, n))
}

/// IoU over `n` uniform workspace samples.
pub fn volumetric_iou(
    predictor: &(dyn Fn(&[Vec3]) -> Result<Vec<f64>> + Sync),
    scene: &Scene,
    n: usize,
    seed: u64,
) -> Result<IouEstimate> {
    let l = scene.workspace_size;
    batched_iou(n, scene, predictor, |b, len| {
        let mut rng = rng::stream(seed, "iou", b as u64);
        (0..len)
            .map(|_| Vec3::new(rng.random_range(0.0..l), rng.random_range(0.0..l), rng.random_range(0.0..l)))
            .collect()
    })
}

/// Uniform samples from the union of the between-finger boxes of `grasps`:
/// pick a box by volume, sample inside, accept with probability one over
/// the number of boxes covering the point.
fn sample_grasp_regions(grasps: &[Grasp], gripper: &GripperModel, n: usize, seed: u64) -> Vec<Vec3> {
    let regions: Vec<(Vec3, Vec3)> = grasps.iter().map(|g| gripper.closing_region(g.width)).collect();
    let volumes: Vec<f64> = regions.iter().map(|(_, h)| 8.0 * h.x * h.y * h.z).collect();
    let total: f64 = volumes.iter().sum();
    let inside = |g: &Grasp, r: &(Vec3, Vec3), p: &Vec3| {
        let q = g.to_local(p) - r.0;
        q.x.abs() <= r.1.x && q.y.abs() <= r.1.y && q.z.abs() <= r.1.z
    };
    let mut rng = rng::from_seed(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut pick = rng.random_range(0.0..total);
        let mut k = 0;
        while k + 1 < volumes.len() && pick >= volumes[k] {
            pick -= volumes[k];
            k += 1;
        }
        let (c, h) = regions[k];
        let local = c + Vec3::new(
            rng.random_range(-h.x..=h.x),
            rng.random_range(-h.y..=h.y),
            rng.random_range(-h.z..=h.z),
        );
        let p = grasps[k].to_world(&local);
        let cover = grasps.iter().zip(&regions).filter(|(g, r)| inside(g, r, &p)).count().max(1);
        if rng.random_range(0.0..1.0) * (cover as f64) < 1.0 {
            out.push(p);
        }
    }
    out
}

/// IoU restricted to the between-finger regions of successful grasps.
pub fn iou_grasp(
    predictor: &(dyn Fn(&[Vec3]) -> Result<Vec<f64>> + Sync),
    scene: &Scene,
    grasps: &[Grasp],
    gripper: &GripperModel,
    n: usize,
    seed: u64,
) -> Result<IouEstimate> {
    if grasps.is_empty() {
        return Err(Error::ContractViolation("IoU-grasp needs at least one grasp".into()));
    }
    if grasps.iter().any(|g| g.width.is_nan() || g.width <= 0.0) {
        return Err(Error::ContractViolation("grasp regions need a positive width".into()));
    }
    batched_iou(n, scene, predictor, |b, len| {
        sample_grasp_regions(grasps, gripper, len, rng::derive(seed, "iou-grasp", b as u64))
    })
}

#[cfg(test)]
mod tests;
