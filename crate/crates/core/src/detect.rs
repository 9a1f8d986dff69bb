//! Grasp detection from a trained network: dense querying on a grid of
//! centers, masking, non-maxima suppression and thresholded selection.

use std::cmp::Ordering;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::net::{GigaNet, TriPlanes};
use crate::oracle::{Grasp, GripperModel};
use crate::tsdf::TsdfGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Grasp centers per axis.
    pub resolution: usize,
    pub threshold: f64,
    pub nms_radius: f64,
    /// Distance kept clear of the four side walls.
    pub boundary_margin: f64,
    /// Lowest admissible center height.
    pub min_height: f64,
    /// Also query the centers of this coarser grid (co-grid), so the
    /// candidate set contains every center the coarser detector would see.
    pub co_grid: Option<usize>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let g = GripperModel::default();
        Self {
            resolution: 40,
            threshold: 0.5,
            nms_radius: 0.03,
            boundary_margin: g.finger_depth,
            min_height: g.finger_thickness,
            co_grid: None,
        }
    }
}

impl DetectionConfig {
    /// 60^3 querying with the default 40^3 centers included.
    pub fn high_resolution() -> Self {
        Self { resolution: 60, co_grid: Some(40), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.co_grid == Some(0) {
            return Err(Error::ContractViolation("query resolution must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::ContractViolation(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if self.nms_radius.is_nan() || self.nms_radius <= 0.0 {
            return Err(Error::ContractViolation(format!("NMS radius {} must be positive", self.nms_radius)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub grasp: Grasp,
    pub quality: f64,
}

/// Cell centers of an `m^3` grid over the workspace, x fastest.
pub fn grid_centers(workspace: f64, m: usize) -> Vec<Vec3> {
    let h = workspace / m as f64;
    let mut out = Vec::with_capacity(m * m * m);
    for k in 0..m {
        for j in 0..m {
            for i in 0..m {
                out.push(Vec3::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h));
            }
        }
    }
    out
}

fn query_centers(net: &GigaNet, planes: &TriPlanes, centers: &[Vec3]) -> Result<Vec<Candidate>> {
    let preds = net.predict_grasps(planes, centers)?;
    Ok(centers
        .iter()
        .zip(preds)
        .map(|(c, p)| Candidate {
            grasp: Grasp::from_wxyz(*c, p.rotation, p.width),
            quality: p.quality,
        })
        .collect())
}

/// One candidate per cell center of the `resolution^3` grid, in grid order.
pub fn dense_query(net: &GigaNet, tsdf: &TsdfGrid, resolution: usize) -> Result<Vec<Candidate>> {
    let planes = net.encode_planes(tsdf)?;
    query_centers(net, &planes, &grid_centers(net.config.workspace, resolution))
}

/// Precomputed masking state for one TSDF.
pub struct Mask<'a> {
    tsdf: &'a TsdfGrid,
    config: DetectionConfig,
    /// Observed voxels at or behind a surface (value <= 0).
    surface: Vec<bool>,
    offsets: Vec<[i64; 3]>,
}

impl<'a> Mask<'a> {
    pub fn new(tsdf: &'a TsdfGrid, config: &DetectionConfig) -> Self {
        let surface = tsdf
            .values
            .iter()
            .zip(&tsdf.weights)
            .map(|(v, w)| *w > 0.0 && *v <= 0.0)
            .collect();
        let reach = 2.0 * config.nms_radius / tsdf.voxel_size;
        let r = reach.floor() as i64;
        let mut offsets = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy + dz * dz) as f64) <= reach * reach {
                        offsets.push([dx, dy, dz]);
                    }
                }
            }
        }
        // nearest first, so typical rejections exit early
        offsets.sort_by_key(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
        Self { tsdf, config: *config, surface, offsets }
    }

    fn deep_free(&self, v: (usize, usize, usize)) -> bool {
        let t = self.tsdf;
        if !(t.weight(v.0, v.1, v.2) > 0.0 && t.value(v.0, v.1, v.2) >= 1.0) {
            return false;
        }
        let n = t.resolution as i64;
        !self.offsets.iter().any(|o| {
            let (x, y, z) = (v.0 as i64 + o[0], v.1 as i64 + o[1], v.2 as i64 + o[2]);
            (0..n).contains(&x)
                && (0..n).contains(&y)
                && (0..n).contains(&z)
                && self.surface[t.index(x as usize, y as usize, z as usize)]
        })
    }

    /// Whether a grasp centered at `c` is kept.
    pub fn keeps(&self, c: &Vec3) -> bool {
        let l = self.tsdf.size();
        let m = self.config.boundary_margin;
        if c.x < m || c.x > l - m || c.y < m || c.y > l - m || c.z < self.config.min_height {
            return false;
        }
        match self.tsdf.voxel_of(c) {
            Some(v) => !self.deep_free(v),
            None => false,
        }
    }
}

/// Drop candidates near the walls, below the table clearance, or in deep
/// observed free space.
pub fn mask_impractical(cands: &[Candidate], config: &DetectionConfig, tsdf: &TsdfGrid) -> Vec<Candidate> {
    let mask = Mask::new(tsdf, config);
    let keep = crate::par::map_slice(cands, |c| mask.keeps(&c.grasp.center));
    cands.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| *c).collect()
}

fn lex(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Highest quality first, ties by lexicographic center.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.quality.total_cmp(&a.quality).then_with(|| lex(&a.grasp.center, &b.grasp.center))
}

/// Greedy non-maxima suppression; survivors in rank order.
pub fn nms(cands: &[Candidate], radius: f64) -> Vec<Candidate> {
    let mut order: Vec<Candidate> = cands.to_vec();
    order.sort_by(rank);
    let cell = radius.max(1e-9);
    let key = |p: &Vec3| [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64];
    let mut buckets: std::collections::HashMap<[i64; 3], Vec<Vec3>> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for c in order {
        let p = c.grasp.center;
        let k = key(&p);
        let mut suppressed = false;
        'search: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(b) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if b.iter().any(|q| (q - p).norm() <= radius) {
                            suppressed = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !suppressed {
            buckets.entry(k).or_default().push(p);
            out.push(c);
        }
    }
    out
}

/// Best candidate if it clears the threshold.
pub fn select_grasp(cands: &[Candidate], threshold: f64) -> Option<Candidate> {
    cands.iter().min_by(|a, b| rank(a, b)).filter(|c| c.quality >= threshold).copied()
}

/// Stage sizes and the selected grasp of one detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub queried: usize,
    pub masked: usize,
    pub survivors: Vec<Candidate>,
    pub selected: Option<Candidate>,
}

/// Full pipeline. Masked centers are skipped before querying, which gives
/// the same survivors as masking the dense candidate set.
pub fn detect(net: &GigaNet, tsdf: &TsdfGrid, config: &DetectionConfig) -> Result<Detection> {
    config.validate()?;
    let l = net.config.workspace;
    let mut centers = grid_centers(l, config.resolution);
    if let Some(m) = config.co_grid.filter(|m| *m != config.resolution) {
        centers.extend(grid_centers(l, m));
    }
    let queried = centers.len();
    let mask = Mask::new(tsdf, config);
    let keep = crate::par::map_slice(&centers, |c| mask.keeps(c));
    let kept: Vec<Vec3> = centers.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| *c).collect();
    let planes = net.encode_planes(tsdf)?;
    let cands = query_centers(net, &planes, &kept)?;
    let survivors = nms(&cands, config.nms_radius);
    let selected = select_grasp(&survivors, config.threshold);
    Ok(Detection { queried, masked: cands.len(), survivors, selected })
}

/// Which axis a landscape slice is normal to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Self::X),
            "y" => Ok(Self::Y),
            "z" => Ok(Self::Z),
            _ => Err(Error::ContractViolation(format!("unknown axis {s:?}"))),
        }
    }
}

/// Grasp quality on one axis-aligned slice of the dense grid.
/// `values[row * resolution + col]`: columns follow the first remaining axis
/// and rows the second, so a z slice has x columns and y rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub axis: Axis,
    pub index: usize,
    pub resolution: usize,
    pub values: Vec<f64>,
}

/// Grid coordinates `(i, j, k)` of slice pixel `(row, col)`.
fn slice_cell(axis: Axis, index: usize, row: usize, col: usize) -> [usize; 3] {
    match axis {
        Axis::X => [index, col, row],
        Axis::Y => [col, index, row],
        Axis::Z => [col, row, index],
    }
}

pub fn affordance_landscape(
    net: &GigaNet,
    tsdf: &TsdfGrid,
    resolution: usize,
    axis: Axis,
    index: usize,
) -> Result<Landscape> {
    if index >= resolution {
        return Err(Error::ContractViolation(format!("slice {index} outside resolution {resolution}")));
    }
    let h = net.config.workspace / resolution as f64;
    let centers: Vec<Vec3> = (0..resolution * resolution)
        .map(|p| {
            let c = slice_cell(axis, index, p / resolution, p % resolution);
            Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * h
        })
        .collect();
    let planes = net.encode_planes(tsdf)?;
    let values = net.predict_quality(&planes, &centers)?;
    Ok(Landscape { axis, index, resolution, values })
}

impl Landscape {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    /// 8-bit grayscale, quality 1 is white. Image row 0 is the top, so the
    /// slice is flipped vertically.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let n = self.resolution as u32;
        let img = image::GrayImage::from_fn(n, n, |x, y| {
            let row = (n - 1 - y) as usize;
            let v = self.values[row * self.resolution + x as usize];
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)?;
        Ok(())
    }
}

/// JSON form of a selected grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspJson {
    pub t: [f64; 3],
    pub quat: [f64; 4],
    pub w: f64,
    pub q: f64,
}

impl From<&Candidate> for GraspJson {
    fn from(c: &Candidate) -> Self {
        let t = c.grasp.center;
        Self { t: [t.x, t.y, t.z], quat: c.grasp.quat_wxyz(), w: c.grasp.width, q: c.quality }
    }
}

#[cfg(test)]
mod tests;
