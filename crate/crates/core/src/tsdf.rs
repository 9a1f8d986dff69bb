//! Projective TSDF fusion into the `N^3` grid that feeds the network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::par;
use crate::scene::Scene;
use crate::sensor::{apply_noise, place_camera, render_depth, DepthImage, NoiseParams, PinholeCamera};

pub const DEFAULT_RESOLUTION: usize = 40;
/// Truncation distance in voxels.
pub const TRUNCATION_VOXELS: f64 = 4.0;

/// Voxel grid over `[origin, origin + l]^3` storing truncated signed
/// distances normalized to `[-1, 1]`, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    pub resolution: usize,
    pub voxel_size: f64,
    pub origin: Vec3,
    pub tau: f64,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TsdfGrid {
    pub fn new(workspace: f64, resolution: usize) -> Self {
        let voxel_size = workspace / resolution as f64;
        let n3 = resolution.pow(3);
        Self {
            resolution,
            voxel_size,
            origin: Vec3::zeros(),
            tau: TRUNCATION_VOXELS * voxel_size,
            values: vec![0.0; n3],
            weights: vec![0.0; n3],
        }
    }

    pub fn size(&self) -> f64 {
        self.voxel_size * self.resolution as f64
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let n = self.resolution;
        (i % n, (i / n) % n, i / (n * n))
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel_size
    }

    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weights[self.index(x, y, z)]
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_of(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let q = (p - self.origin) / self.voxel_size;
        let n = self.resolution as f64;
        if (0..3).any(|a| q[a] < 0.0 || q[a] >= n) {
            return None;
        }
        Some((q.x as usize, q.y as usize, q.z as usize))
    }

    /// Fuse one depth image (weight 1 per observation, running average).
    pub fn integrate(&mut self, img: &DepthImage, cam: &PinholeCamera) -> Result<()> {
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::ConfigMismatch(format!(
                "image is {}x{} but camera expects {}x{}",
                img.width, img.height, cam.width, cam.height
            )));
        }
        let n = self.resolution;
        let tau = self.tau;
        let this = &*self;
        let plane = n * n;
        // one z-slab per task
        let updates: Vec<Vec<(f64, f64)>> = par::map_range(n, |z| {
            let mut slab = Vec::with_capacity(plane);
            for y in 0..n {
                for x in 0..n {
                    let i = this.index(x, y, z);
                    let (mut v, mut w) = (this.values[i], this.weights[i]);
                    let pc = cam.world_to_cam(&this.voxel_center(x, y, z));
                    if let Some((u, r)) = cam.project_cam(&pc) {
                        if let Some(depth) = img.get(u, r) {
                            let d = depth - pc.z;
                            if d > -tau {
                                let s = (d / tau).clamp(-1.0, 1.0);
                                v = (v * w + s) / (w + 1.0);
                                w += 1.0;
                            }
                        }
                    }
                    slab.push((v, w));
                }
            }
            slab
        });
        for (z, slab) in updates.into_iter().enumerate() {
            for (j, (v, w)) in slab.into_iter().enumerate() {
                self.values[z * plane + j] = v;
                self.weights[z * plane + j] = w;
            }
        }
        Ok(())
    }

    /// Trilinear interpolation between voxel centers (edge-clamped near the
    /// boundary); exact at centers.
    pub fn sample_trilinear(&self, p: &Vec3) -> Result<f64> {
        let rel = (p - self.origin) / self.voxel_size;
        let n = self.resolution;
        if (0..3).any(|a| rel[a] < 0.0 || rel[a] > n as f64) {
            return Err(Error::OutOfBounds([p.x, p.y, p.z]));
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (rel[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                idx[a] = (base[a] + bit).min(n - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.value(idx[0], idx[1], idx[2]);
            }
        }
        Ok(acc)
    }

    /// Write `<stem>.bin` (values), `<stem>_weights.bin` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let to_bytes = |v: &[f64]| -> Vec<u8> {
            v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect()
        };
        std::fs::write(stem.with_extension("bin"), to_bytes(&self.values))?;
        std::fs::write(weights_path(stem), to_bytes(&self.weights))?;
        let header = TsdfHeader {
            n: self.resolution,
            voxel_size: self.voxel_size,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            tau: self.tau,
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<TsdfGrid> {
        let header: TsdfHeader =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let n3 = header.n.pow(3);
        let decode = |bytes: Vec<u8>| -> Result<Vec<f64>> {
            if bytes.len() != 4 * n3 {
                return Err(Error::Format(format!("tsdf payload {} bytes, expected {}", bytes.len(), 4 * n3)));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        };
        let values = decode(std::fs::read(stem.with_extension("bin"))?)?;
        let weights = match std::fs::read(weights_path(stem)) {
            Ok(b) => decode(b)?,
            Err(_) => values.iter().map(|v| if *v != 0.0 { 1.0 } else { 0.0 }).collect(),
        };
        Ok(TsdfGrid {
            resolution: header.n,
            voxel_size: header.voxel_size,
            origin: Vec3::from(header.origin),
            tau: header.tau,
            values,
            weights,
        })
    }
}

/// Render `scene` from the default viewpoint, optionally corrupt the depth,
/// and fuse it into a fresh grid.
pub fn observe_scene(
    scene: &Scene,
    resolution: usize,
    noise: Option<&NoiseParams>,
    seed: u64,
) -> Result<TsdfGrid> {
    let cam = place_camera(scene.workspace_size);
    let depth = render_depth(scene, &cam);
    let depth = match noise {
        Some(params) => apply_noise(&depth, params, seed)?.image,
        None => depth,
    };
    let mut grid = TsdfGrid::new(scene.workspace_size, resolution);
    grid.integrate(&depth, &cam)?;
    Ok(grid)
}

fn weights_path(stem: &Path) -> std::path::PathBuf {
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}_weights.bin"))
}

#[derive(Serialize, Deserialize)]
struct TsdfHeader {
    #[serde(rename = "N")]
    n: usize,
    voxel_size: f64,
    origin: [f64; 3],
    tau: f64,
}
