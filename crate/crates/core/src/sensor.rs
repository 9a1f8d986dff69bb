//! Single-view depth rendering by sphere tracing, plus the multiplicative
//! gamma / smoothed-Gaussian depth noise model.

use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{quat_from_axes, RigidTransform, TransformRepr, Vec3};
use crate::par;
use crate::rng;
use crate::scene::Scene;

pub const DEFAULT_RESOLUTION: usize = 120;
pub const DEFAULT_VFOV_DEG: f64 = 60.0;
const HIT_EPS: f64 = 1e-4;
const MAX_STEPS: usize = 256;
const MIN_DEPTH: f64 = 1e-4;
/// Table hits farther than this many workspace lengths are dropped (sensor range).
const MAX_RANGE_FACTOR: f64 = 10.0;

/// Pinhole camera with OpenCV axes (x right, y down, z forward);
/// `extrinsic` maps camera coordinates to world.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: RigidTransform,
}

impl PinholeCamera {
    pub fn position(&self) -> Vec3 {
        self.extrinsic.translation
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.extrinsic.rotate(&Vec3::z())
    }

    /// Unnormalized camera-frame ray through the center of pixel `(u, v)`; z = 1.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vec3 {
        Vec3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// World point seen at pixel `(u, v)` with the given axial depth.
    pub fn back_project(&self, u: usize, v: usize, depth: f64) -> Vec3 {
        self.extrinsic.apply(&(self.pixel_ray(u, v) * depth))
    }

    /// Pixel containing the projection of a camera-frame point with z > 0.
    pub fn project_cam(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (u, v) = (u.floor() as usize, v.floor() as usize);
        (u < self.width && v < self.height).then_some((u, v))
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.extrinsic.apply_inverse(p)
    }
}

/// Fixed side view: spherical coordinates (2l, π/3, 0) about the workspace
/// center, looking at the center, world +z as the up hint.
pub fn place_camera(workspace: f64) -> PinholeCamera {
    place_camera_with(workspace, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION, DEFAULT_VFOV_DEG)
}

pub fn place_camera_with(workspace: f64, width: usize, height: usize, vfov_deg: f64) -> PinholeCamera {
    let center = Vec3::repeat(0.5 * workspace);
    let (r, theta, phi) = (2.0 * workspace, PI / 3.0, 0.0f64);
    let pos = center
        + r * Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
    let forward = (center - pos).normalize();
    let up = (Vec3::z() - forward * Vec3::z().dot(&forward)).normalize();
    let down = -up;
    let right = down.cross(&forward);
    let fy = 0.5 * height as f64 / (0.5 * vfov_deg.to_radians()).tan();
    PinholeCamera {
        fx: fy,
        fy,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
        width,
        height,
        extrinsic: RigidTransform::new(quat_from_axes(&right, &down, &forward), pos),
    }
}

/// Row-major depth image; invalid pixels hold 0 and are flagged in `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn ray_box(origin: &Vec3, dir: &Vec3, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Sphere-trace every pixel against the scene SDF, with the table plane
/// z = 0 (unbounded, up to the sensor range) intersected analytically.
/// Depth is measured along the optical axis.
pub fn render_depth(scene: &Scene, cam: &PinholeCamera) -> DepthImage {
    let l = scene.workspace_size;
    let origin = cam.position();
    let rows = par::map_range(cam.height, |v| {
        let mut row = vec![None; cam.width];
        for (u, out) in row.iter_mut().enumerate() {
            let ray_cam = cam.pixel_ray(u, v);
            let norm = ray_cam.norm();
            let dir = cam.extrinsic.rotate(&ray_cam) / norm;
            let table = (dir.z < 0.0)
                .then(|| -origin.z / dir.z)
                .filter(|t| *t <= MAX_RANGE_FACTOR * l);
            let mut hit = table;
            if let (false, Some((t_in, t_out))) = (scene.is_empty(), ray_box(&origin, &dir, -0.5 * l, 1.5 * l)) {
                let t_out = table.map_or(t_out, |t| t.min(t_out));
                let mut t = t_in;
                for _ in 0..MAX_STEPS {
                    if t > t_out {
                        break;
                    }
                    let d = scene.sdf(&(origin + dir * t));
                    if d < HIT_EPS {
                        hit = Some(t);
                        break;
                    }
                    t += d;
                }
            }
            *out = hit.map(|t| t / norm);
        }
        row
    });
    let mut img = DepthImage::empty(cam.width, cam.height);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, d) in row.into_iter().enumerate() {
            if let Some(d) = d {
                img.values[v * cam.width + u] = d;
                img.valid[v * cam.width + u] = true;
            }
        }
    }
    img
}

/// Parameters of `y = alpha * y_hat + eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    /// Std of the white noise before smoothing, meters.
    pub sigma: f64,
    /// Std of the smoothing kernel, pixels.
    pub bandwidth: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gamma_shape: 1000.0,
            gamma_scale: 0.001,
            sigma: 0.005,
            bandwidth: std::f64::consts::SQRT_2,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_shape > 0.0 && self.gamma_scale > 0.0 && self.sigma >= 0.0 && self.bandwidth > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ContractViolation(format!("invalid noise parameters {self:?}")))
        }
    }

    /// Normalized 1-D kernel; the 2-D kernel is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let radius = (3.0 * self.bandwidth).ceil() as i64;
        let mut k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * self.bandwidth * self.bandwidth)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|x| *x /= s);
        k
    }
}

/// Result of [`apply_noise`].
#[derive(Debug, Clone)]
pub struct NoisyDepth {
    pub image: DepthImage,
    pub alpha: f64,
    /// Valid pixels that had to be clamped to the minimum depth.
    pub clamped: usize,
}

pub fn apply_noise(img: &DepthImage, params: &NoiseParams, seed: u64) -> Result<NoisyDepth> {
    params.validate()?;
    let gamma = Gamma::new(params.gamma_shape, params.gamma_scale)
        .map_err(|e| Error::ContractViolation(e.to_string()))?;
    let alpha = gamma.sample(&mut rng::stream(seed, "depth-alpha", 0));
    Ok(apply_noise_with_alpha(img, alpha, params, seed))
}

/// Same as [`apply_noise`] with a given image scale.
pub fn apply_noise_with_alpha(img: &DepthImage, alpha: f64, params: &NoiseParams, seed: u64) -> NoisyDepth {
    let field = smooth_noise_field(img.width, img.height, params, seed);
    let mut out = img.clone();
    let mut clamped = 0;
    for (((v, &ok), &depth), &eps) in out.values.iter_mut().zip(&img.valid).zip(&img.values).zip(&field) {
        if !ok {
            continue;
        }
        let mut y = alpha * depth;
        if params.sigma > 0.0 {
            y += eps;
        }
        if y < MIN_DEPTH {
            y = MIN_DEPTH;
            clamped += 1;
        }
        *v = y;
    }
    NoisyDepth {
        image: out,
        alpha,
        clamped,
    }
}

/// White Gaussian noise of std `sigma` convolved with the normalized Gaussian
/// kernel. Noise is drawn on a padded canvas in row-major order so every
/// output pixel sees the full kernel.
pub fn smooth_noise_field(width: usize, height: usize, params: &NoiseParams, seed: u64) -> Vec<f64> {
    if params.sigma == 0.0 {
        return vec![0.0; width * height];
    }
    let k = params.kernel();
    let r = k.len() / 2;
    let (pw, ph) = (width + 2 * r, height + 2 * r);
    let mut rng = rng::stream(seed, "depth-eps", 0);
    let white: Vec<f64> = (0..pw * ph)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            params.sigma * e
        })
        .collect::<Vec<f64>>();
    // horizontal pass: ph x width
    let mut horiz = vec![0.0; ph * width];
    for y in 0..ph {
        for x in 0..width {
            horiz[y * width + x] = k.iter().enumerate().map(|(j, w)| w * white[y * pw + x + j]).sum();
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k.iter().enumerate().map(|(j, w)| w * horiz[(y + j) * width + x]).sum();
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
struct DepthSidecar {
    width: usize,
    height: usize,
    intrinsics: Intrinsics,
    extrinsic: TransformRepr,
    seed: u64,
}

/// Write `<stem>.bin` (little-endian f32, row-major, 0 = invalid) and
/// `<stem>.json`.
pub fn write_depth(stem: &Path, img: &DepthImage, cam: &PinholeCamera, seed: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * img.values.len());
    for (v, ok) in img.values.iter().zip(&img.valid) {
        let x = if *ok { *v as f32 } else { 0.0 };
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(stem.with_extension("bin"), bytes)?;
    let side = DepthSidecar {
        width: img.width,
        height: img.height,
        intrinsics: Intrinsics {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
        },
        extrinsic: TransformRepr::from(&cam.extrinsic),
        seed,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_depth(stem: &Path) -> Result<(DepthImage, PinholeCamera, u64)> {
    let side: DepthSidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    if bytes.len() != 4 * side.width * side.height {
        return Err(Error::Format(format!(
            "depth payload has {} bytes, expected {}",
            bytes.len(),
            4 * side.width * side.height
        )));
    }
    let mut img = DepthImage::empty(side.width, side.height);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        if v > 0.0 {
            img.values[i] = v;
            img.valid[i] = true;
        }
    }
    let cam = PinholeCamera {
        fx: side.intrinsics.fx,
        fy: side.intrinsics.fy,
        cx: side.intrinsics.cx,
        cy: side.intrinsics.cy,
        width: side.width,
        height: side.height,
        extrinsic: RigidTransform::from(&side.extrinsic),
    };
    Ok((img, cam, side.seed))
}
