//! Tri-plane implicit network: TSDF -> 3D conv -> orthographic plane
//! pooling -> per-plane U-Nets -> local features -> four decoders.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamId, ParamStore, Plane, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng;
use crate::tsdf::TsdfGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Resolution of the input TSDF.
    pub grid: usize,
    pub workspace: f64,
    pub voxel_channels: usize,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub unet_depth: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub max_width: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            grid: 40,
            workspace: 0.30,
            voxel_channels: 16,
            plane_resolution: 40,
            plane_channels: 32,
            unet_depth: 3,
            hidden: 64,
            blocks: 3,
            max_width: 0.08,
        }
    }
}

impl NetworkConfig {
    /// Smaller channel counts that keep every mechanism but train on a
    /// single CPU core within minutes.
    pub fn toy() -> Self {
        Self {
            voxel_channels: 8,
            plane_channels: 8,
            hidden: 32,
            blocks: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid,
            self.voxel_channels,
            self.plane_resolution,
            self.plane_channels,
            self.unet_depth,
            self.hidden,
            self.blocks,
        ];
        if dims.contains(&0) {
            return Err(Error::ContractViolation(format!("zero dimension in {self:?}")));
        }
        if !self.plane_resolution.is_multiple_of(1 << self.unet_depth) {
            return Err(Error::ContractViolation(format!(
                "plane resolution {} not divisible by 2^{}",
                self.plane_resolution, self.unet_depth
            )));
        }
        if !(self.workspace > 0.0 && self.max_width > 0.0) {
            return Err(Error::ContractViolation("workspace and max width must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.plane_channels
    }
}

/// Per-point affordance output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspPrediction {
    pub quality: f64,
    /// Unit quaternion, wxyz.
    pub rotation: [f64; 4],
    pub width: f64,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct UNet {
    down: Vec<Layer>,
    up: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct Decoder {
    fc_in: Layer,
    blocks: Vec<(Layer, Layer)>,
    out: Layer,
}

/// Which decoder head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Quality,
    Rotation,
    Width,
    Occupancy,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Quality, Head::Rotation, Head::Width, Head::Occupancy];

    pub fn name(self) -> &'static str {
        match self {
            Head::Quality => "quality",
            Head::Rotation => "rotation",
            Head::Width => "width",
            Head::Occupancy => "occupancy",
        }
    }

    fn out_dim(self) -> usize {
        if self == Head::Rotation { 4 } else { 1 }
    }
}

/// Graph handles for the affordance heads, `[P,1]`, `[P,4]`, `[P,1]`.
#[derive(Debug, Clone, Copy)]
pub struct AffordanceVars {
    pub quality: Var,
    pub rotation: Var,
    pub width: Var,
}

/// Post-U-Net planes in xy, yz, xz order, each `[C,R,R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlanes {
    pub planes: [Tensor; 3],
}

#[derive(Debug, Clone)]
pub struct GigaNet {
    pub config: NetworkConfig,
    pub params: ParamStore,
    conv3d: Layer,
    unets: Vec<UNet>,
    decoders: Vec<Decoder>,
}

fn init_layer(store: &mut ParamStore, rng: &mut rng::Rng, name: &str, shape: &[usize]) -> Layer {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
    Layer {
        w: store.add(format!("{name}.w"), w),
        b: store.add(format!("{name}.b"), Tensor::zeros(&shape[..1])),
    }
}

fn plane_name(p: Plane) -> &'static str {
    match p {
        Plane::Xy => "xy",
        Plane::Yz => "yz",
        Plane::Xz => "xz",
    }
}

impl GigaNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "net-init", 0);
        let c0 = config.voxel_channels;
        let conv3d = init_layer(&mut store, &mut rng, "encoder.conv3d", &[c0, 1, 3, 3, 3]);
        let c = config.plane_channels;
        let ch = |l: usize| c << l;
        let mut unets = Vec::new();
        for plane in Plane::ALL {
            let pn = plane_name(plane);
            let mut down = vec![init_layer(&mut store, &mut rng, &format!("unet.{pn}.down0"), &[c, c0, 3, 3])];
            for l in 1..=config.unet_depth {
                down.push(init_layer(&mut store, &mut rng, &format!("unet.{pn}.down{l}"), &[ch(l), ch(l - 1), 3, 3]));
            }
            let mut up = Vec::new();
            for l in (0..config.unet_depth).rev() {
                up.push(init_layer(
                    &mut store,
                    &mut rng,
                    &format!("unet.{pn}.up{l}"),
                    &[ch(l), ch(l + 1) + ch(l), 3, 3],
                ));
            }
            unets.push(UNet { down, up });
        }
        let din = 3 + config.feature_dim();
        let h = config.hidden;
        let mut decoders = Vec::new();
        for head in Head::ALL {
            let hn = head.name();
            let fc_in = init_layer(&mut store, &mut rng, &format!("decoder.{hn}.fc_in"), &[h, din]);
            let blocks = (0..config.blocks)
                .map(|k| {
                    (
                        init_layer(&mut store, &mut rng, &format!("decoder.{hn}.block{k}.fc1"), &[h, h]),
                        init_layer(&mut store, &mut rng, &format!("decoder.{hn}.block{k}.fc2"), &[h, h]),
                    )
                })
                .collect();
            let out = init_layer(&mut store, &mut rng, &format!("decoder.{hn}.out"), &[head.out_dim(), h]);
            if head == Head::Rotation {
                // identity quaternion when every hidden unit is off
                store.get_mut(out.b).data[0] = 1.0;
            }
            decoders.push(Decoder { fc_in, blocks, out });
        }
        Ok(Self { config, params: store, conv3d, unets, decoders })
    }

    /// Parameters of the encoder (3D conv and U-Nets).
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|id| {
                let n = self.params.name(*id);
                n.starts_with("encoder.") || n.starts_with("unet.")
            })
            .collect()
    }

    pub fn head_params(&self, head: Head) -> Vec<ParamId> {
        let prefix = format!("decoder.{}.", head.name());
        self.params.ids().filter(|id| self.params.name(*id).starts_with(&prefix)).collect()
    }

    /// Re-draw the parameters of one decoder head.
    pub fn reset_head(&mut self, head: Head, seed: u64) -> Result<()> {
        let fresh = GigaNet::new(self.config, seed)?;
        let prefix = format!("decoder.{}.", head.name());
        self.params.copy_from(&fresh.params, |n| n.starts_with(&prefix))?;
        Ok(())
    }

    /// Network input `[1, N, N, N]` indexed (z, y, x).
    pub fn input_tensor(&self, tsdf: &TsdfGrid) -> Result<Tensor> {
        if tsdf.resolution != self.config.grid {
            return Err(Error::ConfigMismatch(format!(
                "TSDF resolution {} but network expects {}",
                tsdf.resolution, self.config.grid
            )));
        }
        let n = tsdf.resolution;
        Tensor::new(&[1, n, n, n], tsdf.values.clone())
    }

    fn layer(&self, tape: &mut Tape, l: Layer) -> (Var, Var) {
        (tape.param(l.w), tape.param(l.b))
    }

    /// Per-voxel features averaged onto the three planes (before the U-Nets).
    pub fn project(&self, tape: &mut Tape, input: &Tensor) -> Result<[Var; 3]> {
        let x = tape.leaf(input.clone());
        let (w, b) = self.layer(tape, self.conv3d);
        let f = tape.conv3d(x, w, b)?;
        let f = tape.relu(f);
        let r = self.config.plane_resolution;
        Ok([
            tape.plane_project(f, Plane::Xy, r)?,
            tape.plane_project(f, Plane::Yz, r)?,
            tape.plane_project(f, Plane::Xz, r)?,
        ])
    }

    fn unet(&self, tape: &mut Tape, net: &UNet, x: Var) -> Result<Var> {
        let mut skips = Vec::new();
        let mut h = x;
        for (l, layer) in net.down.iter().enumerate() {
            if l > 0 {
                h = tape.max_pool2d(h)?;
            }
            let (w, b) = self.layer(tape, *layer);
            h = tape.conv2d(h, w, b)?;
            h = tape.relu(h);
            skips.push(h);
        }
        skips.pop();
        for (k, layer) in net.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let u = tape.upsample2d(h)?;
            let cat = tape.concat(&[u, skip], 0)?;
            let (w, b) = self.layer(tape, *layer);
            h = tape.conv2d(cat, w, b)?;
            if k + 1 < net.up.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Full encoder: projection followed by one U-Net per plane.
    pub fn encode(&self, tape: &mut Tape, input: &Tensor) -> Result<[Var; 3]> {
        let pre = self.project(tape, input)?;
        Ok([
            self.unet(tape, &self.unets[0], pre[0])?,
            self.unet(tape, &self.unets[1], pre[1])?,
            self.unet(tape, &self.unets[2], pre[2])?,
        ])
    }

    /// Normalized coordinates in `[0,1]^3`, clamped.
    pub fn normalize_point(&self, p: &Vec3) -> [f64; 3] {
        let l = self.config.workspace;
        let q = [p.x / l, p.y / l, p.z / l];
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            log::warn!("query point {p:?} outside the workspace, clamped");
        }
        q.map(|v| v.clamp(0.0, 1.0))
    }

    /// Local features `[P, 3 + 3C]`: normalized coordinates followed by the
    /// xy, yz and xz bilinear samples.
    pub fn query(&self, tape: &mut Tape, planes: [Var; 3], points: &[Vec3]) -> Result<Var> {
        let norm: Vec<[f64; 3]> = points.iter().map(|p| self.normalize_point(p)).collect();
        let coords = tape.leaf(Tensor::new(&[points.len(), 3], norm.iter().flatten().copied().collect())?);
        let mut parts = vec![coords];
        for (plane, var) in Plane::ALL.into_iter().zip(planes) {
            let uv: Vec<[f64; 2]> = norm.iter().map(|p| plane.uv(*p)).collect();
            parts.push(tape.bilinear_sample(var, &uv)?);
        }
        tape.concat(&parts, 1)
    }

    /// Pre-activation output of one decoder.
    fn decoder(&self, tape: &mut Tape, head: Head, feat: Var) -> Result<Var> {
        let d = &self.decoders[head as usize];
        let (w, b) = self.layer(tape, d.fc_in);
        let mut h = tape.linear(feat, w, b)?;
        for (fc1, fc2) in &d.blocks {
            let a = tape.relu(h);
            let (w, b) = self.layer(tape, *fc1);
            let a = tape.linear(a, w, b)?;
            let a = tape.relu(a);
            let (w, b) = self.layer(tape, *fc2);
            let a = tape.linear(a, w, b)?;
            h = tape.add(h, a)?;
        }
        let a = tape.relu(h);
        let (w, b) = self.layer(tape, d.out);
        tape.linear(a, w, b)
    }

    pub fn decode_affordance(&self, tape: &mut Tape, feat: Var) -> Result<AffordanceVars> {
        let q = self.decoder(tape, Head::Quality, feat)?;
        let quality = tape.sigmoid(q);
        let r = self.decoder(tape, Head::Rotation, feat)?;
        let rotation = tape.row_normalize(r)?;
        let w = self.decoder(tape, Head::Width, feat)?;
        let w = tape.sigmoid(w);
        let width = tape.scale(w, self.config.max_width);
        Ok(AffordanceVars { quality, rotation, width })
    }

    pub fn decode_occupancy(&self, tape: &mut Tape, feat: Var) -> Result<Var> {
        let o = self.decoder(tape, Head::Occupancy, feat)?;
        Ok(tape.sigmoid(o))
    }

    /// Encode once and return the planes as plain tensors.
    pub fn encode_planes(&self, tsdf: &TsdfGrid) -> Result<TriPlanes> {
        let input = self.input_tensor(tsdf)?;
        let mut tape = Tape::new(&self.params);
        let vars = self.encode(&mut tape, &input)?;
        Ok(TriPlanes { planes: vars.map(|v| tape.value(v).clone()) })
    }

    fn plane_leaves(tape: &mut Tape, planes: &TriPlanes) -> [Var; 3] {
        [0, 1, 2].map(|k| tape.leaf(planes.planes[k].clone()))
    }

    /// Quality only, in chunks.
    pub fn predict_quality(&self, planes: &TriPlanes, points: &[Vec3]) -> Result<Vec<f64>> {
        self.chunked(points, |tape, feat| {
            let q = self.decoder(tape, Head::Quality, feat)?;
            let q = tape.sigmoid(q);
            Ok(tape.value(q).data.clone())
        }, planes)
    }

    pub fn predict_grasps(&self, planes: &TriPlanes, points: &[Vec3]) -> Result<Vec<GraspPrediction>> {
        let flat = self.chunked(points, |tape, feat| {
            let a = self.decode_affordance(tape, feat)?;
            let (q, r, w) = (tape.value(a.quality), tape.value(a.rotation), tape.value(a.width));
            Ok((0..q.numel())
                .flat_map(|i| {
                    [q.data[i], r.data[4 * i], r.data[4 * i + 1], r.data[4 * i + 2], r.data[4 * i + 3], w.data[i]]
                })
                .collect())
        }, planes)?;
        Ok(flat
            .chunks(6)
            .map(|c| GraspPrediction { quality: c[0], rotation: [c[1], c[2], c[3], c[4]], width: c[5] })
            .collect())
    }

    pub fn predict_occupancy(&self, planes: &TriPlanes, points: &[Vec3]) -> Result<Vec<f64>> {
        self.chunked(points, |tape, feat| {
            let o = self.decode_occupancy(tape, feat)?;
            Ok(tape.value(o).data.clone())
        }, planes)
    }

    fn chunked(
        &self,
        points: &[Vec3],
        f: impl Fn(&mut Tape, Var) -> Result<Vec<f64>> + Sync,
        planes: &TriPlanes,
    ) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let chunks: Vec<&[Vec3]> = points.chunks(CHUNK).collect();
        let parts = crate::par::map_slice(&chunks, |pts| -> Result<Vec<f64>> {
            let mut tape = Tape::new(&self.params);
            let vars = Self::plane_leaves(&mut tape, planes);
            let feat = self.query(&mut tape, vars, pts)?;
            f(&mut tape, feat)
        });
        let mut out = Vec::with_capacity(points.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Encode once, decode grasps at `centers` and occupancy at `points`.
    pub fn forward_joint(
        &self,
        tsdf: &TsdfGrid,
        centers: &[Vec3],
        points: &[Vec3],
    ) -> Result<(Vec<GraspPrediction>, Vec<f64>)> {
        let planes = self.encode_planes(tsdf)?;
        Ok((self.predict_grasps(&planes, centers)?, self.predict_occupancy(&planes, points)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &serde_json::to_value(self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, store) = load_checkpoint(path)?;
        let config: NetworkConfig = serde_json::from_value(cfg)?;
        let mut net = GigaNet::new(config, 0)?;
        let copied = net.params.copy_from(&store, |_| true)?;
        if copied != net.params.len() || store.len() != net.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameters, network expects {}",
                store.len(),
                net.params.len()
            )));
        }
        Ok(net)
    }
}
