use super::gemm::{gemm, View};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Orthographic projection planes of a `[C, D, H, W]` volume indexed
/// `(z, y, x)`. A plane's first coordinate runs along its columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Xy,
    Yz,
    Xz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Xz];

    /// (column, row) coordinates of the plane for a point given as `[x, y, z]`.
    pub fn uv(self, p: [f64; 3]) -> [f64; 2] {
        match self {
            Plane::Xy => [p[0], p[1]],
            Plane::Yz => [p[1], p[2]],
            Plane::Xz => [p[0], p[2]],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    /// Spatial extents (d, h, w); 2D convolutions use d = 1.
    s: [usize; 3],
    k: [usize; 3],
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn spatial(&self) -> usize {
        self.s[0] * self.s[1] * self.s[2]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    AvgPool2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Scale(Var, f64),
    PlaneProject {
        x: Var,
        cell: Vec<usize>,
        counts: Vec<f64>,
    },
    Bilinear {
        plane: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    RowNormalize(Var),
    Sum(Var),
    DotConst {
        x: Var,
        c: Vec<f64>,
    },
    Bce {
        pred: Var,
        targets: Vec<f64>,
    },
    QuatLoss {
        pred: Var,
        /// Chosen target per row (already the closer of the mirrored pair,
        /// sign folded in), scaled by gate / denom.
        coef: Vec<[f64; 4]>,
    },
    SqErr {
        pred: Var,
        targets: Vec<f64>,
        gates: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of a store (zeros where unreachable).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            tensors: store.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Elementwise sum; callers fix the order for reproducibility.
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Single-owner reverse-mode tape. Build a graph with the op methods, then
/// call [`Tape::backward`] on a scalar node.
pub struct Tape<'p> {
    store: &'p ParamStore,
    /// Parameters listed here are treated as constants.
    frozen: Vec<bool>,
    nodes: Vec<Node>,
}

/// Bilinear taps at pixel-center convention with edge clamping.
pub(crate) fn bilinear_taps(h: usize, w: usize, uv: [f64; 2]) -> [(usize, f64); 4] {
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let x = (t * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (x0, x1, fx) = axis(uv[0], w);
    let (y0, y1, fy) = axis(uv[1], h);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Mirror of a wxyz quaternion under a half turn about its local z axis.
pub fn quat_mirror_z(r: [f64; 4]) -> [f64; 4] {
    [-r[3], r[2], -r[1], r[0]]
}

fn dot4(a: &[f64], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            frozen: vec![false; store.len()],
            nodes: Vec::new(),
        }
    }

    /// Treat the given parameters as constants on this tape.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.frozen[id.0] = true;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that still receives a gradient slot (used by tests that
    /// differentiate with respect to inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        let needs_grad = !self.frozen[id.0];
        self.nodes.push(Node { value, op: Op::Param(id), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `x` that blocks gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.leaf(t)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, rank: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let op = if rank == 2 { "conv2d" } else { "conv3d" };
        if xs.len() != rank + 1 || ws.len() != rank + 2 || ws[1] != xs[0] {
            return shape_err(op, &xs, &ws);
        }
        if bs != [ws[0]] {
            return shape_err(op, &ws, &bs);
        }
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::ContractViolation(format!("{op}: kernel {ws:?} must be odd")));
        }
        let (s, k) = if rank == 2 {
            ([1, xs[1], xs[2]], [1, ws[2], ws[3]])
        } else {
            ([xs[1], xs[2], xs[3]], [ws[2], ws[3], ws[4]])
        };
        let geom = ConvGeom { cin: xs[0], cout: ws[0], s, k };
        let col = im2col(&self.value(x).data, &geom);
        let n = geom.spatial();
        let mut out = vec![0.0; geom.cout * n];
        let bias = &self.value(b).data;
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        gemm(
            View::row_major(&self.value(w).data, geom.cout, geom.cols()),
            View::row_major(&col, geom.cols(), n),
            1.0,
            &mut out,
        );
        let mut shape = vec![geom.cout];
        shape.extend_from_slice(&xs[1..]);
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Conv { x, w, b, geom, col }, &[x, w, b]))
    }

    /// Same-padded stride-1 convolution: `x [Cin,H,W]`, `w [Cout,Cin,k,k]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, 2)
    }

    /// Same-padded stride-1 convolution: `x [Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, 3)
    }

    fn pool_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return shape_err(op, s, &[0, 2, 2]);
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "avg_pool2d")?;
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    out[(ch * ho + i) * wo + j] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let value = Tensor { shape: vec![c, ho, wo], data: out };
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.pool_dims(x, "max_pool2d")?;
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = (ch * ho + i) * wo + j;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor { shape: vec![c, ho, wo], data: out };
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbor x2 upsampling of `[C,H,W]`.
    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("upsample2d", &s, &[0, 0, 0]);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = src[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor { shape: vec![c, 2 * h, 2 * w], data: out };
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    /// `x [P,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", &xs, &ws);
        }
        if self.shape(b) != [ws[0]] {
            return shape_err("linear", &ws, self.shape(b));
        }
        let (p, out_dim) = (xs[0], ws[0]);
        let bias = &self.value(b).data;
        let mut out: Vec<f64> = (0..p).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            View::row_major(&self.value(x).data, p, xs[1]),
            View::row_major(&self.value(w).data, out_dim, ws[1]).t(),
            1.0,
            &mut out,
        );
        let value = Tensor { shape: vec![p, out_dim], data: out };
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| f(*v)).collect() };
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", self.shape(a), self.shape(b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::ContractViolation("concat of nothing".into()));
        };
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", &base, &[axis]);
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Average-pool a `[C, N, N, N]` volume (indexed z, y, x) onto an
    /// `R x R` plane; cells with no voxel get zeros.
    pub fn plane_project(&mut self, x: Var, plane: Plane, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != s[2] || s[2] != s[3] || r == 0 {
            return shape_err("plane_project", &s, &[r, r]);
        }
        let (c, n) = (s[0], s[1]);
        let cell_of = |i: usize| ((2 * i + 1) * r) / (2 * n);
        let mut cell = Vec::with_capacity(n * n * n);
        let mut counts = vec![0.0; r * r];
        for z in 0..n {
            for y in 0..n {
                for xx in 0..n {
                    let (col, row) = match plane {
                        Plane::Xy => (xx, y),
                        Plane::Yz => (y, z),
                        Plane::Xz => (xx, z),
                    };
                    let k = cell_of(row) * r + cell_of(col);
                    counts[k] += 1.0;
                    cell.push(k);
                }
            }
        }
        let n3 = n * n * n;
        let src = &self.value(x).data;
        let mut out = vec![0.0; c * r * r];
        for ch in 0..c {
            let dst = &mut out[ch * r * r..(ch + 1) * r * r];
            for (v, k) in src[ch * n3..(ch + 1) * n3].iter().zip(&cell) {
                dst[*k] += v;
            }
            for (d, cnt) in dst.iter_mut().zip(&counts) {
                if *cnt > 0.0 {
                    *d /= cnt;
                }
            }
        }
        let value = Tensor { shape: vec![c, r, r], data: out };
        Ok(self.push(value, Op::PlaneProject { x, cell, counts }, &[x]))
    }

    /// Sample a `[C,H,W]` plane at normalized `uv` points, giving `[P,C]`.
    /// Coordinates outside `[0,1]` are clamped.
    pub fn bilinear_sample(&mut self, plane: Var, uv: &[[f64; 2]]) -> Result<Var> {
        let s = self.shape(plane).to_vec();
        if s.len() != 3 {
            return shape_err("bilinear_sample", &s, &[0, 0, 0]);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if uv.iter().flatten().any(|t| !(0.0..=1.0).contains(t)) {
            log::warn!("bilinear_sample: coordinates outside [0,1] clamped");
        }
        let taps: Vec<[(usize, f64); 4]> = uv
            .iter()
            .map(|p| bilinear_taps(h, w, [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]))
            .collect();
        let src = &self.value(plane).data;
        let mut out = vec![0.0; uv.len() * c];
        for (row, tp) in out.chunks_mut(c).zip(&taps) {
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * h * w;
                *o = tp.iter().map(|(i, wt)| wt * src[base + i]).sum();
            }
        }
        let value = Tensor { shape: vec![uv.len(), c], data: out };
        Ok(self.push(value, Op::Bilinear { plane, taps }, &[plane]))
    }

    /// Normalize each row of `[P,D]` to unit length.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("row_normalize", &s, &[0, 0]);
        }
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(s[1]) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor { shape: s, data };
        Ok(self.push(value, Op::RowNormalize(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// `sum(x * c)` for a constant `c` of the same size.
    pub fn dot_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if self.value(x).numel() != c.len() {
            return shape_err("dot_const", self.shape(x), &[c.len()]);
        }
        let v = self.value(x).data.iter().zip(c).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, c: c.to_vec() }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets;
    /// probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let p = &self.value(pred).data;
        if p.len() != targets.len() || p.is_empty() {
            return shape_err("bce", self.shape(pred), &[targets.len()]);
        }
        let v = p
            .iter()
            .zip(targets)
            .map(|(p, y)| bce_term(*p, *y))
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Bce { pred, targets: targets.to_vec() }, &[pred]))
    }

    /// `sum_i gate_i * min(1 - |q_i . r_i|, 1 - |q_i . mirror(r_i)|) / denom`
    /// over rows of `pred [P,4]` (wxyz).
    pub fn quat_loss(&mut self, pred: Var, targets: &[[f64; 4]], gates: &[f64], denom: f64) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 4 || s[0] != targets.len() || s[0] != gates.len() {
            return shape_err("quat_loss", &s, &[targets.len(), 4]);
        }
        let q = &self.value(pred).data;
        let mut total = 0.0;
        let mut coef = Vec::with_capacity(s[0]);
        for (i, (r, g)) in targets.iter().zip(gates).enumerate() {
            let row = &q[4 * i..4 * i + 4];
            let m = quat_mirror_z(*r);
            let (d1, d2) = (dot4(row, r), dot4(row, &m));
            let (d, t) = if d1.abs() >= d2.abs() { (d1, *r) } else { (d2, m) };
            total += g * (1.0 - d.abs());
            // d/dq of -|q . t|
            let k = -d.signum() * g / denom;
            coef.push(t.map(|v| k * v));
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(value, Op::QuatLoss { pred, coef }, &[pred]))
    }

    /// `sum_i gate_i * (x_i - t_i)^2 / denom`.
    pub fn sq_err(&mut self, pred: Var, targets: &[f64], gates: &[f64], denom: f64) -> Result<Var> {
        let p = &self.value(pred).data;
        if p.len() != targets.len() || p.len() != gates.len() {
            return shape_err("sq_err", self.shape(pred), &[targets.len()]);
        }
        let v = p
            .iter()
            .zip(targets)
            .zip(gates)
            .map(|((x, t), g)| g * (x - t).powi(2))
            .sum::<f64>()
            / denom;
        let op = Op::SqErr { pred, targets: targets.to_vec(), gates: gates.to_vec(), denom };
        Ok(self.push(Tensor::scalar(v), op, &[pred]))
    }

    /// Reverse pass from a scalar node. Gradients for parameters reached
    /// more than once (shared weights) are summed.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ContractViolation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::zeros(self.store);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    /// Gradients with respect to nodes created by [`Tape::input`].
    pub fn backward_inputs(&self, loss: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ContractViolation("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut sink = Grads::zeros(self.store);
        let mut result: Vec<Tensor> = inputs.iter().map(|v| Tensor::zeros(self.shape(*v))).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(k) = inputs.iter().position(|v| v.0 == i) {
                result[k].data = g.clone();
            }
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads, &mut sink);
            }
        }
        Ok(result)
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Grads) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // accumulate into the gradient slot of `v`, allocating zeros on first use
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                out.tensors[id.0].data.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Conv { x, w, b, geom, col } => {
                let n = geom.spatial();
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (o, row) in g.chunks(n).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    gemm(
                        View::row_major(g, geom.cout, n),
                        View::row_major(col, geom.cols(), n).t(),
                        1.0,
                        gw,
                    );
                }
                if wants(*x) {
                    let mut gcol = vec![0.0; geom.cols() * n];
                    gemm(
                        View::row_major(&nodes[w.0].value.data, geom.cout, geom.cols()).t(),
                        View::row_major(g, geom.cout, n),
                        0.0,
                        &mut gcol,
                    );
                    col2im(&gcol, geom, slot(grads, nodes, *x));
                }
            }
            Op::AvgPool2(x) => {
                let s = &nodes[x.0].value.shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let gx = slot(grads, nodes, *x);
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * g[(ch * ho + i) * wo + j];
                            let base = ch * h * w + 2 * i * w + 2 * j;
                            for k in [base, base + 1, base + w, base + w + 1] {
                                gx[k] += v;
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = slot(grads, nodes, *x);
                for (gv, k) in g.iter().zip(argmax) {
                    gx[*k] += gv;
                }
            }
            Op::Upsample2(x) => {
                let s = &nodes[x.0].value.shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let gx = slot(grads, nodes, *x);
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &nodes[x.0].value.shape;
                let (p, din) = (xs[0], xs[1]);
                let dout = nodes[w.0].value.shape[0];
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    gemm(
                        View::row_major(g, p, dout).t(),
                        View::row_major(&nodes[x.0].value.data, p, din),
                        1.0,
                        gw,
                    );
                }
                if wants(*x) {
                    let wdata = &nodes[w.0].value.data;
                    let gx = slot(grads, nodes, *x);
                    gemm(View::row_major(g, p, dout), View::row_major(wdata, dout, din), 1.0, gx);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value.data;
                let gx = slot(grads, nodes, *x);
                for ((a, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *a += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                let gx = slot(grads, nodes, *x);
                for ((a, gv), s) in gx.iter_mut().zip(g).zip(y) {
                    *a += gv * s * (1.0 - s);
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, nodes, *x);
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += s * v);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape[*axis] * inner;
                    if wants(*p) {
                        let gp = slot(grads, nodes, *p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::PlaneProject { x, cell, counts } => {
                let plane = counts.len();
                let n3 = cell.len();
                let c = node.value.shape[0];
                let gx = slot(grads, nodes, *x);
                for ch in 0..c {
                    let gp = &g[ch * plane..(ch + 1) * plane];
                    for (a, k) in gx[ch * n3..(ch + 1) * n3].iter_mut().zip(cell) {
                        *a += gp[*k] / counts[*k];
                    }
                }
            }
            Op::Bilinear { plane, taps } => {
                let s = &nodes[plane.0].value.shape;
                let (c, hw) = (s[0], s[1] * s[2]);
                let gp = slot(grads, nodes, *plane);
                for (row, tp) in g.chunks(c).zip(taps) {
                    for (ch, gv) in row.iter().enumerate() {
                        for (i, wt) in tp {
                            gp[ch * hw + i] += wt * gv;
                        }
                    }
                }
            }
            Op::RowNormalize(x) => {
                let d = node.value.shape[1];
                let xv = &nodes[x.0].value.data;
                let gx = slot(grads, nodes, *x);
                for ((yr, gr), (xr, out)) in node
                    .value
                    .data
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(xv.chunks(d).zip(gx.chunks_mut(d)))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        out[k] += (gr[k] - yr[k] * yg) / n;
                    }
                }
            }
            Op::Sum(x) => {
                slot(grads, nodes, *x).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::DotConst { x, c } => {
                slot(grads, nodes, *x).iter_mut().zip(c).for_each(|(a, v)| *a += g[0] * v);
            }
            Op::Bce { pred, targets } => {
                let p = &nodes[pred.0].value.data;
                let n = p.len() as f64;
                let gx = slot(grads, nodes, *pred);
                for ((a, pv), y) in gx.iter_mut().zip(p).zip(targets) {
                    if *pv > BCE_EPS && *pv < 1.0 - BCE_EPS {
                        *a += g[0] * (pv - y) / (pv * (1.0 - pv)) / n;
                    }
                }
            }
            Op::QuatLoss { pred, coef } => {
                let gx = slot(grads, nodes, *pred);
                for (row, cf) in gx.chunks_mut(4).zip(coef) {
                    for k in 0..4 {
                        row[k] += g[0] * cf[k];
                    }
                }
            }
            Op::SqErr { pred, targets, gates, denom } => {
                let p = &nodes[pred.0].value.data;
                let gx = slot(grads, nodes, *pred);
                for (((a, pv), t), gt) in gx.iter_mut().zip(p).zip(targets).zip(gates) {
                    *a += g[0] * 2.0 * gt * (pv - t) / denom;
                }
            }
        }
    }
}

pub const BCE_EPS: f64 = 1e-7;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `-(y ln p + (1-y) ln(1-p))` with `p` clamped away from 0 and 1.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.s;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let n = g.spatial();
    let mut col = vec![0.0; g.cols() * n];
    let mut row = 0;
    for c in 0..g.cin {
        let src = &x[c * n..(c + 1) * n];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    // output x range with the input column in bounds
                    let x_lo = pw.saturating_sub(e);
                    let x_hi = (w + pw).saturating_sub(e).min(w);
                    for z in 0..d {
                        let iz = z + a;
                        if iz < pd || iz - pd >= d {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y + b;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let out_base = (z * h + y) * w;
                            let in_base = ((iz - pd) * h + (iy - ph)) * w;
                            if x_lo < x_hi {
                                dst[out_base + x_lo..out_base + x_hi].copy_from_slice(
                                    &src[in_base + x_lo + e - pw..in_base + x_hi + e - pw],
                                );
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let [d, h, w] = g.s;
    let [kd, kh, kw] = g.k;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let n = g.spatial();
    let mut row = 0;
    for c in 0..g.cin {
        let dst = &mut gx[c * n..(c + 1) * n];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * n..(row + 1) * n];
                    let x_lo = pw.saturating_sub(e);
                    let x_hi = (w + pw).saturating_sub(e).min(w);
                    for z in 0..d {
                        let iz = z + a;
                        if iz < pd || iz - pd >= d {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y + b;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let out_base = (z * h + y) * w;
                            let in_base = ((iz - pd) * h + (iy - ph)) * w;
                            for xx in x_lo..x_hi {
                                dst[in_base + xx + e - pw] += src[out_base + xx];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
