use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Mean of absolute values; recorded as `abs` followed by `mean`.
    MeanAbs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Scale(Var, f64),
    BroadcastAdd(Var, Var),
    ChannelMix { x: Var, weight: Var, bias: Var },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: f64 },
    Reduce { x: Var, map: Vec<usize>, scale: f64 },
    Reshape(Var),
    PixelWeightedSum { x: Var, weights: Var },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    ConcatChannels(Vec<Var>),
    Shift { x: Var, dy: isize, dx: isize },
    Gather { x: Var, index: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Scale(..) => "scale",
            Op::BroadcastAdd(..) => "broadcast_add",
            Op::ChannelMix { .. } => "channel_mix",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(_) => "reshape",
            Op::PixelWeightedSum { .. } => "pixel_weighted_sum",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Shift { .. } => "shift",
            Op::Gather { .. } => "gather",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Normalization guard used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered record of executed operations.
///
/// Every op appends one node; a node requires grad when any input does.
/// [`Tape::backward`] consumes the tape and returns gradients for every node
/// that requires them.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    non_finite: Option<(usize, &'static str)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            non_finite: None,
        }
    }

    /// Enables the per-op finiteness scan regardless of build profile.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First op that produced a non-finite value, when scanning is enabled.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let t = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        );
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds a `C×1×1` grid to every pixel of a `C×H×W` grid.
    pub fn broadcast_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(b) != [c, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "broadcast_add: {:?} onto {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let vb = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i / hw])
            .collect();
        let t = Tensor::from_parts(vec![c, h, w], data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::BroadcastAdd(x, b), rg))
    }

    /// Per-pixel affine map across channels (a 1×1 convolution).
    pub fn channel_mix(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(x).chw()?;
        let (cout, wcin) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "channel_mix weight must be rank 2, got {s:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "channel_mix weight {:?} against input channels {cin}",
                self.shape(weight)
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "channel_mix bias {:?} for {cout} outputs",
                self.shape(bias)
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            let row = &mut out[o * hw..(o + 1) * hw];
            row.iter_mut().for_each(|v| *v = bv[o]);
            for i in 0..cin {
                let wt = wv[o * cin + i];
                let plane = &xv[i * hw..(i + 1) * hw];
                for (r, &p) in row.iter_mut().zip(plane) {
                    *r += wt * p;
                }
            }
        }
        let t = Tensor::from_parts(vec![cout, h, w], out);
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(t, Op::ChannelMix { x, weight, bias }, rg))
    }

    /// Softmax over every element, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::EmptyInput("softmax"));
        }
        let t = Tensor::from_parts(va.shape().to_vec(), softmax_values(va.data()));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Zero-mean, unit-variance normalization over every element (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::EmptyInput("layer_norm"));
        }
        let n = va.len() as f64;
        let mean = va.sum() / n;
        let var = va
            .data()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let data = va.data().iter().map(|x| (x - mean) * inv_std).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { x: a, inv_std }, rg))
    }

    pub fn layer_norm_relu(&mut self, a: Var) -> Result<Var> {
        let n = self.layer_norm(a)?;
        Ok(self.relu(n))
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut keep = vec![true; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::BadAxis { axis: ax, rank });
            }
            keep[ax] = false;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&n, _)| n)
            .collect();
        let reduced: usize = shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| !k)
            .map(|(&n, _)| n)
            .product();
        let src = match kind {
            ReduceKind::MeanAbs => self.abs(x),
            _ => x,
        };
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean | ReduceKind::MeanAbs => 1.0 / reduced.max(1) as f64,
        };
        let map = reduce_map(&shape, &keep);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in self.value(src).data().iter().zip(&map) {
            out[o] += v;
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let t = Tensor::from_parts(out_shape, out);
        let rg = self.rg(src);
        Ok(self.push(t, Op::Reduce { x: src, map, scale }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceKind::Sum, &axes)
            .expect("all axes are valid")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[c] = Σ_p weights[p] · x[c, p]` for `x: C×H×W`, `weights: 1×H×W`.
    pub fn pixel_weighted_sum(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(weights) != [1, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "pixel weights {:?} for feature {:?}",
                self.shape(weights),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let wv = self.value(weights).data();
        let out = (0..c)
            .map(|k| {
                xv[k * hw..(k + 1) * hw]
                    .iter()
                    .zip(wv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let t = Tensor::from_parts(vec![c, 1, 1], out);
        let rg = self.rg(x) || self.rg(weights);
        Ok(self.push(t, Op::PixelWeightedSum { x, weights }, rg))
    }

    /// Non-overlapping `k×k` average pooling; extents must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool {k} on {:?}",
                self.shape(x)
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * oh + i / k) * ow + j / k] += xv[(ch * h + i) * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::from_parts(vec![c, oh, ow], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool { x, k }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if k == 0 {
            return Err(Error::ShapeMismatch("upsample factor 0".into()));
        }
        let (oh, ow) = (h * k, w * k);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = xv[(ch * h + i / k) * w + j / k];
                }
            }
        }
        let t = Tensor::from_parts(vec![c, oh, ow], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample { x, k }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_channels"));
        }
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} vs {h}×{w}",
                    self.shape(p)
                )));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_parts(vec![c_total, h, w], data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// `out[c,i,j] = x[c, i+dy, j+dx]`, zero outside the grid.
    pub fn shift(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for_each_shifted(c, h, w, dy, dx, |dst, src| out[dst] = xv[src]);
        let t = Tensor::from_parts(vec![c, h, w], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Shift { x, dy, dx }, rg))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::ShapeMismatch(format!(
                "gather index {bad} out of {} elements",
                xv.len()
            )));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        let t = Tensor::from_parts(vec![index.len()], data);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce: {} logits vs {} targets",
                lv.len(),
                targets.len()
            )));
        }
        let data = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .collect();
        let t = Tensor::from_parts(lv.shape().to_vec(), data);
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element output. Consumes the tape.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        if let Some((id, name)) = self.non_finite {
            return Err(Error::NonFiniteValue(format!("{name} (node {id})")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(output) {
            return Ok(Gradients {
                grads,
                nodes: self.nodes,
            });
        }
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            nodes: self.nodes,
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += 2.0 * x * g;
                    }
                });
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += sign(*x) * g;
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)
                });
            }
            Op::BroadcastAdd(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                let hw = g.len() / self.nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for (c, s) in s.iter_mut().enumerate() {
                        *s += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::ChannelMix { x, weight, bias } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[weight.0].value;
                let (cin, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let cout = wt.shape()[0];
                let hw = h * w;
                let (xv, wv) = (xt.data(), wt.data());
                acc(*x, &mut |s| {
                    for o in 0..cout {
                        let go = &g[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            let wgt = wv[o * cin + i];
                            for (s, g) in s[i * hw..(i + 1) * hw].iter_mut().zip(go) {
                                *s += wgt * g;
                            }
                        }
                    }
                });
                acc(*weight, &mut |s| {
                    for o in 0..cout {
                        let go = &g[o * hw..(o + 1) * hw];
                        for i in 0..cin {
                            let plane = &xv[i * hw..(i + 1) * hw];
                            s[o * cin + i] += go.iter().zip(plane).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for (o, s) in s.iter_mut().enumerate() {
                        *s += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                acc(*a, &mut |s| {
                    for ((s, y), g) in s.iter_mut().zip(y).zip(g) {
                        *s += y * (g - dot);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = y.len() as f64;
                let g_mean = g.iter().sum::<f64>() / n;
                let gy_mean = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n;
                acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += inv_std * (g - g_mean - y * gy_mean);
                    }
                });
            }
            Op::Reduce { x, map, scale } => {
                acc(*x, &mut |s| {
                    for (s, &o) in s.iter_mut().zip(map) {
                        *s += scale * g[o];
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::PixelWeightedSum { x, weights } => {
                let xv = val(*x);
                let wv = val(*weights);
                let hw = wv.len();
                acc(*x, &mut |s| {
                    for (c, gc) in g.iter().enumerate() {
                        for (s, w) in s[c * hw..(c + 1) * hw].iter_mut().zip(wv) {
                            *s += gc * w;
                        }
                    }
                });
                acc(*weights, &mut |s| {
                    for (c, gc) in g.iter().enumerate() {
                        for (s, x) in s.iter_mut().zip(&xv[c * hw..(c + 1) * hw]) {
                            *s += gc * x;
                        }
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let shp = self.nodes[x.0].value.shape();
                let (c, h, w) = (shp[0], shp[1], shp[2]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                s[(ch * h + i) * w + j] += inv * g[(ch * oh + i / k) * ow + j / k];
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, k } => {
                let shp = self.nodes[x.0].value.shape();
                let (c, h, w) = (shp[0], shp[1], shp[2]);
                let (oh, ow) = (h * k, w * k);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                s[(ch * h + i / k) * w + j / k] += g[(ch * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Shift { x, dy, dx } => {
                let shp = self.nodes[x.0].value.shape();
                let (c, h, w) = (shp[0], shp[1], shp[2]);
                acc(*x, &mut |s| {
                    for_each_shifted(c, h, w, *dy, *dx, |dst, src| s[src] += g[dst])
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |s| {
                    for (&i, g) in index.iter().zip(g) {
                        s[i] += g;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                acc(*logits, &mut |s| {
                    for (((s, g), z), y) in s.iter_mut().zip(g).zip(z).zip(targets) {
                        *s += g * (sigmoid(*z) - y);
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`]; also retains forward values.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    nodes: Vec<Node>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    /// Gradient for a trainable leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn reduce_map(shape: &[usize], keep: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for ((&i, &ext), &k) in idx.iter().zip(shape).zip(keep) {
            if k {
                o = o * ext + i;
            }
        }
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn for_each_shifted(
    c: usize,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    mut f: impl FnMut(usize, usize),
) {
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                f(
                    (ch * h + i) * w + j,
                    (ch * h + si as usize) * w + sj as usize,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1], &[10.0, 20.0]));
        let b = tape.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let y = tape.broadcast_add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0]);
    }

    #[test]
    fn broadcast_add_rejects_bad_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(matches!(
            tape.broadcast_add(x, b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.square(x);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn mismatched_add_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.sub(a, b).is_err());
    }

    #[test]
    fn channel_mix_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::normal(&[3, 2, 2], 1.0, &mut rng);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w = tape.constant(t(&[3, 3], &eye));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.channel_mix(x, w, b).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn channel_mix_constant_input_linearity() {
        let a = 1.5;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 3], a));
        // rows sum to s = 0.75 and -2.0
        let w = tape.constant(t(&[2, 2], &[0.25, 0.5, -3.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.1, 0.2]));
        let y = tape.channel_mix(x, w, b).unwrap();
        let v = tape.value(y);
        for k in 0..6 {
            assert!((v.data()[k] - (a * 0.75 + 0.1)).abs() < 1e-15);
            assert!((v.data()[6 + k] - (a * -2.0 + 0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mix_matches_per_pixel_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::normal(&[3, 2, 2], 1.0, &mut rng);
        let w0 = Tensor::normal(&[4, 3], 1.0, &mut rng);
        let b0 = Tensor::normal(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w = tape.constant(w0.clone());
        let b = tape.constant(b0.clone());
        let y = tape.channel_mix(x, w, b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for o in 0..4 {
                    let mut e = b0.get(&[o]);
                    for c in 0..3 {
                        e += w0.get(&[o, c]) * x0.get(&[c, i, j]);
                    }
                    assert!((tape.value(y).get(&[o, i, j]) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mix_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.channel_mix(x, w, b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 2.5));
        let y = tape.softmax(x).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 + 1e-12);
    }

    #[test]
    fn softmax_empty_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0]));
        assert_eq!(tape.softmax(x).unwrap_err(), Error::EmptyInput("softmax"));
    }

    #[test]
    fn layer_norm_relu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 1, 1], 4.0));
        let y = tape.layer_norm_relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let x = tape.constant(t(&[2, 1, 1], &[1.0, -1.0]));
        let y = tape.layer_norm_relu(x).unwrap();
        let v = tape.value(y).data();
        // variance 1, so the ε guard perturbs by ~5e-6
        assert!((v[0] - 1.0).abs() < 1e-5 && v[1] == 0.0);
    }

    #[test]
    fn layer_norm_relu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::normal(&[5, 1, 1], 1.0, &mut rng);
        let probe = Tensor::normal(&[5, 1, 1], 1.0, &mut rng);
        let f = |x: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(x.clone());
            let p = tape.constant(probe.clone());
            let y = tape.layer_norm_relu(x).unwrap();
            let z = tape.mul(y, p).unwrap();
            let s = tape.sum_all(z);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let p = tape.constant(probe.clone());
        let y = tape.layer_norm_relu(x).unwrap();
        let z = tape.mul(y, p).unwrap();
        let s = tape.sum_all(z);
        let g = tape.backward(s).unwrap().wrt(x);
        let fd = finite_diff_grad(f, &x0, 1e-5);
        assert!(max_rel_error(&g, &fd) < 1e-6, "{g:?} vs {fd:?}");
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1], &[-2.0, 4.0]));
        let y = tape.reduce(x, ReduceKind::MeanAbs, &[0]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[3.0]);

        let x = tape.constant(Tensor::full(&[2, 2], 1.0));
        let y = tape.reduce(x, ReduceKind::Sum, &[0, 1]).unwrap();
        assert_eq!(tape.value(y).item(), 4.0);

        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.reduce(x, ReduceKind::Mean, &[1, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn reduce_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(
            tape.reduce(x, ReduceKind::Sum, &[2]).unwrap_err(),
            Error::BadAxis { axis: 2, rank: 2 }
        );
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x);
        let s = tape.sum_all(y);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_independent_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.sum_all(c);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_not_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x).unwrap_err(), Error::NotScalar(vec![2]));
    }

    #[test]
    fn backward_flags_non_finite() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.param(t(&[1], &[1e200]));
        let y = tape.square(x);
        let s = tape.sum_all(y);
        assert!(matches!(tape.backward(s), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x * x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -2.0]));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let s = tape.sum_all(y);
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[4.0, -3.0]);
    }

    #[test]
    fn bce_single_cell_logit_zero_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[1], &[0.0]));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pool_upsample_shift_gather_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.avg_pool(x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        let u = tape.upsample(p, 2).unwrap();
        assert_eq!(tape.value(u).data(), &[2.5; 4]);
        let s = tape.shift(x, 1, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 0.0, 0.0]);
        let g = tape.gather(x, &[3, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[4.0, 1.0]);
        assert!(tape.avg_pool(x, 3).is_err());
    }
}
