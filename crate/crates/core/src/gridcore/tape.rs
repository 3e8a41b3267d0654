//! Reverse-mode recording of grid operations.
//!
//! A [`Tape`] stores every forward value together with the op that produced
//! it. [`Tape::backward`] walks the nodes in reverse and calls each op's
//! adjoint, so a node is an [`AdjointRecord`]: retained inputs plus a gradient
//! buffer of the same shape as its value. The op set is closed; composite
//! modules (CIA, CCC, IAF, detection heads) are built from these ops only.

use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{
    conv_backward, conv_forward, pool_forward, resize_backward, resize_forward,
    softmax_groups_backward, softmax_groups_forward, BilinearCorners,
};
use super::params::{ChannelNorm, Conv, ParamId, ParamStore};
use super::{sigmoid, Activation, ConvGeom, FeatureGrid, PoolMode};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared sampling positions `(row, col)` for gather/fill/deformable ops.
pub type Positions = Rc<Vec<(usize, usize)>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Pool { x: Var, mode: PoolMode, arg: Vec<usize> },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    BroadcastMul { map: Var, x: Var },
    Affine { x: Var, scale: f64 },
    Concat { xs: Vec<Var> },
    Slice { x: Var, start: usize },
    Resize { x: Var },
    SoftmaxGroups { x: Var, group: usize },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Gather { x: Var, pos: Positions },
    Fill { base: Var, values: Var, pos: Positions },
    DeformAggregate(Box<DeformRecord>),
    MaxOf { xs: Vec<Var>, arg: Vec<u8> },
    Sum { x: Var },
    SmoothL1 { pred: Var, target: Rc<FeatureGrid>, mask: Rc<Vec<bool>>, beta: f64, count: usize },
    Focal { logits: Var, labels: Rc<Vec<bool>>, alpha: f64, gamma: f64 },
    RoundF32 { x: Var },
}

#[derive(Clone, Debug)]
struct DeformRecord {
    sources: Vec<Var>,
    offsets: Var,
    weights: Var,
    pos: Positions,
    heads: usize,
    points: usize,
}

#[derive(Debug)]
struct Node {
    value: FeatureGrid,
    op: Op,
}

/// Forward values plus the information needed to run their adjoints.
pub type AdjointRecord = Tape;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<FeatureGrid>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&FeatureGrid> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled if the loss does not depend on it.
    pub fn wrt(&self, v: Var, like: &FeatureGrid) -> FeatureGrid {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| FeatureGrid::zeros(like.channels(), like.height(), like.width()))
    }

    /// Flat gradient per parameter that took part in the forward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g.data().to_vec())))
            .collect()
    }
}

fn add_into(slot: &mut Option<FeatureGrid>, g: FeatureGrid) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn flat(data: Vec<f64>) -> FeatureGrid {
    let n = data.len();
    FeatureGrid::new(n, 1, 1, data).expect("flat grid")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureGrid, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &FeatureGrid {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (its gradient is reported by [`Gradients::get`]).
    pub fn leaf(&mut self, value: FeatureGrid) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that are never differentiated.
    pub fn constant(&mut self, value: FeatureGrid) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter tensor as a flat `(n, 1, 1)` grid; registered once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(flat(store.get(id).data.clone()), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv(&mut self, x: Var, conv: &Conv, store: &ParamStore) -> Result<Var> {
        let w = self.param(store, conv.weight);
        let b = self.param(store, conv.bias);
        self.conv_raw(x, w, b, conv.geom)
    }

    /// Convolution with weight/bias supplied as flat tape values.
    pub fn conv_raw(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        if self.value(w).len() != geom.weight_len() || self.value(b).len() != geom.out_channels {
            return Err(shape_err!("conv weight/bias length does not match geometry"));
        }
        let out = conv_forward(self.value(x), &geom, self.value(w).data(), self.value(b).data())?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let g = self.value(x);
        if g.channels() == 0 {
            return Err(shape_err!("pool over zero channels"));
        }
        let (out, arg) = pool_forward(g, mode);
        let out = FeatureGrid::new(1, g.height(), g.width(), out)?;
        Ok(self.push(out, Op::Pool { x, mode, arg }))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.act(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| shape_err!("add_all of nothing"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// `map (1,H,W) ⊙ x (C,H,W)` with the map broadcast over channels.
    pub fn broadcast_mul(&mut self, map: Var, x: Var) -> Result<Var> {
        let m = self.value(map);
        let g = self.value(x);
        if m.channels() != 1 || m.height() != g.height() || m.width() != g.width() {
            return Err(shape_err!(
                "broadcast_mul map {:?} vs grid {:?}",
                m.shape(),
                g.shape()
            ));
        }
        let n = g.plane_len();
        let mut out = g.clone();
        for c in 0..g.channels() {
            for (o, &mv) in out.data_mut()[c * n..(c + 1) * n].iter_mut().zip(m.data()) {
                *o *= mv;
            }
        }
        Ok(self.push(out, Op::BroadcastMul { map, x }))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let grids: Vec<&FeatureGrid> = xs.iter().map(|&v| self.value(v)).collect();
        let out = FeatureGrid::concat(&grids)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let g = self.value(x);
        if start + len > g.channels() || len == 0 {
            return Err(shape_err!(
                "slice {}..{} of {} channels",
                start,
                start + len,
                g.channels()
            ));
        }
        let n = g.plane_len();
        let data = g.data()[start * n..(start + len) * n].to_vec();
        let out = FeatureGrid::new(len, g.height(), g.width(), data)?;
        Ok(self.push(out, Op::Slice { x, start }))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(shape_err!("resize to zero dims"));
        }
        let out = resize_forward(self.value(x), h, w);
        Ok(self.push(out, Op::Resize { x }))
    }

    /// Softmax over consecutive channel groups of `group` channels at every cell.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let c = self.value(x).channels();
        if group == 0 || c % group != 0 {
            return Err(shape_err!("softmax group {} does not divide {} channels", group, c));
        }
        let out = softmax_groups_forward(self.value(x), group);
        Ok(self.push(out, Op::SoftmaxGroups { x, group }))
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let g = self.value(x);
        let (ga, be) = (self.value(gamma), self.value(beta));
        if ga.len() != g.channels() || be.len() != g.channels() {
            return Err(shape_err!("channel affine size mismatch"));
        }
        let n = g.plane_len();
        let mut out = g.clone();
        for c in 0..g.channels() {
            let (s, t) = (ga.data()[c], be.data()[c]);
            out.data_mut()[c * n..(c + 1) * n]
                .iter_mut()
                .for_each(|v| *v = s * *v + t);
        }
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }))
    }

    pub fn norm(&mut self, x: Var, norm: &ChannelNorm, store: &ParamStore) -> Result<Var> {
        let g = self.param(store, norm.gamma);
        let b = self.param(store, norm.beta);
        self.channel_affine(x, g, b)
    }

    /// Columns of `x` at `pos` as a `(C, N, 1)` grid.
    pub fn gather(&mut self, x: Var, pos: Positions) -> Result<Var> {
        let g = self.value(x);
        let (c, h, w) = g.shape();
        if pos.iter().any(|&(r, cc)| r >= h || cc >= w) {
            return Err(shape_err!("gather position out of bounds"));
        }
        let n = pos.len();
        let mut out = FeatureGrid::zeros(c, n, 1);
        for ch in 0..c {
            let plane = g.channel(ch);
            for (i, &(r, cc)) in pos.iter().enumerate() {
                out.data_mut()[ch * n + i] = plane[r * w + cc];
            }
        }
        Ok(self.push(out, Op::Gather { x, pos }))
    }

    /// `base` with the columns at `pos` replaced by `values (C, N, 1)`.
    pub fn fill(&mut self, base: Var, values: Var, pos: Positions) -> Result<Var> {
        let b = self.value(base);
        let v = self.value(values);
        let (c, h, w) = b.shape();
        if v.channels() != c || v.height() != pos.len() || v.width() != 1 {
            return Err(shape_err!("fill values {:?} for {} positions", v.shape(), pos.len()));
        }
        if pos.iter().any(|&(r, cc)| r >= h || cc >= w) {
            return Err(shape_err!("fill position out of bounds"));
        }
        let n = pos.len();
        let mut out = b.clone();
        for ch in 0..c {
            for (i, &(r, cc)) in pos.iter().enumerate() {
                out.data_mut()[(ch * h + r) * w + cc] = v.data()[ch * n + i];
            }
        }
        Ok(self.push(out, Op::Fill { base, values, pos }))
    }

    /// Deformable sampling plus attention-weighted sum.
    ///
    /// `offsets` is `(A·K·M·2, N, 1)` ordered `((a·K + k)·M + m)·2 + {dx, dy}`
    /// in cells; `weights` is `(A·K·M, N, 1)` in the same order. The output is
    /// `(A·C, N, 1)`: per head, `Σ_k Σ_m w · sample(source_k, pos + offset)`.
    pub fn deform_aggregate(
        &mut self,
        sources: &[Var],
        offsets: Var,
        weights: Var,
        pos: Positions,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let k_count = sources.len();
        let n = pos.len();
        if k_count == 0 {
            return Err(shape_err!("deform_aggregate needs at least one source"));
        }
        let (c, h, w) = self.value(sources[0]).shape();
        if sources.iter().any(|&s| self.value(s).shape() != (c, h, w)) {
            return Err(shape_err!("deform sources differ in shape"));
        }
        let samples = heads * k_count * points;
        if self.value(offsets).shape() != (samples * 2, n, 1) || self.value(weights).shape() != (samples, n, 1) {
            return Err(shape_err!(
                "deform offsets {:?} / weights {:?} for {} samples and {} refs",
                self.value(offsets).shape(),
                self.value(weights).shape(),
                samples,
                n
            ));
        }
        let off = self.value(offsets).data();
        let wts = self.value(weights).data();
        let mut out = FeatureGrid::zeros(heads * c, n, 1);
        for a in 0..heads {
            for k in 0..k_count {
                let src = self.value(sources[k]);
                for m in 0..points {
                    let s = (a * k_count + k) * points + m;
                    for (i, &(r, cc)) in pos.iter().enumerate() {
                        let x = cc as f64 + off[(2 * s) * n + i];
                        let y = r as f64 + off[(2 * s + 1) * n + i];
                        let corners = BilinearCorners::new(h, w, x, y);
                        let wt = wts[s * n + i];
                        for ch in 0..c {
                            out.data_mut()[(a * c + ch) * n + i] += wt * corners.sample(src.channel(ch));
                        }
                    }
                }
            }
        }
        let rec = DeformRecord {
            sources: sources.to_vec(),
            offsets,
            weights,
            pos,
            heads,
            points,
        };
        Ok(self.push(out, Op::DeformAggregate(Box::new(rec))))
    }

    /// Elementwise maximum over same-shaped values.
    pub fn max_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("max_of nothing"))?;
        let mut out = self.value(first).clone();
        let mut arg = vec![0u8; out.len()];
        for (j, &x) in xs.iter().enumerate().skip(1) {
            let g = self.value(x);
            if !g.same_shape(&out) {
                return Err(shape_err!("max_of shape mismatch"));
            }
            for (i, (o, &v)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
                if v > *o {
                    *o = v;
                    arg[i] = j as u8;
                }
            }
        }
        Ok(self.push(out, Op::MaxOf { xs: xs.to_vec(), arg }))
    }

    /// Sum of all elements as a `(1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(FeatureGrid::filled(1, 1, 1, s), Op::Sum { x })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Smooth-L1 averaged over all channels of the cells where `mask` is set.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Rc<FeatureGrid>,
        mask: Rc<Vec<bool>>,
        beta: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if !p.same_shape(&target) || mask.len() != p.plane_len() {
            return Err(shape_err!("smooth_l1 shape mismatch"));
        }
        let n = p.plane_len();
        let cells = mask.iter().filter(|&&m| m).count();
        let count = cells * p.channels();
        let mut total = 0.0;
        for c in 0..p.channels() {
            for i in (0..n).filter(|&i| mask[i]) {
                total += smooth_l1_term(p.data()[c * n + i] - target.data()[c * n + i], beta);
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            FeatureGrid::filled(1, 1, 1, value),
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
                count,
            },
        ))
    }

    /// Focal loss on `(2, H, W)` logits (channel 0 background, 1 foreground).
    pub fn focal(&mut self, logits: Var, labels: Rc<Vec<bool>>, alpha: f64, gamma: f64) -> Result<Var> {
        let l = self.value(logits);
        if l.channels() != 2 || labels.len() != l.plane_len() {
            return Err(shape_err!("focal expects (2,H,W) logits and H·W labels"));
        }
        let n = l.plane_len();
        let mut total = 0.0;
        for (i, &fg) in labels.iter().enumerate() {
            let z = l.data()[n + i] - l.data()[i];
            total += focal_term(if fg { z } else { -z }, if fg { alpha } else { 1.0 - alpha }, gamma).0;
        }
        let value = total / n as f64;
        Ok(self.push(
            FeatureGrid::filled(1, 1, 1, value),
            Op::Focal {
                logits,
                labels,
                alpha,
                gamma,
            },
        ))
    }

    /// Round to 32-bit precision; the adjoint passes gradients straight through.
    pub fn round_f32(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v as f32 as f64);
        self.push(out, Op::RoundF32 { x })
    }

    /// Reverse sweep from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<FeatureGrid>> = vec![None; self.nodes.len()];
        let seed = self.value(output).map(|_| 1.0);
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn propagate(&self, idx: usize, g: &FeatureGrid, grads: &mut [Option<FeatureGrid>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv_backward(self.value(*x), geom, self.value(*w).data(), g);
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], flat(dw));
                add_into(&mut grads[b.0], flat(db));
            }
            Op::Pool { x, mode, arg } => {
                let xv = self.value(*x);
                let (c, h, w) = xv.shape();
                let n = h * w;
                let mut dx = FeatureGrid::zeros(c, h, w);
                match mode {
                    PoolMode::Avg => {
                        let inv = 1.0 / c as f64;
                        for ch in 0..c {
                            for (d, &gv) in dx.channel_mut(ch).iter_mut().zip(g.data()) {
                                *d = gv * inv;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (i, &gv) in g.data().iter().enumerate() {
                            dx.data_mut()[arg[i] * n + i] = gv;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                    *d *= kind.derivative(xi, yi);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::Sub { a, b } => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let da = g.zip_map(self.value(*b), |d, v| d * v).expect("shape");
                let db = g.zip_map(self.value(*a), |d, v| d * v).expect("shape");
                add_into(&mut grads[a.0], da);
                add_into(&mut grads[b.0], db);
            }
            Op::BroadcastMul { map, x } => {
                let m = self.value(*map);
                let xv = self.value(*x);
                let (c, h, w) = xv.shape();
                let n = h * w;
                let mut dm = FeatureGrid::zeros(1, h, w);
                let mut dx = g.clone();
                for ch in 0..c {
                    for i in 0..n {
                        let gi = g.data()[ch * n + i];
                        dm.data_mut()[i] += gi * xv.data()[ch * n + i];
                        dx.data_mut()[ch * n + i] = gi * m.data()[i];
                    }
                }
                add_into(&mut grads[map.0], dm);
                add_into(&mut grads[x.0], dx);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                add_into(&mut grads[x.0], g.map(|v| v * s));
            }
            Op::Concat { xs } => {
                let n = g.plane_len();
                let mut start = 0;
                for x in xs {
                    let (c, h, w) = self.shape(*x);
                    let part = FeatureGrid::new(c, h, w, g.data()[start * n..(start + c) * n].to_vec())
                        .expect("concat slice");
                    add_into(&mut grads[x.0], part);
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let (c, h, w) = self.shape(*x);
                let n = h * w;
                let mut dx = FeatureGrid::zeros(c, h, w);
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                add_into(&mut grads[x.0], dx);
            }
            Op::Resize { x } => {
                let (_, h, w) = self.shape(*x);
                add_into(&mut grads[x.0], resize_backward(g, h, w));
            }
            Op::SoftmaxGroups { x, group } => {
                add_into(&mut grads[x.0], softmax_groups_backward(y, g, *group));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let ga = self.value(*gamma);
                let (c, h, w) = xv.shape();
                let n = h * w;
                let mut dx = g.clone();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let s = ga.data()[ch];
                    for i in ch * n..(ch + 1) * n {
                        let gi = g.data()[i];
                        dg[ch] += gi * xv.data()[i];
                        db[ch] += gi;
                        dx.data_mut()[i] = gi * s;
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[gamma.0], flat(dg));
                add_into(&mut grads[beta.0], flat(db));
            }
            Op::Gather { x, pos } => {
                let (c, h, w) = self.shape(*x);
                let n = pos.len();
                let mut dx = FeatureGrid::zeros(c, h, w);
                for ch in 0..c {
                    for (i, &(r, cc)) in pos.iter().enumerate() {
                        dx.data_mut()[(ch * h + r) * w + cc] += g.data()[ch * n + i];
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Fill { base, values, pos } => {
                let (c, h, w) = self.shape(*base);
                let n = pos.len();
                let mut db = g.clone();
                let mut dv = FeatureGrid::zeros(c, n, 1);
                for ch in 0..c {
                    for (i, &(r, cc)) in pos.iter().enumerate() {
                        let j = (ch * h + r) * w + cc;
                        dv.data_mut()[ch * n + i] = g.data()[j];
                        db.data_mut()[j] = 0.0;
                    }
                }
                add_into(&mut grads[base.0], db);
                add_into(&mut grads[values.0], dv);
            }
            Op::DeformAggregate(rec) => self.deform_backward(rec, g, grads),
            Op::MaxOf { xs, arg } => {
                let (c, h, w) = y.shape();
                let mut parts: Vec<FeatureGrid> = xs.iter().map(|_| FeatureGrid::zeros(c, h, w)).collect();
                for (i, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                    parts[a as usize].data_mut()[i] = gv;
                }
                for (x, p) in xs.iter().zip(parts) {
                    add_into(&mut grads[x.0], p);
                }
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                add_into(&mut grads[x.0], self.value(*x).map(|_| s));
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
                count,
            } => {
                let p = self.value(*pred);
                let mut dp = FeatureGrid::zeros(p.channels(), p.height(), p.width());
                if *count > 0 {
                    let scale = g.data()[0] / *count as f64;
                    let n = p.plane_len();
                    for c in 0..p.channels() {
                        for i in (0..n).filter(|&i| mask[i]) {
                            let j = c * n + i;
                            let d = p.data()[j] - target.data()[j];
                            dp.data_mut()[j] = scale * smooth_l1_slope(d, *beta);
                        }
                    }
                }
                add_into(&mut grads[pred.0], dp);
            }
            Op::Focal {
                logits,
                labels,
                alpha,
                gamma,
            } => {
                let l = self.value(*logits);
                let n = l.plane_len();
                let scale = g.data()[0] / n as f64;
                let mut dl = FeatureGrid::zeros(2, l.height(), l.width());
                for (i, &fg) in labels.iter().enumerate() {
                    let z = l.data()[n + i] - l.data()[i];
                    let (sign, at) = if fg { (1.0, *alpha) } else { (-1.0, 1.0 - *alpha) };
                    let (_, du) = focal_term(sign * z, at, *gamma);
                    let dz = scale * sign * du;
                    dl.data_mut()[n + i] = dz;
                    dl.data_mut()[i] = -dz;
                }
                add_into(&mut grads[logits.0], dl);
            }
            Op::RoundF32 { x } => add_into(&mut grads[x.0], g.clone()),
        }
    }

    fn deform_backward(&self, rec: &DeformRecord, g: &FeatureGrid, grads: &mut [Option<FeatureGrid>]) {
        let k_count = rec.sources.len();
        let n = rec.pos.len();
        let (c, h, w) = self.shape(rec.sources[0]);
        let off = self.value(rec.offsets).data();
        let wts = self.value(rec.weights).data();
        let mut d_off = vec![0.0; off.len()];
        let mut d_w = vec![0.0; wts.len()];
        let mut d_src: Vec<FeatureGrid> = (0..k_count).map(|_| FeatureGrid::zeros(c, h, w)).collect();
        for a in 0..rec.heads {
            for k in 0..k_count {
                let src = self.value(rec.sources[k]);
                for m in 0..rec.points {
                    let s = (a * k_count + k) * rec.points + m;
                    for (i, &(r, cc)) in rec.pos.iter().enumerate() {
                        let x = cc as f64 + off[(2 * s) * n + i];
                        let y = r as f64 + off[(2 * s + 1) * n + i];
                        let corners = BilinearCorners::new(h, w, x, y);
                        let cw = corners.weights();
                        let (fx, fy) = (corners.fx, corners.fy);
                        let wt = wts[s * n + i];
                        let mut dw_acc = 0.0;
                        let mut dx_acc = 0.0;
                        let mut dy_acc = 0.0;
                        for ch in 0..c {
                            let go = g.data()[(a * c + ch) * n + i];
                            if go == 0.0 {
                                continue;
                            }
                            let plane = src.channel(ch);
                            let [va, vb, vc, vd] = corners.values(plane);
                            let sample = cw[0] * va + cw[1] * vb + cw[2] * vc + cw[3] * vd;
                            dw_acc += go * sample;
                            dx_acc += go * ((1.0 - fy) * (vb - va) + fy * (vd - vc));
                            dy_acc += go * ((1.0 - fx) * (vc - va) + fx * (vd - vb));
                            let dplane = d_src[k].channel_mut(ch);
                            for (corner, weight) in corners.idx.iter().zip(cw) {
                                if let Some(j) = corner {
                                    dplane[*j] += wt * weight * go;
                                }
                            }
                        }
                        d_w[s * n + i] += dw_acc;
                        d_off[(2 * s) * n + i] += wt * dx_acc;
                        d_off[(2 * s + 1) * n + i] += wt * dy_acc;
                    }
                }
            }
        }
        let (oc, oh, ow) = self.shape(rec.offsets);
        add_into(&mut grads[rec.offsets.0], FeatureGrid::new(oc, oh, ow, d_off).expect("offset grad"));
        let (wc, wh, ww) = self.shape(rec.weights);
        add_into(&mut grads[rec.weights.0], FeatureGrid::new(wc, wh, ww, d_w).expect("weight grad"));
        for (src, d) in rec.sources.iter().zip(d_src) {
            add_into(&mut grads[src.0], d);
        }
    }
}

#[inline]
pub(crate) fn smooth_l1_term(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub(crate) fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal term and its derivative w.r.t. the signed margin `u`, where
/// `p_t = sigmoid(u)`: returns `(-α (1-p_t)^γ log p_t, d/du)`.
#[inline]
pub(crate) fn focal_term(u: f64, alpha_t: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(u);
    let q = sigmoid(-u);
    let log_p = -softplus(-u);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -alpha_t * qg * log_p;
    let d = -alpha_t * (-gamma * qg * p * log_p + qg * q);
    (loss, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(FeatureGrid::filled(2, 2, 2, 3.0));
        let y = t.affine(x, 3.0, 1.0);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(FeatureGrid::filled(1, 1, 1, 2.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let u: f64 = 0.7;
        let (l, _) = focal_term(u, 0.5, 0.0);
        let ce = -(sigmoid(u)).ln();
        assert!((l - 0.5 * ce).abs() < 1e-15);
    }

    #[test]
    fn fill_leaves_other_cells_untouched() {
        let mut t = Tape::new();
        let base = t.leaf(FeatureGrid::from_fn(2, 3, 3, |c, h, w| (c * 9 + h * 3 + w) as f64));
        let vals = t.leaf(FeatureGrid::filled(2, 1, 1, -1.0));
        let f = t.fill(base, vals, Rc::new(vec![(1, 2)])).unwrap();
        let out = t.value(f);
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let expect = if (h, w) == (1, 2) { -1.0 } else { (c * 9 + h * 3 + w) as f64 };
                    assert_eq!(out.get(c, h, w), expect);
                }
            }
        }
    }
}
