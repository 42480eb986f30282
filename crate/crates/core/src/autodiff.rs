//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Leaves are
//! created either as parameters (gradients wanted) or constants; operation
//! nodes require a gradient iff any input does, so frozen generator weights
//! never get gradient buffers. The op set is exactly what the generator,
//! discriminator, embedding backends and augmentations need.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::Tensor;

/// Sparse linear resampling of the spatial plane, applied identically to
/// every channel. Row `p` of `weights` lists `(source_pixel, weight)` pairs
/// for output pixel `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        let mut weights = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let fy = (oy as f64 + 0.5) * sy - 0.5;
                let fx = (ox as f64 + 0.5) * sx - 0.5;
                weights.push(bilinear_taps(fy, fx, in_h, in_w, false));
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            weights,
        }
    }

    /// Inverse-warp sampling: output pixel `(y, x)` reads the input at
    /// `source(y, x)` (pixel coordinates) with bilinear interpolation and
    /// reflection at the borders.
    pub fn warp(h: usize, w: usize, source: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut weights = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = source(y as f64, x as f64);
                weights.push(bilinear_taps(fy, fx, h, w, true));
            }
        }
        Self {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            weights,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let channels = x.numel() / (self.in_h * self.in_w);
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        let src = x.data();
        let mut out = vec![0.0; channels * out_plane];
        for c in 0..channels {
            let s = &src[c * in_plane..(c + 1) * in_plane];
            let o = &mut out[c * out_plane..(c + 1) * out_plane];
            for (p, taps) in self.weights.iter().enumerate() {
                o[p] = taps.iter().map(|&(q, w)| w * s[q]).sum();
            }
        }
        Tensor::new(vec![channels, self.out_h, self.out_w], out).expect("resample shape")
    }

    fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let in_plane = self.in_h * self.in_w;
        let out_plane = self.out_h * self.out_w;
        let channels = g.numel() / out_plane;
        let gd = g.data();
        let mut out = vec![0.0; channels * in_plane];
        for c in 0..channels {
            let gs = &gd[c * out_plane..(c + 1) * out_plane];
            let o = &mut out[c * in_plane..(c + 1) * in_plane];
            for (p, taps) in self.weights.iter().enumerate() {
                for &(q, w) in taps {
                    o[q] += w * gs[p];
                }
            }
        }
        Tensor::new(vec![channels, self.in_h, self.in_w], out).expect("resample shape")
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn bilinear_taps(fy: f64, fx: f64, h: usize, w: usize, reflecting: bool) -> Vec<(usize, f64)> {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let ty = fy - y0;
    let tx = fx - x0;
    let idx = |i: isize, n: usize| -> usize {
        if reflecting {
            reflect(i, n)
        } else {
            i.clamp(0, n as isize - 1) as usize
        }
    };
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
            let weight = wy * wx;
            if weight == 0.0 {
                continue;
            }
            let q = idx(y0 as isize + dy, h) * w + idx(x0 as isize + dx, w);
            match taps.iter_mut().find(|(p, _)| *p == q) {
                Some(t) => t.1 += weight,
                None => taps.push((q, weight)),
            }
        }
    }
    taps
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Sqrt(usize),
    Scale(usize, f64),
    Offset(usize),
    LeakyRelu { x: usize, slope: f64, gain: f64 },
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    MatVec { w: usize, x: usize },
    Reshape(usize),
    Concat(Vec<usize>),
    Conv2d { x: usize, k: usize },
    ChannelBias { x: usize, b: usize },
    AddNoise { x: usize, strength: usize, noise: Rc<Tensor> },
    ScaleInChannels { k: usize, s: usize },
    Demodulate { k: usize, eps: f64 },
    SpatialBroadcastAdd { k: usize, d: usize },
    Upsample2x(usize),
    AvgPool2(usize),
    Resample { x: usize, map: Arc<SpatialMap> },
    Contrast { x: usize, factor: f64 },
    Saturation { x: usize, factor: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`]; only parameter leaves keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    /// Number of gradient buffers still held after the pass.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let mut data = Vec::new();
        for &i in &ids {
            data.extend_from_slice(self.value_of(i).data());
        }
        let rg = self.requires(&ids);
        self.push(Tensor::from_vec(data), Op::Concat(ids), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contribution) in backprop(&nodes, node, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Gradients { grads }
    }
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g.clone()
    } else {
        Tensor::new(shape.to_vec(), vec![g.sum()]).expect("scalar reduction")
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.same_shape(b) {
        a.zip_map(b, f)
    } else if b.numel() == 1 {
        let s = b.item();
        a.map(|v| f(v, s))
    } else if a.numel() == 1 {
        let s = a.item();
        b.map(|v| f(s, v))
    } else {
        panic!("incompatible shapes {:?} and {:?}", a.shape(), b.shape())
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| nodes[i].value.as_ref();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(&g.scale(-1.0), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let ga = broadcast_binary(g, val(*b), |g, b| g * b);
            let gb = broadcast_binary(g, val(*a), |g, a| g * a);
            vec![
                (*a, reduce_to(&ga, val(*a).shape())),
                (*b, reduce_to(&gb, val(*b).shape())),
            ]
        }
        Op::Div(a, b) => {
            let ga = broadcast_binary(g, val(*b), |g, b| g / b);
            // d(a/b)/db = -(a/b)/b = -y/b
            let yb = broadcast_binary(&node.value, val(*b), |y, b| -y / b);
            let gb = g.zip_map(&yb, |g, v| g * v);
            vec![
                (*a, reduce_to(&ga, val(*a).shape())),
                (*b, reduce_to(&gb, val(*b).shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.scale(-1.0))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(&node.value, |g, y| 0.5 * g / y))],
        Op::Scale(a, f) => vec![(*a, g.scale(*f))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::LeakyRelu { x, slope, gain } => {
            let s = *slope;
            let k = *gain;
            vec![(
                *x,
                g.zip_map(val(*x), |g, x| if x >= 0.0 { g * k } else { g * k * s }),
            )]
        }
        Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::Dot(a, b) => {
            let s = g.item();
            vec![(*a, val(*b).scale(s)), (*b, val(*a).scale(s))]
        }
        Op::MatVec { w, x } => {
            let wv = val(*w);
            let xv = val(*x);
            let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
            let gd = g.data();
            let mut gw = vec![0.0; rows * cols];
            let mut gx = vec![0.0; cols];
            for r in 0..rows {
                let gr = gd[r];
                let wrow = &wv.data()[r * cols..(r + 1) * cols];
                let gwrow = &mut gw[r * cols..(r + 1) * cols];
                for ((gwv, &xval), (gxv, &wval)) in gwrow
                    .iter_mut()
                    .zip(xv.data())
                    .zip(gx.iter_mut().zip(wrow))
                {
                    *gwv = gr * xval;
                    *gxv += gr * wval;
                }
            }
            vec![
                (*w, Tensor::new(vec![rows, cols], gw).unwrap()),
                (*x, Tensor::new(xv.shape().to_vec(), gx).unwrap()),
            ]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()).unwrap())],
        Op::Concat(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|&i| {
                    let v = val(i);
                    let n = v.numel();
                    let part = Tensor::new(
                        v.shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .unwrap();
                    offset += n;
                    (i, part)
                })
                .collect()
        }
        Op::Conv2d { x, k } => {
            let (gx, gk) = conv2d_backward(val(*x), val(*k), g);
            vec![(*x, gx), (*k, gk)]
        }
        Op::ChannelBias { x, b } => {
            let c = val(*b).numel();
            let plane = g.numel() / c;
            let gb: Vec<f64> = (0..c)
                .map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().sum())
                .collect();
            vec![(*x, g.clone()), (*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap())]
        }
        Op::AddNoise { x, strength, noise } => {
            let plane = noise.numel();
            let gs: f64 = g
                .data()
                .chunks(plane)
                .map(|chunk| chunk.iter().zip(noise.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            vec![
                (*x, g.clone()),
                (*strength, Tensor::new(val(*strength).shape().to_vec(), vec![gs]).unwrap()),
            ]
        }
        Op::ScaleInChannels { k, s } => {
            let kv = val(*k);
            let sv = val(*s);
            let sh = kv.shape();
            let (o_ch, i_ch) = (sh[0], sh[1]);
            let taps = sh[2] * sh[3];
            let mut gk = vec![0.0; kv.numel()];
            let mut gs = vec![0.0; i_ch];
            for o in 0..o_ch {
                for (i, gsi) in gs.iter_mut().enumerate() {
                    let base = (o * i_ch + i) * taps;
                    let si = sv.data()[i];
                    for t in 0..taps {
                        gk[base + t] = g.data()[base + t] * si;
                        *gsi += g.data()[base + t] * kv.data()[base + t];
                    }
                }
            }
            vec![
                (*k, Tensor::new(sh.to_vec(), gk).unwrap()),
                (*s, Tensor::new(sv.shape().to_vec(), gs).unwrap()),
            ]
        }
        Op::Demodulate { k, eps } => {
            let kv = val(*k);
            let o_ch = kv.shape()[0];
            let row = kv.numel() / o_ch;
            let mut gk = vec![0.0; kv.numel()];
            for o in 0..o_ch {
                let kr = &kv.data()[o * row..(o + 1) * row];
                let gr = &g.data()[o * row..(o + 1) * row];
                let ss: f64 = kr.iter().map(|v| v * v).sum();
                let d = 1.0 / (ss + eps).sqrt();
                let gdotk: f64 = kr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let d3 = d * d * d;
                for j in 0..row {
                    gk[o * row + j] = d * gr[j] - d3 * kr[j] * gdotk;
                }
            }
            vec![(*k, Tensor::new(kv.shape().to_vec(), gk).unwrap())]
        }
        Op::SpatialBroadcastAdd { k, d } => {
            let dv = val(*d);
            let taps = g.numel() / dv.numel();
            let gd: Vec<f64> = g.data().chunks(taps).map(|c| c.iter().sum()).collect();
            vec![(*k, g.clone()), (*d, Tensor::new(dv.shape().to_vec(), gd).unwrap())]
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let sh = xv.shape();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let mut gx = vec![0.0; xv.numel()];
            let gd = g.data();
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        gx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![(*x, Tensor::new(sh.to_vec(), gx).unwrap())]
        }
        Op::AvgPool2(x) => {
            let xv = val(*x);
            let sh = xv.shape();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![0.0; xv.numel()];
            let gd = g.data();
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(ch * h + y) * w + xx] = 0.25 * gd[(ch * oh + y / 2) * ow + xx / 2];
                    }
                }
            }
            vec![(*x, Tensor::new(sh.to_vec(), gx).unwrap())]
        }
        Op::Resample { x, map } => vec![(*x, map.apply_transpose(g))],
        Op::Contrast { x, factor } => {
            let f = *factor;
            let m = g.mean();
            vec![(*x, g.map(|gv| f * gv + (1.0 - f) * m))]
        }
        Op::Saturation { x, factor } => {
            let f = *factor;
            let sh = g.shape();
            let (c, plane) = (sh[0], sh[1] * sh[2]);
            let gd = g.data();
            let mut gx = vec![0.0; g.numel()];
            for p in 0..plane {
                let mean: f64 = (0..c).map(|ch| gd[ch * plane + p]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    gx[ch * plane + p] = f * gd[ch * plane + p] + (1.0 - f) * mean;
                }
            }
            vec![(*x, Tensor::new(sh.to_vec(), gx).unwrap())]
        }
    }
}

/// Same-padded, stride-1 2-D convolution of a `C × H × W` input with an
/// `O × C × K × K` kernel (odd `K`).
pub fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o_ch, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    assert_eq!(c, kc, "conv2d channel mismatch");
    let (py, px) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let mut out = vec![0.0; o_ch * plane];
    let xd = x.data();
    let kd = k.data();
    for o in 0..o_ch {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        for ci in 0..c {
            let xin = &xd[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - py;
                for kx in 0..kw {
                    let dx = kx as isize - px;
                    let wv = kd[((o * c + ci) * kh + ky) * kw + kx];
                    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst = &mut out_o[y * w + x0..y * w + x1];
                        let src = &xin[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o_ch, h, w], out).unwrap()
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o_ch, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (py, px) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; k.numel()];
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    for o in 0..o_ch {
        let g_o = &gd[o * plane..(o + 1) * plane];
        for ci in 0..c {
            let xin = &xd[ci * plane..(ci + 1) * plane];
            let gxin = &mut gx[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - py;
                for kx in 0..kw {
                    let dx = kx as isize - px;
                    let kidx = ((o * c + ci) * kh + ky) * kw + kx;
                    let wv = kd[kidx];
                    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let lo = (src_row as isize + x0 as isize + dx) as usize;
                        let hi = (src_row as isize + x1 as isize + dx) as usize;
                        let gs = &g_o[y * w + x0..y * w + x1];
                        acc += gs.iter().zip(&xin[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                        for (d, s) in gxin[lo..hi].iter_mut().zip(gs) {
                            *d += wv * s;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
    )
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = xd[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, 2 * h, 2 * w], out).unwrap()
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| xd[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(ch * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

// Graph ops take `Var` by value and record a node, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a / b);
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'g> {
        let v = self.value().scale(-1.0);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let v = self.value().scale(factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn offset(self, constant: f64) -> Var<'g> {
        let v = self.value().map(|x| x + constant);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn leaky_relu(self, slope: f64, gain: f64) -> Var<'g> {
        let v = self
            .value()
            .map(|x| if x >= 0.0 { gain * x } else { gain * slope * x });
        self.unary(v, Op::LeakyRelu { x: self.id, slope, gain })
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        let v = Tensor::scalar(self.value().dot(&other.value()));
        self.binary(other, v, Op::Dot(self.id, other.id))
    }

    pub fn norm(self) -> Var<'g> {
        self.dot(self).sqrt()
    }

    /// `self` is an `R × C` matrix, `x` a length-`C` vector.
    pub fn matvec(self, x: Var<'g>) -> Var<'g> {
        let w = self.value();
        let xv = x.value();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(cols, xv.numel(), "matvec dimension mismatch");
        let out: Vec<f64> = w
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(xv.data()).map(|(a, b)| a * b).sum())
            .collect();
        let v = Tensor::new(vec![rows], out).unwrap();
        self.binary(x, v, Op::MatVec { w: self.id, x: x.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape");
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn flatten(self) -> Var<'g> {
        let n = self.value().numel();
        self.reshape(&[n])
    }

    pub fn conv2d(self, kernel: Var<'g>) -> Var<'g> {
        let v = conv2d(&self.value(), &kernel.value());
        self.binary(kernel, v, Op::Conv2d { x: self.id, k: kernel.id })
    }

    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let plane = x.numel() / b.numel();
        let mut out = x.data().to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.binary(bias, v, Op::ChannelBias { x: self.id, b: bias.id })
    }

    /// Adds `strength * noise` where `noise` is a single `H × W` plane shared by all channels.
    pub fn add_noise(self, strength: Var<'g>, noise: Rc<Tensor>) -> Var<'g> {
        let x = self.value();
        let s = strength.item();
        let plane = noise.numel();
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(plane) {
            for (v, n) in chunk.iter_mut().zip(noise.data()) {
                *v += s * n;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.binary(
            strength,
            v,
            Op::AddNoise { x: self.id, strength: strength.id, noise },
        )
    }

    /// Scales an `O × I × K × K` kernel along its input-channel axis.
    pub fn scale_in_channels(self, style: Var<'g>) -> Var<'g> {
        let k = self.value();
        let s = style.value();
        let sh = k.shape();
        assert_eq!(sh[1], s.numel(), "style length must equal kernel input channels");
        let taps = sh[2] * sh[3];
        let mut out = k.data().to_vec();
        for (idx, chunk) in out.chunks_mut(taps).enumerate() {
            let si = s.data()[idx % sh[1]];
            chunk.iter_mut().for_each(|v| *v *= si);
        }
        let v = Tensor::new(sh.to_vec(), out).unwrap();
        self.binary(style, v, Op::ScaleInChannels { k: self.id, s: style.id })
    }

    /// Rescales each output channel of a kernel to unit L2 norm: `k / sqrt(sum k^2 + eps)`.
    pub fn demodulate(self, eps: f64) -> Var<'g> {
        let k = self.value();
        let o_ch = k.shape()[0];
        let row = k.numel() / o_ch;
        let mut out = k.data().to_vec();
        for chunk in out.chunks_mut(row) {
            let ss: f64 = chunk.iter().map(|v| v * v).sum();
            let d = 1.0 / (ss + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v *= d);
        }
        let v = Tensor::new(k.shape().to_vec(), out).unwrap();
        self.unary(v, Op::Demodulate { k: self.id, eps })
    }

    /// Adds an `O × I × 1 × 1` offset to every spatial tap of an `O × I × K × K` kernel.
    pub fn add_spatial_broadcast(self, delta: Var<'g>) -> Var<'g> {
        let k = self.value();
        let d = delta.value();
        let taps = k.numel() / d.numel();
        let mut out = k.data().to_vec();
        for (chunk, dv) in out.chunks_mut(taps).zip(d.data()) {
            chunk.iter_mut().for_each(|v| *v += dv);
        }
        let v = Tensor::new(k.shape().to_vec(), out).unwrap();
        self.binary(delta, v, Op::SpatialBroadcastAdd { k: self.id, d: delta.id })
    }

    pub fn upsample2x(self) -> Var<'g> {
        let v = upsample2x(&self.value());
        self.unary(v, Op::Upsample2x(self.id))
    }

    pub fn avg_pool2(self) -> Var<'g> {
        let v = avg_pool2(&self.value());
        self.unary(v, Op::AvgPool2(self.id))
    }

    pub fn resample(self, map: Arc<SpatialMap>) -> Var<'g> {
        let v = map.apply(&self.value());
        self.unary(v, Op::Resample { x: self.id, map })
    }

    /// `factor * x + (1 - factor) * mean(x)`.
    pub fn contrast(self, factor: f64) -> Var<'g> {
        let x = self.value();
        let m = x.mean();
        let v = x.map(|v| factor * v + (1.0 - factor) * m);
        self.unary(v, Op::Contrast { x: self.id, factor })
    }

    /// Blends every pixel toward its channel mean: `factor * x + (1 - factor) * gray`.
    pub fn saturation(self, factor: f64) -> Var<'g> {
        let x = self.value();
        let sh = x.shape();
        let (c, plane) = (sh[0], sh[1] * sh[2]);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for p in 0..plane {
            let gray: f64 = (0..c).map(|ch| xd[ch * plane + p]).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[ch * plane + p] = factor * xd[ch * plane + p] + (1.0 - factor) * gray;
            }
        }
        let v = Tensor::new(sh.to_vec(), out).unwrap();
        self.unary(v, Op::Saturation { x: self.id, factor })
    }

    /// Cosine similarity of two vectors.
    pub fn cosine(self, other: Var<'g>) -> Var<'g> {
        self.dot(other).div(self.norm().mul(other.norm()))
    }

    /// `self / |self|`.
    pub fn normalize(self) -> Var<'g> {
        self.div(self.norm())
    }
}
