//! Tape of tensor operations with exact reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order for the backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::real::{gemm, MatRef, Real};
use super::tensor::{numel, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics a batch-norm node normalises with.
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics waiting to be folded into a model's running buffers.
pub struct BnUpdate<T> {
    pub tag: u32,
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

type AxisTaps<T> = Vec<(usize, usize, T)>;

enum Op<T> {
    Leaf,
    Param { tag: u32, id: ParamId },
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Resize { x: Var, taps: [AxisTaps<T>; 3] },
    Crop { x: Var, offset: [usize; 3] },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<usize>, scale: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::ShapeMismatch(msg)
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Output positions `[lo, hi)` along one axis whose input tap `o·s + kk − pad`
/// falls inside `[0, len)`.
fn valid_range(len: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi = if len + pad > kk { ((len - 1 + pad - kk) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn k_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn p_cols(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(col_offset, input_row_offset, valid_out_range)` for every
    /// output row of every kernel tap; `None` means the row lies in padding.
    fn for_each_row(&self, mut f: impl FnMut(usize, Option<usize>, (usize, usize))) {
        let [d, h, w] = self.inp;
        let [od, oh, ow] = self.out;
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let p = self.p_cols();
        for ci in 0..self.cin {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let range = valid_range(w, ow, kw, s, pad);
                        for zd in 0..od {
                            let id = (zd * s + kd) as isize - pad as isize;
                            for yh in 0..oh {
                                let ih = (yh * s + kh) as isize - pad as isize;
                                let col_off = row * p + (zd * oh + yh) * ow;
                                if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                    f(col_off, None, range);
                                } else {
                                    let in_off = ((ci * d + id as usize) * h + ih as usize) * w;
                                    f(col_off, Some(in_off), range);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn kw_of_row(&self, col_off: usize) -> usize {
        (col_off / self.p_cols()) % self.k
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let ow = self.out[2];
        let (s, pad) = (self.stride, self.pad);
        self.for_each_row(|col_off, in_off, (lo, hi)| {
            let dst = &mut col[col_off..col_off + ow];
            match in_off {
                None => dst.fill(T::zero()),
                Some(base) => {
                    let kw = self.kw_of_row(col_off);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let start = base + lo * s + kw - pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&x[start..start + (hi - lo)]);
                        } else {
                            for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = x[start + i * s];
                            }
                        }
                    }
                }
            }
        });
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let (s, pad) = (self.stride, self.pad);
        self.for_each_row(|col_off, in_off, (lo, hi)| {
            if let Some(base) = in_off {
                if lo < hi {
                    let kw = self.kw_of_row(col_off);
                    let start = base + lo * s + kw - pad;
                    let src = &col[col_off + lo..col_off + hi];
                    for (i, &v) in src.iter().enumerate() {
                        dx[start + i * s] += v;
                    }
                }
            }
        });
    }
}

/// Per-axis `(i0, i1, λ)` taps for align-corners-false linear resizing.
fn resize_taps<T: Real>(inp: usize, out: usize) -> AxisTaps<T> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (Float::floor(src) as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::cst(lambda))
        })
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Input leaf whose gradient is kept after [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Binds a stored parameter. Frozen parameters and buffers enter as
    /// constants, so no gradient is ever allocated for them.
    pub fn param(&mut self, tag: u32, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.wants_grad();
        self.push(p.tensor.clone(), rg, Op::Param { tag, id })
    }

    pub fn param_grads(&self, tag: u32) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(move |n| match (&n.op, &n.grad) {
            (Op::Param { tag: t, id }, Some(g)) if *t == tag => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    pub fn bn_updates(&self, tag: u32) -> impl Iterator<Item = &BnUpdate<T>> {
        self.bn_updates.iter().filter(move |u| u.tag == tag)
    }

    pub fn record_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// 3-D cross-correlation. `w` is `(C_out, C_in, k, k, k)`, `b` is `(C_out, 1, 1, 1, 1)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if ws[3] != k || ws[4] != k || k == 0 {
            return Err(shape_err(format!("conv weight must be cubic, got {ws:?}")));
        }
        if xs[1] != cin {
            return Err(shape_err(format!("conv input {xs:?} vs weight {ws:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape_err(format!("conv bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let inp = [xs[2], xs[3], xs[4]];
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = conv_out(inp[a], k, stride, pad)
                .ok_or_else(|| shape_err(format!("kernel {k} larger than padded input {inp:?}")))?;
        }
        let geom = ConvGeom { cin, k, stride, pad, inp, out };
        let (kr, p) = (geom.k_rows(), geom.p_cols());
        let n = xs[0];
        let mut y = vec![T::zero(); n * cout * p];
        let xin = self.value(x).data();
        let wd = self.value(w).data();
        let in_len = cin * inp.iter().product::<usize>();
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * p] };
        for i in 0..n {
            let xi = &xin[i * in_len..(i + 1) * in_len];
            let colref = if geom.is_pointwise() {
                xi
            } else {
                geom.im2col(xi, &mut col);
                &col
            };
            gemm(MatRef::new(wd, cout, kr), MatRef::new(colref, kr, p), &mut y[i * cout * p..(i + 1) * cout * p], false);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (ch, yc) in y.chunks_mut(p).enumerate() {
                let bv = bd[ch % cout];
                yc.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new([n, cout, out[0], out[1], out[2]], y)?;
        Ok(self.push(t, rg, Op::Conv { x, w, b, stride, pad }))
    }

    /// Pointwise channel mixing; `w` is `(C_out, C_in, 1, 1, 1)`.
    pub fn conv1x1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws[2..] != [1, 1, 1] {
            return Err(shape_err(format!("pointwise weight must be (C_out, C_in, 1, 1, 1), got {ws:?}")));
        }
        self.conv3d(x, w, b, 1, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu { x })
    }

    /// Elementwise sum; `b` may have batch size 1 and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[1..] != sb[1..] || !(sb[0] == sa[0] || sb[0] == 1) {
            return Err(shape_err(format!("add {sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data();
        let per = numel(sb) / sb[0];
        let data: Vec<T> = self.value(a).data().iter().enumerate().map(|(i, &v)| v + bd[i % (per * sb[0])]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa, data)?, rg, Op::Add { a, b }))
    }

    /// Channel-axis concatenation, operands in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err("empty concat".into()))?).shape();
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err(format!("concat {s:?} with {first:?}")));
            }
            c_total += s[1];
        }
        let sp: usize = first[2..].iter().product();
        let n = first[0];
        let mut data = Vec::with_capacity(n * c_total * sp);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[1] * sp;
                data.extend_from_slice(&v.data()[i * chunk..(i + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let shape = [n, c_total, first[2], first[3], first[4]];
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// Per-channel normalisation. With [`BnStats::Batch`] the batch mean and
    /// unbiased variance are returned for the caller's running statistics.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, stats: BnStats<'_, T>) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.value(x).shape();
        let (n, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(shape_err(format!("batch norm params for {c} channels")));
        }
        let m = n * sp;
        let eps = T::cst(BN_EPS);
        let xd = self.value(x).data();
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        let mut returned = None;
        let train = matches!(stats, BnStats::Batch);
        match stats {
            BnStats::Batch => {
                if m < 2 {
                    return Err(shape_err(format!("batch norm needs at least 2 values per channel, got {m}")));
                }
                let mut unbiased = vec![T::zero(); c];
                let mf = T::cst(m as f64);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for i in 0..n {
                        sum += xd[(i * c + ch) * sp..(i * c + ch + 1) * sp].iter().copied().sum::<T>();
                    }
                    let mu = sum / mf;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * sp..(i * c + ch + 1) * sp] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    let var = sq / mf;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    unbiased[ch] = sq / T::cst((m - 1) as f64);
                }
                returned = Some((mean.clone(), unbiased));
            }
            BnStats::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("running stats length".into()));
                }
                for ch in 0..c {
                    mean[ch] = rm[ch];
                    inv_std[ch] = T::one() / (rv[ch] + eps).sqrt();
                }
            }
        }
        let g = self.value(scale).data();
        let bsh = self.value(shift).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                for j in r {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = g[ch] * h + bsh[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        let v = self.push(Tensor::new(s, y)?, rg, Op::BatchNorm { x, scale, shift, xhat, inv_std, train });
        Ok((v, returned))
    }

    /// Spatial mean per channel: `(N, C, D, H, W) → (N, C, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let sp = v.spatial_len();
        let inv = T::one() / T::cst(sp as f64);
        let data = v.data().chunks(sp).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new([s[0], s[1], 1, 1, 1], data).expect("pooled shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::GlobalAvgPool { x })
    }

    /// Dense layer on the flattened per-sample features. `w` is `(O, F, 1, 1, 1)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let n = xs[0];
        let f = xs[1..].iter().product::<usize>();
        let o = ws[0];
        if ws[1..].iter().product::<usize>() != f || self.value(b).numel() != o {
            return Err(shape_err(format!("fully connected {xs:?} with weight {ws:?}")));
        }
        let mut y = vec![T::zero(); n * o];
        gemm(MatRef::new(self.value(x).data(), n, f), MatRef::new(self.value(w).data(), o, f).t(), &mut y, false);
        let bd = self.value(b).data();
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(bd).for_each(|(v, &bb)| *v += bb);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new([n, o, 1, 1, 1], y)?, rg, Op::Linear { x, w, b }))
    }

    /// Trilinear resize to `out` spatial dims (align-corners-false).
    pub fn resize_trilinear(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if out.iter().any(|&o| o == 0) {
            return Err(shape_err(format!("resize to {out:?}")));
        }
        let taps: [AxisTaps<T>; 3] = core::array::from_fn(|a| resize_taps(s[2 + a], out[a]));
        let [d, h, w] = [s[2], s[3], s[4]];
        let osp = out[0] * out[1] * out[2];
        let mut y = vec![T::zero(); s[0] * s[1] * osp];
        let one = T::one();
        for (nc, src) in v.data().chunks(d * h * w).enumerate() {
            let dst = &mut y[nc * osp..(nc + 1) * osp];
            let mut o = 0;
            for &(z0, z1, lz) in &taps[0] {
                for &(y0, y1, ly) in &taps[1] {
                    let r00 = (z0 * h + y0) * w;
                    let r01 = (z0 * h + y1) * w;
                    let r10 = (z1 * h + y0) * w;
                    let r11 = (z1 * h + y1) * w;
                    let (wz0, wy0) = (one - lz, one - ly);
                    for &(x0, x1, lx) in &taps[2] {
                        let wx0 = one - lx;
                        let lerp = |r: usize| src[r + x0] * wx0 + src[r + x1] * lx;
                        dst[o] = wz0 * (wy0 * lerp(r00) + ly * lerp(r01)) + lz * (wy0 * lerp(r10) + ly * lerp(r11));
                        o += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([s[0], s[1], out[0], out[1], out[2]], y)?, rg, Op::Resize { x, taps }))
    }

    /// Integer-factor trilinear upsampling.
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(shape_err("upsample factor must be positive".into()));
        }
        let sp = self.value(x).spatial();
        self.resize_trilinear(x, [sp[0] * factor, sp[1] * factor, sp[2] * factor])
    }

    /// Spatial sub-box `[offset, offset + dims)`.
    pub fn crop(&mut self, x: Var, offset: [usize; 3], dims: [usize; 3]) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if (0..3).any(|a| offset[a] + dims[a] > s[2 + a]) {
            return Err(shape_err(format!("crop {offset:?}+{dims:?} from {s:?}")));
        }
        let (h, w) = (s[3], s[4]);
        let sp = s[2] * h * w;
        let mut y = Vec::with_capacity(s[0] * s[1] * dims.iter().product::<usize>());
        for src in v.data().chunks(sp) {
            for z in 0..dims[0] {
                for yy in 0..dims[1] {
                    let base = ((offset[0] + z) * h + offset[1] + yy) * w + offset[2];
                    y.extend_from_slice(&src[base..base + dims[2]]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([s[0], s[1], dims[0], dims[1], dims[2]], y)?, rg, Op::Crop { x, offset }))
    }

    /// Mean cross-entropy of the channel-axis softmax against integer labels,
    /// one label per `(sample, voxel)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.softmax_cross_entropy_weighted(logits, labels, None)
    }

    /// As [`Graph::softmax_cross_entropy`], with per-class weights and the
    /// loss normalised by the summed weight of the labels present.
    pub fn softmax_cross_entropy_weighted(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        let (n, c) = (s[0], s[1]);
        let sp = v.spatial_len();
        if labels.len() != n * sp {
            return Err(shape_err(format!("{} labels for logits {s:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::BadLabel(bad));
        }
        if let Some(cw) = class_weights {
            if cw.len() != c {
                return Err(shape_err("class weight count".into()));
            }
        }
        let ld = v.data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut weights = Vec::with_capacity(labels.len());
        let mut total = T::zero();
        let mut loss = T::zero();
        for i in 0..n {
            let base = i * c * sp;
            for j in 0..sp {
                let at = |k: usize| base + k * sp + j;
                let mx = (0..c).map(|k| ld[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (ld[at(k)] - mx).exp();
                    probs[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[at(k)] = probs[at(k)] / z;
                }
                let l = labels[i * sp + j];
                let wgt = class_weights.map_or(T::one(), |cw| cw[l]);
                // −log softmax = log z − (x_l − max)
                loss += wgt * (z.ln() - (ld[at(l)] - mx));
                weights.push(wgt);
                total += wgt;
            }
        }
        if total <= T::zero() {
            return Err(shape_err("zero total class weight".into()));
        }
        let scale: Vec<T> = weights.into_iter().map(|w| w / total).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / total),
            rg,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), scale },
        ))
    }

    /// Scalar `Σ wᵢ·xᵢ`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != weights.len() {
            return Err(shape_err(format!("{} weights for {} values", weights.len(), v.numel())));
        }
        let s = v.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights: weights.to_vec() }))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward needs a scalar loss".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let contribs = self.node_backward(i, &gy);
            for (v, g) in contribs {
                self.accumulate(v, g);
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param { .. }) {
                self.nodes[i].grad = Some(gy);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn node_backward(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|&w| w * gy[0]).collect()));
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let g = xd.iter().zip(gy).map(|(&a, &d)| if a > T::zero() { d } else { T::zero() }).collect();
                out.push((*x, g));
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let mut g = vec![T::zero(); nb];
                    for (j, &d) in gy.iter().enumerate() {
                        g[j % nb] += d;
                    }
                    out.push((*b, g));
                }
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let sp: usize = s[2..].iter().product();
                let n = s[0];
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(n * pc * sp);
                        for b in 0..n {
                            let start = (b * s[1] + c_off) * sp;
                            g.extend_from_slice(&gy[start..start + pc * sp]);
                        }
                        out.push((p, g));
                    }
                    c_off += pc;
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let gam = self.value(*scale).data();
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                        for j in r {
                            dscale[ch] += gy[j] * xhat[j];
                            dshift[ch] += gy[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = T::cst((n * sp) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                            for j in r {
                                dx[j] = if *train {
                                    // dxhat = gy·γ; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ dxhat·xhat)
                                    k * (gy[j] - dshift[ch] / m - xhat[j] * dscale[ch] / m)
                                } else {
                                    k * gy[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*scale) {
                    out.push((*scale, dscale));
                }
                if self.rg(*shift) {
                    out.push((*shift, dshift));
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let sp = xv.spatial_len();
                let inv = T::one() / T::cst(sp as f64);
                let mut g = Vec::with_capacity(xv.numel());
                for &d in gy {
                    g.extend(core::iter::repeat(d * inv).take(sp));
                }
                out.push((*x, g));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let f = xv.numel() / n;
                let o = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(MatRef::new(gy, n, o), MatRef::new(self.value(*w).data(), o, f), &mut dx, false);
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(MatRef::new(gy, n, o).t(), MatRef::new(xv.data(), n, f), &mut dw, false);
                    out.push((*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Resize { x, taps } => {
                let xs = self.value(*x).shape();
                let [h, w] = [xs[3], xs[4]];
                let isp = xs[2] * h * w;
                let osp = taps[0].len() * taps[1].len() * taps[2].len();
                let mut dx = vec![T::zero(); xs[0] * xs[1] * isp];
                let one = T::one();
                for (nc, dsrc) in gy.chunks(osp).enumerate() {
                    let dst = &mut dx[nc * isp..(nc + 1) * isp];
                    let mut o = 0;
                    for &(z0, z1, lz) in &taps[0] {
                        for &(y0, y1, ly) in &taps[1] {
                            let rows = [
                                ((z0 * h + y0) * w, (one - lz) * (one - ly)),
                                ((z0 * h + y1) * w, (one - lz) * ly),
                                ((z1 * h + y0) * w, lz * (one - ly)),
                                ((z1 * h + y1) * w, lz * ly),
                            ];
                            for &(x0, x1, lx) in &taps[2] {
                                let d = dsrc[o];
                                for &(r, wr) in &rows {
                                    dst[r + x0] += d * wr * (one - lx);
                                    dst[r + x1] += d * wr * lx;
                                }
                                o += 1;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Crop { x, offset } => {
                let xs = self.value(*x).shape();
                let os = node.value.shape();
                let (h, w) = (xs[3], xs[4]);
                let isp = xs[2] * h * w;
                let osp = os[2] * os[3] * os[4];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (nc, src) in gy.chunks(osp).enumerate() {
                    let mut k = 0;
                    for z in 0..os[2] {
                        for yy in 0..os[3] {
                            let base = nc * isp + ((offset[0] + z) * h + offset[1] + yy) * w + offset[2];
                            dx[base..base + os[4]].copy_from_slice(&src[k..k + os[4]]);
                            k += os[4];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxCe { logits, probs, labels, scale } => {
                let s = self.value(*logits).shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let g0 = gy[0];
                let mut dl = vec![T::zero(); probs.len()];
                for b in 0..n {
                    for j in 0..sp {
                        let f = g0 * scale[b * sp + j];
                        let lab = labels[b * sp + j];
                        for k in 0..c {
                            let at = (b * c + k) * sp + j;
                            let onehot = if k == lab { T::one() } else { T::zero() };
                            dl[at] = f * (probs[at] - onehot);
                        }
                    }
                }
                out.push((*logits, dl));
            }
            Op::Conv { x, w, b, stride, pad } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let os = node.value.shape();
                let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                let geom = ConvGeom {
                    cin,
                    k,
                    stride: *stride,
                    pad: *pad,
                    inp: [xs[2], xs[3], xs[4]],
                    out: [os[2], os[3], os[4]],
                };
                let (kr, p) = (geom.k_rows(), geom.p_cols());
                let n = xs[0];
                let in_len = cin * geom.inp.iter().product::<usize>();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = if need_w { vec![T::zero(); cout * kr] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut col = if geom.is_pointwise() || !need_w { Vec::new() } else { vec![T::zero(); kr * p] };
                let mut dcol = if need_x && !geom.is_pointwise() { vec![T::zero(); kr * p] } else { Vec::new() };
                for i in 0..n {
                    let gyi = &gy[i * cout * p..(i + 1) * cout * p];
                    let xi = &xd[i * in_len..(i + 1) * in_len];
                    if need_w {
                        let colref = if geom.is_pointwise() {
                            xi
                        } else {
                            geom.im2col(xi, &mut col);
                            &col
                        };
                        gemm(MatRef::new(gyi, cout, p), MatRef::new(colref, kr, p).t(), &mut dw, true);
                    }
                    if need_x {
                        let wt = MatRef::new(wd, cout, kr).t();
                        if geom.is_pointwise() {
                            gemm(wt, MatRef::new(gyi, cout, p), &mut dx[i * in_len..(i + 1) * in_len], false);
                        } else {
                            gemm(wt, MatRef::new(gyi, cout, p), &mut dcol, false);
                            geom.col2im(&dcol, &mut dx[i * in_len..(i + 1) * in_len]);
                        }
                    }
                }
                if need_x {
                    out.push((*x, dx));
                }
                if need_w {
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); cout];
                        for (ch, c) in gy.chunks(p).enumerate() {
                            db[ch % cout] += c.iter().copied().sum::<T>();
                        }
                        out.push((*b, db));
                    }
                }
            }
        }
        out
    }
}

/// Spatial output size of a convolution along one axis.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    conv_out(len, k, stride, pad)
}
