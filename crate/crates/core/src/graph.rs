//! Reverse-mode differentiation over 4-D feature tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`] and never copied onto the tape;
//! [`Tape::backward`] returns their gradients indexed by [`ParamId`].
//! Batch-norm running statistics produced in training mode are collected on
//! the tape and applied to the store afterwards with
//! [`ParamStore::apply_norm_updates`].

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::{sigmoid, Scalar};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics only.
    Eval,
}

enum Op<T> {
    Input,
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Array2<T>,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        xhat: Array4<T>,
        inv_std: Array1<T>,
        batch_stats: bool,
        beta: ParamId,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: Var,
    },
}

struct Node<T> {
    value: Array4<T>,
    op: Op<T>,
}

/// Running-statistic update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
}

pub struct Tape<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    norm_updates: Vec<NormUpdate<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<ArrayD<T>>>,
    nodes: Vec<Option<Array4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Array4<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> &[Option<ArrayD<T>>] {
        &self.params
    }

    pub fn into_param_grads(self) -> Vec<Option<ArrayD<T>>> {
        self.params
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn accumulate_dyn<T: Scalar>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Output side of a "same"-padded window op.
pub fn out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let ho = out_dim(h, k, stride, pad);
    let wo = out_dim(w, k, stride, pad);
    let spatial = ho * wo;
    let mut cols = Array2::<T>::zeros((c * k * k, n * spatial));
    let out = cols.as_slice_mut().expect("fresh array is contiguous");
    let row_len = n * spatial;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_slice = &mut out[row * row_len..(row + 1) * row_len];
                for b in 0..n {
                    let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let dst = &mut row_slice[b * spatial..(b + 1) * spatial];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: ArrayView2<T>, n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Array4<T> {
    let ho = out_dim(h, k, stride, pad);
    let wo = out_dim(w, k, stride, pad);
    let spatial = ho * wo;
    let mut out = Array4::<T>::zeros((n, c, h, w));
    let dst = out.as_slice_mut().expect("fresh array is contiguous");
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let row_len = n * spatial;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_slice = &src[row * row_len..(row + 1) * row_len];
                for b in 0..n {
                    let plane = &mut dst[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let s_b = &row_slice[b * spatial..(b + 1) * spatial];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s_b[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// (Co, N*S) -> (N, Co, S) as a 4-D array with the given spatial dims.
fn cols_to_nchw<T: Scalar>(m: &Array2<T>, n: usize, ho: usize, wo: usize) -> Array4<T> {
    let co = m.nrows();
    let spatial = ho * wo;
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    let dst = out.as_slice_mut().expect("contiguous");
    let m = m.as_standard_layout();
    let src = m.as_slice().expect("standard layout");
    for o in 0..co {
        for b in 0..n {
            let s0 = o * n * spatial + b * spatial;
            let d0 = (b * co + o) * spatial;
            dst[d0..d0 + spatial].copy_from_slice(&src[s0..s0 + spatial]);
        }
    }
    out
}

fn nchw_to_cols<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let spatial = h * w;
    let mut out = Array2::<T>::zeros((c, n * spatial));
    let dst = out.as_slice_mut().expect("contiguous");
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    for o in 0..c {
        for b in 0..n {
            let s0 = (b * c + o) * spatial;
            let d0 = o * n * spatial + b * spatial;
            dst[d0..d0 + spatial].copy_from_slice(&src[s0..s0 + spatial]);
        }
    }
    out
}

fn standard<T: Scalar>(a: Array4<T>) -> Array4<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, x: Array4<T>) -> Var {
        self.push(standard(x), Op::Input)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.nodes[v.0].value
    }

    pub fn channels(&self, v: Var) -> usize {
        self.nodes[v.0].value.dim().1
    }

    pub fn spatial(&self, v: Var) -> (usize, usize) {
        let (_, _, h, w) = self.nodes[v.0].value.dim();
        (h, w)
    }

    pub fn norm_updates(&self) -> &[NormUpdate<T>] {
        &self.norm_updates
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate<T>> {
        std::mem::take(&mut self.norm_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2-D convolution with "same" padding (`pad = kernel / 2`).
    pub fn conv(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, stride: usize, block: &str) -> Result<Var> {
        let w = &self.store.param(weight).value;
        let wshape = w.shape().to_vec();
        if wshape.len() != 4 {
            return Err(Error::config(block, "convolution weight must be 4-D"));
        }
        let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
        let (n, c, h, wd) = self.nodes[x.0].value.dim();
        if c != ci {
            return Err(Error::config(
                block,
                format!("input has {c} channels but the block expects {ci}"),
            ));
        }
        let pad = k / 2;
        let ho = out_dim(h, k, stride, pad);
        let wo = out_dim(wd, k, stride, pad);
        let xs = self.nodes[x.0].value.as_slice().expect("tape values are standard layout");
        let cols = im2col(xs, n, c, h, wd, k, stride, pad);
        let w2 = w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("conv weight is contiguous");
        let mut out2 = w2.dot(&cols);
        if let Some(b) = bias {
            let bv = &self.store.param(b).value;
            for (mut row, &bb) in out2.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row.mapv_inplace(|v| v + bb);
            }
        }
        let out = cols_to_nchw(&out2, n, ho, wo);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                kernel: k,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f64;
        let eps = T::of(BN_EPS);
        let g = &self.store.param(gamma).value;
        let bt = &self.store.param(beta).value;
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            for ch in 0..c {
                let plane = xv.slice(s![.., ch, .., ..]);
                let mu = plane.iter().map(|v| v.f64()).sum::<f64>() / m;
                let v = plane.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / m;
                mean[ch] = T::of(mu);
                var[ch] = T::of(v);
            }
            (mean, var)
        } else {
            let rm = &self.store.buffer(running_mean).value;
            let rv = &self.store.buffer(running_var).value;
            (
                Array1::from_iter(rm.iter().copied()),
                Array1::from_iter(rv.iter().copied()),
            )
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = xv.clone();
        let mut out = Array4::<T>::zeros((n, c, h, w));
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            let gg = g[[ch]];
            let bb = bt[[ch]];
            let mut xh = xhat.slice_mut(s![.., ch, .., ..]);
            xh.mapv_inplace(|v| (v - mu) * is);
            let mut o = out.slice_mut(s![.., ch, .., ..]);
            o.zip_mut_with(&xh, |o, &xh| *o = gg * xh + bb);
        }
        if batch_stats {
            // biased variance, so eval mode reproduces train mode on a fixed batch
            self.norm_updates.push(NormUpdate {
                mean_buffer: running_mean,
                var_buffer: running_var,
                batch_mean: mean,
                batch_var: var.clone(),
            });
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.dim() != bv.dim() {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let (n, _, h, w) = self.nodes[parts[0].0].value.dim();
        let mut total = 0;
        let mut recorded = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.nodes[p.0].value.dim();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    (n, h, w),
                    (pn, ph, pw)
                )));
            }
            recorded.push((p, pc));
            total += pc;
        }
        let mut out = Array4::<T>::zeros((n, total, h, w));
        let mut offset = 0;
        for &(p, pc) in &recorded {
            out.slice_mut(s![.., offset..offset + pc, .., ..])
                .assign(&self.nodes[p.0].value);
            offset += pc;
        }
        Ok(self.push(out, Op::Concat { parts: recorded }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.channels(x);
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let out = self.nodes[x.0]
            .value
            .slice(s![.., start..start + len, .., ..])
            .to_owned();
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Stride-1 max pooling with "same" padding; window must be odd.
    pub fn max_pool_same(&mut self, x: Var, kernel: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let pad = kernel / 2;
        let src = xv.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, h, w));
        let mut argmax = vec![0usize; n * c * h * w];
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..h {
                    let y0 = oy.saturating_sub(pad);
                    let y1 = (oy + pad + 1).min(h);
                    for ox in 0..w {
                        let x0 = ox.saturating_sub(pad);
                        let x1 = (ox + pad + 1).min(w);
                        let mut best = base + y0 * w + x0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let idx = base + iy * w + ix;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                        }
                        let o = base + oy * w + ox;
                        dst[o] = src[best];
                        argmax[o] = best;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Average pooling; padded positions are excluded from the divisor.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let ho = out_dim(h, kernel, stride, pad);
        let wo = out_dim(w, kernel, stride, pad);
        let src = xv.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, ho, wo));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    let (y0, y1) = window(oy, kernel, stride, pad, h);
                    for ox in 0..wo {
                        let (x0, x1) = window(ox, kernel, stride, pad, w);
                        let mut acc = T::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += src[base + iy * w + ix];
                            }
                        }
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        dst[plane * ho * wo + oy * wo + ox] = acc / T::of(count);
                    }
                }
            }
        }
        self.push(
            out,
            Op::AvgPool {
                x,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbour resampling to `(h, w)`; works for up- and down-sampling.
    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, ih, iw) = xv.dim();
        if (ih, iw) == (h, w) {
            let out = xv.clone();
            return self.push(out, Op::Resize { x });
        }
        let src = xv.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, h, w));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for plane in 0..n * c {
                for oy in 0..h {
                    let sy = oy * ih / h;
                    for ox in 0..w {
                        let sx = ox * iw / w;
                        dst[plane * h * w + oy * w + ox] = src[plane * ih * iw + sy * iw + sx];
                    }
                }
            }
        }
        self.push(out, Op::Resize { x })
    }

    /// Reverse pass seeded with `d(loss)/d(var)` for each listed output.
    pub fn backward(&self, seeds: Vec<(Var, Array4<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<ArrayD<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.dim() != self.nodes[v.0].value.dim() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.dim(),
                    self.nodes[v.0].value.dim()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let gout = standard(gout);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv {
                    x,
                    weight,
                    bias,
                    kernel,
                    stride,
                    pad,
                    cols,
                } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dim();
                    let wv = &self.store.param(*weight).value;
                    let co = wv.shape()[0];
                    let g2 = nchw_to_cols(&gout);
                    let dw = g2.dot(&cols.t());
                    let dw = dw
                        .into_shape_with_order(IxDyn(wv.shape()))
                        .expect("weight grad shape");
                    accumulate_dyn(&mut pgrads[weight.0], dw);
                    if let Some(b) = bias {
                        let db = g2.sum_axis(Axis(1)).into_dyn();
                        accumulate_dyn(&mut pgrads[b.0], db);
                    }
                    let w2 = wv
                        .view()
                        .into_shape_with_order((co, c * kernel * kernel))
                        .expect("contiguous weight");
                    let dcols = w2.t().dot(&g2);
                    let dx = col2im(dcols.view(), n, c, h, w, *kernel, *stride, *pad);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = gout.dim();
                    let m = T::of((n * h * w) as f64);
                    let g = &self.store.param(*gamma).value;
                    let mut dgamma = Array1::<T>::zeros(c);
                    let mut dbeta = Array1::<T>::zeros(c);
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    for ch in 0..c {
                        let go = gout.slice(s![.., ch, .., ..]);
                        let xh = xhat.slice(s![.., ch, .., ..]);
                        let sum_g: T = go.iter().copied().sum();
                        let sum_gx: T = go.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                        dgamma[ch] = sum_gx;
                        dbeta[ch] = sum_g;
                        let gg = g[[ch]];
                        let is = inv_std[ch];
                        let mut d = dx.slice_mut(s![.., ch, .., ..]);
                        if *batch_stats {
                            let k = gg * is / m;
                            ndarray::Zip::from(&mut d).and(&go).and(&xh).for_each(|d, &go, &xh| {
                                *d = k * (m * go - sum_g - xh * sum_gx);
                            });
                        } else {
                            let k = gg * is;
                            ndarray::Zip::from(&mut d).and(&go).for_each(|d, &go| *d = k * go);
                        }
                    }
                    accumulate_dyn(&mut pgrads[gamma.0], dgamma.into_dyn());
                    accumulate_dyn(&mut pgrads[beta.0], dbeta.into_dyn());
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = gout;
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &v| {
                        let sg = sigmoid(v);
                        *d *= sg * (T::one() + v * (T::one() - sg));
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[b.0], gout.clone());
                    accumulate(&mut grads[a.0], gout);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &(p, pc) in parts {
                        let part = gout.slice(s![.., offset..offset + pc, .., ..]).to_owned();
                        accumulate(&mut grads[p.0], part);
                        offset += pc;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let len = gout.dim().1;
                    let mut dx = Array4::<T>::zeros(xv.dim());
                    dx.slice_mut(s![.., *start..*start + len, .., ..]).assign(&gout);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array4::<T>::zeros(xv.dim());
                    {
                        let d = dx.as_slice_mut().expect("contiguous");
                        let go = gout.as_slice().expect("standard layout");
                        for (o, &src) in argmax.iter().enumerate() {
                            d[src] += go[o];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::AvgPool {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (n, c, h, w) = self.nodes[x.0].value.dim();
                    let (_, _, ho, wo) = gout.dim();
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    {
                        let d = dx.as_slice_mut().expect("contiguous");
                        let go = gout.as_slice().expect("standard layout");
                        for plane in 0..n * c {
                            for oy in 0..ho {
                                let (y0, y1) = window(oy, *kernel, *stride, *pad, h);
                                for ox in 0..wo {
                                    let (x0, x1) = window(ox, *kernel, *stride, *pad, w);
                                    let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                                    let gv = go[plane * ho * wo + oy * wo + ox] / count;
                                    for iy in y0..y1 {
                                        for ix in x0..x1 {
                                            d[plane * h * w + iy * w + ix] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Resize { x } => {
                    let (n, c, ih, iw) = self.nodes[x.0].value.dim();
                    let (_, _, h, w) = gout.dim();
                    if (ih, iw) == (h, w) {
                        accumulate(&mut grads[x.0], gout);
                    } else {
                        let mut dx = Array4::<T>::zeros((n, c, ih, iw));
                        {
                            let d = dx.as_slice_mut().expect("contiguous");
                            let go = gout.as_slice().expect("standard layout");
                            for plane in 0..n * c {
                                for oy in 0..h {
                                    let sy = oy * ih / h;
                                    for ox in 0..w {
                                        let sx = ox * iw / w;
                                        d[plane * ih * iw + sy * iw + sx] += go[plane * h * w + oy * w + ox];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
            // Interior node gradients are dropped once propagated; inputs keep theirs.
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }
}

fn window(o: usize, kernel: usize, stride: usize, pad: usize, size: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let end = (start + kernel as isize).min(size as isize);
    (start.max(0) as usize, end.max(0) as usize)
}

impl<T: Scalar> ParamStore<T> {
    /// Fold training-mode batch statistics into the running averages.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>]) {
        let mom = T::of(BN_MOMENTUM);
        let keep = T::one() - mom;
        for u in updates {
            let rm = &mut self.buffer_mut(u.mean_buffer).value;
            ndarray::Zip::from(rm)
                .and(u.batch_mean.view().into_dyn())
                .for_each(|r, &b| *r = keep * *r + mom * b);
            let rv = &mut self.buffer_mut(u.var_buffer).value;
            ndarray::Zip::from(rv)
                .and(u.batch_var.view().into_dyn())
                .for_each(|r, &b| *r = keep * *r + mom * b);
        }
    }
}
