use std::ops::Range;

use super::graph::{BatchNormMode, BatchNormOutput, Graph, NodeId};
use super::{shape_err, Element, Tensor, TensorError};
use crate::geom::BBox;

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub trait Backward<T: Element>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>>;
}

fn chw(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(op, format!("expected CHW input, got {s:?}"))),
    }
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

// ---------------------------------------------------------------- conv2d

struct Conv2d<T> {
    cols: Vec<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

impl<T: Element> Conv2d<T> {
    fn col2im(&self, cols: &[T]) -> Vec<T> {
        let (c, h, w, k, oh, ow) = (self.c, self.h, self.w, self.k, self.oh, self.ow);
        let p = oh * ow;
        let mut x = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<T: Element> Backward<T> for Conv2d<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let weight = inputs[1];
        let o = weight.shape()[0];
        let ckk = self.c * self.k * self.k;
        let p = self.oh * self.ow;
        let dy = grad.data();
        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); ckk * p];
            T::gemm(ckk, o, p, T::one(), weight.data(), (1, ckk as isize), dy, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
            Tensor::new(vec![self.c, self.h, self.w], self.col2im(&dcols)).expect("shape")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); o * ckk];
            T::gemm(o, p, ckk, T::one(), dy, (p as isize, 1), &self.cols, (1, p as isize), T::zero(), &mut dw, (ckk as isize, 1));
            Tensor::new(weight.shape().to_vec(), dw).expect("shape")
        });
        let db = needs[2].then(|| Tensor::from_vec(dy.chunks(p).map(|row| row.iter().copied().sum()).collect()));
        vec![dx, dw, db]
    }
}

// ---------------------------------------------------------------- maxpool2

struct MaxPool2 {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxPool2 {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(&self.in_shape);
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------- elementwise

struct Relu;

impl<T: Element> Backward<T> for Relu {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).expect("shape"))]
    }
}

struct Logistic;

impl<T: Element> Backward<T> for Logistic {
    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect();
        vec![Some(Tensor::new(output.shape().to_vec(), data).expect("shape"))]
    }
}

/// Numerically stable `1 / (1 + exp(-x))`.
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Sum;

impl<T: Element> Backward<T> for Sum {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

struct Add;

impl<T: Element> Backward<T> for Add {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

struct Mul;

impl<T: Element> Backward<T> for Mul {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = other.data().iter().zip(grad.data()).map(|(&o, &g)| o * g).collect();
            Tensor::new(other.shape().to_vec(), data).expect("shape")
        };
        vec![needs[0].then(|| prod(inputs[1])), needs[1].then(|| prod(inputs[0]))]
    }
}

struct Scale<T>(T);

impl<T: Element> Backward<T> for Scale<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Reshape(Vec<usize>);

impl<T: Element> Backward<T> for Reshape {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::new(self.0.clone(), grad.data().to_vec()).expect("shape"))]
    }
}

// ---------------------------------------------------------------- linear

struct Linear;

impl<T: Element> Backward<T> for Linear {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (m, d) = (w.shape()[0], w.shape()[1]);
        let n = x.len() / d;
        let dy = grad.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * d];
            T::gemm(n, m, d, T::one(), dy, (m as isize, 1), w.data(), (d as isize, 1), T::zero(), &mut dx, (d as isize, 1));
            Tensor::new(x.shape().to_vec(), dx).expect("shape")
        });
        let dw = needs[1].then(|| {
            // Only rows with a non-zero upstream gradient contribute; in the
            // proposal stage most anchor rows are outside the sampled batch.
            let live: Vec<usize> = (0..n).filter(|&r| dy[r * m..(r + 1) * m].iter().any(|&g| g != T::zero())).collect();
            let mut dw = vec![T::zero(); m * d];
            if !live.is_empty() {
                let (gy, gx) = if live.len() == n {
                    (dy.to_vec(), x.data().to_vec())
                } else {
                    let mut gy = Vec::with_capacity(live.len() * m);
                    let mut gx = Vec::with_capacity(live.len() * d);
                    for &r in &live {
                        gy.extend_from_slice(&dy[r * m..(r + 1) * m]);
                        gx.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
                    }
                    (gy, gx)
                };
                let rows = live.len();
                T::gemm(m, rows, d, T::one(), &gy, (1, m as isize), &gx, (d as isize, 1), T::zero(), &mut dw, (d as isize, 1));
            }
            Tensor::new(w.shape().to_vec(), dw).expect("shape")
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); m];
            for row in dy.chunks(m) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            Tensor::from_vec(db)
        });
        vec![dx, dw, db]
    }
}

// ---------------------------------------------------------------- batchnorm

struct BatchNorm<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Element> Backward<T> for BatchNorm<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.len();
        let n = x.len() / c;
        let nf: T = t(n as f64);
        let dy = grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); x.len()];
        for ch in 0..c {
            let span = ch * n..(ch + 1) * n;
            let (dys, xh) = (&dy[span.clone()], &self.xhat[span.clone()]);
            let sum_dy: T = dys.iter().copied().sum();
            let sum_dy_xhat: T = dys.iter().zip(xh).map(|(&g, &v)| g * v).sum();
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let g = gamma.data()[ch];
            let istd = self.inv_std[ch];
            for ((out, &gy), &v) in dx[span].iter_mut().zip(dys).zip(xh) {
                *out = if self.train {
                    g * istd / nf * (nf * gy - sum_dy - v * sum_dy_xhat)
                } else {
                    g * istd * gy
                };
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).expect("shape")),
            needs[1].then(|| Tensor::from_vec(dgamma)),
            needs[2].then(|| Tensor::from_vec(dbeta)),
        ]
    }
}

// ---------------------------------------------------------------- resample

/// One output coordinate's two source taps and weights.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn bilinear_taps<T: Element>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: t(1.0 - frac),
                w1: t(frac),
            }
        })
        .collect()
}

struct Resample<T> {
    ys: Vec<Tap<T>>,
    xs: Vec<Tap<T>>,
    in_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for Resample<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut dx = vec![T::zero(); c * h * w];
        let g = grad.data();
        for ch in 0..c {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for (oy, ty) in self.ys.iter().enumerate() {
                for (ox, tx) in self.xs.iter().enumerate() {
                    let v = g[(ch * oh + oy) * ow + ox];
                    plane[ty.i0 * w + tx.i0] += v * ty.w0 * tx.w0;
                    plane[ty.i0 * w + tx.i1] += v * ty.w0 * tx.w1;
                    plane[ty.i1 * w + tx.i0] += v * ty.w1 * tx.w0;
                    plane[ty.i1 * w + tx.i1] += v * ty.w1 * tx.w1;
                }
            }
        }
        vec![Some(Tensor::new(self.in_shape.clone(), dx).expect("shape"))]
    }
}

struct Identity;

impl<T: Element> Backward<T> for Identity {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone())]
    }
}

// ---------------------------------------------------------------- concat / slicing

struct ConcatChannels {
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Backward<T> for ConcatChannels {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut offset = 0;
        self.shapes
            .iter()
            .zip(needs)
            .map(|(shape, &need)| {
                let n: usize = shape.iter().product();
                let part = need.then(|| Tensor::new(shape.clone(), grad.data()[offset..offset + n].to_vec()).expect("shape"));
                offset += n;
                part
            })
            .collect()
    }
}

struct ConcatCols {
    rows: usize,
    widths: (usize, usize),
}

impl<T: Element> Backward<T> for ConcatCols {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = self.widths;
        let g = grad.data();
        let split = |range: Range<usize>| {
            let width = range.len();
            let mut out = Vec::with_capacity(self.rows * width);
            for r in 0..self.rows {
                out.extend_from_slice(&g[r * (a + b) + range.start..r * (a + b) + range.end]);
            }
            Tensor::new(vec![self.rows, width], out).expect("shape")
        };
        vec![needs[0].then(|| split(0..a)), needs[1].then(|| split(a..a + b))]
    }
}

struct SliceCols {
    in_shape: Vec<usize>,
    range: Range<usize>,
}

impl<T: Element> Backward<T> for SliceCols {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (rows, cols) = (self.in_shape[0], self.in_shape[1]);
        let width = self.range.len();
        let mut dx = vec![T::zero(); rows * cols];
        for r in 0..rows {
            dx[r * cols + self.range.start..r * cols + self.range.end].copy_from_slice(&grad.data()[r * width..(r + 1) * width]);
        }
        vec![Some(Tensor::new(self.in_shape.clone(), dx).expect("shape"))]
    }
}

struct GatherRows {
    in_shape: Vec<usize>,
    rows: Vec<usize>,
}

impl<T: Element> Backward<T> for GatherRows {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let d = self.in_shape[1];
        let mut dx = Tensor::zeros(&self.in_shape);
        let out = dx.data_mut();
        for (i, &r) in self.rows.iter().enumerate() {
            for (acc, &g) in out[r * d..(r + 1) * d].iter_mut().zip(&grad.data()[i * d..(i + 1) * d]) {
                *acc += g;
            }
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------- roi pooling

const EMPTY_BIN: usize = usize::MAX;

struct RoiMaxPool {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for RoiMaxPool {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(&self.in_shape);
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            if src != EMPTY_BIN && g != T::zero() {
                d[src] += g;
            }
        }
        vec![Some(dx)]
    }
}

/// Feature-cell span `[start, end)` of a box along one axis: the box edge
/// divided by the stride, floored at the start and ceiled at the end, then
/// clamped to the map. Boxes that clamp to nothing keep a one-cell sliver at
/// the nearest border.
fn roi_span(lo: f64, hi: f64, stride: f64, size: usize) -> (usize, usize) {
    let start = (lo / stride).floor().clamp(0.0, size as f64) as usize;
    let end = (hi / stride).ceil().clamp(0.0, size as f64) as usize;
    if end > start {
        (start, end)
    } else {
        let s = start.min(size - 1);
        (s, s + 1)
    }
}

/// Cells covered by bin `i` of `bins` equal fractional bins over `[start, end)`.
fn bin_cells(start: usize, end: usize, i: usize, bins: usize) -> Range<usize> {
    let span = (end - start) as f64;
    let lo = start as f64 + span * i as f64 / bins as f64;
    let hi = start as f64 + span * (i + 1) as f64 / bins as f64;
    let a = (lo.floor() as usize).clamp(start, end);
    let b = (hi.ceil() as usize).clamp(start, end);
    a..b
}

// ---------------------------------------------------------------- graph api

impl<T: Element> Graph<T> {
    /// 2-D cross-correlation of a CHW input with an `O x C x k x k` kernel.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (c, h, w) = chw(OP, xv)?;
        let &[o, wc, k, k2] = wv.shape() else {
            return Err(shape_err(OP, format!("weight must be OCkk, got {:?}", wv.shape())));
        };
        if wc != c || k != k2 || bv.shape() != [o] || stride == 0 {
            return Err(shape_err(
                OP,
                format!("input {:?} vs weight {:?} (bias {:?}, stride {stride})", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(OP, format!("kernel {k} does not fit padded input {:?} (pad {pad})", xv.shape())));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let p = oh * ow;
        let ckk = c * k * k;
        let cols = im2col(xv.data(), c, h, w, k, stride, pad, oh, ow);
        let mut out = vec![T::zero(); o * p];
        for (row, &b) in out.chunks_mut(p).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v = b);
        }
        T::gemm(o, ckk, p, T::one(), wv.data(), (ckk as isize, 1), &cols, (p as isize, 1), T::one(), &mut out, (p as isize, 1));
        let value = Tensor::new(vec![o, oh, ow], out)?;
        let op = Conv2d {
            cols,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        Ok(self.push(OP, value, vec![x, weight, bias], Some(Box::new(op)), None, false))
    }

    /// 2x2 non-overlapping max pooling; ties go to the first cell in
    /// row-major order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "maxpool2";
        let xv = self.value(x);
        let (c, h, w) = chw(OP, xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(OP, format!("spatial dims of {:?} must be even", xv.shape())));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = xv.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let in_shape = xv.shape().to_vec();
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(OP, value, vec![x], Some(Box::new(MaxPool2 { argmax, in_shape })), None, false))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, vec![x], Some(Box::new(Relu)), None, false)
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push("logistic", value, vec![x], Some(Box::new(Logistic)), None, false)
    }

    /// `y = W x + b` for an input of shape `[D]` or a batch `[N, D]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "linear";
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let &[m, d] = wv.shape() else {
            return Err(shape_err(OP, format!("weight must be MxN, got {:?}", wv.shape())));
        };
        let (n, batched) = match *xv.shape() {
            [len] if len == d => (1, false),
            [rows, len] if len == d => (rows, true),
            _ => return Err(shape_err(OP, format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()))),
        };
        if bv.shape() != [m] {
            return Err(shape_err(OP, format!("bias {:?} vs weight {:?}", bv.shape(), wv.shape())));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        T::gemm(n, d, m, T::one(), xv.data(), (d as isize, 1), wv.data(), (1, d as isize), T::one(), &mut out, (m as isize, 1));
        let shape = if batched { vec![n, m] } else { vec![m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(OP, value, vec![x, weight, bias], Some(Box::new(Linear)), None, false))
    }

    /// Per-channel normalization of a CHW map over its spatial positions.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BatchNormMode<'_, T>, eps: f64) -> Result<BatchNormOutput<T>, TensorError> {
        const OP: &str = "batchnorm";
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (c, h, w) = chw(OP, xv)?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(OP, format!("input {:?} vs gamma {:?} / beta {:?}", xv.shape(), gv.shape(), bv.shape())));
        }
        let n = h * w;
        let nf: T = t(n as f64);
        let eps: T = t(eps);
        let data = xv.data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                for plane in data.chunks(n) {
                    let mu = plane.iter().copied().sum::<T>() / nf;
                    let v = plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / nf;
                    mean.push(mu);
                    var.push(v);
                }
                (mean, var, true)
            }
            BatchNormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(OP, format!("running stats of length {}/{} for {c} channels", mean.len(), var.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for (ch, plane) in data.chunks(n).enumerate() {
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for &v in plane {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g * xh + b);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = BatchNorm { xhat, inv_std, train };
        let node = self.push(OP, value, vec![x, gamma, beta], Some(Box::new(op)), None, false);
        Ok(BatchNormOutput {
            node,
            batch_stats: train.then_some((mean, var)),
        })
    }

    /// Bilinear resampling with half-pixel centers (align-corners false).
    /// Resampling to the input size returns an exact copy.
    pub fn resample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "resample_bilinear";
        let xv = self.value(x);
        let (c, h, w) = chw(OP, xv)?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err(OP, format!("output size {out_h}x{out_w} must be positive")));
        }
        if (out_h, out_w) == (h, w) {
            let value = xv.clone();
            return Ok(self.push(OP, value, vec![x], Some(Box::new(Identity)), None, false));
        }
        let ys = bilinear_taps::<T>(h, out_h);
        let xs = bilinear_taps::<T>(w, out_w);
        let data = xv.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            for ty in &ys {
                for tx in &xs {
                    let top = plane[ty.i0 * w + tx.i0] * tx.w0 + plane[ty.i0 * w + tx.i1] * tx.w1;
                    let bottom = plane[ty.i1 * w + tx.i0] * tx.w0 + plane[ty.i1 * w + tx.i1] * tx.w1;
                    out.push(top * ty.w0 + bottom * ty.w1);
                }
            }
        }
        let in_shape = xv.shape().to_vec();
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(OP, value, vec![x], Some(Box::new(Resample { ys, xs, in_shape })), None, false))
    }

    /// Channel-axis concatenation of CHW maps in argument order.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        const OP: &str = "concat_channels";
        let Some(&first) = xs.first() else {
            return Err(shape_err(OP, "no inputs"));
        };
        let (_, h, w) = chw(OP, self.value(first))?;
        let mut channels = 0;
        let mut data = Vec::new();
        let mut shapes = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            let (c, hh, ww) = chw(OP, v)?;
            if (hh, ww) != (h, w) {
                return Err(shape_err(OP, format!("spatial mismatch {:?} vs {:?}", self.value(first).shape(), v.shape())));
            }
            channels += c;
            data.extend_from_slice(v.data());
            shapes.push(v.shape().to_vec());
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push(OP, value, xs.to_vec(), Some(Box::new(ConcatChannels { shapes })), None, false))
    }

    /// Max-pools each box region of a CHW map into an `out_h x out_w` grid.
    ///
    /// Output shape is `[boxes, C, out_h, out_w]`. Box coordinates are image
    /// pixels and are divided by `stride` to reach feature cells.
    pub fn roi_maxpool(&mut self, feature: NodeId, boxes: &[BBox], stride: f64, out_h: usize, out_w: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "roi_maxpool";
        let fv = self.value(feature);
        let (c, h, w) = chw(OP, fv)?;
        if boxes.is_empty() {
            return Err(shape_err(OP, "no boxes"));
        }
        if out_h == 0 || out_w == 0 || !(stride > 0.0) {
            return Err(shape_err(OP, format!("output {out_h}x{out_w}, stride {stride}")));
        }
        if let Some(b) = boxes.iter().find(|b| !(b.w > 0.0 && b.h > 0.0)) {
            return Err(TensorError::InvalidBox {
                op: OP,
                detail: format!("non-positive size {}x{}", b.w, b.h),
            });
        }
        let data = fv.data();
        let bins = out_h * out_w;
        let mut out = Vec::with_capacity(boxes.len() * c * bins);
        let mut argmax = Vec::with_capacity(boxes.len() * c * bins);
        let mut row_spans = Vec::with_capacity(out_h);
        let mut col_spans = Vec::with_capacity(out_w);
        for b in boxes {
            let (y0, y1) = roi_span(b.y_min(), b.y_max(), stride, h);
            let (x0, x1) = roi_span(b.x_min(), b.x_max(), stride, w);
            row_spans.clear();
            col_spans.clear();
            row_spans.extend((0..out_h).map(|i| bin_cells(y0, y1, i, out_h)));
            col_spans.extend((0..out_w).map(|j| bin_cells(x0, x1, j, out_w)));
            for ch in 0..c {
                let plane = ch * h * w;
                for rows in &row_spans {
                    for cols in &col_spans {
                        let mut best = EMPTY_BIN;
                        let mut best_v = T::zero();
                        for y in rows.clone() {
                            for x in cols.clone() {
                                let idx = plane + y * w + x;
                                if best == EMPTY_BIN || data[idx] > best_v {
                                    best = idx;
                                    best_v = data[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let in_shape = fv.shape().to_vec();
        let value = Tensor::new(vec![boxes.len(), c, out_h, out_w], out)?;
        Ok(self.push(OP, value, vec![feature], Some(Box::new(RoiMaxPool { argmax, in_shape })), None, false))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), vec![x], Some(Box::new(Sum)), None, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push("add", value, vec![a, b], Some(Box::new(Add)), None, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push("mul", value, vec![a, b], Some(Box::new(Mul)), None, false))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, vec![x], Some(Box::new(Scale(factor))), None, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let value = xv.clone().reshape(shape)?;
        Ok(self.push("reshape", value, vec![x], Some(Box::new(Reshape(in_shape))), None, false))
    }

    /// Selects rows of an `[N, D]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        const OP: &str = "gather_rows";
        let xv = self.value(x);
        let &[n, d] = xv.shape() else {
            return Err(shape_err(OP, format!("expected matrix, got {:?}", xv.shape())));
        };
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err(OP, format!("row indices out of range for {:?}", xv.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let in_shape = xv.shape().to_vec();
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let op = GatherRows {
            in_shape,
            rows: rows.to_vec(),
        };
        Ok(self.push(OP, value, vec![x], Some(Box::new(op)), None, false))
    }

    /// Joins `[N, A]` and `[N, B]` into `[N, A + B]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "concat_cols";
        let (av, bv) = (self.value(a), self.value(b));
        let (&[n, wa], &[nb, wb]) = (av.shape(), bv.shape()) else {
            return Err(shape_err(OP, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        };
        if n != nb {
            return Err(shape_err(OP, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(n * (wa + wb));
        for r in 0..n {
            data.extend_from_slice(&av.data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&bv.data()[r * wb..(r + 1) * wb]);
        }
        let value = Tensor::new(vec![n, wa + wb], data)?;
        let op = ConcatCols { rows: n, widths: (wa, wb) };
        Ok(self.push(OP, value, vec![a, b], Some(Box::new(op)), None, false))
    }

    /// Column range of an `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: NodeId, range: Range<usize>) -> Result<NodeId, TensorError> {
        const OP: &str = "slice_cols";
        let xv = self.value(x);
        let &[n, d] = xv.shape() else {
            return Err(shape_err(OP, format!("expected matrix, got {:?}", xv.shape())));
        };
        if range.is_empty() || range.end > d {
            return Err(shape_err(OP, format!("columns {range:?} of {:?}", xv.shape())));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&xv.data()[r * d + range.start..r * d + range.end]);
        }
        let in_shape = xv.shape().to_vec();
        let value = Tensor::new(vec![n, width], data)?;
        Ok(self.push(OP, value, vec![x], Some(Box::new(SliceCols { in_shape, range })), None, false))
    }
}
