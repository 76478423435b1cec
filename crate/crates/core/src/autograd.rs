//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! Layouts follow the usual conventions: images are `N x C x H x W`, conv
//! weights are `O x I x KH x KW`, linear weights are `out x in` and act on the
//! last dimension. Reductions accumulate in `f64`. Every operation processes
//! batch items independently and in a fixed order, so results are bitwise
//! reproducible and do not depend on how a batch is split.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Silu(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MulPerSample(Var, Vec<T>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddChannel(Var, Var),
    AddRow(Var, Var),
    Upsample(Var, usize),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    MeanSpatial(Var),
    Reshape(Var),
    Transpose12(Var),
    SpatialL2Norm {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannel(a, b) | AddRow(a, b)
            | Concat(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Relu(a) | LeakyRelu(a, _) | Silu(a)
            | Tanh(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | MulPerSample(a, _)
            | Upsample(a, _) | MeanSpatial(a) | Reshape(a) | Transpose12(a) => vec![*a],
            SliceChannels { x, .. } | SpatialL2Norm { x, .. } => vec![*x],
            SoftmaxCe { logits, .. } => vec![*logits],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            GroupNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn spatial(shape: &[usize]) -> usize {
    shape.iter().skip(2).product()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unfold one `C x H x W` image into a `(C*KH*KW) x (OH*OW)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    let (s, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ki as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kj as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeom,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let p = oh * ow;
    let (s, pad) = (geom.stride as isize, geom.pad as isize);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geom: Conv2dGeom) -> bool {
    kh == 1 && kw == 1 && geom.stride == 1 && geom.pad == 0
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that no gradient flows into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(t, Op::Leaf, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::c(x.f64() * sigmoid(x.f64())));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Multiply every element of batch item `n` by `weights[n]`.
    pub fn mul_per_sample(&mut self, a: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 || x.dim(0) != weights.len() {
            return Err(Error::Shape(format!(
                "mul_per_sample: {} weights for shape {:?}",
                weights.len(),
                x.shape()
            )));
        }
        let mut out = x.clone();
        for (n, &w) in weights.iter().enumerate() {
            for v in out.outer_mut(n) {
                *v *= w;
            }
        }
        Ok(self.push(out, Op::MulPerSample(a, weights.to_vec())))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::c(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean_f64();
        self.push(Tensor::scalar(T::c(s)), Op::Mean(a))
    }

    /// `N x C x ...` to `N x C` by averaging the trailing dimensions.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 3 {
            return Err(Error::Shape(format!("mean_spatial on {:?}", x.shape())));
        }
        let (n, c, s) = (x.dim(0), x.dim(1), spatial(x.shape()));
        let d = x.data();
        let out = Tensor::from_fn(&[n, c], |i| {
            let row = &d[i * s..(i + 1) * s];
            T::c(row.iter().map(|v| v.f64()).sum::<f64>() / s as f64)
        });
        Ok(self.push(out, Op::MeanSpatial(a)))
    }

    // ----- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `N x A x B` to `N x B x A`.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 3 {
            return Err(Error::Shape(format!("transpose12 on {:?}", x.shape())));
        }
        let (n, ra, rb) = (x.dim(0), x.dim(1), x.dim(2));
        let out = transpose12_raw(x.data(), n, ra, rb);
        let t = Tensor::from_vec(&[n, rb, ra], out)?;
        Ok(self.push(t, Op::Transpose12(a)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rank() < 2
            || xa.rank() != xb.rank()
            || xa.dim(0) != xb.dim(0)
            || xa.shape()[2..] != xb.shape()[2..]
        {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let n = xa.dim(0);
        let (sa, sb) = (xa.len() / n, xb.len() / n);
        let mut data = Vec::with_capacity(xa.len() + xb.len());
        for i in 0..n {
            data.extend_from_slice(&xa.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&xb.data()[i * sb..(i + 1) * sb]);
        }
        let mut shape = xa.shape().to_vec();
        shape[1] += xb.dim(1);
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 || start + len > x.dim(1) {
            return Err(Error::Shape(format!(
                "slice_channels {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (n, c, s) = (x.dim(0), x.dim(1), spatial(x.shape()));
        let mut data = Vec::with_capacity(n * len * s);
        for i in 0..n {
            let base = (i * c + start) * s;
            data.extend_from_slice(&x.data()[base..base + len * s]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::SliceChannels { x: a, start }))
    }

    /// Nearest-neighbour upsampling of the two trailing dimensions by `f`.
    pub fn upsample_nearest(&mut self, a: Var, f: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 4 || f == 0 {
            return Err(Error::Shape(format!(
                "upsample_nearest x{f} on {:?}",
                x.shape()
            )));
        }
        let out = upsample_nearest_raw(x, f);
        Ok(self.push(out, Op::Upsample(a, f)))
    }

    // ----- broadcasting adds -------------------------------------------

    /// `x: N x C x ...` plus `e: N x C` broadcast over trailing dimensions.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        if xv.rank() < 2 || ev.shape() != &xv.shape()[..2] {
            return Err(Error::Shape(format!(
                "add_channel: {:?} + {:?}",
                xv.shape(),
                ev.shape()
            )));
        }
        let s = spatial(xv.shape());
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let b = ev.data()[i];
            for v in chunk {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddChannel(x, e)))
    }

    /// `x: N x T x D` plus `e: N x D` broadcast over rows.
    pub fn add_row(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        if xv.rank() != 3 || ev.shape() != [xv.dim(0), xv.dim(2)] {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                ev.shape()
            )));
        }
        let (n, t, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = xv.clone();
        for i in 0..n {
            let e_row = &ev.data()[i * d..(i + 1) * d];
            for r in 0..t {
                let row = &mut out.data_mut()[(i * t + r) * d..(i * t + r + 1) * d];
                for (v, &b) in row.iter_mut().zip(e_row) {
                    *v += b;
                }
            }
        }
        Ok(self.push(out, Op::AddRow(x, e)))
    }

    // ----- layers ------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1) {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
        if h + 2 * geom.pad < kh || wd + 2 * geom.pad < kw || geom.stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} for {o} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let oh = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let ow = (wd + 2 * geom.pad - kw) / geom.stride + 1;
        let p = oh * ow;
        let ckk = c * kh * kw;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let pointwise = is_pointwise(kh, kw, geom);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ckk * p]
        };
        for i in 0..n {
            let xi = xv.outer(i);
            let src: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, kh, kw, geom, oh, ow, &mut cols);
                &cols
            };
            let yi = out.outer_mut(i);
            T::gemm(
                o,
                ckk,
                p,
                T::one(),
                wv.data(),
                ckk as isize,
                1,
                src,
                p as isize,
                1,
                T::zero(),
                yi,
                p as isize,
                1,
            );
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (oc, row) in yi.chunks_mut(p).enumerate() {
                    let bias = bv[oc];
                    for v in row {
                        *v += bias;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// `y = x W^T + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let din = *xv.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || wv.dim(1) != din || din == 0 {
            return Err(Error::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let dout = wv.dim(0);
        let m = xv.len() / din;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&shape);
        // One gemm per row keeps each output row independent of the batch size.
        for r in 0..m {
            T::gemm(
                1,
                din,
                dout,
                T::one(),
                &xv.data()[r * din..(r + 1) * din],
                din as isize,
                1,
                wv.data(),
                1,
                din as isize,
                T::zero(),
                &mut out.data_mut()[r * dout..(r + 1) * dout],
                dout as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::Shape(format!("linear bias {:?}", bv.shape())));
            }
            let bd = bv.data().to_vec();
            for row in out.data_mut().chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(&bd) {
                    *v += bb;
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::Shape(format!("group_norm on {:?}", xv.shape())));
        }
        let (n, c, s) = (xv.dim(0), xv.dim(1), spatial(xv.shape()));
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("group_norm affine parameters".into()));
        }
        let cg = c / groups;
        let glen = cg * s;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(xv.shape());
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (gi, (src, dst)) in xv
            .data()
            .chunks(glen)
            .zip(out.data_mut().chunks_mut(glen))
            .enumerate()
        {
            let (mean, rstd) = moments(src, eps);
            means.push(mean);
            rstds.push(rstd);
            let g = gi % groups;
            for (k, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                let ch = g * cg + k / s;
                *o = T::c((v.f64() - mean) * rstd * gv[ch].f64() + bv[ch].f64());
            }
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Normalization over the last dimension with per-feature affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::Shape(format!("layer_norm on {:?}", xv.shape())));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(xv.shape());
        let mut means = Vec::new();
        let mut rstds = Vec::new();
        for (src, dst) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let (mean, rstd) = moments(src, eps);
            means.push(mean);
            rstds.push(rstd);
            for (k, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                *o = T::c((v.f64() - mean) * rstd * gv[k].f64() + bv[k].f64());
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Divide each `(n, c)` map by its L2 norm over the spatial dimensions.
    pub fn spatial_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(Error::Shape(format!(
                "spatial_l2_normalize on {:?}",
                xv.shape()
            )));
        }
        let s = spatial(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut norms = Vec::new();
        for (src, dst) in xv.data().chunks(s).zip(out.data_mut().chunks_mut(s)) {
            let r = src.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            norms.push(r);
            let d = r + eps;
            for (&v, o) in src.iter().zip(dst.iter_mut()) {
                *o = T::c(v.f64() / d);
            }
        }
        Ok(self.push(out, Op::SpatialL2Norm { x, eps, norms }))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (n, k) = (lv.dim(0), lv.dim(1));
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!("label out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
            for v in row {
                probs.push((v.f64() - m).exp() / z);
            }
            loss += -(row[labels[i]].f64() - m - z.ln());
        }
        let out = Tensor::scalar(T::c(loss / n as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node requiring one.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_tensor(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.zip_map(self.value(*b), |gv, bv| gv * bv).expect("shape");
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.zip_map(self.value(*a), |gv, av| gv * av).expect("shape");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let d = g.zip_map(y, |gv, yv| gv * yv).expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x.f64());
                        T::c(gv.f64() * s * (1.0 + x.f64() * (1.0 - s)))
                    })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .zip_map(y, |gv, yv| gv * (T::one() - yv * yv))
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g
                    .zip_map(self.value(*a), |gv, x| {
                        if x >= lo && x <= hi {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let gv = T::c(g.item().f64() / n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MulPerSample(a, w) => {
                let mut d = g.clone();
                for (n, &wv) in w.iter().enumerate() {
                    for v in d.outer_mut(n) {
                        *v *= wv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanSpatial(a) => {
                let shape = self.shape(*a);
                let s = spatial(shape);
                let inv = 1.0 / s as f64;
                let d = Tensor::from_fn(shape, |i| T::c(g.data()[i / s].f64() * inv));
                self.accumulate(grads, *a, d);
            }
            Op::Transpose12(a) => {
                let (n, rb, ra) = (g.dim(0), g.dim(1), g.dim(2));
                let d = Tensor::from_vec(&[n, ra, rb], transpose12_raw(g.data(), n, rb, ra))
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Concat(a, b) => {
                let n = g.dim(0);
                let (sa, sb) = (
                    self.value(*a).len() / n.max(1),
                    self.value(*b).len() / n.max(1),
                );
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for i in 0..n {
                    let row = g.outer(i);
                    da.extend_from_slice(&row[..sa]);
                    db.extend_from_slice(&row[sa..]);
                }
                if self.needs(*a) {
                    let t = Tensor::from_vec(self.shape(*a), da).expect("shape");
                    self.accumulate(grads, *a, t);
                }
                if self.needs(*b) {
                    let t = Tensor::from_vec(self.shape(*b), db).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::SliceChannels { x, start } => {
                let shape = self.shape(*x);
                let (n, c, s) = (shape[0], shape[1], spatial(shape));
                let len = g.dim(1);
                let mut d = Tensor::zeros(shape);
                for i in 0..n {
                    let dst_base = (i * c + start) * s;
                    d.data_mut()[dst_base..dst_base + len * s].copy_from_slice(g.outer(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample(a, f) => {
                let shape = self.shape(*a);
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let f = *f;
                let (oh, ow) = (h * f, w * f);
                let mut d = Tensor::zeros(shape);
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut d.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[(y / f) * w + x / f] += src[y * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::AddChannel(x, e) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*e) {
                    let s = spatial(g.shape());
                    let de = Tensor::from_fn(self.shape(*e), |i| {
                        T::c(g.data()[i * s..(i + 1) * s].iter().map(|v| v.f64()).sum())
                    });
                    self.accumulate(grads, *e, de);
                }
            }
            Op::AddRow(x, e) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*e) {
                    let (n, t, d) = (g.dim(0), g.dim(1), g.dim(2));
                    let mut acc = vec![0.0f64; n * d];
                    for i in 0..n {
                        for r in 0..t {
                            let row = &g.data()[(i * t + r) * d..(i * t + r + 1) * d];
                            for (k, &v) in row.iter().enumerate() {
                                acc[i * d + k] += v.f64();
                            }
                        }
                    }
                    let de = Tensor::from_fn(&[n, d], |i| T::c(acc[i]));
                    self.accumulate(grads, *e, de);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, g, grads),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x);
                let (c, s) = (shape[1], spatial(shape));
                let cg = c / groups;
                let channel_of = |gi: usize, k: usize| (gi % groups) * cg + k / s;
                self.norm_backward(
                    *x, *gamma, *beta, cg * s, c, mean, rstd, channel_of, g, grads,
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap();
                self.norm_backward(
                    *x,
                    *gamma,
                    *beta,
                    d,
                    d,
                    mean,
                    rstd,
                    |_, k| k,
                    g,
                    grads,
                );
            }
            Op::SpatialL2Norm { x, eps, norms } => {
                let xv = self.value(*x);
                let s = spatial(xv.shape());
                let mut d = Tensor::zeros(xv.shape());
                for (((src, gs), dst), &r) in xv
                    .data()
                    .chunks(s)
                    .zip(g.data().chunks(s))
                    .zip(d.data_mut().chunks_mut(s))
                    .zip(norms)
                {
                    let den = r + eps;
                    let dot: f64 = src.iter().zip(gs).map(|(v, gv)| v.f64() * gv.f64()).sum();
                    let coef = if r > 0.0 { dot / (den * den * r) } else { 0.0 };
                    for ((&v, &gv), o) in src.iter().zip(gs).zip(dst.iter_mut()) {
                        *o = T::c(gv.f64() / den - v.f64() * coef);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits);
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item().f64() / n as f64;
                let d = Tensor::from_fn(shape, |i| {
                    let (row, col) = (i / k, i % k);
                    let onehot = if labels[row] == col { 1.0 } else { 0.0 };
                    T::c((probs[i] - onehot) * scale)
                });
                self.accumulate(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        group_len: usize,
        channels: usize,
        mean: &[f64],
        rstd: &[f64],
        channel_of: impl Fn(usize, usize) -> usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgamma = vec![0.0f64; channels];
        let mut dbeta = vec![0.0f64; channels];
        let mut xhat = vec![0.0f64; group_len];
        let mut dxhat = vec![0.0f64; group_len];
        for (gi, ((src, gs), dst)) in xv
            .data()
            .chunks(group_len)
            .zip(g.data().chunks(group_len))
            .zip(dx.chunks_mut(group_len))
            .enumerate()
        {
            let (m, r) = (mean[gi], rstd[gi]);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for k in 0..group_len {
                let ch = channel_of(gi, k);
                xhat[k] = (src[k].f64() - m) * r;
                let gv = gs[k].f64();
                dgamma[ch] += gv * xhat[k];
                dbeta[ch] += gv;
                dxhat[k] = gv * gam[ch].f64();
                sum_d += dxhat[k];
                sum_dx += dxhat[k] * xhat[k];
            }
            let inv = 1.0 / group_len as f64;
            for k in 0..group_len {
                dst[k] = T::c(r * (dxhat[k] - sum_d * inv - xhat[k] * sum_dx * inv));
            }
        }
        if self.needs(x) {
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
        }
        if self.needs(gamma) {
            let t = Tensor::from_fn(&[channels], |i| T::c(dgamma[i]));
            self.accumulate(grads, gamma, t);
        }
        if self.needs(beta) {
            let t = Tensor::from_fn(&[channels], |i| T::c(dbeta[i]));
            self.accumulate(grads, beta, t);
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
        let (oh, ow) = (g.dim(2), g.dim(3));
        let p = oh * ow;
        let ckk = c * kh * kw;
        let pointwise = is_pointwise(kh, kw, geom);
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        let mut dw = if need_w {
            Some(Tensor::zeros(wv.shape()))
        } else {
            None
        };
        let mut dx = if need_x {
            Some(Tensor::zeros(xv.shape()))
        } else {
            None
        };
        let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * p }];
        let mut dcols = vec![T::zero(); if need_x && !pointwise { ckk * p } else { 0 }];
        for i in 0..n {
            let gi = g.outer(i);
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if pointwise {
                    xv.outer(i)
                } else {
                    im2col(xv.outer(i), c, h, wd, kh, kw, geom, oh, ow, &mut cols);
                    &cols
                };
                T::gemm(
                    o,
                    p,
                    ckk,
                    T::one(),
                    gi,
                    p as isize,
                    1,
                    src,
                    1,
                    p as isize,
                    T::one(),
                    dw.data_mut(),
                    ckk as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    T::gemm(
                        ckk,
                        o,
                        p,
                        T::one(),
                        wv.data(),
                        1,
                        ckk as isize,
                        gi,
                        p as isize,
                        1,
                        T::one(),
                        dx.outer_mut(i),
                        p as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        ckk,
                        o,
                        p,
                        T::one(),
                        wv.data(),
                        1,
                        ckk as isize,
                        gi,
                        p as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        p as isize,
                        1,
                    );
                    col2im_add(&dcols, c, h, wd, kh, kw, geom, oh, ow, dx.outer_mut(i));
                }
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut acc = vec![0.0f64; o];
                for i in 0..n {
                    for (oc, row) in g.outer(i).chunks(p).enumerate() {
                        acc[oc] += row.iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_fn(&[o], |k| T::c(acc[k])));
            }
        }
    }

    fn linear_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (dout, din) = (wv.dim(0), wv.dim(1));
        let m = xv.len() / din;
        if self.needs(x) {
            let mut dx = Tensor::zeros(xv.shape());
            T::gemm(
                m,
                dout,
                din,
                T::one(),
                g.data(),
                dout as isize,
                1,
                wv.data(),
                din as isize,
                1,
                T::zero(),
                dx.data_mut(),
                din as isize,
                1,
            );
            self.accumulate(grads, x, dx);
        }
        if self.needs(w) {
            let mut dw = Tensor::zeros(wv.shape());
            T::gemm(
                dout,
                m,
                din,
                T::one(),
                g.data(),
                1,
                dout as isize,
                xv.data(),
                din as isize,
                1,
                T::zero(),
                dw.data_mut(),
                din as isize,
                1,
            );
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut acc = vec![0.0f64; dout];
                for row in g.data().chunks(dout) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.f64();
                    }
                }
                self.accumulate(grads, b, Tensor::from_fn(&[dout], |k| T::c(acc[k])));
            }
        }
    }
}

fn moments<T: Float>(src: &[T], eps: f64) -> (f64, f64) {
    let n = src.len() as f64;
    let mean = src.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = src
        .iter()
        .map(|v| {
            let d = v.f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn transpose12_raw<T: Float>(d: &[T], n: usize, ra: usize, rb: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for i in 0..n {
        let base = i * ra * rb;
        for a in 0..ra {
            for b in 0..rb {
                out[base + b * ra + a] = d[base + a * rb + b];
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of an `N x C x H x W` tensor.
pub fn upsample_nearest_raw<T: Float>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / f) * w..(y / f + 1) * w];
            for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = srow[xo / f];
            }
        }
    }
    out
}
