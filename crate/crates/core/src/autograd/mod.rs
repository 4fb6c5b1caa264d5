//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every op evaluates eagerly and records enough context to push gradients
//! back to its inputs. A [`Graph`] is built per forward pass and dropped
//! after [`Graph::backward`].

mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamKey;
use crate::tensor::Tensor;

pub(crate) use kernels::{gemm, reflect};
use kernels::{col2im, im2col, Window};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
    MeanPerSample(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    StylePool(Var),
    StyleIntegrate {
        t: Var,
        w: Var,
        b: Var,
    },
    ChannelScale {
        x: Var,
        g: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    UpperGram(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamKey, Tensor>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient accumulated over every binding of the parameter `key`.
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Grads::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter tensor. Binding the same key more than once
    /// accumulates the gradients of all bindings.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(key), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.mean());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Mean over every axis but the leading one: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("mean_per_sample of a rank-0 tensor"))?;
        let inner = if n == 0 { 0 } else { t.numel() / n };
        if inner == 0 {
            return Err(Error::invalid("mean_per_sample of an empty tensor"));
        }
        let data = t
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::from_vec(&[n], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanPerSample(a), rg))
    }

    /// 2-d convolution with zero padding. `x: [N, Cin, H, W]`,
    /// `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} weight {:?} stride {stride}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} larger than padded input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d: bias length must equal Cout"));
            }
        }
        let win = Window {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = (win.out_height(), win.out_width());
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = vec![0.0; win.col_rows() * win.col_cols()];
        let in_plane = cin * h * wd;
        let out_plane = cout * ho * wo;
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                im2col(&xd[s * in_plane..(s + 1) * in_plane], &win, &mut cols);
                gemm(
                    cout,
                    win.col_rows(),
                    ho * wo,
                    wdat,
                    false,
                    &cols,
                    false,
                    &mut od[s * out_plane..(s + 1) * out_plane],
                    0.0,
                );
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Fractionally-strided convolution. `w: [Cin, Cout, k, k]`; the output
    /// is `(H - 1) * stride - 2 * pad + k + output_padding` high.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 || output_padding >= stride {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?} weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let ho = ((h - 1) * stride + k + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: padding too large"))?;
        let wo = ((wd - 1) * stride + k + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: padding too large"))?;
        let win = Window {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!((win.out_height(), win.out_width()), (h, wd));
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let mut cols = vec![0.0; win.col_rows() * h * wd];
        let in_plane = cin * h * wd;
        let out_plane = cout * ho * wo;
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                gemm(
                    win.col_rows(),
                    cin,
                    h * wd,
                    wdat,
                    true,
                    &xd[s * in_plane..(s + 1) * in_plane],
                    false,
                    &mut cols,
                    0.0,
                );
                col2im(&cols, &win, &mut od[s * out_plane..(s + 1) * out_plane]);
            }
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv_transpose2d: bias length must equal Cout"));
            }
            add_channel_bias(&mut out, self.value(b).data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::shape(format!(
                "reflection padding {pad} needs spatial dims > {pad}, got {h}x{w}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, hp, wp]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                let s = &src[p * h * w..(p + 1) * h * w];
                let d = &mut dst[p * hp * wp..(p + 1) * hp * wp];
                for i in 0..hp {
                    let si = reflect(i as isize - pad as isize, h);
                    for j in 0..wp {
                        let sj = reflect(j as isize - pad as isize, w);
                        d[i * wp + j] = s[si * w + sj];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad { x, pad }, rg))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Per-channel `(mean, std)` style statistics: `[N, C, H, W] -> [N, C, 2]`.
    /// `eps` is added to the variance before the square root.
    pub fn style_pool(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("style pooling of an empty feature map"));
        }
        let mut data = Vec::with_capacity(n * c * 2);
        for plane in self.value(x).data().chunks(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            data.push(mean);
            data.push((var + eps).sqrt());
        }
        let value = Tensor::from_vec(&[n, c, 2], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::StylePool(x), rg))
    }

    /// Channel-shared 1-d convolution of width two over `(mean, std)` followed
    /// by a sigmoid: `t: [N, C, 2]`, `w: [2]`, `b: [1]` -> `[N, C]`.
    pub fn style_integrate(&mut self, t: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.value(t).shape().to_vec();
        if shape.len() != 3 || shape[2] != 2 {
            return Err(Error::shape(format!(
                "style descriptor must be [N, C, 2], got {shape:?}"
            )));
        }
        if self.value(w).shape() != [2] || self.value(b).shape() != [1] {
            return Err(Error::shape(format!(
                "style integration kernel must be [2] with bias [1], got {:?} and {:?}",
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let (w0, w1) = (self.value(w).data()[0], self.value(w).data()[1]);
        let bias = self.value(b).data()[0];
        let data = self
            .value(t)
            .data()
            .chunks(2)
            .map(|s| sigmoid(w0 * s[0] + w1 * s[1] + bias))
            .collect();
        let value = Tensor::from_vec(&shape[..2], data)?;
        let rg = self.rg(t) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::StyleIntegrate { t, w, b }, rg))
    }

    /// `out[n, c, i, j] = g[n, c] * x[n, c, i, j]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(g).shape() != [n, c] {
            return Err(Error::shape(format!(
                "channel weights {:?} do not match feature map {:?}",
                self.value(g).shape(),
                self.value(x).shape()
            )));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        let gd = self.value(g).data();
        for (plane, &gv) in out.data_mut().chunks_mut(hw.max(1)).zip(gd) {
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::ChannelScale { x, g }, rg))
    }

    fn check_even(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "{what}: 2x2 pooling needs even spatial dims, got {h}x{w}"
            )));
        }
        Ok((n, c, h, w))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.check_even(x, "max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                let base = p * h * w;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = base + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        dst[p * ho * wo + i * wo + j] = src[best];
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.check_even(x, "avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                let base = p * h * w;
                for i in 0..ho {
                    for j in 0..wo {
                        let a = base + 2 * i * w + 2 * j;
                        dst[p * ho * wo + i * wo + j] =
                            0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Row-major flattening of the upper triangle (diagonal included) of
    /// `v^T v` for every sample: `[N, C, ...] -> [N, C*C]` where each sample
    /// holds exactly `C` values.
    pub fn upper_gram(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let c = *t
            .shape()
            .get(1)
            .ok_or_else(|| Error::shape("upper_gram needs [N, C, ...]"))?;
        if n * c != t.numel() {
            return Err(Error::shape(format!(
                "upper_gram needs one value per channel, got {:?}",
                t.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, c * c]);
        {
            let src = t.data();
            let dst = out.data_mut();
            for s in 0..n {
                let v = &src[s * c..(s + 1) * c];
                let o = &mut dst[s * c * c..(s + 1) * c * c];
                for i in 0..c {
                    for j in i..c {
                        o[i * c + j] = v[i] * v[j];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::UpperGram(x), rg))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: HashMap<ParamKey, Tensor> = HashMap::new();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads, &mut params)?;
            grads[idx] = Some(dy);
        }
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut HashMap<ParamKey, Tensor>,
    ) -> Result<()> {
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let x = self.value(a).data();
            let y = node.value.data();
            let data = x
                .iter()
                .zip(y)
                .zip(dy.data())
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect();
            Tensor::from_vec(node.value.shape(), data).expect("elementwise shape")
        };
        match node.op {
            Op::Leaf => {}
            Op::Param(key) => match params.get_mut(&key) {
                Some(existing) => existing.add_assign(dy),
                None => {
                    params.insert(key, dy.clone());
                }
            },
            Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.map(|v| -v));
            }
            Op::Scale(a, s) => self.accumulate(grads, a, dy.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, a, dy.clone()),
            Op::Abs(a) => {
                let g = elementwise(a, &|x, _, g| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, g);
            }
            Op::Square(a) => {
                let g = elementwise(a, &|x, _, g| 2.0 * x * g);
                self.accumulate(grads, a, g);
            }
            Op::Relu(a) => {
                let g = elementwise(a, &|x, _, g| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let g = elementwise(a, &|x, _, g| if x > 0.0 { g } else { slope * g });
                self.accumulate(grads, a, g);
            }
            Op::Tanh(a) => {
                let g = elementwise(a, &|_, y, g| g * (1.0 - y * y));
                self.accumulate(grads, a, g);
            }
            Op::Sigmoid(a) => {
                let g = elementwise(a, &|_, y, g| g * y * (1.0 - y));
                self.accumulate(grads, a, g);
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let g = dy.data()[0] / t.numel() as f64;
                self.accumulate(grads, a, Tensor::full(t.shape(), g));
            }
            Op::MeanPerSample(a) => {
                let t = self.value(a);
                let n = t.shape()[0];
                let inner = t.numel() / n;
                let mut g = Tensor::zeros(t.shape());
                for (chunk, &d) in g.data_mut().chunks_mut(inner).zip(dy.data()) {
                    chunk.iter_mut().for_each(|v| *v = d / inner as f64);
                }
                self.accumulate(grads, a, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(dy, grads, x, w, b, stride, pad)?,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_transpose2d_backward(node, dy, grads, x, w, b, stride, pad)?,
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut g = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data_mut();
                let dd = dy.data();
                for p in 0..n * c {
                    for i in 0..hp {
                        let si = reflect(i as isize - pad as isize, h);
                        for j in 0..wp {
                            let sj = reflect(j as isize - pad as isize, w);
                            gd[p * h * w + si * w + sj] += dd[p * hp * wp + i * wp + j];
                        }
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::InstanceNorm { x, ref inv_std } => {
                let (_, _, h, w) = self.value(x).dims4()?;
                let hw = (h * w) as f64;
                let mut g = Tensor::zeros(self.value(x).shape());
                for (((gp, yp), dp), &inv) in g
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(node.value.data().chunks(h * w))
                    .zip(dy.data().chunks(h * w))
                    .zip(inv_std)
                {
                    let mean_d = dp.iter().sum::<f64>() / hw;
                    let mean_dy = dp.iter().zip(yp).map(|(d, y)| d * y).sum::<f64>() / hw;
                    for ((gv, &yv), &dv) in gp.iter_mut().zip(yp).zip(dp) {
                        *gv = inv * (dv - mean_d - yv * mean_dy);
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::StylePool(x) => {
                let (_, _, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let mut g = Tensor::zeros(self.value(x).shape());
                for (((gp, xp), stats), d) in g
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(self.value(x).data().chunks(hw))
                    .zip(node.value.data().chunks(2))
                    .zip(dy.data().chunks(2))
                {
                    let (mean, std) = (stats[0], stats[1]);
                    let d_mean = d[0] / hw as f64;
                    let d_std = if std > 0.0 {
                        d[1] / (hw as f64 * std)
                    } else {
                        0.0
                    };
                    for (gv, &xv) in gp.iter_mut().zip(xp) {
                        *gv = d_mean + d_std * (xv - mean);
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::StyleIntegrate { t, w, b } => {
                let (w0, w1) = (self.value(w).data()[0], self.value(w).data()[1]);
                let td = self.value(t).data();
                let mut gt = Tensor::zeros(self.value(t).shape());
                let (mut gw0, mut gw1, mut gb) = (0.0, 0.0, 0.0);
                for (i, (&gv, &d)) in node.value.data().iter().zip(dy.data()).enumerate() {
                    let dz = d * gv * (1.0 - gv);
                    gt.data_mut()[2 * i] = dz * w0;
                    gt.data_mut()[2 * i + 1] = dz * w1;
                    gw0 += dz * td[2 * i];
                    gw1 += dz * td[2 * i + 1];
                    gb += dz;
                }
                self.accumulate(grads, t, gt);
                self.accumulate(grads, w, Tensor::from_vec(&[2], vec![gw0, gw1])?);
                self.accumulate(grads, b, Tensor::scalar(gb));
            }
            Op::ChannelScale { x, g } => {
                let (_, _, h, w) = self.value(x).dims4()?;
                let hw = (h * w).max(1);
                let xd = self.value(x).data();
                let gd = self.value(g).data();
                let mut gx = Tensor::zeros(self.value(x).shape());
                let mut gg = Tensor::zeros(self.value(g).shape());
                for (p, ((gxp, dp), xp)) in gx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(dy.data().chunks(hw))
                    .zip(xd.chunks(hw))
                    .enumerate()
                {
                    let mut acc = 0.0;
                    for ((gv, &dv), &xv) in gxp.iter_mut().zip(dp).zip(xp) {
                        *gv = dv * gd[p];
                        acc += dv * xv;
                    }
                    gg.data_mut()[p] = acc;
                }
                self.accumulate(grads, x, gx);
                self.accumulate(grads, g, gg);
            }
            Op::MaxPool2 { x, ref argmax } => {
                let mut g = Tensor::zeros(self.value(x).shape());
                for (&idx, &d) in argmax.iter().zip(dy.data()) {
                    g.data_mut()[idx] += d;
                }
                self.accumulate(grads, x, g);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let mut g = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data_mut();
                for p in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = 0.25 * dy.data()[p * ho * wo + i * wo + j];
                            let a = p * h * w + 2 * i * w + 2 * j;
                            gd[a] += d;
                            gd[a + 1] += d;
                            gd[a + w] += d;
                            gd[a + w + 1] += d;
                        }
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::UpperGram(x) => {
                let t = self.value(x);
                let n = t.shape()[0];
                let c = t.shape()[1];
                let mut g = Tensor::zeros(t.shape());
                for s in 0..n {
                    let v = &t.data()[s * c..(s + 1) * c];
                    let d = &dy.data()[s * c * c..(s + 1) * c * c];
                    let gs = &mut g.data_mut()[s * c..(s + 1) * c];
                    for i in 0..c {
                        for j in i..c {
                            let dij = d[i * c + j];
                            gs[i] += dij * v[j];
                            gs[j] += dij * v[i];
                        }
                    }
                }
                self.accumulate(grads, x, g);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, _, k, _) = self.value(w).dims4()?;
        let win = Window {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let in_plane = cin * h * wd;
        let out_plane = cout * ncols;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let dd = dy.data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gx = need_x.then(|| Tensor::zeros(self.value(x).shape()));
        let mut gw = need_w.then(|| Tensor::zeros(self.value(w).shape()));
        let mut cols = vec![0.0; rows * ncols];
        let mut dcols = vec![0.0; rows * ncols];
        for s in 0..n {
            let d = &dd[s * out_plane..(s + 1) * out_plane];
            if let Some(gw) = gw.as_mut() {
                im2col(&xd[s * in_plane..(s + 1) * in_plane], &win, &mut cols);
                gemm(cout, ncols, rows, d, false, &cols, true, gw.data_mut(), 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(rows, cout, ncols, wdat, true, d, false, &mut dcols, 0.0);
                col2im(
                    &dcols,
                    &win,
                    &mut gx.data_mut()[s * in_plane..(s + 1) * in_plane],
                );
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, gw);
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(dy)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        node: &Node,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (_, cout, ho, wo) = node.value.dims4()?;
        let k = self.value(w).shape()[2];
        let win = Window {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        let rows = win.col_rows();
        let in_plane = cin * h * wd;
        let out_plane = cout * ho * wo;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gx = need_x.then(|| Tensor::zeros(self.value(x).shape()));
        let mut gw = need_w.then(|| Tensor::zeros(self.value(w).shape()));
        let mut cols = vec![0.0; rows * h * wd];
        for s in 0..n {
            im2col(&dy.data()[s * out_plane..(s + 1) * out_plane], &win, &mut cols);
            if let Some(gx) = gx.as_mut() {
                gemm(
                    cin,
                    rows,
                    h * wd,
                    wdat,
                    false,
                    &cols,
                    false,
                    &mut gx.data_mut()[s * in_plane..(s + 1) * in_plane],
                    0.0,
                );
            }
            if let Some(gw) = gw.as_mut() {
                gemm(
                    cin,
                    h * wd,
                    rows,
                    &xd[s * in_plane..(s + 1) * in_plane],
                    false,
                    &cols,
                    true,
                    gw.data_mut(),
                    1.0,
                );
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, gw);
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(dy)?);
        }
        Ok(())
    }
}

fn add_channel_bias(out: &mut Tensor, bias: &[f64]) {
    let (_, c, h, w) = out.dims4().expect("rank-4 output");
    for (p, plane) in out.data_mut().chunks_mut((h * w).max(1)).enumerate() {
        let b = bias[p % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(dy: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = dy.dims4()?;
    let mut sums = vec![0.0; c];
    for (p, plane) in dy.data().chunks((h * w).max(1)).enumerate() {
        sums[p % c] += plane.iter().sum::<f64>();
    }
    Tensor::from_vec(&[c], sums)
}
