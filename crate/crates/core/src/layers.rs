//! Parameterized convolution layers bound into a [`Graph`] on each forward pass.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2d {
    weight: usize,
    bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.push_normal(format!("{name}.weight"), &[cout, cin, kernel, kernel], INIT_STD, rng);
        let bias = store.push_normal(format!("{name}.bias"), &[cout], 0.0, rng);
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with_stride(g, store, x, self.stride)
    }

    pub fn forward_with_stride(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let w = g.param(store.key(self.weight), store.get(self.weight));
        let b = g.param(store.key(self.bias), store.get(self.bias));
        g.conv2d(x, w, Some(b), stride, self.pad)
    }
}

/// Stride-2 fractionally-strided convolution doubling spatial size.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpConv {
    weight: usize,
    bias: usize,
}

impl UpConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.push_normal(format!("{name}.weight"), &[cin, cout, 3, 3], INIT_STD, rng);
        let bias = store.push_normal(format!("{name}.bias"), &[cout], 0.0, rng);
        UpConv { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store.key(self.weight), store.get(self.weight));
        let b = g.param(store.key(self.bias), store.get(self.bias));
        g.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    }
}

/// Multiply-accumulate count of a `k x k` convolution producing `cout x ho x wo`.
pub(crate) fn conv_macs(cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    (cin * cout * k * k) as u64 * (ho * wo) as u64
}

pub(crate) fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}
