//! Style-based recalibration.
//!
//! A feature map is summarized per channel by its mean and standard
//! deviation (style pooling). A single width-two 1-d convolution shared by
//! all channels turns each `(mean, std)` pair into a gate in `(0, 1)`
//! (style integration), and the feature map is rescaled channel by channel
//! with those gates (recalibration).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{conv_param_count, Conv2d, INIT_STD, NORM_EPS};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Added to the variance before the square root inside trainable SRM layers,
/// so the gradient stays finite on constant channels.
pub const STYLE_EPS: f64 = 1e-5;

/// A `[C, H, W]` activation tensor with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => {}
            s => {
                return Err(Error::shape(format!(
                    "feature map must be a non-empty [C, H, W], got {s:?}"
                )))
            }
        }
        if !t.is_finite() {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn batched(&self) -> Tensor {
        self.0.clone().unsqueeze0()
    }
}

/// Per-channel `(mean, std)` pairs, shape `[C, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDescriptor(Tensor);

impl StyleDescriptor {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [_, 2] => {}
            s => return Err(Error::shape(format!("style descriptor must be [C, 2], got {s:?}"))),
        }
        if t.data().chunks(2).any(|p| p[1] < 0.0) {
            return Err(Error::invalid("style descriptor has a negative deviation"));
        }
        Ok(StyleDescriptor(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn mean(&self, c: usize) -> f64 {
        self.0.data()[2 * c]
    }

    pub fn std(&self, c: usize) -> f64 {
        self.0.data()[2 * c + 1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-channel gates, shape `[C, 1]`, each in `(0, 1)` (up to `f64`
/// saturation of the sigmoid).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleWeights(Tensor);

impl StyleWeights {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [_, 1] => {}
            s => return Err(Error::shape(format!("style weights must be [C, 1], got {s:?}"))),
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("style weights must lie in [0, 1]"));
        }
        Ok(StyleWeights(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Weights of the channel-shared width-two convolution over `(mean, std)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationKernel {
    pub weights: [f64; 2],
    pub bias: f64,
}

impl IntegrationKernel {
    pub fn from_slice(weights: &[f64], bias: f64) -> Result<Self> {
        let weights: [f64; 2] = weights.try_into().map_err(|_| {
            Error::shape(format!(
                "integration kernel spans (mean, std) and needs 2 weights, got {}",
                weights.len()
            ))
        })?;
        Ok(IntegrationKernel { weights, bias })
    }

    pub fn zeros() -> Self {
        IntegrationKernel {
            weights: [0.0; 2],
            bias: 0.0,
        }
    }

    fn bind(&self, g: &mut Graph) -> (Var, Var) {
        let w = g.input(Tensor::from_vec(&[2], self.weights.to_vec()).expect("two weights"));
        let b = g.input(Tensor::scalar(self.bias));
        (w, b)
    }
}

/// Exact per-channel mean and population standard deviation.
pub fn style_pool(f: &FeatureMap) -> Result<StyleDescriptor> {
    let mut g = Graph::new();
    let x = g.input(f.batched());
    let t = g.style_pool(x, 0.0)?;
    let c = f.channels();
    StyleDescriptor::new(g.value(t).clone().reshape(&[c, 2])?)
}

pub fn style_integrate(t: &StyleDescriptor, kernel: &IntegrationKernel) -> Result<StyleWeights> {
    let c = t.channels();
    let mut g = Graph::new();
    let tv = g.input(t.tensor().clone().unsqueeze0());
    let (w, b) = kernel.bind(&mut g);
    let out = g.style_integrate(tv, w, b)?;
    StyleWeights::new(g.value(out).clone().reshape(&[c, 1])?)
}

pub fn recalibrate(f: &FeatureMap, weights: &StyleWeights) -> Result<FeatureMap> {
    if weights.channels() != f.channels() {
        return Err(Error::shape(format!(
            "{} style weights for {} channels",
            weights.channels(),
            f.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(f.batched());
    let gv = g.input(weights.tensor().clone().reshape(&[1, f.channels()])?);
    let out = g.channel_scale(x, gv)?;
    FeatureMap::new(g.value(out).index0(0))
}

/// Full recalibration of one feature map, with the same [`STYLE_EPS`]
/// guard used inside the networks.
pub fn srm_layer(f: &FeatureMap, kernel: &IntegrationKernel) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.input(f.batched());
    let (w, b) = kernel.bind(&mut g);
    let out = srm_graph(&mut g, x, w, b)?;
    FeatureMap::new(g.value(out).index0(0))
}

/// `x * sigmoid(w * style_pool(x) + b)` on a batched graph node.
pub fn srm_graph(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let t = g.style_pool(x, STYLE_EPS)?;
    let gates = g.style_integrate(t, w, b)?;
    g.channel_scale(x, gates)
}

/// Trainable SRM layer: three parameters (two kernel weights and a bias).
#[derive(Clone, Copy, Debug)]
pub struct SrmLayer {
    weight: usize,
    bias: usize,
}

impl SrmLayer {
    pub const PARAMS: usize = 3;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let weight = store.push_normal(format!("{name}.weight"), &[2], INIT_STD, rng);
        let bias = store.push_normal(format!("{name}.bias"), &[1], 0.0, rng);
        SrmLayer { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store.key(self.weight), store.get(self.weight));
        let b = g.param(store.key(self.bias), store.get(self.bias));
        srm_graph(g, x, w, b)
    }

    pub fn kernel(&self, store: &ParamStore) -> IntegrationKernel {
        let w = store.get(self.weight).data();
        IntegrationKernel {
            weights: [w[0], w[1]],
            bias: store.get(self.bias).data()[0],
        }
    }
}

/// Residual block with recalibration after each normalization:
/// `x + [pad, conv3, norm, srm, relu, pad, conv3, norm, srm](x)`.
#[derive(Clone, Debug)]
pub struct SrmConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    srm1: Option<SrmLayer>,
    srm2: Option<SrmLayer>,
}

impl SrmConvBlock {
    /// `use_srm = false` yields the plain residual block.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        use_srm: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), width, width, 3, 1, 0, rng);
        let srm1 = use_srm.then(|| SrmLayer::new(store, &format!("{name}.srm1"), rng));
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, 0, rng);
        let srm2 = use_srm.then(|| SrmLayer::new(store, &format!("{name}.srm2"), rng));
        SrmConvBlock {
            conv1,
            conv2,
            srm1,
            srm2,
        }
    }

    pub fn param_count(width: usize, use_srm: bool) -> usize {
        2 * conv_param_count(width, width, 3) + if use_srm { 2 * SrmLayer::PARAMS } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = g.reflect_pad(x, 1)?;
        h = self.conv1.forward(g, store, h)?;
        h = g.instance_norm(h, NORM_EPS)?;
        if let Some(srm) = &self.srm1 {
            h = srm.forward(g, store, h)?;
        }
        h = g.relu(h);
        h = g.reflect_pad(h, 1)?;
        h = self.conv2.forward(g, store, h)?;
        h = g.instance_norm(h, NORM_EPS)?;
        if let Some(srm) = &self.srm2 {
            h = srm.forward(g, store, h)?;
        }
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(shape: &[usize], data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(shape, data).unwrap()).unwrap()
    }

    fn random_map(shape: &[usize], seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        fm(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn pooling_constant_channel() {
        let t = style_pool(&fm(&[1, 3, 3], vec![4.5; 9])).unwrap();
        assert_eq!((t.mean(0), t.std(0)), (4.5, 0.0));
    }

    #[test]
    fn pooling_hand_example() {
        let t = style_pool(&fm(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((t.mean(0) - 2.5).abs() < 1e-12);
        assert!((t.std(0) - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pooling_shift() {
        let f = random_map(&[3, 4, 5], 1);
        let shifted = fm(&[3, 4, 5], f.tensor().data().iter().map(|v| v + 2.0).collect());
        let (a, b) = (style_pool(&f).unwrap(), style_pool(&shifted).unwrap());
        for c in 0..3 {
            assert!((b.mean(c) - a.mean(c) - 2.0).abs() < 1e-12);
            assert!((b.std(c) - a.std(c)).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_map_rejects_empty() {
        assert!(FeatureMap::new(Tensor::zeros(&[2, 0, 3])).is_err());
        assert!(FeatureMap::new(Tensor::full(&[1, 1, 1], f64::NAN)).is_err());
    }

    #[test]
    fn integration_examples() {
        let t = StyleDescriptor::new(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -3.0, 2.0]).unwrap())
            .unwrap();
        let g = style_integrate(&t, &IntegrationKernel::zeros()).unwrap();
        assert_eq!(g.tensor().data(), &[0.5, 0.5]);

        let k = IntegrationKernel::from_slice(&[1.0, 1.0], 0.0).unwrap();
        let g = style_integrate(&t, &k).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.tensor().data()[0] - want).abs() < 1e-12);
        assert!((g.tensor().data()[0] - 0.7311).abs() < 1e-4);

        assert!(IntegrationKernel::from_slice(&[1.0, 2.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn recalibration_examples() {
        let f = fm(&[2, 2, 2], vec![2., 4., 6., 8., 1., 1., 1., 1.]);
        let ones = StyleWeights::new(Tensor::full(&[2, 1], 1.0)).unwrap();
        assert_eq!(recalibrate(&f, &ones).unwrap(), f);
        let zeros = StyleWeights::new(Tensor::zeros(&[2, 1])).unwrap();
        assert_eq!(recalibrate(&f, &zeros).unwrap().tensor().max_abs(), 0.0);
        let half = StyleWeights::new(Tensor::from_vec(&[2, 1], vec![0.5, 1.0]).unwrap()).unwrap();
        let out = recalibrate(&f, &half).unwrap();
        assert_eq!(&out.tensor().data()[..4], &[1., 2., 3., 4.]);
        let three = StyleWeights::new(Tensor::full(&[3, 1], 1.0)).unwrap();
        assert!(recalibrate(&f, &three).is_err());
    }

    #[test]
    fn srm_layer_zero_and_shape() {
        let k = IntegrationKernel::from_slice(&[0.3, -0.8], 0.1).unwrap();
        let zero = fm(&[8, 16, 16], vec![0.0; 8 * 256]);
        let out = srm_layer(&zero, &k).unwrap();
        assert_eq!(out.tensor().shape(), &[8, 16, 16]);
        assert_eq!(out.tensor().max_abs(), 0.0);
    }

    #[test]
    fn srm_layer_gradient_matches_finite_differences() {
        let f = random_map(&[3, 4, 5], 7);
        let kernel = Tensor::from_vec(&[2], vec![0.6, -1.1]).unwrap();
        let loss = |g: &mut Graph, x: Var, w: Var| {
            let b = g.input(Tensor::scalar(0.05));
            let y = srm_graph(g, x, w, b).unwrap();
            let s = g.square(y);
            g.mean(s).unwrap()
        };
        let mut g = Graph::new();
        let x = g.input_with_grad(f.tensor().clone().unsqueeze0());
        let w = g.input_with_grad(kernel.clone());
        let l = loss(&mut g, x, w);
        let grads = g.backward(l).unwrap();
        let numeric_x = central_difference(
            |t| {
                let mut g = Graph::new();
                let x = g.input(t.clone());
                let w = g.input(kernel.clone());
                let l = loss(&mut g, x, w);
                g.scalar(l)
            },
            &f.tensor().clone().unsqueeze0(),
            1e-6,
        );
        assert!(max_relative_error(grads.wrt(x).unwrap(), &numeric_x, 1e-7) < 1e-4);
        let numeric_w = central_difference(
            |t| {
                let mut g = Graph::new();
                let x = g.input(f.tensor().clone().unsqueeze0());
                let w = g.input(t.clone());
                let l = loss(&mut g, x, w);
                g.scalar(l)
            },
            &kernel,
            1e-6,
        );
        assert!(max_relative_error(grads.wrt(w).unwrap(), &numeric_w, 1e-7) < 1e-4);
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = SrmConvBlock::new(&mut store, "b", 4, true, &mut rng);
        for i in 0..store.len() {
            store.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = random_map(&[4, 6, 6], 3);
        let mut g = Graph::new();
        let x = g.input(f.tensor().clone().unsqueeze0());
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), f.tensor().data());
    }

    #[test]
    fn block_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        SrmConvBlock::new(&mut store, "b", 5, true, &mut rng);
        assert_eq!(store.count(), SrmConvBlock::param_count(5, true));
        let mut plain = ParamStore::new();
        SrmConvBlock::new(&mut plain, "b", 5, false, &mut rng);
        assert_eq!(plain.count() + 6, store.count());
    }
}
