//! Encoder, residual transformation and decoder translation network.
//!
//! Layout at full width (`scale = 1`):
//!
//! | stage     | layer                                   | channels   |
//! |-----------|-----------------------------------------|------------|
//! | encoder   | reflect-pad 3, conv 7x7, norm, ReLU     | 3 -> 64    |
//! | encoder   | conv 3x3 stride 2, norm, ReLU           | 64 -> 128  |
//! | encoder   | conv 3x3 stride 2, norm, ReLU           | 128 -> 256 |
//! | transform | 9 x [`SrmConvBlock`]                    | 256        |
//! | decoder   | up-conv 3x3 stride 2, norm, ReLU        | 256 -> 128 |
//! | decoder   | up-conv 3x3 stride 2, norm, ReLU        | 128 -> 64  |
//! | decoder   | reflect-pad 3, conv 7x7, tanh           | 64 -> 3    |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::layers::{conv_macs, conv_param_count, Conv2d, UpConv, NORM_EPS};
use crate::params::ParamStore;
use crate::srm::SrmConvBlock;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    /// Encoder widths; the decoder mirrors them.
    pub widths: [usize; 3],
    pub blocks: usize,
    pub use_srm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_channels: 3,
            widths: [64, 128, 256],
            blocks: 9,
            use_srm: true,
        }
    }
}

pub(crate) fn scale_width(width: usize, scale: f64) -> usize {
    ((width as f64 * scale).round() as usize).max(1)
}

impl GeneratorConfig {
    /// The default architecture with every width multiplied by `scale`.
    pub fn scaled(scale: f64) -> Self {
        let base = Self::default();
        GeneratorConfig {
            widths: base.widths.map(|w| scale_width(w, scale)),
            ..base
        }
    }

    /// Exact number of scalar parameters of a generator built from this config.
    pub fn count_parameters(&self) -> usize {
        let [w0, w1, w2] = self.widths;
        let c = self.image_channels;
        if w0 == 0 && w1 == 0 && w2 == 0 && c == 0 {
            return 0;
        }
        conv_param_count(c, w0, 7)
            + conv_param_count(w0, w1, 3)
            + conv_param_count(w1, w2, 3)
            + self.blocks * SrmConvBlock::param_count(w2, self.use_srm)
            + conv_param_count(w2, w1, 3)
            + conv_param_count(w1, w0, 3)
            + conv_param_count(w0, c, 7)
    }

    /// Multiply-accumulates of one forward pass on an `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let [w0, w1, w2] = self.widths;
        let c = self.image_channels;
        let (h2, w2s) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        conv_macs(c, w0, 7, h, w)
            + conv_macs(w0, w1, 3, h2, w2s)
            + conv_macs(w1, w2, 3, h4, w4)
            + self.blocks as u64 * 2 * conv_macs(w2, w2, 3, h4, w4)
            // a transposed conv costs Cin*Cout*k*k per input position
            + conv_macs(w2, w1, 3, h4, w4)
            + conv_macs(w1, w0, 3, h2, w2s)
            + conv_macs(w0, c, 7, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    enc: [Conv2d; 3],
    blocks: Vec<SrmConvBlock>,
    dec: [UpConv; 2],
    out: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [w0, w1, w2] = config.widths;
        let c = config.image_channels;
        let enc = [
            Conv2d::new(&mut p, "enc0", c, w0, 7, 1, 0, &mut rng),
            Conv2d::new(&mut p, "enc1", w0, w1, 3, 2, 1, &mut rng),
            Conv2d::new(&mut p, "enc2", w1, w2, 3, 2, 1, &mut rng),
        ];
        let blocks = (0..config.blocks)
            .map(|i| SrmConvBlock::new(&mut p, &format!("block{i}"), w2, config.use_srm, &mut rng))
            .collect();
        let dec = [
            UpConv::new(&mut p, "dec0", w2, w1, &mut rng),
            UpConv::new(&mut p, "dec1", w1, w0, &mut rng),
        ];
        let out = Conv2d::new(&mut p, "out", w0, c, 7, 1, 0, &mut rng);
        Generator {
            config,
            params: p,
            enc,
            blocks,
            dec,
            out,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Checks the `[N, C, H, W]` input contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape(format!("generator input must be [N, C, H, W], got {shape:?}")));
        };
        if *c != self.config.image_channels {
            return Err(Error::shape(format!(
                "generator expects {} channels, got {c}",
                self.config.image_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || *h < 8 || *w < 8 {
            return Err(Error::shape(format!(
                "generator needs height and width divisible by 4 (and at least 8), got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let p = &self.params;
        let mut h = g.reflect_pad(x, 3)?;
        for conv in &self.enc {
            h = conv.forward(g, p, h)?;
            h = g.instance_norm(h, NORM_EPS)?;
            h = g.relu(h);
        }
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
        }
        for up in &self.dec {
            h = up.forward(g, p, h)?;
            h = g.instance_norm(h, NORM_EPS)?;
            h = g.relu(h);
        }
        h = g.reflect_pad(h, 3)?;
        h = self.out.forward(g, p, h)?;
        Ok(g.tanh(h))
    }

    /// Translates a batch `[N, C, H, W]`.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Translates one image.
    pub fn generate(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let out = self.forward_tensor(&img.tensor().clone().unsqueeze0())?;
        ImageTensor::clamped(out.index0(0))
    }
}
