//! Style discriminator.
//!
//! A shared convolutional encoder (each conv followed by an SRM layer and a
//! leaky ReLU) produces a feature map `M` with a 16x16 spatial grid. Two
//! heads read `M`:
//!
//! * the decision head maps `M` to a grid of overlapping patch logits,
//!   squashes each through a sigmoid and averages them into one score;
//! * the style head fuses max and average pooling four times (16 -> 1),
//!   giving one value per channel `V`, and emits the row-major flattening
//!   of `V^T V` with its strict lower triangle zeroed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::scale_width;
use crate::image::ImageTensor;
use crate::layers::{conv_macs, conv_param_count, Conv2d};
use crate::params::ParamStore;
use crate::srm::{FeatureMap, SrmLayer};

/// Spatial size of the encoded map consumed by the style head.
pub const STYLE_GRID: usize = 16;
/// Number of max/avg pooling-fusion stages (16 -> 8 -> 4 -> 2 -> 1).
pub const FUSION_STAGES: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_channels: usize,
    pub widths: [usize; 4],
    pub use_srm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_channels: 3,
            widths: [64, 128, 256, 512],
            use_srm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn scaled(scale: f64) -> Self {
        let base = Self::default();
        DiscriminatorConfig {
            widths: base.widths.map(|w| scale_width(w, scale)),
            ..base
        }
    }

    /// Channel count `C` of the encoded map; the style vector has `C * C` entries.
    pub fn style_channels(&self) -> usize {
        self.widths[3]
    }

    pub fn count_parameters(&self) -> usize {
        let mut cin = self.image_channels;
        let mut n = 0;
        for &w in &self.widths {
            n += conv_param_count(cin, w, 3);
            if self.use_srm {
                n += SrmLayer::PARAMS;
            }
            cin = w;
        }
        n + conv_param_count(cin, 1, 3)
    }

    pub fn macs(&self, size: usize) -> Result<u64> {
        let down = downsample_stages(size, size)?;
        let mut cin = self.image_channels;
        let mut s = size;
        let mut total = 0;
        for (i, &w) in self.widths.iter().enumerate() {
            if i < down {
                s /= 2;
            }
            total += conv_macs(cin, w, 3, s, s);
            cin = w;
        }
        Ok(total + conv_macs(cin, 1, 3, s, s))
    }
}

/// How many leading stride-2 encoder convs bring an `h x w` input to the
/// 16x16 grid.
pub fn downsample_stages(h: usize, w: usize) -> Result<usize> {
    if h != w {
        return Err(Error::shape(format!(
            "style discriminator needs square inputs, got {h}x{w}"
        )));
    }
    (0..=FUSION_STAGES)
        .find(|&k| STYLE_GRID << k == h)
        .ok_or_else(|| {
            Error::shape(format!(
                "style discriminator input must be 16, 32, 64, 128 or 256 pixels square, got {h}"
            ))
        })
}

/// Flattened upper-triangular channel correlation, length `C * C`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    channels: usize,
    data: Vec<f64>,
}

impl StyleVector {
    pub fn new(channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * channels {
            return Err(Error::shape(format!(
                "style vector for {channels} channels needs {} entries, got {}",
                channels * channels,
                data.len()
            )));
        }
        Ok(StyleVector { channels, data })
    }

    /// Builds the vector from the pooled per-channel values `V`.
    pub fn from_pooled(v: &[f64]) -> Self {
        let c = v.len();
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            for j in i..c {
                data[i * c + j] = v[i] * v[j];
            }
        }
        StyleVector { channels: c, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.channels + j]
    }
}

/// Zeroes the strict lower triangle of a row-major `c x c` matrix.
pub fn mask_upper(matrix: &[f64], c: usize) -> Vec<f64> {
    let mut out = matrix.to_vec();
    for i in 0..c {
        for j in 0..i.min(c) {
            out[i * c + j] = 0.0;
        }
    }
    out
}

/// Mean of per-patch sigmoid decisions.
pub fn patch_decision(logits: &[f64]) -> f64 {
    let s: f64 = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).sum();
    s / logits.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub decision: f64,
    pub style: StyleVector,
}

/// Graph handles of both heads: `decision: [N]`, `style: [N, C*C]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub decision: Var,
    pub style: Var,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: Conv2d,
    srm: Option<SrmLayer>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = config.image_channels;
        let mut encoder = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let conv = Conv2d::new(&mut p, &format!("enc{i}"), cin, w, 3, 2, 1, &mut rng);
            let srm = config
                .use_srm
                .then(|| SrmLayer::new(&mut p, &format!("enc{i}.srm"), &mut rng));
            encoder.push(EncoderStage { conv, srm });
            cin = w;
        }
        let head = Conv2d::new(&mut p, "head", cin, 1, 3, 1, 1, &mut rng);
        Discriminator {
            config,
            params: p,
            encoder,
            head,
        }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    /// Encodes `[N, C, S, S]` images into `M: [N, C', 16, 16]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.image_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {c}",
                self.config.image_channels
            )));
        }
        let down = downsample_stages(h, w)?;
        let mut m = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            let stride = if i < down { 2 } else { 1 };
            m = stage.conv.forward_with_stride(g, &self.params, m, stride)?;
            if let Some(srm) = &stage.srm {
                m = srm.forward(g, &self.params, m)?;
            }
            m = g.leaky_relu(m, LEAKY_SLOPE);
        }
        Ok(m)
    }

    /// Patch-averaged decision in `[0, 1]` per sample.
    pub fn decide(&self, g: &mut Graph, m: Var) -> Result<Var> {
        let logits = self.head.forward(g, &self.params, m)?;
        let p = g.sigmoid(logits);
        g.mean_per_sample(p)
    }

    /// Parameter-free style head: `[N, C, 16, 16] -> [N, C*C]`.
    pub fn style_vector(g: &mut Graph, m: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(m).dims4()?;
        if h != STYLE_GRID || w != STYLE_GRID {
            return Err(Error::shape(format!(
                "style head needs a {STYLE_GRID}x{STYLE_GRID} map to reach 1x1 in {FUSION_STAGES} stages, got {h}x{w}"
            )));
        }
        let mut v = m;
        for _ in 0..FUSION_STAGES {
            let mx = g.max_pool2(v)?;
            let av = g.avg_pool2(v)?;
            v = g.add(mx, av)?;
        }
        g.upper_gram(v)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DiscriminatorVars> {
        let m = self.encode(g, x)?;
        let decision = self.decide(g, m)?;
        let style = Self::style_vector(g, m)?;
        Ok(DiscriminatorVars { decision, style })
    }

    /// Evaluates one image.
    pub fn evaluate(&self, img: &ImageTensor) -> Result<DiscriminatorOutput> {
        let mut g = Graph::new();
        let x = g.input(img.tensor().clone().unsqueeze0());
        let out = self.forward(&mut g, x)?;
        let c = self.config.style_channels();
        Ok(DiscriminatorOutput {
            decision: g.scalar(out.decision),
            style: StyleVector::new(c, g.value(out.style).data().to_vec())?,
        })
    }

    /// Encoded map of one image.
    pub fn encode_image(&self, img: &ImageTensor) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let x = g.input(img.tensor().clone().unsqueeze0());
        let m = self.encode(&mut g, x)?;
        FeatureMap::new(g.value(m).index0(0))
    }
}

/// Style head applied to one encoded map.
pub fn style_vector(m: &FeatureMap) -> Result<StyleVector> {
    let mut g = Graph::new();
    let x = g.input(m.tensor().clone().unsqueeze0());
    let s = Discriminator::style_vector(&mut g, x)?;
    StyleVector::new(m.channels(), g.value(s).data().to_vec())
}

/// Pooling-fusion pyramid only: the per-channel values `V` of one map.
pub fn fused_pool(m: &FeatureMap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut v = g.input(m.tensor().clone().unsqueeze0());
    for _ in 0..FUSION_STAGES {
        let mx = g.max_pool2(v)?;
        let av = g.avg_pool2(v)?;
        v = g.add(mx, av)?;
    }
    Ok(g.value(v).data().to_vec())
}
