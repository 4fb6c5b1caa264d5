//! Feature extractors: a small seeded CNN usable anywhere, and the
//! pretrained Inception entry point, which needs external weights.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

/// Penultimate-layer features and class probabilities of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub features: Vec<f64>,
    pub class_probs: Vec<f64>,
}

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Result<Features>;

    /// Features and probabilities of a whole set, in order.
    fn extract_all(&self, images: &[ImageTensor]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut probs = Vec::with_capacity(images.len());
        for img in images {
            let f = self.extract(img)?;
            feats.push(f.features);
            probs.push(f.class_probs);
        }
        Ok((feats, probs))
    }
}

/// Two stride-2 3x3 conv + ReLU stages, global average pooling, and a
/// linear softmax classifier, all with fixed seeded weights.
#[derive(Clone, Debug)]
pub struct TinyCnn {
    seed: u64,
    conv: [(Tensor, Tensor); 2],
    classifier: Tensor,
}

const TINY_WIDTHS: [usize; 2] = [16, 32];
const TINY_CLASSES: usize = 10;

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl TinyCnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let conv = TINY_WIDTHS.map(|cout| {
            let w = normal(&[cout, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), &mut rng);
            cin = cout;
            (w, Tensor::zeros(&[cout]))
        });
        let d = TINY_WIDTHS[1];
        let classifier = normal(&[TINY_CLASSES, d], 4.0 / (d as f64).sqrt(), &mut rng);
        TinyCnn {
            seed,
            conv,
            classifier,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl FeatureExtractor for TinyCnn {
    fn name(&self) -> &str {
        "tiny-cnn"
    }

    fn feature_dim(&self) -> usize {
        TINY_WIDTHS[1]
    }

    fn class_count(&self) -> usize {
        TINY_CLASSES
    }

    fn extract(&self, img: &ImageTensor) -> Result<Features> {
        let mut g = Graph::new();
        let mut h = g.input(img.tensor().clone().unsqueeze0());
        for (w, b) in &self.conv {
            let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
            h = g.conv2d(h, wv, Some(bv), 2, 1)?;
            h = g.relu(h);
        }
        let (_, c, hh, ww) = g.value(h).dims4()?;
        let map = g.value(h).data();
        let area = (hh * ww) as f64;
        let features: Vec<f64> = (0..c)
            .map(|k| map[k * hh * ww..(k + 1) * hh * ww].iter().sum::<f64>() / area)
            .collect();
        let logits: Vec<f64> = self
            .classifier
            .data()
            .chunks(c)
            .map(|row| row.iter().zip(&features).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        Ok(Features {
            features,
            class_probs: exp.iter().map(|e| e / z).collect(),
        })
    }
}

/// Inception-v3 pool features and logits. This build has no Inception
/// weight loader, so construction always fails with a pointer to
/// [`TinyCnn`].
#[derive(Debug)]
pub struct PretrainedInception {
    _weights: PathBuf,
}

impl PretrainedInception {
    pub fn new(weights: Option<PathBuf>) -> Result<Self> {
        let hint = "use the `tiny-cnn` extractor instead";
        Err(Error::ExtractorUnavailable(match weights {
            Some(p) if !p.exists() => format!(
                "pretrained-inception weights not found at {}; {hint}",
                p.display()
            ),
            Some(p) => format!(
                "pretrained-inception weights at {} cannot be loaded by this build; {hint}",
                p.display()
            ),
            None => format!("pretrained-inception needs downloaded weights; {hint}"),
        }))
    }
}

impl FeatureExtractor for PretrainedInception {
    fn name(&self) -> &str {
        "pretrained-inception"
    }

    fn feature_dim(&self) -> usize {
        2048
    }

    fn class_count(&self) -> usize {
        1008
    }

    fn extract(&self, _img: &ImageTensor) -> Result<Features> {
        Err(Error::ExtractorUnavailable("pretrained-inception is not loaded".into()))
    }
}

/// `tiny-cnn` or `pretrained-inception`.
pub fn extractor_by_name(
    name: &str,
    seed: u64,
    weights: Option<PathBuf>,
) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "tiny-cnn" => Ok(Box::new(TinyCnn::new(seed))),
        "pretrained-inception" => Ok(Box::new(PretrainedInception::new(weights)?)),
        other => Err(Error::Config(format!(
            "unknown extractor `{other}` (expected tiny-cnn or pretrained-inception)"
        ))),
    }
}
