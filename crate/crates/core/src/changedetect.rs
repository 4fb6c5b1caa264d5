//! PCA + k-means change detection over a luminance difference image.
//!
//! The difference image is cut into non-overlapping `h x h` blocks whose
//! centered covariance yields an eigenvector basis. Every pixel's `h x h`
//! neighborhood is projected onto the leading `S` eigenvectors, and the
//! projections are split in two by k-means. The cluster whose pixels have
//! the larger mean difference is labeled changed.

use image::GrayImage;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;
use crate::trainer::{Direction, TranslationModel};

/// Binary per-pixel map: 1 = changed, 0 = unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "change map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("change map entries must be 0 or 1"));
        }
        Ok(ChangeMap {
            height,
            width,
            data,
        })
    }

    pub fn unchanged(height: usize, width: usize) -> Self {
        ChangeMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, changed: bool) {
        self.data[y * self.width + x] = changed as u8;
    }

    pub fn changed_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Intersection over union of the changed sets (1 when both are empty).
    pub fn iou(&self, other: &ChangeMap) -> Result<f64> {
        self.check_same_dims(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn check_same_dims(&self, other: &ChangeMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "change maps {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Changed pixels white, unchanged black.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        })
    }

    /// Pixels at or above mid-gray count as changed.
    pub fn from_gray(img: &GrayImage) -> Self {
        ChangeMap {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| (p[0] >= 128) as u8).collect(),
        }
    }
}

/// RGB to luminance weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LumaWeights(pub [f64; 3]);

impl Default for LumaWeights {
    fn default() -> Self {
        LumaWeights([0.299, 0.587, 0.114])
    }
}

/// `|luma(a) - luma(b)|` per pixel, shape `[H, W]`.
pub fn difference_image(a: &ImageTensor, b: &ImageTensor, weights: &LumaWeights) -> Result<Tensor> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!(
            "image pair {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let plane = h * w;
    let (ad, bd) = (a.tensor().data(), b.tensor().data());
    let data = (0..plane)
        .map(|i| {
            let la: f64 = (0..3).map(|c| weights.0[c] * ad[c * plane + i]).sum();
            let lb: f64 = (0..3).map(|c| weights.0[c] * bd[c * plane + i]).sum();
            (la - lb).abs()
        })
        .collect();
    Tensor::from_vec(&[h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcakmConfig {
    /// Block and neighborhood side `h`.
    pub block: usize,
    /// Number of leading eigenvectors `S`, `1 <= S <= h*h`.
    pub eigen_count: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PcakmConfig {
    fn default() -> Self {
        PcakmConfig {
            block: 4,
            eigen_count: 3,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl PcakmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block < 2 {
            return Err(Error::Config(format!("pcakm block must be >= 2, got {}", self.block)));
        }
        if self.eigen_count == 0 || self.eigen_count > self.block * self.block {
            return Err(Error::Config(format!(
                "pcakm eigen_count must be in 1..={}, got {}",
                self.block * self.block,
                self.eigen_count
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("pcakm max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Edge-replicated access into a row-major `h x w` map.
fn at(d: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    d[y * w + x]
}

pub fn pcakm(diff: &Tensor, cfg: &PcakmConfig) -> Result<ChangeMap> {
    cfg.validate()?;
    let [h, w] = *diff.shape() else {
        return Err(Error::shape(format!("difference image must be [H, W], got {:?}", diff.shape())));
    };
    if h == 0 || w == 0 {
        return Err(Error::shape("empty difference image"));
    }
    if !diff.is_finite() {
        return Err(Error::invalid("difference image has non-finite values"));
    }
    let d = diff.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(ChangeMap::unchanged(h, w));
    }

    let bs = cfg.block;
    let dim = bs * bs;
    let half = (bs / 2) as isize;

    // Non-overlapping blocks over the edge-padded map.
    let (bh, bw) = (h.div_ceil(bs), w.div_ceil(bs));
    let nblocks = bh * bw;
    let mut blocks = Vec::with_capacity(nblocks * dim);
    for by in 0..bh {
        for bx in 0..bw {
            for i in 0..bs {
                for j in 0..bs {
                    blocks.push(at(d, h, w, (by * bs + i) as isize, (bx * bs + j) as isize));
                }
            }
        }
    }
    let mut mean = vec![0.0; dim];
    for blk in blocks.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(blk) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nblocks as f64);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for blk in blocks.chunks(dim) {
        for i in 0..dim {
            let di = blk[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (blk[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / nblocks as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis: Vec<Vec<f64>> = order[..cfg.eigen_count]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();

    // Project every pixel's neighborhood.
    let s = cfg.eigen_count;
    let mut feats = vec![0.0; h * w * s];
    let mut neigh = vec![0.0; dim];
    for y in 0..h {
        for x in 0..w {
            for i in 0..bs {
                for j in 0..bs {
                    neigh[i * bs + j] = at(d, h, w, y as isize - half + i as isize, x as isize - half + j as isize)
                        - mean[i * bs + j];
                }
            }
            let f = &mut feats[(y * w + x) * s..(y * w + x + 1) * s];
            for (fk, e) in f.iter_mut().zip(&basis) {
                *fk = e.iter().zip(&neigh).map(|(a, b)| a * b).sum();
            }
        }
    }

    let Some(labels) = two_means(&feats, s, cfg) else {
        return Ok(ChangeMap::unchanged(h, w));
    };
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (&l, &v) in labels.iter().zip(d) {
        sums[l as usize] += v;
        counts[l as usize] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Ok(ChangeMap::unchanged(h, w));
    }
    let changed = if sums[1] / counts[1] as f64 > sums[0] / counts[0] as f64 { 1 } else { 0 };
    ChangeMap::new(h, w, labels.iter().map(|&l| (l == changed) as u8).collect())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k = 2 and k-means++ seeding. Returns `None` when
/// every point coincides.
fn two_means(feats: &[f64], dim: usize, cfg: &PcakmConfig) -> Option<Vec<u8>> {
    let n = feats.len() / dim;
    let point = |i: usize| &feats[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = rng.random_range(0..n);
    let d2: Vec<f64> = (0..n).map(|i| dist2(point(i), point(first))).collect();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut target = rng.random_range(0.0..total);
    let mut second = n - 1;
    for (i, &v) in d2.iter().enumerate() {
        if target < v {
            second = i;
            break;
        }
        target -= v;
    }
    let mut centers = [point(first).to_vec(), point(second).to_vec()];
    let mut labels = vec![0u8; n];
    for _ in 0..cfg.max_iter {
        for (i, l) in labels.iter_mut().enumerate() {
            let p = point(i);
            *l = (dist2(p, &centers[1]) < dist2(p, &centers[0])) as u8;
        }
        let mut next = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (i, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            for (a, b) in next[l as usize].iter_mut().zip(point(i)) {
                *a += b;
            }
        }
        let mut shift: f64 = 0.0;
        for k in 0..2 {
            if counts[k] == 0 {
                next[k] = centers[k].clone();
            } else {
                next[k].iter_mut().for_each(|v| *v /= counts[k] as f64);
            }
            shift = shift.max(dist2(&next[k], &centers[k]).sqrt());
        }
        centers = next;
        if shift <= cfg.tol {
            break;
        }
    }
    Some(labels)
}

/// Translates the image from the other season into the season of its
/// partner, then runs [`difference_image`] and [`pcakm`].
///
/// `a` is the summer (X) acquisition and `b` the winter (Y) one. With
/// [`Direction::YToX`] `b` is translated to summer and compared with `a`;
/// with [`Direction::XToY`] `a` is translated to winter and compared with `b`.
pub fn detect_with_translation(
    a: &ImageTensor,
    b: &ImageTensor,
    model: &TranslationModel,
    direction: Direction,
    luma: &LumaWeights,
    cfg: &PcakmConfig,
) -> Result<ChangeMap> {
    let (a, b) = match direction {
        Direction::YToX => (a.clone(), model.translate(b, direction)?),
        Direction::XToY => (model.translate(a, direction)?, b.clone()),
    };
    let diff = difference_image(&a, &b, luma)?;
    pcakm(&diff, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: usize, lo: usize, hi: usize, inside: f64, outside: f64) -> Tensor {
        let mut t = Tensor::full(&[size, size], outside);
        for y in lo..hi {
            for x in lo..hi {
                t.data_mut()[y * size + x] = inside;
            }
        }
        t
    }

    fn truth(size: usize, lo: usize, hi: usize) -> ChangeMap {
        let sq = square(size, lo, hi, 1.0, 0.0);
        ChangeMap::new(size, size, sq.data().iter().map(|&v| v as u8).collect()).unwrap()
    }

    #[test]
    fn zero_difference_is_unchanged() {
        let map = pcakm(&Tensor::zeros(&[32, 32]), &PcakmConfig::default()).unwrap();
        assert_eq!(map.changed_count(), 0);
    }

    #[test]
    fn planted_square_is_found() {
        let map = pcakm(&square(64, 24, 40, 1.0, 0.0), &PcakmConfig::default()).unwrap();
        let iou = map.iou(&truth(64, 24, 40)).unwrap();
        assert!(iou >= 0.8, "iou {iou}");
    }

    #[test]
    fn constant_shift_leaves_map_unchanged() {
        let a = square(64, 10, 26, 0.8, 0.1);
        let b = a.map(|v| v + 0.37);
        let cfg = PcakmConfig::default();
        assert_eq!(pcakm(&a, &cfg).unwrap(), pcakm(&b, &cfg).unwrap());
    }

    #[test]
    fn labeling_does_not_depend_on_seed() {
        let d = square(48, 8, 24, 1.0, 0.0);
        let base = pcakm(&d, &PcakmConfig::default()).unwrap();
        for seed in 1..6 {
            let cfg = PcakmConfig { seed, ..PcakmConfig::default() };
            assert_eq!(pcakm(&d, &cfg).unwrap(), base);
        }
    }

    #[test]
    fn odd_sizes_are_padded() {
        let map = pcakm(&square(37, 5, 21, 1.0, 0.0), &PcakmConfig::default()).unwrap();
        assert_eq!((map.height(), map.width()), (37, 37));
        assert!(map.iou(&truth(37, 5, 21)).unwrap() >= 0.8);
    }

    #[test]
    fn config_validation() {
        let bad = PcakmConfig { eigen_count: 17, ..PcakmConfig::default() };
        assert!(pcakm(&Tensor::zeros(&[8, 8]), &bad).is_err());
        let bad = PcakmConfig { block: 1, ..PcakmConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn difference_examples() {
        let luma = LumaWeights::default();
        let zero = ImageTensor::filled(4, 4, 0.0).unwrap();
        let one = ImageTensor::filled(4, 4, 1.0).unwrap();
        assert_eq!(difference_image(&zero, &zero, &luma).unwrap().max_abs(), 0.0);
        let d = difference_image(&zero, &one, &luma).unwrap();
        assert!(d.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(d, difference_image(&one, &zero, &luma).unwrap());
        // two pixels: (0.5, -0.5, 0) vs 0 and (1, 1, -1) vs (0, 0, 0)
        let a = ImageTensor::new(Tensor::from_vec(&[3, 1, 2], vec![0.5, 1.0, -0.5, 1.0, 0.0, -1.0]).unwrap()).unwrap();
        let zero2 = ImageTensor::filled(1, 2, 0.0).unwrap();
        let d = difference_image(&a, &zero2, &luma).unwrap();
        assert!((d.data()[0] - (0.299_f64 * 0.5 - 0.587 * 0.5).abs()).abs() < 1e-12);
        assert!((d.data()[1] - (0.299 + 0.587 - 0.114)).abs() < 1e-12);
        assert!(difference_image(&zero, &zero2, &luma).is_err());
    }

    #[test]
    fn gray_round_trip() {
        let t = truth(9, 2, 5);
        assert_eq!(ChangeMap::from_gray(&t.to_gray()), t);
        assert!(ChangeMap::new(2, 2, vec![0, 1, 2, 0]).is_err());
    }
}
