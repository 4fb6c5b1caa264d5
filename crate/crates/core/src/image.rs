//! RGB image tensors scaled to `[-1, 1]`.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[3, H, W]` image with every value in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => {
                return Err(Error::shape(format!(
                    "image tensor must be [3, H, W], got {s:?}"
                )))
            }
        }
        if let Some(v) = t.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "image values must lie in [-1, 1], found {v}"
            )));
        }
        Ok(ImageTensor(t))
    }

    /// Clamps into `[-1, 1]` (NaN becomes 0) instead of rejecting.
    pub fn clamped(t: Tensor) -> Result<Self> {
        let t = t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
        Self::new(t)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        ImageTensor(Tensor::from_vec(&[3, h, w], data).expect("consistent shape"))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |c: usize| ((d[c * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    /// Sub-image `[3, size_h, size_w]` with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if top + size_h > h || left + size_w > w {
            return Err(Error::shape(format!(
                "crop {size_h}x{size_w} at ({top}, {left}) exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(3 * size_h * size_w);
        for c in 0..3 {
            for y in top..top + size_h {
                let row = c * h * w + y * w;
                data.extend_from_slice(&self.0.data()[row + left..row + left + size_w]);
            }
        }
        Ok(ImageTensor(Tensor::from_vec(&[3, size_h, size_w], data)?))
    }
}
