//! Unpaired domain datasets: image folders with seeded random crops, and a
//! synthetic season-pair generator.

pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use synthetic::{
    generate_synthetic, write_benchmark, BenchmarkSpec, Palette, Season, SyntheticPair,
    SyntheticScene, SyntheticSceneSpec,
};

/// X is summer, Y is winter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn train_dir(self) -> &'static str {
        match self {
            Domain::X => "trainX",
            Domain::Y => "trainY",
        }
    }

    pub fn test_dir(self) -> &'static str {
        match self {
            Domain::X => "testX",
            Domain::Y => "testY",
        }
    }
}

/// Deterministic random stream for one epoch of one consumer.
pub fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(16).wrapping_add(stream));
    rng
}

/// Images of one domain, each yielded as a random `crop x crop` window.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain: Domain,
    pub crop: usize,
    pub seed: u64,
    root: Option<PathBuf>,
    paths: Vec<PathBuf>,
    images: Vec<RgbImage>,
}

pub(crate) fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files of a folder in lexicographic order.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && is_image_file(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads every PNG/JPEG directly inside `root`. Undecodable files are
/// skipped with a warning; images smaller than `crop` are an error.
pub fn load_folder(root: &Path, domain: Domain, crop: usize, seed: u64) -> Result<DomainDataset> {
    if crop == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let mut paths = Vec::new();
    let mut images = Vec::new();
    for path in list_images(root)? {
        let img = match read_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {e}");
                continue;
            }
        };
        if (img.width() as usize) < crop || (img.height() as usize) < crop {
            return Err(Error::InvalidArgument(format!(
                "{}: {}x{} is smaller than the {crop}x{crop} crop",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        paths.push(path);
        images.push(img);
    }
    Ok(DomainDataset {
        domain,
        crop,
        seed,
        root: Some(root.to_path_buf()),
        paths,
        images,
    })
}

/// One bitemporal pair of a benchmark's `pairs/` folder.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub name: String,
    pub t1: ImageTensor,
    pub t2: ImageTensor,
    pub mask: crate::changedetect::ChangeMap,
}

/// Reads `<root>/pairs/{t1,t2,mask}`, matching files by name.
pub fn load_pairs(root: &Path) -> Result<Vec<PairRecord>> {
    let pairs = root.join("pairs");
    let mut out = Vec::new();
    for t1_path in list_images(&pairs.join("t1"))? {
        let file = t1_path.file_name().expect("listed files have names");
        let name = file.to_string_lossy().into_owned();
        let t2 = read_rgb(&pairs.join("t2").join(file))?;
        let mask_path = pairs.join("mask").join(file);
        let mask = image::open(&mask_path)
            .map_err(|source| Error::Image {
                path: mask_path.clone(),
                source,
            })?
            .to_luma8();
        let t1 = read_rgb(&t1_path)?;
        if t1.dimensions() != t2.dimensions() || t1.dimensions() != mask.dimensions() {
            return Err(Error::shape(format!("pair `{name}` has mismatched sizes")));
        }
        out.push(PairRecord {
            name,
            t1: ImageTensor::from_rgb8(&t1),
            t2: ImageTensor::from_rgb8(&t2),
            mask: crate::changedetect::ChangeMap::from_gray(&mask),
        });
    }
    Ok(out)
}

impl DomainDataset {
    pub fn from_images(domain: Domain, images: Vec<RgbImage>, crop: usize, seed: u64) -> Result<Self> {
        if let Some(img) = images
            .iter()
            .find(|i| (i.width() as usize) < crop || (i.height() as usize) < crop)
        {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image is smaller than the {crop}x{crop} crop",
                img.width(),
                img.height()
            )));
        }
        Ok(DomainDataset {
            domain,
            crop,
            seed,
            root: None,
            paths: Vec::new(),
            images,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Draws a crop offset `(top, left)` for image `index`.
    pub fn crop_offset<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> (usize, usize) {
        let img = &self.images[index];
        let top = rng.random_range(0..=img.height() as usize - self.crop);
        let left = rng.random_range(0..=img.width() as usize - self.crop);
        (top, left)
    }

    /// A random crop of image `index` scaled to `[-1, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<ImageTensor> {
        let (top, left) = self.crop_offset(index, rng);
        let img = &self.images[index];
        let view = image::imageops::crop_imm(img, left as u32, top as u32, self.crop as u32, self.crop as u32);
        Ok(ImageTensor::from_rgb8(&view.to_image()))
    }

    /// The full, uncropped image `index`.
    pub fn full_image(&self, index: usize) -> ImageTensor {
        ImageTensor::from_rgb8(&self.images[index])
    }
}
