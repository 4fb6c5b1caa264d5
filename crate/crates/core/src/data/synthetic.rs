//! Seeded synthetic scenes observed in summer and winter.
//!
//! A scene is a background with vegetation discs and rectangular roofs on
//! top. Vegetation changes color with the season while roofs do not; a
//! configurable number of extra roofs exist at only one of the two dates,
//! and only those pixels form the ground-truth change mask.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_png, Domain};
use crate::changedetect::ChangeMap;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Season {
    Summer,
    Winter,
}

/// Base colors in 8-bit RGB units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [f64; 3],
    pub vegetation_summer: [f64; 3],
    pub vegetation_winter: [f64; 3],
    pub roofs: Vec<[f64; 3]>,
    /// Amplitude of the per-pixel texture shared by both dates.
    pub jitter: f64,
    /// Amplitude of the per-date global offset applied to ground and vegetation.
    pub season_shift: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            background: [100.0, 104.0, 112.0],
            vegetation_summer: [46.0, 118.0, 42.0],
            vegetation_winter: [158.0, 132.0, 96.0],
            roofs: vec![[215.0, 212.0, 205.0], [224.0, 140.0, 116.0]],
            jitter: 6.0,
            season_shift: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Inclusive range of unchanged roof counts.
    pub structure_count: [usize; 2],
    /// Inclusive range of roof side lengths.
    pub structure_size: [usize; 2],
    pub vegetation_fraction: f64,
    /// Roofs present at exactly one of the two dates.
    pub change_count: usize,
    pub palette: Palette,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            size: 64,
            structure_count: [3, 6],
            structure_size: [6, 12],
            vegetation_fraction: 0.35,
            change_count: 2,
            palette: Palette::default(),
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 8 {
            return bad(format!("canvas size must be at least 8, got {}", self.size));
        }
        if !(0.0..=1.0).contains(&self.vegetation_fraction) {
            return bad(format!("vegetation fraction {} outside [0, 1]", self.vegetation_fraction));
        }
        let [cmin, cmax] = self.structure_count;
        let [smin, smax] = self.structure_size;
        if cmin > cmax || smin > smax || smin == 0 {
            return bad("structure ranges must be non-empty with positive sizes".into());
        }
        if smax > self.size {
            return bad(format!("structures up to {smax} px do not fit a {} px canvas", self.size));
        }
        if self.palette.roofs.is_empty() {
            return bad("palette needs at least one roof color".into());
        }
        let area = (self.size * self.size) as f64;
        let worst = ((cmax + self.change_count) * smax * smax) as f64;
        if self.vegetation_fraction + worst / area > 1.0 {
            return bad(format!(
                "vegetation {:.2} plus up to {} structures of {smax}x{smax} exceed the canvas",
                self.vegetation_fraction,
                cmax + self.change_count
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Roof {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    color: [f64; 3],
}

impl Roof {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Overlap test with a one-pixel gap.
    fn touches(&self, o: &Roof) -> bool {
        self.top < o.top + o.height + 1
            && o.top < self.top + self.height + 1
            && self.left < o.left + o.width + 1
            && o.left < self.left + self.width + 1
    }
}

/// A fully sampled scene layout.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    size: usize,
    palette: Palette,
    vegetation: Vec<bool>,
    roofs: Vec<Roof>,
    /// Changed roofs with a flag telling whether they exist at the first date.
    changes: Vec<(Roof, bool)>,
    texture: Vec<f64>,
    offsets: [[f64; 3]; 2],
}

const PLACEMENT_ATTEMPTS: usize = 500;

fn place_roof(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSceneSpec,
    taken: &[Roof],
) -> Result<Roof> {
    let [smin, smax] = spec.structure_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let height = rng.random_range(smin..=smax);
        let width = rng.random_range(smin..=smax);
        let roof = Roof {
            top: rng.random_range(0..=spec.size - height),
            left: rng.random_range(0..=spec.size - width),
            height,
            width,
            color: spec.palette.roofs[rng.random_range(0..spec.palette.roofs.len())],
        };
        if !taken.iter().any(|t| t.touches(&roof)) {
            return Ok(roof);
        }
    }
    Err(Error::Config(format!(
        "could not place {} non-overlapping structures on a {} px canvas",
        taken.len() + 1,
        spec.size
    )))
}

impl SyntheticScene {
    pub fn generate(spec: &SyntheticSceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.size;

        let mut vegetation = vec![false; n * n];
        let target = (spec.vegetation_fraction * (n * n) as f64).round() as usize;
        let mut covered = 0;
        let (rmin, rmax) = ((n as f64 / 16.0).max(1.5), (n as f64 / 5.0).max(2.0));
        while covered < target {
            let cy = rng.random_range(0.0..n as f64);
            let cx = rng.random_range(0.0..n as f64);
            let r = rng.random_range(rmin..rmax);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let cell = &mut vegetation[y * n + x];
                    if !*cell && dy * dy + dx * dx <= r * r && covered < target {
                        *cell = true;
                        covered += 1;
                    }
                }
            }
        }

        let count = rng.random_range(spec.structure_count[0]..=spec.structure_count[1]);
        let mut placed: Vec<Roof> = Vec::new();
        for _ in 0..count + spec.change_count {
            let roof = place_roof(&mut rng, spec, &placed)?;
            placed.push(roof);
        }
        let changed_roofs = placed.split_off(count);
        let changes = changed_roofs
            .into_iter()
            .map(|r| {
                let at_first = rng.random_bool(0.5);
                (r, at_first)
            })
            .collect();

        let texture = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut offsets = [[0.0; 3]; 2];
        for o in offsets.iter_mut() {
            for v in o.iter_mut() {
                *v = if spec.palette.season_shift > 0.0 {
                    rng.random_range(-spec.palette.season_shift..=spec.palette.season_shift)
                } else {
                    0.0
                };
            }
        }
        Ok(SyntheticScene {
            size: n,
            palette: spec.palette.clone(),
            vegetation,
            roofs: placed,
            changes,
            texture,
            offsets,
        })
    }

    fn roof_at(&self, y: usize, x: usize, second_date: bool) -> Option<&Roof> {
        self.roofs.iter().find(|r| r.contains(y, x)).or_else(|| {
            self.changes
                .iter()
                .find(|(r, at_first)| *at_first != second_date && r.contains(y, x))
                .map(|(r, _)| r)
        })
    }

    /// Renders the scene in `season` at the first (`second_date = false`)
    /// or second date.
    pub fn render(&self, season: Season, second_date: bool) -> RgbImage {
        let n = self.size;
        let offset = self.offsets[second_date as usize];
        let p = &self.palette;
        RgbImage::from_fn(n as u32, n as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            let (base, shift) = match self.roof_at(y, x, second_date) {
                Some(r) => (r.color, [0.0; 3]),
                None if self.vegetation[y * n + x] => match season {
                    Season::Summer => (p.vegetation_summer, offset),
                    Season::Winter => (p.vegetation_winter, offset),
                },
                None => (p.background, offset),
            };
            let t = self.texture[y * n + x] * p.jitter;
            let px = |c: usize| (base[c] + shift[c] + t).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Pixels covered by a roof present at only one date.
    pub fn change_mask(&self) -> ChangeMap {
        let n = self.size;
        let mut mask = ChangeMap::unchanged(n, n);
        for (r, _) in &self.changes {
            for y in r.top..r.top + r.height {
                for x in r.left..r.left + r.width {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }

    pub fn vegetation_fraction(&self) -> f64 {
        self.vegetation.iter().filter(|&&v| v).count() as f64 / self.vegetation.len() as f64
    }
}

/// A bitemporal pair: summer at the first date, winter at the second.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub summer_t1: ImageTensor,
    pub winter_t2: ImageTensor,
    pub change_mask: ChangeMap,
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticPair> {
    let scene = SyntheticScene::generate(spec)?;
    Ok(SyntheticPair {
        summer_t1: ImageTensor::from_rgb8(&scene.render(Season::Summer, false)),
        winter_t2: ImageTensor::from_rgb8(&scene.render(Season::Winter, true)),
        change_mask: scene.change_mask(),
    })
}

/// Single-date rendering used for the unpaired training domains.
pub fn domain_image(spec: &SyntheticSceneSpec, domain: Domain) -> Result<RgbImage> {
    let season = match domain {
        Domain::X => Season::Summer,
        Domain::Y => Season::Winter,
    };
    Ok(SyntheticScene::generate(spec)?.render(season, false))
}

/// Contents of a synthetic benchmark directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub pairs: usize,
    /// Template for every scene; its `seed` is replaced per item.
    pub scene: SyntheticSceneSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0,
            train_per_domain: 16,
            test_per_domain: 8,
            pairs: 20,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    spec: &'a BenchmarkSpec,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed of item `index` within `group`, derived from the benchmark seed.
pub fn item_seed(seed: u64, group: u64, index: usize) -> u64 {
    mix(mix(seed ^ group.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index as u64)
}

impl BenchmarkSpec {
    pub fn scene_for(&self, group: u64, index: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed: item_seed(self.seed, group, index),
            ..self.scene.clone()
        }
    }

    pub fn pair(&self, index: usize) -> Result<SyntheticPair> {
        generate_synthetic(&self.scene_for(PAIR_GROUP, index))
    }
}

const PAIR_GROUP: u64 = 100;

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `trainX`, `trainY`, `testX`, `testY`, `pairs/{t1,t2,mask}` and
/// `manifest.json` under `root`. Returns the manifest path.
pub fn write_benchmark(root: &Path, spec: &BenchmarkSpec) -> Result<PathBuf> {
    spec.scene.validate()?;
    let groups = [
        (Domain::X.train_dir(), Domain::X, spec.train_per_domain, 0),
        (Domain::Y.train_dir(), Domain::Y, spec.train_per_domain, 1),
        (Domain::X.test_dir(), Domain::X, spec.test_per_domain, 2),
        (Domain::Y.test_dir(), Domain::Y, spec.test_per_domain, 3),
    ];
    for (dir, domain, count, group) in groups {
        let path = root.join(dir);
        mkdir(&path)?;
        for i in 0..count {
            let img = domain_image(&spec.scene_for(group, i), domain)?;
            write_png(&path.join(format!("{i:04}.png")), &img)?;
        }
    }
    let pairs = root.join("pairs");
    for sub in ["t1", "t2", "mask"] {
        mkdir(&pairs.join(sub))?;
    }
    for i in 0..spec.pairs {
        let pair = spec.pair(i)?;
        let name = format!("{i:04}.png");
        write_png(&pairs.join("t1").join(&name), &pair.summer_t1.to_rgb8())?;
        write_png(&pairs.join("t2").join(&name), &pair.winter_t2.to_rgb8())?;
        let mask_path = pairs.join("mask").join(&name);
        pair.change_mask
            .to_gray()
            .save_with_format(&mask_path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: mask_path.clone(),
                source,
            })?;
    }
    let manifest = Manifest {
        format: "season-translate-benchmark",
        version: 1,
        spec,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
