//! Python module `season_translate_py`.
//!
//! Images cross the boundary as raw interleaved RGB bytes plus their
//! height and width; maps and feature sets as nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use season_translate::changedetect::{self, ChangeMap, LumaWeights, PcakmConfig};
use season_translate::data::{generate_synthetic, SyntheticSceneSpec};
use season_translate::discriminator::StyleVector;
use season_translate::generator::GeneratorConfig;
use season_translate::losses::{self, LossWeights};
use season_translate::metrics;
use season_translate::srm::{self, FeatureMap};
use season_translate::trainer::{self, Direction, TrainConfig};
use season_translate::{Error, ImageTensor, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_from_bytes(rgb: &[u8], height: u32, width: u32) -> PyResult<ImageTensor> {
    let img = image::RgbImage::from_raw(width, height, rgb.to_vec())
        .ok_or_else(|| PyValueError::new_err(format!("expected {} bytes for {height}x{width} RGB", height * width * 3)))?;
    Ok(ImageTensor::from_rgb8(&img))
}

fn image_to_bytes<'py>(py: Python<'py>, img: &ImageTensor) -> Bound<'py, PyBytes> {
    PyBytes::new(py, img.to_rgb8().as_raw())
}

fn map_from_rows(rows: Vec<Vec<u8>>) -> PyResult<ChangeMap> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged change map"));
    }
    ChangeMap::new(h, w, rows.concat()).map_err(err)
}

fn map_to_rows(m: &ChangeMap) -> Vec<Vec<u8>> {
    m.data().chunks(m.width()).map(<[u8]>::to_vec).collect()
}

/// Per-channel (mean, std) of a `[C, H, W]` map given as a flat list.
#[pyfunction]
fn style_pool(values: Vec<f64>, channels: usize, height: usize, width: usize) -> PyResult<Vec<(f64, f64)>> {
    let t = Tensor::from_vec(&[channels, height, width], values).map_err(err)?;
    let d = srm::style_pool(&FeatureMap::new(t).map_err(err)?).map_err(err)?;
    Ok((0..channels).map(|c| (d.mean(c), d.std(c))).collect())
}

/// Upper-triangular flattening of `V^T V` for pooled values `V`.
#[pyfunction]
fn style_vector(pooled: Vec<f64>) -> Vec<f64> {
    StyleVector::from_pooled(&pooled).as_slice().to_vec()
}

#[pyfunction]
fn gan_loss_generator(decisions: Vec<f64>) -> PyResult<f64> {
    losses::gan_loss_generator(&decisions).map_err(err)
}

#[pyfunction]
fn gan_loss_discriminator(real: Vec<f64>, fake: Vec<f64>) -> PyResult<f64> {
    losses::gan_loss_discriminator(&real, &fake).map_err(err)
}

#[pyfunction]
fn style_loss(fake: Vec<f64>, real: Vec<f64>) -> PyResult<f64> {
    let c = (fake.len() as f64).sqrt() as usize;
    let a = StyleVector::new(c, fake).map_err(err)?;
    let b = StyleVector::new(c, real).map_err(err)?;
    losses::style_loss(&a, &b).map_err(err)
}

/// Weighted generator objective; returns the total.
#[pyfunction]
#[pyo3(signature = (gan, cycle, identity, style=0.0, lambda_cyc=10.0, lambda_id=5.0))]
fn generator_objective(gan: f64, cycle: f64, identity: f64, style: f64, lambda_cyc: f64, lambda_id: f64) -> f64 {
    let w = LossWeights {
        cycle: lambda_cyc,
        identity: lambda_id,
        style: 1.0,
    };
    losses::generator_objective(gan, cycle, identity, style, &w).total
}

#[pyfunction]
#[pyo3(signature = (epoch, epochs_total=200, epochs_constant=100, lr0=2e-4))]
fn lr_schedule(epoch: usize, epochs_total: usize, epochs_constant: usize, lr0: f64) -> PyResult<f64> {
    let cfg = TrainConfig {
        epochs_total,
        epochs_constant,
        lr0,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    trainer::lr_schedule(epoch, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (probs, splits=1))]
fn inception_score(probs: Vec<Vec<f64>>, splits: usize) -> PyResult<f64> {
    metrics::inception_score(&probs, splits).map_err(err)
}

#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&a, &b).map_err(err)
}

#[pyfunction]
fn kid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::kid(&a, &b).map_err(err)
}

/// FA, MA, OE, PCC and N of a predicted 0/1 map against the truth.
#[pyfunction]
fn score_change_map<'py>(py: Python<'py>, predicted: Vec<Vec<u8>>, truth: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::score_change_map(&map_from_rows(predicted)?, &map_from_rows(truth)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("fa", s.fa)?;
    d.set_item("ma", s.ma)?;
    d.set_item("oe", s.oe)?;
    d.set_item("pcc", s.pcc)?;
    d.set_item("n", s.n)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (diff, block=4, eigen_count=3, seed=0))]
fn pcakm(diff: Vec<Vec<f64>>, block: usize, eigen_count: usize, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let h = diff.len();
    let w = diff.first().map_or(0, Vec::len);
    if diff.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged difference image"));
    }
    let t = Tensor::from_vec(&[h, w], diff.concat()).map_err(err)?;
    let cfg = PcakmConfig {
        block,
        eigen_count,
        seed,
        ..PcakmConfig::default()
    };
    Ok(map_to_rows(&changedetect::pcakm(&t, &cfg).map_err(err)?))
}

/// Luminance difference of two RGB byte images.
#[pyfunction]
fn difference_image(a: &[u8], b: &[u8], height: u32, width: u32) -> PyResult<Vec<Vec<f64>>> {
    let d = changedetect::difference_image(
        &image_from_bytes(a, height, width)?,
        &image_from_bytes(b, height, width)?,
        &LumaWeights::default(),
    )
    .map_err(err)?;
    Ok(d.data().chunks(width as usize).map(<[f64]>::to_vec).collect())
}

/// Summer t1, winter t2 (RGB bytes) and the change mask of a seeded scene.
#[pyfunction]
#[pyo3(signature = (seed, size=64, change_count=2, vegetation_fraction=0.35))]
fn synthetic_pair<'py>(
    py: Python<'py>,
    seed: u64,
    size: usize,
    change_count: usize,
    vegetation_fraction: f64,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>, Vec<Vec<u8>>)> {
    let spec = SyntheticSceneSpec {
        seed,
        size,
        change_count,
        vegetation_fraction,
        ..SyntheticSceneSpec::default()
    };
    let p = generate_synthetic(&spec).map_err(err)?;
    Ok((
        image_to_bytes(py, &p.summer_t1),
        image_to_bytes(py, &p.winter_t2),
        map_to_rows(&p.change_mask),
    ))
}

/// Generator parameter count for a width scale.
#[pyfunction]
#[pyo3(signature = (scale=1.0, blocks=9, use_srm=true))]
fn generator_parameters(scale: f64, blocks: usize, use_srm: bool) -> usize {
    GeneratorConfig {
        blocks,
        use_srm,
        ..GeneratorConfig::scaled(scale)
    }
    .count_parameters()
}

/// Runs the command-line interface with `args` (without the program
/// name) and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    season_translate::cli::run(std::iter::once("season-translate".to_string()).chain(args))
}

/// The four translation networks, fresh or loaded from a checkpoint.
#[pyclass(module = "season_translate_py")]
struct Model {
    inner: trainer::TranslationModel,
    epoch: usize,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (scale=0.125, blocks=9, use_srm=true, seed=0))]
    fn new(scale: f64, blocks: usize, use_srm: bool, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig {
            scale,
            blocks,
            use_srm,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(err)?;
        Ok(Model {
            inner: trainer::TranslationModel::new(&cfg),
            epoch: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = trainer::load_checkpoint(&path).map_err(err)?;
        Ok(Model {
            inner: state.model,
            epoch: state.epoch,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Translates RGB bytes; `direction` is `"xy"` (summer to winter) or `"yx"`.
    fn translate<'py>(
        &self,
        py: Python<'py>,
        rgb: &[u8],
        height: u32,
        width: u32,
        direction: &str,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let d: Direction = direction.parse().map_err(err)?;
        let img = image_from_bytes(rgb, height, width)?;
        let out = self.inner.translate(&img, d).map_err(err)?;
        Ok(image_to_bytes(py, &out))
    }
}

#[pymodule]
fn season_translate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(style_pool, m)?)?;
    m.add_function(wrap_pyfunction!(style_vector, m)?)?;
    m.add_function(wrap_pyfunction!(gan_loss_generator, m)?)?;
    m.add_function(wrap_pyfunction!(gan_loss_discriminator, m)?)?;
    m.add_function(wrap_pyfunction!(style_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generator_objective, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(score_change_map, m)?)?;
    m.add_function(wrap_pyfunction!(pcakm, m)?)?;
    m.add_function(wrap_pyfunction!(difference_image, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(generator_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
