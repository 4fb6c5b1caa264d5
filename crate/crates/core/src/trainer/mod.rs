//! Alternating optimization of the two generators and two discriminators.
//!
//! Each iteration first updates both generators on their adversarial,
//! cycle and identity terms, then both discriminators on the least-squares
//! term plus the style distance, with fakes drawn through a history buffer.
//! All randomness comes from per-epoch seeded streams, so a run is a pure
//! function of its data, config and seed.

mod adam;
mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, ADAM_EPS};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{Graph, Var};
use crate::data::{epoch_rng, DomainDataset};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::ImageTensor;
use crate::losses::{
    discriminator_objective, gan_discriminator_graph, gan_generator_graph, generator_objective,
    l1_graph, LossReport, LossWeights,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_constant: usize,
    pub lr0: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub style_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Width multiplier for all four networks.
    pub scale: f64,
    /// Residual blocks per generator.
    pub blocks: usize,
    pub use_srm: bool,
    pub use_style_loss: bool,
    /// Let the style distance also reach the generators.
    pub style_to_generator: bool,
    /// Fake-image pool size per domain; 0 disables the pool.
    pub history_capacity: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub crop: usize,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_total: 200,
            epochs_constant: 100,
            lr0: 2e-4,
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            style_weight: 1.0,
            batch_size: 1,
            seed: 0,
            scale: 1.0,
            blocks: 9,
            use_srm: true,
            use_style_loss: true,
            style_to_generator: false,
            history_capacity: 50,
            beta1: 0.5,
            beta2: 0.999,
            crop: 256,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small, fast settings for 64x64 synthetic data on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            epochs_total: 30,
            epochs_constant: 15,
            scale: 0.125,
            crop: 64,
            checkpoint_every: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs_constant > self.epochs_total {
            return bad(format!(
                "epochs_constant ({}) exceeds epochs_total ({})",
                self.epochs_constant, self.epochs_total
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("style_weight", self.style_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.crop < 16 || !(self.crop / 16).is_power_of_two() || self.crop % 16 != 0 {
            return bad(format!("crop must be 16 * 2^k, got {}", self.crop));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cycle: self.lambda_cyc,
            identity: self.lambda_id,
            style: if self.use_style_loss { self.style_weight } else { 0.0 },
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            blocks: self.blocks,
            use_srm: self.use_srm,
            ..GeneratorConfig::scaled(self.scale)
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            use_srm: self.use_srm,
            ..DiscriminatorConfig::scaled(self.scale)
        }
    }
}

/// Constant for the first `epochs_constant` epochs, then linear decay to
/// zero at `epochs_total`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs_total {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside [0, {}]",
            cfg.epochs_total
        )));
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.lr0);
    }
    let span = (cfg.epochs_total - cfg.epochs_constant) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    Ok(cfg.lr0 * (1.0 - (epoch - cfg.epochs_constant) as f64 / span))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Summer to winter.
    #[serde(rename = "xy")]
    XToY,
    /// Winter to summer.
    #[serde(rename = "yx")]
    YToX,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xy" | "x2y" | "summer2winter" => Ok(Direction::XToY),
            "yx" | "y2x" | "winter2summer" => Ok(Direction::YToX),
            _ => Err(Error::invalid(format!("unknown direction `{s}` (expected xy or yx)"))),
        }
    }
}

/// The four networks.
#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub g_xy: Generator,
    pub g_yx: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
}

impl TranslationModel {
    pub fn new(cfg: &TrainConfig) -> Self {
        let (g, d) = (cfg.generator_config(), cfg.discriminator_config());
        let s = cfg.seed;
        TranslationModel {
            g_xy: Generator::new(g.clone(), s.wrapping_add(1)),
            g_yx: Generator::new(g, s.wrapping_add(2)),
            d_x: Discriminator::new(d.clone(), s.wrapping_add(3)),
            d_y: Discriminator::new(d, s.wrapping_add(4)),
        }
    }

    pub fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::XToY => &self.g_xy,
            Direction::YToX => &self.g_yx,
        }
    }

    pub fn translate(&self, img: &ImageTensor, direction: Direction) -> Result<ImageTensor> {
        self.generator(direction).generate(img)
    }

    pub fn count_parameters(&self) -> usize {
        self.g_xy.count_parameters()
            + self.g_yx.count_parameters()
            + self.d_x.count_parameters()
            + self.d_y.count_parameters()
    }
}

/// Pool of previously generated images for one domain.
#[derive(Clone, Debug, Default)]
pub struct HistoryBuffer {
    capacity: usize,
    stored: Vec<Tensor>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        HistoryBuffer {
            capacity,
            stored: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Returns the image to show the discriminator in place of `fresh`.
    /// While filling, `fresh` is stored and returned; once full, with
    /// probability one half a random stored image is returned and replaced
    /// by `fresh`.
    pub fn query<R: Rng + ?Sized>(&mut self, fresh: Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return fresh;
        }
        if self.stored.len() < self.capacity {
            self.stored.push(fresh.clone());
            return fresh;
        }
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..self.stored.len());
            std::mem::replace(&mut self.stored[i], fresh)
        } else {
            fresh
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: TranslationModel,
    pub opt_g_xy: Adam,
    pub opt_g_yx: Adam,
    pub opt_d_x: Adam,
    pub opt_d_y: Adam,
    pub history_x: HistoryBuffer,
    pub history_y: HistoryBuffer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TranslationModel::new(&config);
        Ok(Self::with_model(config, model, 0, 0))
    }

    pub(crate) fn with_model(
        config: TrainConfig,
        model: TranslationModel,
        epoch: usize,
        iteration: u64,
    ) -> Self {
        let adam = |s| Adam::new(s, config.beta1, config.beta2);
        TrainState {
            opt_g_xy: adam(model.g_xy.params()),
            opt_g_yx: adam(model.g_yx.params()),
            opt_d_x: adam(model.d_x.params()),
            opt_d_y: adam(model.d_y.params()),
            history_x: HistoryBuffer::new(config.history_capacity),
            history_y: HistoryBuffer::new(config.history_capacity),
            model,
            config,
            epoch,
            iteration,
        }
    }
}

/// Losses of one iteration, one report per network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub g_xy: LossReport,
    pub g_yx: LossReport,
    pub d_x: LossReport,
    pub d_y: LossReport,
}

impl StepReport {
    fn check(&self, iter: u64) -> Result<()> {
        for (name, r) in [("G_XY", &self.g_xy), ("G_YX", &self.g_yx), ("D_X", &self.d_x), ("D_Y", &self.d_y)] {
            if !r.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    what: format!("{name} loss {r:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn generator_total(&self) -> f64 {
        self.g_xy.total + self.g_yx.total
    }
}

struct GeneratorPass {
    g: Graph,
    total: Var,
    fake_y: Tensor,
    fake_x: Tensor,
    g_xy: LossReport,
    g_yx: LossReport,
}

/// Builds one direction's generator objective inside `g`. Returns the
/// total, the fake, and the report.
#[allow(clippy::too_many_arguments)]
fn direction_objective(
    g: &mut Graph,
    forward: &Generator,
    backward: &Generator,
    judge: &Discriminator,
    source: Var,
    target: Var,
    cfg: &TrainConfig,
) -> Result<(Var, Var, LossReport)> {
    let w = cfg.loss_weights();
    let fake = forward.forward(g, source)?;
    let out = judge.forward(g, fake)?;
    let gan = gan_generator_graph(g, out.decision)?;
    let rec = backward.forward(g, fake)?;
    let cycle = l1_graph(g, rec, source)?;
    let weighted = g.scale(cycle, cfg.lambda_cyc);
    let mut total = g.add(gan, weighted)?;
    let mut identity_value = 0.0;
    if cfg.lambda_id > 0.0 {
        let same = forward.forward(g, target)?;
        let identity = l1_graph(g, same, target)?;
        identity_value = g.scalar(identity);
        let s = g.scale(identity, cfg.lambda_id);
        total = g.add(total, s)?;
    }
    let mut style_value = 0.0;
    let mut style_weight = 0.0;
    if cfg.style_to_generator && cfg.use_style_loss {
        let real = judge.forward(g, target)?;
        let real_style = g.detach(real.style);
        let style = l1_graph(g, out.style, real_style)?;
        style_value = g.scalar(style);
        style_weight = w.style;
        let s = g.scale(style, style_weight);
        total = g.add(total, s)?;
    }
    let report = generator_objective(
        g.scalar(gan),
        g.scalar(cycle),
        identity_value,
        style_value,
        &LossWeights {
            style: style_weight,
            ..w
        },
    );
    Ok((total, fake, report))
}

fn generator_pass(model: &TranslationModel, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<GeneratorPass> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let (t_xy, fake_y, g_xy) = direction_objective(&mut g, &model.g_xy, &model.g_yx, &model.d_y, xv, yv, cfg)?;
    let (t_yx, fake_x, g_yx) = direction_objective(&mut g, &model.g_yx, &model.g_xy, &model.d_x, yv, xv, cfg)?;
    let total = g.add(t_xy, t_yx)?;
    let fake_y = g.value(fake_y).clone();
    let fake_x = g.value(fake_x).clone();
    Ok(GeneratorPass {
        g,
        total,
        fake_y,
        fake_x,
        g_xy,
        g_yx,
    })
}

fn discriminator_objective_graph(
    g: &mut Graph,
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let rv = g.input(real.clone());
    let fv = g.input(fake.clone());
    let r = d.forward(g, rv)?;
    let f = d.forward(g, fv)?;
    let gan = gan_discriminator_graph(g, r.decision, f.decision)?;
    if w.style == 0.0 {
        return Ok((gan, discriminator_objective(g.scalar(gan), 0.0, w)));
    }
    let style = l1_graph(g, f.style, r.style)?;
    let s = g.scale(style, w.style);
    let total = g.add(gan, s)?;
    Ok((total, discriminator_objective(g.scalar(gan), g.scalar(style), w)))
}

fn pool_batch<R: Rng + ?Sized>(buf: &mut HistoryBuffer, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = batch.shape()[0];
    let items: Vec<Tensor> = (0..n).map(|i| buf.query(batch.index0(i), rng)).collect();
    Tensor::stack(&items)
}

/// One alternating update on batches `x: [N, 3, H, W]` (summer) and `y`
/// (winter) at learning rate `lr`. Nothing is modified if any loss is
/// non-finite.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
    rng: &mut R,
) -> Result<StepReport> {
    let cfg = state.config.clone();
    let iter = state.iteration + 1;

    let pass = generator_pass(&state.model, x, y, &cfg)?;
    let mut report = StepReport {
        g_xy: pass.g_xy,
        g_yx: pass.g_yx,
        ..StepReport::default()
    };
    report.check(iter)?;
    let grads = pass.g.backward(pass.total)?;
    drop(pass.g);
    state.opt_g_xy.step(state.model.g_xy.params_mut(), &grads, lr);
    state.opt_g_yx.step(state.model.g_yx.params_mut(), &grads, lr);
    drop(grads);

    let fake_y = pool_batch(&mut state.history_y, &pass.fake_y, rng)?;
    let fake_x = pool_batch(&mut state.history_x, &pass.fake_x, rng)?;
    let w = cfg.loss_weights();
    let mut g = Graph::new();
    let (t_x, d_x) = discriminator_objective_graph(&mut g, &state.model.d_x, x, &fake_x, &w)?;
    let (t_y, d_y) = discriminator_objective_graph(&mut g, &state.model.d_y, y, &fake_y, &w)?;
    report.d_x = d_x;
    report.d_y = d_y;
    report.check(iter)?;
    let total = g.add(t_x, t_y)?;
    let grads = g.backward(total)?;
    state.opt_d_x.step(state.model.d_x.params_mut(), &grads, lr);
    state.opt_d_y.step(state.model.d_y.params_mut(), &grads, lr);

    state.iteration = iter;
    Ok(report)
}

/// Generator objectives without any update, for monitoring.
pub fn evaluate_generators(model: &TranslationModel, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<(LossReport, LossReport)> {
    let pass = generator_pass(model, x, y, cfg)?;
    Ok((pass.g_xy, pass.g_yx))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub epoch: usize,
    pub lr: f64,
    pub g_xy_total: f64,
    pub g_yx_total: f64,
    pub d_x_total: f64,
    pub d_y_total: f64,
    /// Generator adversarial terms, both directions.
    pub gan: f64,
    /// Cycle terms, both directions (unweighted).
    pub cycle: f64,
    /// Identity terms, both directions (unweighted).
    pub identity: f64,
    /// Discriminator style distances, both domains.
    pub style: f64,
}

pub const LOG_HEADER: &str = "iter,epoch,lr,g_xy_total,g_yx_total,d_x_total,d_y_total,gan,cycle,identity,style";

impl LogRow {
    pub fn new(iter: u64, epoch: usize, lr: f64, r: &StepReport) -> Self {
        LogRow {
            iter,
            epoch,
            lr,
            g_xy_total: r.g_xy.total,
            g_yx_total: r.g_yx.total,
            d_x_total: r.d_x.total,
            d_y_total: r.d_y.total,
            gan: r.g_xy.gan + r.g_yx.gan,
            cycle: r.g_xy.cycle + r.g_yx.cycle,
            identity: r.g_xy.identity + r.g_yx.identity,
            style: r.d_x.style + r.d_y.style,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.epoch,
            self.lr,
            self.g_xy_total,
            self.g_yx_total,
            self.d_x_total,
            self.d_y_total,
            self.gan,
            self.cycle,
            self.identity,
            self.style
        )
    }
}

/// Renders a full CSV log including the header.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Progress notifications from [`fit`]. Returning an error stops training.
pub trait FitObserver {
    fn on_iteration(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch; `state.epoch` is the count of
    /// completed epochs.
    fn on_epoch(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl FitObserver for Silent {}

const STREAM_ORDER: u64 = 0;
const STREAM_PARTNER: u64 = 1;
const STREAM_CROP: u64 = 2;
const STREAM_POOL: u64 = 3;

/// Sample indices of one epoch: a permutation of the larger domain and
/// draws with replacement from the smaller one, for `(x, y)`.
pub fn epoch_plan(seed: u64, epoch: usize, len_x: usize, len_y: usize) -> Vec<(usize, usize)> {
    let mut order_rng = epoch_rng(seed, epoch as u64, STREAM_ORDER);
    let mut partner_rng = epoch_rng(seed, epoch as u64, STREAM_PARTNER);
    let (big, small) = (len_x.max(len_y), len_x.min(len_y));
    let mut order: Vec<usize> = (0..big).collect();
    order.shuffle(&mut order_rng);
    order
        .into_iter()
        .map(|i| {
            let j = partner_rng.random_range(0..small);
            if len_x >= len_y {
                (i, j)
            } else {
                (j, i)
            }
        })
        .collect()
}

fn batch(ds: &DomainDataset, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let items = idx
        .iter()
        .map(|&i| ds.sample(i, rng).map(ImageTensor::into_tensor))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Trains from `state.epoch` up to `epochs_total`, returning the log rows of
/// this call.
pub fn fit(
    state: &mut TrainState,
    data_x: &DomainDataset,
    data_y: &DomainDataset,
    observer: &mut dyn FitObserver,
) -> Result<Vec<LogRow>> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let mut rows = Vec::new();
    if state.epoch >= cfg.epochs_total {
        return Ok(rows);
    }
    if data_x.is_empty() || data_y.is_empty() {
        return Err(Error::invalid(format!(
            "both domains need images (X has {}, Y has {})",
            data_x.len(),
            data_y.len()
        )));
    }
    for (ds, name) in [(data_x, "X"), (data_y, "Y")] {
        if ds.crop != cfg.crop {
            return Err(Error::Config(format!(
                "domain {name} crops {} px but training expects {}",
                ds.crop, cfg.crop
            )));
        }
    }
    while state.epoch < cfg.epochs_total {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, &cfg)?;
        let plan = epoch_plan(cfg.seed, epoch, data_x.len(), data_y.len());
        let mut crop_rng = epoch_rng(cfg.seed, epoch as u64, STREAM_CROP);
        let mut pool_rng = epoch_rng(cfg.seed, epoch as u64, STREAM_POOL);
        for chunk in plan.chunks(cfg.batch_size) {
            let ix: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let iy: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let x = batch(data_x, &ix, &mut crop_rng)?;
            let y = batch(data_y, &iy, &mut crop_rng)?;
            let report = train_step(state, &x, &y, lr, &mut pool_rng)?;
            let row = LogRow::new(state.iteration, epoch, lr, &report);
            observer.on_iteration(&row)?;
            rows.push(row);
        }
        state.epoch += 1;
        observer.on_epoch(state)?;
    }
    Ok(rows)
}

/// Mean absolute cycle error `|G_YX(G_XY(x)) - x|` over a set of images.
pub fn cycle_error(model: &TranslationModel, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("cycle error of an empty set"));
    }
    let mut total = 0.0;
    for img in images {
        let rec = model.g_yx.generate(&model.g_xy.generate(img)?)?;
        total += crate::losses::cycle_loss(img.tensor(), rec.tensor())?;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests;
