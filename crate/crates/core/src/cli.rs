//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::changedetect::{detect_with_translation, difference_image, pcakm, ChangeMap};
use crate::config::{ConfigBuilder, RunConfig};
use crate::data::{list_images, load_folder, load_pairs, read_rgb, write_benchmark, write_png, Domain};
use crate::image::ImageTensor;
use crate::metrics::{extractor_by_name, fid, inception_score, kid, score_change_map, ConfusionSummary};
use crate::trainer::{
    fit, load_checkpoint, save_checkpoint, Direction, FitObserver, LogRow, TrainConfig, TrainState,
    LOG_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "season-translate", version, about = "Season-varying image translation and change detection")]
pub struct Cli {
    /// Plain-text `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `key=value` config overrides (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic summer/winter benchmark.
    Datagen(DatagenArgs),
    /// Train the four networks.
    Train(TrainArgs),
    /// Translate every image of a folder.
    Translate(TranslateArgs),
    /// IS / FID / KID between a real and a generated folder.
    EvalTranslation(EvalTranslationArgs),
    /// Change detection with and without translation on benchmark pairs.
    EvalCd(EvalCdArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Unpaired training images per domain.
    #[arg(long)]
    pub train: Option<usize>,
    /// Unpaired test images per domain.
    #[arg(long)]
    pub test: Option<usize>,
    /// Canvas side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with trainX/ and trainY/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total epochs; the constant-rate phase keeps its share of the schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print parameter counts and GFLOPs, then exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Start from the small single-CPU preset instead of the full defaults.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// `xy` (summer to winter) or `yx` (winter to summer).
    #[arg(long)]
    pub direction: Direction,
}

#[derive(Debug, Args)]
pub struct EvalTranslationArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCdArgs {
    /// Benchmark root containing pairs/{t1,t2,mask}.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Folder of precomputed change maps named like the pairs.
    #[arg(long)]
    pub predicted: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn resolve(cli: &Cli, base: RunConfig, extra: &[(&str, String)]) -> std::result::Result<RunConfig, Failure> {
    let mut b = ConfigBuilder::new(&base);
    let usage = |e: crate::Error| Failure::Usage(e.to_string());
    if let Some(path) = &cli.config {
        b.apply_file(path).map_err(|e| match e {
            crate::Error::Io { .. } => Failure::Runtime(e.into()),
            other => usage(other),
        })?;
    }
    for o in &cli.overrides {
        b.apply_override(o).map_err(usage)?;
    }
    if let Some(seed) = cli.seed {
        b.set("seed", &seed.to_string(), "--seed").map_err(usage)?;
    }
    for (key, value) in extra {
        b.set(key, value, "command line").map_err(usage)?;
    }
    b.build().map_err(usage)
}

fn execute(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Datagen(a) => datagen(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Translate(a) => translate(&cli, a),
        Command::EvalTranslation(a) => eval_translation(&cli, a),
        Command::EvalCd(a) => eval_cd(&cli, a),
    }
}

fn datagen(cli: &Cli, a: &DatagenArgs) -> CmdResult {
    let mut extra = Vec::new();
    for (key, v) in [
        ("data.pairs", a.pairs),
        ("data.train_per_domain", a.train),
        ("data.test_per_domain", a.test),
        ("data.scene.size", a.size),
    ] {
        if let Some(v) = v {
            extra.push((key, v.to_string()));
        }
    }
    let cfg = resolve(cli, RunConfig::default(), &extra)?;
    let manifest = write_benchmark(&cli.out, &cfg.data)?;
    cfg.echo(&cli.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn print_dry_run(cfg: &TrainConfig) -> anyhow::Result<()> {
    let g = cfg.generator_config();
    let d = cfg.discriminator_config();
    let size = cfg.crop;
    let g_macs = g.macs(size, size);
    let d_macs = d.macs(size)?;
    let gflops = |macs: u64| 2.0 * macs as f64 / 1e9;
    println!("network,parameters,gflops_per_image");
    println!("generator,{},{:.3}", g.count_parameters(), gflops(g_macs));
    println!("discriminator,{},{:.3}", d.count_parameters(), gflops(d_macs));
    println!(
        "total,{},{:.3}",
        2 * (g.count_parameters() + d.count_parameters()),
        gflops(2 * (g_macs + d_macs))
    );
    println!("# {size}x{size} input, GFLOPs = 2 x multiply-accumulates");
    Ok(())
}

struct TrainObserver {
    log: File,
    out: PathBuf,
    every: usize,
    started: Instant,
}

impl FitObserver for TrainObserver {
    fn on_iteration(&mut self, row: &LogRow) -> crate::Result<()> {
        writeln!(self.log, "{}", row.to_csv()).map_err(|e| crate::Error::io(self.out.join("train_log.csv"), e))
    }

    fn on_epoch(&mut self, state: &TrainState) -> crate::Result<()> {
        log::info!(
            "epoch {}/{} done, {} iterations, {:.1}s",
            state.epoch,
            state.config.epochs_total,
            state.iteration,
            self.started.elapsed().as_secs_f64()
        );
        if self.every > 0 && state.epoch % self.every == 0 {
            let path = self.out.join("checkpoints").join(format!("epoch_{:04}.ckpt", state.epoch));
            save_checkpoint(state, &path)?;
        }
        Ok(())
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let base = RunConfig {
        train: if a.desk { TrainConfig::desk() } else { TrainConfig::default() },
        ..RunConfig::default()
    };
    let mut extra = Vec::new();
    if let Some(epochs) = a.epochs {
        extra.push(("train.epochs_total", epochs.to_string()));
        // keep the constant phase's share unless set explicitly
        let probe = resolve(cli, base.clone(), &[])?;
        let t = &probe.train;
        let explicit = cli.overrides.iter().any(|o| o.trim_start().starts_with("train.epochs_constant"));
        if !explicit {
            let share = if t.epochs_total == 0 { 0.5 } else { t.epochs_constant as f64 / t.epochs_total as f64 };
            extra.push(("train.epochs_constant", ((epochs as f64 * share).round() as usize).to_string()));
        }
    }
    let cfg = resolve(cli, base, &extra)?;
    if a.dry_run {
        print_dry_run(&cfg.train)?;
        return Ok(());
    }
    let Some(data) = &a.data else {
        return Err(Failure::Usage("train needs --data <DIR> (or --dry-run)".into()));
    };
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            if let Some(epochs) = a.epochs {
                s.config.epochs_total = epochs;
                s.config.epochs_constant = s.config.epochs_constant.min(epochs);
            }
            if s.config != cfg.train {
                log::warn!("resuming with the checkpoint's training config; file/flag training settings are ignored");
            }
            s
        }
        None => TrainState::new(cfg.train.clone())?,
    };
    let tc = state.config.clone();
    let x = load_folder(&data.join(Domain::X.train_dir()), Domain::X, tc.crop, tc.seed)?;
    let y = load_folder(&data.join(Domain::Y.train_dir()), Domain::Y, tc.crop, tc.seed)?;
    if state.epoch < tc.epochs_total && (x.is_empty() || y.is_empty()) {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "no training images under {} (trainX: {}, trainY: {})",
            data.display(),
            x.len(),
            y.len()
        )));
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let echoed = RunConfig { train: tc.clone(), ..cfg };
    echoed.echo(&cli.out)?;
    let log_path = cli.out.join("train_log.csv");
    let fresh = a.resume.is_none() || !log_path.exists();
    let mut log = if fresh {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).open(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").with_context(|| format!("writing {}", log_path.display()))?;
    }
    let mut observer = TrainObserver {
        log,
        out: cli.out.clone(),
        every: tc.checkpoint_every,
        started: Instant::now(),
    };
    eprintln!(
        "training epochs {}..{} on {} + {} images ({} parameters)",
        state.epoch,
        tc.epochs_total,
        x.len(),
        y.len(),
        state.model.count_parameters()
    );
    let rows = fit(&mut state, &x, &y, &mut observer)?;
    let final_path = cli.out.join("model.ckpt");
    save_checkpoint(&state, &final_path)?;
    eprintln!("{} iterations logged to {}", rows.len(), log_path.display());
    println!("{}", final_path.display());
    Ok(())
}

fn translate(cli: &Cli, a: &TranslateArgs) -> CmdResult {
    let cfg = resolve(cli, RunConfig::default(), &[])?;
    let state = load_checkpoint(&a.checkpoint)?;
    let inputs = list_images(&a.input)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    cfg.echo(&cli.out)?;
    if inputs.is_empty() {
        println!("0 images in {}; nothing to translate", a.input.display());
        return Ok(());
    }
    let mut report = String::from("image,seconds\n");
    println!("image,seconds");
    let mut total = 0.0;
    for path in &inputs {
        let img = ImageTensor::from_rgb8(&read_rgb(path)?);
        let started = Instant::now();
        let out = state
            .model
            .translate(&img, a.direction)
            .with_context(|| format!("translating {}", path.display()))?;
        let secs = started.elapsed().as_secs_f64();
        total += secs;
        let name = path.file_stem().unwrap_or_default().to_string_lossy();
        write_png(&cli.out.join(format!("{name}.png")), &out.to_rgb8())?;
        let line = format!("{name},{secs:.4}");
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    let mean = total / inputs.len() as f64;
    println!("mean,{mean:.4}");
    report.push_str(&format!("mean,{mean:.4}\n"));
    let path = cli.out.join("translate_times.csv");
    fs::write(&path, report).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_images(dir: &Path) -> anyhow::Result<Vec<ImageTensor>> {
    list_images(dir)?
        .iter()
        .map(|p| Ok(ImageTensor::from_rgb8(&read_rgb(p)?)))
        .collect()
}

fn append(path: &Path, line: &str) -> anyhow::Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))
}

fn eval_translation(cli: &Cli, a: &EvalTranslationArgs) -> CmdResult {
    let cfg = resolve(cli, RunConfig::default(), &[])?;
    let m = &cfg.metrics;
    let extractor = extractor_by_name(&m.extractor, cfg.seed, m.weights.clone())?;
    let real = load_images(&a.real)?;
    let generated = load_images(&a.generated)?;
    if real.len() < 2 || generated.len() < 2 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "need at least two images per folder (real: {}, generated: {})",
            real.len(),
            generated.len()
        )));
    }
    let (real_f, _) = extractor.extract_all(&real)?;
    let (gen_f, gen_p) = extractor.extract_all(&generated)?;
    let is = inception_score(&gen_p, m.is_splits)?;
    let fid_v = fid(&real_f, &gen_f)?;
    let kid_v = kid(&real_f, &gen_f)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    cfg.echo(&cli.out)?;
    let header = "extractor,n_real,n_generated,IS,FID,KIDx100";
    let row = format!(
        "{},{},{},{is:.4},{fid_v:.4},{:.4}",
        extractor.name(),
        real.len(),
        generated.len(),
        100.0 * kid_v
    );
    println!("{header}\n{row}");
    fs::write(cli.out.join("eval_translation.csv"), format!("{header}\n{row}\n"))
        .context("writing eval_translation.csv")?;
    let record = serde_json::json!({
        "extractor": extractor.name(),
        "real": a.real,
        "generated": a.generated,
        "n_real": real.len(),
        "n_generated": generated.len(),
        "is": is,
        "fid": fid_v,
        "kid": kid_v,
    });
    append(&cli.out.join("eval_translation.jsonl"), &record.to_string())?;
    Ok(())
}

fn eval_cd(cli: &Cli, a: &EvalCdArgs) -> CmdResult {
    if a.checkpoint.is_none() && a.predicted.is_none() {
        return Err(Failure::Usage("eval-cd needs --checkpoint and/or --predicted".into()));
    }
    let cfg = resolve(cli, RunConfig::default(), &[])?;
    let pairs = load_pairs(&a.data)?;
    if pairs.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("no pairs under {}", a.data.join("pairs").display())));
    }
    let model = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    cfg.echo(&cli.out)?;

    let mut methods: Vec<&str> = vec!["pcakm"];
    if model.is_some() {
        methods.push("translate+pcakm");
    }
    if a.predicted.is_some() {
        methods.push("predicted");
    }
    for m in &methods {
        fs::create_dir_all(cli.out.join("maps").join(m.replace('+', "_"))).context("creating map folders")?;
    }
    let mut csv = String::from("pair,method,FA,MA,OE,PCC\n");
    let mut jsonl = String::new();
    let mut sums = vec![(0.0, 0.0, 0.0, 0.0); methods.len()];
    for pair in &pairs {
        for (k, method) in methods.iter().enumerate() {
            let map = match *method {
                "pcakm" => pcakm(&difference_image(&pair.t1, &pair.t2, &cfg.cd.luma)?, &cfg.pcakm)?,
                "translate+pcakm" => detect_with_translation(
                    &pair.t1,
                    &pair.t2,
                    model.as_ref().expect("model loaded"),
                    cfg.cd.direction,
                    &cfg.cd.luma,
                    &cfg.pcakm,
                )?,
                _ => {
                    let path = a.predicted.as_ref().expect("predicted folder").join(&pair.name);
                    let img = image::open(&path)
                        .with_context(|| format!("reading predicted map {}", path.display()))?
                        .to_luma8();
                    ChangeMap::from_gray(&img)
                }
            };
            let s: ConfusionSummary = score_change_map(&map, &pair.mask)?;
            let dir = cli.out.join("maps").join(method.replace('+', "_"));
            let map_path = dir.join(&pair.name);
            map.to_gray()
                .save_with_format(&map_path, image::ImageFormat::Png)
                .with_context(|| format!("writing {}", map_path.display()))?;
            csv.push_str(&format!("{},{method},{},{},{},{:.4}\n", pair.name, s.fa, s.ma, s.oe, s.pcc));
            jsonl.push_str(&serde_json::json!({"pair": pair.name, "method": method, "summary": s}).to_string());
            jsonl.push('\n');
            let e = &mut sums[k];
            e.0 += s.fa as f64;
            e.1 += s.ma as f64;
            e.2 += s.oe as f64;
            e.3 += s.pcc;
        }
    }
    let n = pairs.len() as f64;
    println!("method,FA,MA,OE,PCC");
    let mut summary = String::from("method,FA,MA,OE,PCC\n");
    for (method, (fa, ma, oe, pcc)) in methods.iter().zip(&sums) {
        let line = format!("{method},{:.2},{:.2},{:.2},{:.4}", fa / n, ma / n, oe / n, pcc / n);
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    fs::write(cli.out.join("eval_cd.csv"), csv).context("writing eval_cd.csv")?;
    fs::write(cli.out.join("eval_cd_summary.csv"), summary).context("writing eval_cd_summary.csv")?;
    fs::write(cli.out.join("eval_cd.jsonl"), jsonl).context("writing eval_cd.jsonl")?;
    Ok(())
}

