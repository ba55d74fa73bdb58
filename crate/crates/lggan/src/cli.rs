//! Command implementations behind the `lggan` binary: train, generate,
//! inspect, evaluate.
//!
//! Each command is an ordinary function over an argument struct, so tests
//! drive them directly without spawning processes. Errors split into two
//! classes that map onto exit codes: [`CliError::Usage`] (exit 1) for
//! anything wrong with what the user handed us — config files, flags,
//! datasets, checkpoints that fail their preconditions — and
//! [`CliError::Runtime`] (exit 2) for failures while doing the work, such
//! as write errors or diverging training.
//!
//! Every command writes a resolved-configuration snapshot next to its
//! outputs, recording all inputs needed to replay it. For `train` the
//! snapshot is itself a loadable run-configuration file.

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunConfigFile};
use crate::data::{
    class_color_table, load_generation_inputs, load_named_dataset, one_hot, synth_dataset, Batch,
    PairedSample,
};
use crate::metrics::{labeled_mask, masked_l1, psnr, ssim, ImageScores, Report};
use crate::model::{GeneratorOutputs, LgGan};
use crate::trainer::{train, TrainOptions, TrainSummary};
use ndarray::{Array2, Array3, ArrayD, Axis};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming the root directory for default outputs.
/// Commands fall back to `./runs` when it is unset.
pub const OUT_ROOT_ENV: &str = "LGGAN_OUT_ROOT";

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    /// The user gave us something unusable; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// The work itself failed; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Default output root: `$LGGAN_OUT_ROOT`, else `./runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_model(ckpt: &Path) -> Result<(Checkpoint, LgGan), CliError> {
    let checkpoint = Checkpoint::load(ckpt)
        .map_err(|e| usage(format!("cannot load checkpoint {}: {e}", ckpt.display())))?;
    let (model, _, _) = checkpoint
        .restore()
        .map_err(|e| usage(format!("checkpoint {} does not restore: {e}", ckpt.display())))?;
    Ok((checkpoint, model))
}

/// Generation and training work at strides of 4, and instance-normalized
/// stages degenerate on planes smaller than 2×2, so inputs must be at
/// least 32 pixels per side and divisible by 4 — the same rule
/// [`ModelConfig::validate`] applies to the configured size.
fn check_image_dims(name: &str, h: usize, w: usize) -> Result<(), CliError> {
    if h % 4 != 0 || w % 4 != 0 || h < 32 || w < 32 {
        return Err(usage(format!(
            "input {name} is {h}x{w}; sizes must be at least 32x32 and divisible by 4"
        )));
    }
    Ok(())
}

fn forward_sample(model: &LgGan, sample: &PairedSample) -> Result<GeneratorOutputs, CliError> {
    let batch = Batch::from_samples(&[sample]);
    model.generate(&batch, false).map_err(|e| runtime(format!("generation failed: {e}")))
}

// ---------------------------------------------------------------------------
// Raster output

fn denorm(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` image in `[−1, 1]` as an 8-bit PNG.
fn save_rgb(path: &Path, img: &ArrayD<f32>) -> Result<(), CliError> {
    let shape = img.shape();
    assert_eq!(shape[0], 3, "save_rgb wants [3, H, W]");
    let (h, w) = (shape[1], shape[2]);
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            denorm(img[[0, y, x]]),
            denorm(img[[1, y, x]]),
            denorm(img[[2, y, x]]),
        ])
    });
    buf.save(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Write an `[H, W]` plane in `[0, 1]` as an 8-bit grayscale PNG.
fn save_gray_unit(path: &Path, plane: &Array2<f32>) -> Result<(), CliError> {
    let (h, w) = plane.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(plane[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Color-code a layout with the synthetic class palette; void pixels are
/// black.
fn render_layout(sample: &PairedSample) -> ArrayD<f32> {
    let map = &sample.semantic;
    let colors = class_color_table(map.class_count());
    let (h, w) = (map.height(), map.width());
    let mut img = Array3::<f32>::from_elem((3, h, w), -1.0);
    let onehot = one_hot(map);
    for y in 0..h {
        for x in 0..w {
            for (i, color) in colors.iter().enumerate() {
                if onehot[[i, y, x]] == 1.0 {
                    for ch in 0..3 {
                        img[[ch, y, x]] = color[ch];
                    }
                }
            }
        }
    }
    img.into_dyn()
}

/// Tile the first `limit` channels of a `[C, H, W]` feature block into one
/// grayscale grid, scaled by the block's maximum so zeros stay black.
fn feature_grid(block: &ArrayD<f32>, limit: usize) -> Array2<f32> {
    let shape = block.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = c.min(limit).max(1);
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let gap = 1usize;
    let max = block
        .iter()
        .take(k * h * w)
        .fold(0.0f32, |m, &v| m.max(v));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut grid =
        Array2::<f32>::zeros((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap));
    for ch in 0..k {
        let (gy, gx) = (ch / cols, ch % cols);
        let (oy, ox) = (gy * (h + gap), gx * (w + gap));
        for y in 0..h {
            for x in 0..w {
                grid[[oy + y, ox + x]] = block[[ch, y, x]] * scale;
            }
        }
    }
    grid
}

// ---------------------------------------------------------------------------
// Resolved-config snapshots

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// The `train` snapshot is a loadable run-configuration file: every model
/// key resolved, plus the dataset and output settings actually used.
fn train_snapshot(
    config: &ModelConfig,
    file: &RunConfigFile,
    out_dir: &Path,
) -> Result<String, CliError> {
    let mut value = toml::Value::try_from(config)
        .map_err(|e| runtime(format!("cannot serialize config: {e}")))?;
    let table = value.as_table_mut().expect("config serializes as a table");
    let mut put = |k: &str, v: toml::Value| {
        table.insert(k.to_string(), v);
    };
    put("synthetic", toml::Value::Boolean(file.synthetic));
    put("synth_samples", toml::Value::Integer(file.synth_samples as i64));
    if let Some(dir) = &file.data_dir {
        put("data_dir", toml::Value::String(dir.display().to_string()));
    }
    put("out_dir", toml::Value::String(out_dir.display().to_string()));
    put("checkpoint_every", toml::Value::Integer(file.checkpoint_every as i64));
    put("log_every", toml::Value::Integer(file.log_every as i64));
    put("void_id", toml::Value::Integer(file.void_id as i64));
    toml::to_string_pretty(&value).map_err(|e| runtime(format!("cannot render snapshot: {e}")))
}

#[derive(serde::Serialize)]
struct CommandSnapshot<'a> {
    command: &'a str,
    checkpoint: &'a Path,
    trained_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_dir: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dir: Option<&'a Path>,
    out: &'a Path,
    void_id: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    model: &'a ModelConfig,
}

fn command_snapshot(snap: &CommandSnapshot) -> Result<String, CliError> {
    toml::to_string_pretty(snap).map_err(|e| runtime(format!("cannot render snapshot: {e}")))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub summary: TrainSummary,
}

impl fmt::Display for TrainOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} steps; final checkpoint {}",
            self.summary.steps,
            self.summary.final_checkpoint.display()
        )
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let file = RunConfigFile::parse(&text)
        .map_err(|e| usage(format!("config {}: {e}", args.config.display())))?;
    let config = file.resolve().map_err(|e| usage(format!("config: {e}")))?;

    let dataset: Vec<PairedSample> = if file.synthetic {
        synth_dataset(
            config.seed,
            file.synth_samples,
            config.c,
            config.image_h,
            config.image_w,
            config.mode,
        )
    } else {
        let dir = file
            .data_dir
            .as_ref()
            .ok_or_else(|| usage("config: data_dir is required unless synthetic = true"))?;
        let named = load_named_dataset(dir, config.mode, config.c, file.void_id)
            .map_err(|e| usage(format!("dataset {}: {e}", dir.display())))?;
        for (stem, s) in &named {
            let (h, w) = (s.semantic.height(), s.semantic.width());
            if (h, w) != (config.image_h, config.image_w) {
                return Err(usage(format!(
                    "sample {stem} is {h}x{w} but the config says {}x{}",
                    config.image_h, config.image_w
                )));
            }
        }
        named.into_iter().map(|(_, s)| s).collect()
    };
    if dataset.is_empty() {
        return Err(usage("config: synth_samples must be positive"));
    }

    let out_dir = file.out_dir.clone().unwrap_or_else(|| {
        let name = format!(
            "train-{}-{}-seed{}",
            format!("{:?}", config.setup).to_lowercase(),
            format!("{:?}", config.mode).to_lowercase(),
            config.seed
        );
        out_root().join(name)
    });
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_text(&out_dir.join("config-resolved.toml"), &train_snapshot(&config, &file, &out_dir)?)?;

    let opts = TrainOptions {
        out_dir: out_dir.clone(),
        checkpoint_every: file.checkpoint_every as u64,
        log_every: file.log_every as u64,
    };
    let summary = train(&config, &dataset, &opts).map_err(|e| match e {
        crate::trainer::TrainError::Config(c) => usage(format!("config: {c}")),
        other => runtime(other.to_string()),
    })?;
    Ok(TrainOutcome { out_dir, summary })
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub out: Option<PathBuf>,
    pub void_id: u8,
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub out_dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl fmt::Display for GenerateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wrote {} images to {}", self.written.len(), self.out_dir.display())
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateOutcome, CliError> {
    let (checkpoint, model) = load_model(&args.ckpt)?;
    let config = &model.config;
    let inputs = load_generation_inputs(&args.input, config.mode, config.c, args.void_id)
        .map_err(|e| usage(format!("inputs {}: {e}", args.input.display())))?;
    for (stem, s) in &inputs {
        check_image_dims(stem, s.semantic.height(), s.semantic.width())?;
    }

    let out_dir = args.out.clone().unwrap_or_else(|| out_root().join("generated"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut written = Vec::with_capacity(inputs.len());
    for (stem, sample) in &inputs {
        let outputs = forward_sample(&model, sample)?;
        let fused = outputs.fused.data().index_axis(Axis(0), 0).to_owned();
        let path = out_dir.join(format!("{stem}.png"));
        save_rgb(&path, &fused)?;
        written.push(path);
    }

    let snap = CommandSnapshot {
        command: "generate",
        checkpoint: &args.ckpt,
        trained_steps: checkpoint.step,
        input_dir: Some(&args.input),
        data_dir: None,
        out: &out_dir,
        void_id: args.void_id,
        index: None,
        channels: None,
        model: config,
    };
    write_text(&out_dir.join("generate-config.toml"), &command_snapshot(&snap)?)?;
    Ok(GenerateOutcome { out_dir, written })
}

// ---------------------------------------------------------------------------
// inspect

#[derive(Debug, Clone)]
pub struct InspectArgs {
    pub ckpt: PathBuf,
    pub index: usize,
    pub out: Option<PathBuf>,
    /// Dataset to pick the sample from; defaults to the deterministic
    /// synthetic scene set implied by the checkpoint's config and seed.
    pub data: Option<PathBuf>,
    pub void_id: u8,
    /// How many channels of each class's filtered features to tile.
    pub channels: usize,
}

#[derive(Debug)]
pub struct InspectOutcome {
    pub out_dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl fmt::Display for InspectOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wrote {} artifacts to {}", self.written.len(), self.out_dir.display())
    }
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<InspectOutcome, CliError> {
    let (checkpoint, model) = load_model(&args.ckpt)?;
    let config = &model.config;

    let sample = match &args.data {
        Some(dir) => {
            let named = load_named_dataset(dir, config.mode, config.c, args.void_id)
                .map_err(|e| usage(format!("dataset {}: {e}", dir.display())))?;
            if args.index >= named.len() {
                return Err(usage(format!(
                    "index {} out of range: dataset has {} samples",
                    args.index,
                    named.len()
                )));
            }
            let (stem, sample) = named.into_iter().nth(args.index).unwrap();
            check_image_dims(&stem, sample.semantic.height(), sample.semantic.width())?;
            sample
        }
        None => synth_dataset(
            config.seed,
            args.index + 1,
            config.c,
            config.image_h,
            config.image_w,
            config.mode,
        )
        .pop()
        .unwrap(),
    };

    let out_dir = args.out.clone().unwrap_or_else(|| out_root().join("inspect"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let outputs = forward_sample(&model, &sample)?;
    let mut written = Vec::new();
    let emit_rgb = |written: &mut Vec<PathBuf>, name: String, img: &ArrayD<f32>| {
        let path = out_dir.join(name);
        save_rgb(&path, img)?;
        written.push(path);
        Ok::<(), CliError>(())
    };

    let first = |t: &crate::graph::Tensor| t.data().index_axis(Axis(0), 0).to_owned();

    // Context: the inputs the model saw.
    emit_rgb(&mut written, "layout.png".into(), &render_layout(&sample))?;
    emit_rgb(&mut written, "target.png".into(), &sample.target.clone().into_dyn())?;
    if let Some(cond) = &sample.conditioning_image {
        emit_rgb(&mut written, "cond.png".into(), &cond.clone().into_dyn())?;
    }

    // Composites: image-level, class-level, fused.
    emit_rgb(&mut written, "global.png".into(), &first(&outputs.global_image))?;
    if let Some(local) = &outputs.local_image {
        emit_rgb(&mut written, "local.png".into(), &first(local))?;
    }
    emit_rgb(&mut written, "fused.png".into(), &first(&outputs.fused))?;

    // Per-class images, masked to their regions so everything outside a
    // class's mask renders black.
    let onehot = one_hot(&sample.semantic);
    for (i, img) in outputs.per_class.iter().enumerate() {
        let img = first(img);
        let mut masked = img.clone();
        let shape = masked.shape().to_vec();
        for ch in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    if onehot[[i, y, x]] == 0.0 {
                        masked[[ch, y, x]] = -1.0;
                    }
                }
            }
        }
        emit_rgb(&mut written, format!("class-{i:02}.png"), &masked)?;
    }

    // Learned fusion weights, quantized from [0, 1].
    if let Some((w_g, w_l)) = &outputs.weights {
        for (name, w) in [("weight-global.png", w_g), ("weight-local.png", w_l)] {
            let plane = w
                .data()
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .mapv(|v| v);
            let path = out_dir.join(name);
            save_gray_unit(&path, &plane)?;
            written.push(path);
        }
    }

    // Filtered-feature channel grids, one per class.
    for (i, block) in outputs.filtered.iter().enumerate() {
        let block = first(block);
        let grid = feature_grid(&block, args.channels.max(1));
        let path = out_dir.join(format!("features-class-{i:02}.png"));
        save_gray_unit(&path, &grid)?;
        written.push(path);
    }

    let snap = CommandSnapshot {
        command: "inspect",
        checkpoint: &args.ckpt,
        trained_steps: checkpoint.step,
        input_dir: None,
        data_dir: args.data.as_deref(),
        out: &out_dir,
        void_id: args.void_id,
        index: Some(args.index),
        channels: Some(args.channels),
        model: config,
    };
    write_text(&out_dir.join("inspect-config.toml"), &command_snapshot(&snap)?)?;
    Ok(InspectOutcome { out_dir, written })
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub void_id: u8,
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report_path: PathBuf,
    pub report: Report,
}

impl fmt::Display for EvaluateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (p, s, l1) = self.report.mean().expect("evaluate rejects empty datasets");
        write!(
            f,
            "psnr {p:.4} dB  ssim {s:.4}  masked-l1 {l1:.4} over {} images; report at {}",
            self.report.rows.len(),
            self.report_path.display()
        )
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluateOutcome, CliError> {
    let (checkpoint, model) = load_model(&args.ckpt)?;
    let config = &model.config;
    let named = load_named_dataset(&args.data, config.mode, config.c, args.void_id)
        .map_err(|e| usage(format!("dataset {}: {e}", args.data.display())))?;
    for (stem, s) in &named {
        check_image_dims(stem, s.semantic.height(), s.semantic.width())?;
    }

    let mut rows = Vec::with_capacity(named.len());
    for (stem, sample) in &named {
        let outputs = forward_sample(&model, sample)?;
        let fused = outputs.fused.data().index_axis(Axis(0), 0).to_owned();
        let target = sample.target.clone().into_dyn();
        let keep = labeled_mask(&one_hot(&sample.semantic));
        let score = |r: Result<f64, crate::metrics::MetricsError>| {
            r.map_err(|e| runtime(format!("scoring {stem}: {e}")))
        };
        rows.push(ImageScores {
            name: stem.clone(),
            psnr: score(psnr(&fused, &target))?,
            ssim: score(ssim(&fused, &target))?,
            masked_l1: score(masked_l1(&fused, &target, Some(&keep)))?,
        });
    }
    let report = Report { rows };

    let report_path = args.out.clone().unwrap_or_else(|| out_root().join("evaluation.txt"));
    write_text(&report_path, &report.render())?;
    let snapshot_path = {
        let mut name = report_path.file_name().unwrap_or_default().to_os_string();
        name.push(".config.toml");
        report_path.with_file_name(name)
    };
    let snap = CommandSnapshot {
        command: "evaluate",
        checkpoint: &args.ckpt,
        trained_steps: checkpoint.step,
        input_dir: None,
        data_dir: Some(&args.data),
        out: &report_path,
        void_id: args.void_id,
        index: None,
        channels: None,
        model: config,
    };
    write_text(&snapshot_path, &command_snapshot(&snap)?)?;
    Ok(EvaluateOutcome { report_path, report })
}
