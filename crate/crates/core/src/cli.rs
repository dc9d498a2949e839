//! Command-line entry points: `synth`, `train`, `eval`, `infer`, `viz`.
//!
//! Every failure maps to one exit code (2 usage, 3 io, 4 config, 5 numeric)
//! and is printed as a single line `error code=N kind=K msg="..."`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    load_manifest, load_sample, preprocess, synth_pair_sized, write_dataset, DataError, Level, Sample, Split,
};
use crate::geometry::{GeometryError, PolygonSet, RasterMask};
use crate::metrics::{aggregate, score_image, MetricsError};
use crate::model::{load_checkpoint, save_checkpoint, ModelError, RoiMatcher};
use crate::inference::{match_images, scale_box, InferenceError};
use crate::postprocess::{decode, DecodeError, InstanceSummary, MatchResult};
use crate::trainer::{train, write_report, TrainError, TrainOutputs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Config(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// The single machine-parsable error line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ").replace('"', "'");
        format!("error code={} kind={} msg=\"{}\"", self.exit_code(), self.kind(), msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            ModelError::VersionMismatch { .. } | ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Shape(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Image(_) | DataError::DanglingPath { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Output(_) => CliError::Numeric(e.to_string()),
            DecodeError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Input(_) => CliError::Usage(e.to_string()),
            InferenceError::NonFinite => CliError::Numeric(e.to_string()),
            InferenceError::Data(d) => d.into(),
            InferenceError::Model(m) => m.into(),
            InferenceError::Decode(d) => d.into(),
            InferenceError::Geometry(g) => g.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Decode(d) => d.into(),
            TrainError::EmptyData(_) => CliError::Usage(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "roimatcher", version, about = "One-shot region matching in document images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML config with [model], [loss], [train], [decode] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override as section.key=value (repeatable, wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Seed (overrides train.seed; used by synth for generation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write overlay images.
    #[arg(long)]
    pub viz: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Pairs per difficulty level.
        #[arg(long)]
        count: usize,
    },
    /// Train a model on the train split, selecting by val mIoU.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Match one reference prompt against one target image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ref_image: PathBuf,
        #[arg(long)]
        ref_mask: PathBuf,
        #[arg(long)]
        tgt_image: PathBuf,
        /// Optional ground-truth polygons JSON drawn in the overlay.
        #[arg(long)]
        gt_polygons: Option<PathBuf>,
    },
    /// Write prediction overlays for every pair of a split.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string()),
    })?;
    match cli.command {
        Command::Synth { common, count } => cmd_synth(&common, count),
        Command::Train { common, manifest, init } => cmd_train(&common, &manifest, init.as_deref()),
        Command::Eval { common, checkpoint, manifest, split } => cmd_eval(&common, &checkpoint, &manifest, &split),
        Command::Infer { common, checkpoint, ref_image, ref_mask, tgt_image, gt_polygons } => cmd_infer(
            &common,
            &checkpoint,
            &ref_image,
            &ref_mask,
            &tgt_image,
            gt_polygons.as_deref(),
        ),
        Command::Viz { common, checkpoint, manifest, split } => cmd_viz(&common, &checkpoint, &manifest, &split),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

/// Writes `count` pairs per level and the manifest into `out`.
pub fn cmd_synth(common: &Common, count: usize) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let mut samples = Vec::with_capacity(3 * count);
    for level in Level::ALL {
        for i in 0..count {
            let pair_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let (mut s, _) = synth_pair_sized(level, pair_seed, cfg.data.canvas_height, cfg.data.canvas_width);
            s.pair_id = format!("L{}-{i:06}", level.index() + 1);
            samples.push(s);
        }
    }
    let m = write_dataset(&samples, &common.out)?;
    println!("wrote {} pairs to {}", m.records.len(), common.out.display());
    Ok(())
}

fn load_split(manifest: &Path, split: Split) -> Result<Vec<Sample>, CliError> {
    let m = load_manifest(manifest)?;
    m.records_in(split).map(|r| load_sample(&m, r).map_err(CliError::from)).collect()
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("unknown split {s:?}")))
}

pub fn cmd_train(common: &Common, manifest: &Path, init: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let train_set = load_split(manifest, Split::Train)?;
    let val_set = load_split(manifest, Split::Val)?;
    if train_set.is_empty() {
        return Err(CliError::Usage("manifest has no train records".into()));
    }
    let mut model = match init {
        Some(p) => load_checkpoint(p)?,
        None => RoiMatcher::new(cfg.model.clone(), cfg.train.seed)?,
    };
    fs::write(common.out.join("config.toml"), cfg.to_toml())?;
    let outputs = TrainOutputs { dir: Some(common.out.clone()), decode: cfg.decode.clone() };
    let outcome = train(&mut model, &train_set, &val_set, &cfg.loss, &cfg.train, &outputs)?;
    if outcome.best.is_none() {
        save_checkpoint(&model, &common.out.join("best.ckpt"))?;
    }
    if let Some((_, report)) = outcome.validations.last() {
        write_report(report, &common.out)?;
    }
    match outcome.log.last() {
        Some(e) => println!("trained {} iterations, final loss {:.5}", outcome.log.len(), e.loss.total),
        None => println!("trained 0 iterations"),
    }
    Ok(())
}

/// Decodes one sample at network resolution.
fn predict_sample(model: &RoiMatcher, sample: &Sample, cfg: &RunConfig) -> Result<(MatchResult, PolygonSet), CliError> {
    let pair = preprocess(sample, model.config().input_size)?;
    let out = model.predict(&pair.reference, &pair.prompt, &pair.target)?;
    if !out.is_finite() {
        return Err(CliError::Numeric(format!("non-finite output on {}", sample.pair_id)));
    }
    Ok((decode(&out, &cfg.decode)?, pair.target_polygons))
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, manifest: &Path, split: &str) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let split = parse_split(split)?;
    let model = load_checkpoint(checkpoint)?;
    let samples = load_split(manifest, split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} is empty")));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for s in &samples {
        let (result, gt) = predict_sample(&model, s, &cfg)?;
        scores.push(score_image(&result, &gt, s.level)?);
    }
    let report = aggregate(&scores);
    write_report(&report, &common.out)?;
    println!("mIoU {:.4} F {:.4} over {} pairs", report.miou, report.f_measure, samples.len());
    Ok(())
}

/// Result file of `infer`.
#[derive(Debug, Serialize)]
pub struct InferOutput {
    pub instances: Vec<InstanceSummary>,
    pub mask_file: String,
    pub latency_s: f64,
    pub target_size: [usize; 2],
}

fn read_mask(path: &Path) -> Result<RasterMask, CliError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let bits: Vec<bool> = img.pixels().map(|p| p[0] >= 128).collect();
    Ok(RasterMask::from_bools(h as usize, w as usize, &bits)?)
}

const RED: [u8; 3] = [220, 30, 30];
const GREEN: [u8; 3] = [20, 170, 40];

/// Draws a 2-pixel rectangle outline.
pub fn draw_box(img: &mut RgbImage, b: [usize; 4], color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let [x0, y0, x1, y1] = b;
    let mut put = |x: usize, y: usize| {
        if (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    };
    for t in 0..2 {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1.saturating_sub(t));
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1.saturating_sub(t), y);
        }
    }
}

fn gt_boxes(gt: &PolygonSet) -> Vec<[usize; 4]> {
    gt.iter()
        .map(|ip| {
            let (x0, y0, x1, y1) = ip.polygon.bounds();
            [x0.max(0.0) as usize, y0.max(0.0) as usize, (x1.ceil() as usize).saturating_sub(1), (y1.ceil() as usize).saturating_sub(1)]
        })
        .collect()
}

/// Overlay: ground truth in red, predictions in green.
fn overlay(target: &RgbImage, preds: &[[usize; 4]], gts: &[[usize; 4]]) -> RgbImage {
    let mut img = target.clone();
    for &b in gts {
        draw_box(&mut img, b, RED);
    }
    for &b in preds {
        draw_box(&mut img, b, GREEN);
    }
    img
}

pub fn cmd_infer(
    common: &Common,
    checkpoint: &Path,
    ref_image: &Path,
    ref_mask: &Path,
    tgt_image: &Path,
    gt_polygons: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model = load_checkpoint(checkpoint)?;
    let reference_image = image::open(ref_image)?.to_rgb8();
    let target_image = image::open(tgt_image)?.to_rgb8();
    let reference_mask = read_mask(ref_mask)?;
    let gt = match gt_polygons {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<PolygonSet>(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => PolygonSet::new(),
    };
    if reference_mask.count_nonzero() == 0 {
        return Err(CliError::Usage("reference mask is empty".into()));
    }
    let start = Instant::now();
    let pred = match_images(&model, &cfg.decode, &reference_image, &reference_mask, &target_image)?;
    let latency_s = start.elapsed().as_secs_f64();
    let (tw, th) = target_image.dimensions();
    let mask_img = GrayImage::from_fn(tw, th, |x, y| Luma([if pred.mask.get(y as usize, x as usize) != 0 { 255 } else { 0 }]));
    let mask_file = "mask.png";
    mask_img.save(common.out.join(mask_file))?;
    let instances = pred.instances;
    if common.viz {
        let preds: Vec<[usize; 4]> = instances.iter().map(|i| i.bbox).collect();
        overlay(&target_image, &preds, &gt_boxes(&gt)).save(common.out.join("overlay.png"))?;
    }
    let out = InferOutput { instances, mask_file: mask_file.into(), latency_s, target_size: [th as usize, tw as usize] };
    fs::write(common.out.join("result.json"), serde_json::to_string_pretty(&out).expect("result serializes"))?;
    println!("{} instances in {:.3}s", out.instances.len(), latency_s);
    Ok(())
}

pub fn cmd_viz(common: &Common, checkpoint: &Path, manifest: &Path, split: &str) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let split = parse_split(split)?;
    let model = load_checkpoint(checkpoint)?;
    let samples = load_split(manifest, split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} is empty")));
    }
    for s in &samples {
        let (result, _) = predict_sample(&model, s, &cfg)?;
        let (tw, th) = s.target_image.dimensions();
        let (h, w) = model.config().input_size;
        let (sx, sy) = (f64::from(tw) / w as f64, f64::from(th) / h as f64);
        let preds: Vec<[usize; 4]> = result.instances.iter().map(|i| scale_box(&i.bbox, sx, sy)).collect();
        overlay(&s.target_image, &preds, &gt_boxes(&s.target_polygons))
            .save(common.out.join(format!("{}_overlay.png", s.pair_id)))?;
    }
    println!("wrote {} overlays", samples.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_lines_are_single_line_with_codes() {
        let e = CliError::Config("bad\nthing \"x\"".into());
        assert_eq!(e.exit_code(), 4);
        assert_eq!(e.line(), "error code=4 kind=config msg=\"bad thing 'x'\"");
        assert_eq!(run(["roimatcher", "bogus"]).unwrap_err().exit_code(), 2);
    }
}
