use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use image::{GrayImage, Rgb, RgbImage};
use serde::Serialize;

use instparse::checkpoint::Checkpoint;
use instparse::config::Config;
use instparse::dataset::{generate_split, load_dataset, save_dataset, VAL_SEED_OFFSET};
use instparse::geometry::BBox;
use instparse::metrics::MetricReport;
use instparse::predict::{evaluate_predictions, predict_images, predict_scenes, PredictOptions};
use instparse::train::{load_loss_log, loss_log_path, train, EpochLog};

#[derive(Parser)]
#[command(name = "instparse", version, about = "Instance-level human parsing on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits under OUT.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a split directory and write a checkpoint plus its loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Rank by detection score only, ignoring the mask-quality score.
        #[arg(long)]
        no_miou_score: bool,
    },
    /// Parse a single PNG image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot a loss log or an evaluation report as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().context("parsing config")?;
    if let Ok(seed) = std::env::var(instparse::config::SEED_ENV) {
        table.insert("seed".into(), toml::Value::Integer(seed.trim().parse().context("seed override")?));
    }
    for o in &args.overrides {
        let (key, value) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        let key = key.trim();
        let snippet = format!("v = {}", value.trim());
        let value = match snippet.parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.trim().to_string()),
        };
        table.insert(key.to_string(), value);
    }
    Ok(Config::from_toml_str(&table.to_string())?)
}

/// A split directory, or the `train` split inside a generated dataset root.
fn split_dir(data: &Path, split: &str) -> PathBuf {
    let nested = data.join(split);
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

const COLORS: [[u8; 3]; 8] =
    [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

#[derive(Serialize)]
struct InstanceOut {
    bbox: BBox,
    score: f64,
    det_score: f64,
    miou_score: Option<f64>,
    raster: String,
}

fn save_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    GrayImage::from_raw(w as u32, h as u32, data).context("raster size")?.save(path)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let g = cfg.generator();
            save_dataset(&generate_split(&g, cfg.base_seed, cfg.n_train)?, &out.join("train"))?;
            save_dataset(&generate_split(&g, cfg.base_seed + VAL_SEED_OFFSET, cfg.n_val)?, &out.join("val"))?;
            log::info!("wrote {} train and {} val scenes to {}", cfg.n_train, cfg.n_val, out.display());
        }
        Command::Train { cfg, data, out } => {
            let cfg = load_config(&cfg)?;
            let scenes = load_dataset(&split_dir(&data, "train"))?;
            log::info!("training on {} scenes for {} epochs", scenes.len(), cfg.epochs);
            let trainer = train(&cfg, &scenes, Some(&out))?;
            log::info!("checkpoint {} and loss log {}", out.display(), loss_log_path(&out).display());
            if let Some(last) = trainer.log.last() {
                log::info!("final epoch mean total loss {:.4}", last.mean.total);
            }
        }
        Command::Evaluate { ckpt, data, report, no_miou_score } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let scenes = load_dataset(&split_dir(&data, "val"))?;
            let mut opts = PredictOptions::from_config(&ck.config);
            opts.use_miou_score &= !no_miou_score;
            let preds = predict_scenes(&model, &scenes, &opts)?;
            let r = evaluate_predictions(&preds, &scenes, ck.config.k_parts);
            std::fs::write(&report, r.to_json())?;
            println!("{r}");
        }
        Command::Predict { ckpt, image, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let img = image::open(&image).with_context(|| format!("reading {}", image.display()))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut chw = vec![0f32; 3 * w * h];
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    chw[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 255.0;
                }
            }
            let pred = predict_images(&model, &[chw], w, h, &PredictOptions::from_config(&ck.config))?.remove(0);
            std::fs::create_dir_all(&out)?;
            save_gray(&out.join("parsing.png"), w, h, pred.global.data().to_vec())?;
            let mut overlay = RgbImage::new(w as u32, h as u32);
            for (x, y, px) in overlay.enumerate_pixels_mut() {
                let label = pred.global.get(x as usize, y as usize) as usize;
                let src = img.get_pixel(x, y);
                *px = if label == 0 {
                    *src
                } else {
                    let c = COLORS[label % COLORS.len()];
                    Rgb([0, 1, 2].map(|i| ((src[i] as u16 + c[i] as u16) / 2) as u8))
                };
            }
            overlay.save(out.join("overlay.png"))?;
            let mut listing = Vec::new();
            for (i, inst) in pred.instances.iter().enumerate() {
                let raster = format!("instance_{i:02}.png");
                save_gray(&out.join(&raster), w, h, inst.parsing.data().to_vec())?;
                listing.push(InstanceOut { bbox: inst.bbox, score: inst.score, det_score: inst.det_score, miou_score: inst.miou_score, raster });
            }
            std::fs::write(out.join("instances.json"), serde_json::to_string_pretty(&listing)?)?;
            log::info!("{} instances written to {}", listing.len(), out.display());
        }
        Command::Plot { input, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            if let Ok(report) = serde_json::from_str::<MetricReport>(&text) {
                instparse::plot::plot_metric_bars(&report, &out)?;
            } else if serde_json::from_str::<Vec<EpochLog>>(&text).is_ok() {
                instparse::plot::plot_loss_curve(&load_loss_log(&input)?, &out)?;
            } else {
                bail!("{} is neither a loss log nor an evaluation report", input.display());
            }
            log::info!("wrote {}", out.display());
        }
    }
    Ok(())
}
