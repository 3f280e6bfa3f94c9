mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sparseseg_core::bench::{measure_fps, overlay_rgb, predict_raster, predict_tiles, sweep, SweepConfig};
use sparseseg_core::datagen::{generate_dataset, read_png, write_dataset, AnnotatedTile, Dataset};
use sparseseg_core::evaluator::{evaluate, write_predictions, EvalConfig};
use sparseseg_core::matching::{fit, RunDir, CHECKPOINT_FILE};
use sparseseg_core::model::Model;

use config::RunConfig;

const THREADS_ENV: &str = "SPSEG_THREADS";

#[derive(Parser)]
#[command(name = "sparseseg", version, about = "Sparse instance segmentation of synthetic polygon scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand; each one overrides the matching
/// config entry where the subcommand uses it.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration (defaults apply to anything left out).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for generation; training and model-init seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of decoder instance slots.
    #[arg(long, global = true)]
    n_instances: Option<usize>,
    /// Mask IoU needed for a true positive.
    #[arg(long, global = true)]
    iou_threshold: Option<f64>,
    /// Drop predictions scoring below this.
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    /// Untimed passes before benchmarking.
    #[arg(long, global = true)]
    warmup: Option<usize>,
    /// Timed passes over the image set.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic polygon dataset.
    Generate {
        /// Tile count (overrides the config).
        #[arg(long)]
        n_tiles: Option<usize>,
        /// Generate tiles one at a time instead of across the worker pool.
        #[arg(long)]
        serial: bool,
    },
    /// Train a model on the training split of a dataset.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Training iterations (overrides the config).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score a checkpoint on one split; writes predictions, report and PR curve.
    Eval {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long)]
        split: Option<String>,
    },
    /// Single-stream inference throughput on one split.
    Bench {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and measure one model per slot count; writes the trade-off curve.
    Sweep {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated slot counts (overrides the config).
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        /// Training iterations (overrides the config).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Segment a PNG raster of any size; writes an overlay and instance records.
    Predict {
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB PNG to segment.
        #[arg(long)]
        input: PathBuf,
        /// Window size for tiling the raster.
        #[arg(long)]
        tile: Option<usize>,
        /// Pixels shared by neighbouring windows.
        #[arg(long)]
        overlap: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a positive integer"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().context("--out <dir> is required")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn split_tiles(data: &Path, split: &str) -> Result<Vec<AnnotatedTile>> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if split == "all" {
        return Ok(ds.tiles);
    }
    let s = ds.split()?;
    let ids = match split {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        other => bail!("unknown split `{other}` (expected train, val, test or all)"),
    };
    Ok(ds.subset(&ids)?)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let c = cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(n) = c.n_instances {
        cfg.model.decoder.n_instances = n;
    }
    if let Some(t) = c.iou_threshold {
        cfg.eval.iou_threshold = t;
    }
    if let Some(t) = c.score_threshold {
        cfg.eval.score_threshold = t;
        cfg.bench.score_threshold = t;
        cfg.predict.score_threshold = t;
    }
    if let Some(w) = c.warmup {
        cfg.bench.warmup = w;
    }
    if let Some(r) = c.reps {
        cfg.bench.reps = r;
    }

    match cli.command {
        Command::Generate { n_tiles, serial } => {
            if let Some(s) = c.seed {
                cfg.dataset.master_seed = s;
            }
            if let Some(n) = n_tiles {
                cfg.dataset.n_tiles = n;
            }
            let dir = out_dir(&c)?;
            let tiles = generate_dataset(&cfg.dataset, !serial)?;
            write_dataset(&dir, &cfg.dataset, &tiles)?;
            let instances: usize = tiles.iter().map(|t| t.instances.len()).sum();
            println!("wrote {} tiles ({instances} instances) to {}", tiles.len(), dir.display());
        }
        Command::Train { data, resume, iterations } => {
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            let dir = out_dir(&c)?;
            let tiles = split_tiles(&data, "train")?;
            let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            fs::write(dir.join("config.toml"), toml::to_string(&cfg)?)?;
            let every = (cfg.train.iterations / 20).max(1);
            let curve = fit(&tiles, &mut model, &cfg.train, &RunDir::at(&dir, resume), |r| {
                if r.iteration % every == 0 {
                    println!("iter {:6}  loss {:.5}", r.iteration, r.loss.total);
                }
            })?;
            if let Some(last) = curve.last() {
                println!("final loss {:.5} after {} iterations", last.loss.total, last.iteration + 1);
            }
            println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { data, checkpoint, split } => {
            let dir = out_dir(&c)?;
            let model = load_model(&checkpoint)?;
            let tiles = split_tiles(&data, split.as_deref().unwrap_or(&cfg.eval.split))?;
            let preds = predict_tiles(&model, &tiles, cfg.eval.score_threshold)?;
            let ec = EvalConfig { iou_threshold: cfg.eval.iou_threshold, num_classes: model.config.decoder.num_classes };
            let report = evaluate(&preds, &tiles, &ec)?;
            fs::write(dir.join("predictions.jsonl"), write_predictions(&preds))?;
            fs::write(dir.join("report.txt"), report.to_text())?;
            fs::write(dir.join("pr.csv"), report.pr_csv())?;
            print!("{}", report.to_text());
        }
        Command::Bench { data, checkpoint, split } => {
            let dir = out_dir(&c)?;
            let model = load_model(&checkpoint)?;
            let tiles = split_tiles(&data, split.as_deref().unwrap_or(&cfg.eval.split))?;
            let images: Vec<_> = tiles.into_iter().map(|t| t.image).collect();
            let r = measure_fps(&model, &images, cfg.bench.warmup, cfg.bench.reps, cfg.bench.score_threshold)?;
            fs::write(dir.join("fps.txt"), r.to_text())?;
            print!("{}", r.to_text());
        }
        Command::Sweep { data, n_values, iterations } => {
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            let mut ns = n_values.unwrap_or(cfg.sweep.n_values.clone());
            if let (Some(n), true) = (c.n_instances, ns.is_empty()) {
                ns.push(n);
            }
            let dir = out_dir(&c)?;
            let train = split_tiles(&data, "train")?;
            let eval = split_tiles(&data, &cfg.eval.split)?;
            let sc = SweepConfig {
                n_values: ns,
                warmup: cfg.bench.warmup,
                reps: cfg.bench.reps,
                score_threshold: cfg.bench.score_threshold,
                iou_threshold: cfg.eval.iou_threshold,
            };
            let every = (cfg.train.iterations / 5).max(1);
            let outcome = sweep(&cfg.model, &train, &eval, &cfg.train, &sc, Some(&dir), |n, r| {
                if r.iteration % every == 0 {
                    println!("N={n} iter {:6}  loss {:.5}", r.iteration, r.loss.total);
                }
            })?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for r in &outcome.records {
                println!("N={:4}  ap50={:.4}  fps={:.2}", r.n_instances, r.ap50, r.fps);
            }
        }
        Command::Predict { checkpoint, input, tile, overlap } => {
            let dir = out_dir(&c)?;
            let model = load_model(&checkpoint)?;
            let raster = read_png(&input)?;
            let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "raster".into());
            let p = predict_raster(
                &model,
                &raster,
                &id,
                tile.unwrap_or(cfg.predict.tile),
                overlap.unwrap_or(cfg.predict.overlap),
                cfg.predict.score_threshold,
            )?;
            let rgb = overlay_rgb(&raster, &p.instances, cfg.predict.overlay_alpha)?;
            let img = image::RgbImage::from_raw(p.extent.width as u32, p.extent.height as u32, rgb)
                .context("overlay buffer has the wrong size")?;
            img.save(dir.join("overlay.png"))?;
            fs::write(dir.join("predictions.jsonl"), write_predictions(&p.instances))?;
            println!("{} instances; overlay at {}", p.instances.len(), dir.join("overlay.png").display());
        }
    }
    Ok(())
}
