//! Training loop: seeded batches, per-tile matching and loss, SGD with
//! momentum, periodic checkpoints and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::{CostWeights, GtSet};
use super::loss::{compute_loss, match_slots, targets_for_tile, LossBreakdown, LossWeights, SlotLogits};
use crate::datagen::{pad_to_grid, AnnotatedTile};
use crate::diffcore::{checkpoint, Graph, ParamSet, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, Model};

pub const LOSS_CSV_VERSION: &str = "# sparseseg loss v1";
pub const LOSS_CSV_HEADER: &str = "iteration,total,cls,dice,bce,obj";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "train_state.json";
pub const LOSS_FILE: &str = "loss.csv";
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Rescale the batch gradient to at most this global norm (0: off).
    pub grad_clip_norm: f64,
    pub loss: LossWeights,
    pub cost: CostWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 500,
            grad_clip_norm: 5.0,
            loss: LossWeights::default(),
            cost: CostWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("lr must be finite and nonnegative, momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.iteration, l.total, l.cls, l.dice, l.bce, l.obj)
    }
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let here = offset;
        offset += line.len() + 1;
        if line.starts_with('#') || line == LOSS_CSV_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { offset: here, message: format!("bad loss row {line:?}") })
        };
        out.push(LossRecord {
            iteration: num(0)? as usize,
            loss: LossBreakdown { total: num(1)?, cls: num(2)?, dice: num(3)?, bce: num(4)?, obj: num(5)? },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    /// Iterations completed.
    iteration: usize,
    config: TrainConfig,
}

/// Tile indices for the `position`-th sample of the stream: one seeded
/// permutation per epoch.
struct BatchOrder {
    seed: u64,
    n: usize,
    cache: BTreeMap<usize, Vec<usize>>,
}

impl BatchOrder {
    fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        let (seed, n) = (self.seed, self.n);
        let perm = self.cache.entry(epoch).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        });
        perm[position % n]
    }
}

struct Prepared {
    image: Tensor<f32>,
    gts: GtSet,
}

/// Tiles with more instances than slots train on their `n_instances`
/// largest instances.
fn prepare(tiles: &[AnnotatedTile], num_classes: usize, n_instances: usize) -> Result<Vec<Prepared>> {
    tiles
        .iter()
        .map(|t| {
            let (padded, _) = pad_to_grid(&t.image, crate::backbone::GRID);
            let s = padded.shape().to_vec();
            let mut gts = targets_for_tile(t, num_classes)?;
            gts.keep_largest(n_instances);
            Ok(Prepared { image: padded.reshape(&[1, s[0], s[1], s[2]])?, gts })
        })
        .collect()
}

/// Loss and parameter gradients for one tile.
fn tile_step(
    model: &Model<f32>,
    tile: &Prepared,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f32>>)> {
    let mut g = Graph::new();
    let x = g.input(tile.image.clone());
    let out = model::forward(&mut g, x, &model.config, &model.params)?;
    let slots = SlotLogits::from(&out);
    let assignment = match_slots(&g, &slots, &tile.gts, cfg.cost)?;
    let loss = compute_loss(&mut g, &slots, &tile.gts, &assignment, cfg.loss)?;
    let grads = g.param_grads(loss.total)?;
    Ok((loss.breakdown(&g), grads))
}

fn write_checkpoint(dir: &Path, model: &Model<f32>, sgd: &Sgd<f32>, state: &TrainState) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    let velocity: Vec<(String, Tensor<f32>)> = sgd
        .velocities()
        .map(|(name, v)| {
            let shape = model.params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![v.len()]);
            Ok((format!("{MOMENTUM_PREFIX}{name}"), Tensor::new(shape, v.to_vec())?))
        })
        .collect::<Result<_>>()?;
    {
        let f = BufWriter::new(fs::File::create(&tmp)?);
        let all = model.params.iter().chain(velocity.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::write_tensors(f, all)?;
    }
    fs::write(model::config_path(&dir.join(CHECKPOINT_FILE)), serde_json::to_string_pretty(&model.config)?)?;
    fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(state)?)?;
    Ok(())
}

/// Restores model, optimizer state and completed iteration count from `dir`.
fn read_checkpoint(dir: &Path, cfg: &TrainConfig) -> Result<(Model<f32>, Sgd<f32>, usize)> {
    let path = dir.join(CHECKPOINT_FILE);
    let model = Model::<f32>::load(&path)?;
    let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
    let mut sgd = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let f = std::io::BufReader::new(fs::File::open(&path)?);
    for (name, t) in checkpoint::read_tensors(f)? {
        if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
            sgd.set_velocity(p, t.into_data());
        }
    }
    Ok((model, sgd, state.iteration))
}

/// Where and how [`fit`] persists its progress.
#[derive(Clone, Debug, Default)]
pub struct RunDir {
    pub path: Option<PathBuf>,
    /// Continue from the checkpoint in `path` when one exists.
    pub resume: bool,
}

impl RunDir {
    pub fn none() -> Self {
        RunDir::default()
    }

    pub fn at(path: impl Into<PathBuf>, resume: bool) -> Self {
        RunDir { path: Some(path.into()), resume }
    }
}

/// Trains `model` on `tiles`. Returns the loss curve of the iterations run
/// by this call. On a non-finite loss the run stops with
/// [`Error::Diverged`]; the last checkpoint written stays on disk.
pub fn fit(
    tiles: &[AnnotatedTile],
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    run: &RunDir,
    mut observer: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if tiles.is_empty() {
        return Err(Error::Empty("training set has no tiles".into()));
    }
    let prepared = prepare(tiles, model.config.decoder.num_classes, model.config.decoder.n_instances)?;
    let mut sgd = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let mut start = 0;
    let mut csv: Option<BufWriter<fs::File>> = None;
    if let Some(dir) = &run.path {
        fs::create_dir_all(dir)?;
        let loss_path = dir.join(LOSS_FILE);
        if run.resume && dir.join(CHECKPOINT_FILE).exists() {
            let (m, s, done) = read_checkpoint(dir, cfg)?;
            *model = m;
            sgd = s;
            start = done;
            // keep rows up to the checkpoint, drop any written after it
            let kept: Vec<LossRecord> = parse_loss_csv(&fs::read_to_string(&loss_path).unwrap_or_default())?
                .into_iter()
                .filter(|r| r.iteration < done)
                .collect();
            let mut w = BufWriter::new(fs::File::create(&loss_path)?);
            writeln!(w, "{LOSS_CSV_VERSION}\n{LOSS_CSV_HEADER}")?;
            for r in &kept {
                writeln!(w, "{}", r.csv_row())?;
            }
            csv = Some(w);
        } else {
            let mut w = BufWriter::new(fs::File::create(&loss_path)?);
            writeln!(w, "{LOSS_CSV_VERSION}\n{LOSS_CSV_HEADER}")?;
            csv = Some(w);
        }
    }

    let mut order = BatchOrder { seed: cfg.seed, n: prepared.len(), cache: BTreeMap::new() };
    let mut curve = Vec::with_capacity(cfg.iterations.saturating_sub(start));
    let batch_scale = 1.0 / cfg.batch_size as f32;
    for it in start..cfg.iterations {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|k| order.index(it * cfg.batch_size + k)).collect();
        let results: Vec<_> =
            batch.par_iter().map(|&i| tile_step(model, &prepared[i], cfg)).collect::<Result<_>>()?;

        let mut mean = LossBreakdown::default();
        model.params.ensure_grads();
        model.params.zero_grads();
        for (loss, grads) in &results {
            mean.total += loss.total / cfg.batch_size as f64;
            mean.cls += loss.cls / cfg.batch_size as f64;
            mean.dice += loss.dice / cfg.batch_size as f64;
            mean.bce += loss.bce / cfg.batch_size as f64;
            mean.obj += loss.obj / cfg.batch_size as f64;
            for (name, g) in grads {
                let t = model.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
                for (acc, &v) in t.grad_mut().expect("ensured").iter_mut().zip(g) {
                    *acc += v * batch_scale;
                }
            }
        }
        if !mean.total.is_finite() {
            return Err(Error::Diverged { iteration: it, loss: mean.total });
        }
        clip_gradients(&mut model.params, cfg.grad_clip_norm);
        sgd.step(&mut model.params)?;
        if !model.params.all_finite() {
            return Err(Error::Diverged { iteration: it, loss: mean.total });
        }

        let record = LossRecord { iteration: it, loss: mean };
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", record.csv_row())?;
        }
        observer(&record);
        curve.push(record);
        let done = it + 1;
        if let Some(dir) = &run.path {
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.iterations {
                if let Some(w) = csv.as_mut() {
                    w.flush()?;
                }
                write_checkpoint(dir, model, &sgd, &TrainState { iteration: done, config: cfg.clone() })?;
            }
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }
    model.params.clear_grads();
    Ok(curve)
}

fn clip_gradients(params: &mut ParamSet<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = params.iter().filter_map(|(_, t)| t.grad()).flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}
