//! Accuracy/speed trade-off over the number of instance slots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::AnnotatedTile;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::matching::{fit, LossRecord, RunDir, TrainConfig};
use crate::model::{Model, ModelConfig};

use super::{measure_fps, predict_tiles};

pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const TRADEOFF_SVG: &str = "tradeoff.svg";
pub const TRADEOFF_CSV_VERSION: &str = "# sparseseg tradeoff v1";
pub const TRADEOFF_CSV_HEADER: &str = "n_instances,ap50,fps,latency_p50_ms,images_processed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { n_values: vec![100, 300, 500], warmup: 3, reps: 20, score_threshold: 0.05, iou_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub n_instances: usize,
    pub ap50: f64,
    pub fps: f64,
    pub latency_p50_ms: f64,
    pub images_processed: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    /// Sorted by `n_instances`.
    pub records: Vec<TradeoffRecord>,
    pub warnings: Vec<String>,
}

/// For each N (ascending, duplicates dropped): train a fresh model from
/// `train.seed` on `train_tiles`, score AP50 on `eval_tiles`, then time
/// inference on `eval_tiles`. With `out_dir` set, each leg keeps its run
/// directory under `n<N>/` and the curve files are rewritten after every
/// leg, so a failure leaves the finished legs on disk.
pub fn sweep(
    base: &ModelConfig,
    train_tiles: &[AnnotatedTile],
    eval_tiles: &[AnnotatedTile],
    train: &TrainConfig,
    cfg: &SweepConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &LossRecord),
) -> Result<SweepOutcome> {
    let mut ns = cfg.n_values.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() {
        return Err(Error::config("sweep needs at least one N"));
    }
    if eval_tiles.is_empty() {
        return Err(Error::Empty("sweep evaluation set is empty".into()));
    }
    let most = train_tiles.iter().chain(eval_tiles).map(|t| t.instances.len()).max().unwrap_or(0);
    let mut outcome = SweepOutcome::default();
    for &n in &ns {
        if n < most {
            outcome.warnings.push(format!("N={n} is below the largest tile instance count ({most}); recall is capped"));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let images: Vec<_> = eval_tiles.iter().map(|t| t.image.clone()).collect();
    for &n in &ns {
        let mut mc = base.clone();
        mc.decoder.n_instances = n;
        let mut model = Model::<f32>::new(mc, train.seed)?;
        let run = match out_dir {
            Some(d) => RunDir::at(d.join(format!("n{n}")), false),
            None => RunDir::none(),
        };
        fit(train_tiles, &mut model, train, &run, |r| progress(n, r))?;
        let preds = predict_tiles(&model, eval_tiles, cfg.score_threshold)?;
        let eval_cfg = EvalConfig { iou_threshold: cfg.iou_threshold, num_classes: model.config.decoder.num_classes };
        let report = evaluate(&preds, eval_tiles, &eval_cfg)?;
        let fps = measure_fps(&model, &images, cfg.warmup, cfg.reps, cfg.score_threshold)?;
        outcome.records.push(TradeoffRecord {
            n_instances: n,
            ap50: report.ap50,
            fps: fps.fps,
            latency_p50_ms: fps.latency_p50_ms,
            images_processed: fps.images_processed,
        });
        if let Some(dir) = out_dir {
            write_curve(dir, &outcome.records)?;
        }
    }
    Ok(outcome)
}

pub fn write_curve(dir: &Path, records: &[TradeoffRecord]) -> Result<()> {
    fs::write(dir.join(TRADEOFF_CSV), tradeoff_csv(records))?;
    fs::write(dir.join(TRADEOFF_SVG), tradeoff_svg(records))?;
    Ok(())
}

pub fn tradeoff_csv(records: &[TradeoffRecord]) -> String {
    let mut s = format!("{TRADEOFF_CSV_VERSION}\n{TRADEOFF_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{}", r.n_instances, r.ap50, r.fps, r.latency_p50_ms, r.images_processed);
    }
    s
}

pub fn parse_tradeoff_csv(text: &str) -> Result<Vec<TradeoffRecord>> {
    let mut lines = text.lines();
    let mut offset = 0;
    for expected in [TRADEOFF_CSV_VERSION, TRADEOFF_CSV_HEADER] {
        let line = lines.next().unwrap_or("");
        if line != expected {
            return Err(Error::Parse { offset, message: format!("expected `{expected}`") });
        }
        offset += line.len() + 1;
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let bad = |m: &str| Error::Parse { offset, message: format!("{m}: `{line}`") };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(TradeoffRecord {
            n_instances: f[0].parse().map_err(|_| bad("bad n_instances"))?,
            ap50: f[1].parse().map_err(|_| bad("bad ap50"))?,
            fps: f[2].parse().map_err(|_| bad("bad fps"))?,
            latency_p50_ms: f[3].parse().map_err(|_| bad("bad latency"))?,
            images_processed: f[4].parse().map_err(|_| bad("bad image count"))?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// FPS (solid, left axis) and AP50 (dashed, right axis) against N. Every
/// record is a `<circle class="record">` carrying its values as data
/// attributes.
pub fn tradeoff_svg(records: &[TradeoffRecord]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let n_max = records.iter().map(|r| r.n_instances).max().unwrap_or(1).max(1) as f64;
    let n_min = records.iter().map(|r| r.n_instances).min().unwrap_or(0) as f64;
    let fps_max = records.iter().map(|r| r.fps).fold(0.0, f64::max).max(1e-9) * 1.1;
    let span = (n_max - n_min).max(1.0);
    let px = |n: usize| M + (n as f64 - n_min) / span * (W - 2.0 * M);
    let py_fps = |f: f64| H - M - f / fps_max * (H - 2.0 * M);
    let py_ap = |a: f64| H - M - a.clamp(0.0, 1.0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r} V{M}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">instance slots N</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">FPS</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" transform="rotate(90 {x} {y})" text-anchor="middle">AP50</text>"#,
        x = W - 15.0,
        y = H / 2.0
    );
    let line = |f: &dyn Fn(&TradeoffRecord) -> (f64, f64)| {
        records.iter().map(|r| {
            let (x, y) = f(r);
            format!("{x:.2},{y:.2}")
        }).collect::<Vec<_>>().join(" ")
    };
    let _ = writeln!(
        s,
        r#"<polyline class="fps" points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        line(&|r| (px(r.n_instances), py_fps(r.fps)))
    );
    let _ = writeln!(
        s,
        r#"<polyline class="ap50" points="{}" fill="none" stroke="darkorange" stroke-width="2" stroke-dasharray="6 4"/>"#,
        line(&|r| (px(r.n_instances), py_ap(r.ap50)))
    );
    for r in records {
        let x = px(r.n_instances);
        let _ = writeln!(
            s,
            r#"<circle class="record" cx="{x:.2}" cy="{:.2}" r="4" fill="steelblue" data-n="{}" data-fps="{:.6}" data-ap50="{:.6}"/>"#,
            py_fps(r.fps),
            r.n_instances,
            r.fps,
            r.ap50
        );
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, H - M + 18.0, r.n_instances);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs() -> Vec<TradeoffRecord> {
        [(100, 0.5, 40.0), (300, 0.6, 20.0), (500, 0.62, 12.5)]
            .iter()
            .map(|&(n, ap50, fps)| TradeoffRecord { n_instances: n, ap50, fps, latency_p50_ms: 1e3 / fps, images_processed: 200 })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let r = recs();
        assert_eq!(parse_tradeoff_csv(&tradeoff_csv(&r)).unwrap(), r);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let text = format!("{TRADEOFF_CSV_VERSION}\n{TRADEOFF_CSV_HEADER}\n1,2,3\n");
        assert!(matches!(parse_tradeoff_csv(&text), Err(Error::Parse { .. })));
        assert!(parse_tradeoff_csv("n,ap50\n").is_err());
    }

    #[test]
    fn svg_has_one_circle_per_record() {
        let svg = tradeoff_svg(&recs());
        assert_eq!(svg.matches(r#"class="record""#).count(), 3);
        assert!(svg.contains(r#"data-n="300""#));
    }
}
