//! Mask average precision with area strata.
//!
//! Detections are matched greedily in score order, per tile and class. For
//! a size stratum, ground truths outside it are ignored: a detection whose
//! best match is an ignored ground truth is dropped, and so is an unmatched
//! detection whose own area falls outside the stratum. AP is the area under
//! the precision envelope, averaged over classes that have ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{rle_decode, rle_encode, AnnotatedTile};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const SMALL_MAX_AREA: usize = 200;
pub const MEDIUM_MAX_AREA: usize = 450;
pub const REPORT_VERSION: &str = "# sparseseg ap-report v1";
pub const PR_CSV_VERSION: &str = "# sparseseg pr-curve v1";
pub const PR_CSV_HEADER: &str = "stratum,class,rank,score,recall,precision";

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    All,
    Small,
    Medium,
    Large,
}

impl Stratum {
    pub const SIZED: [Stratum; 3] = [Stratum::Small, Stratum::Medium, Stratum::Large];

    pub fn of_area(area: usize) -> Stratum {
        if area < SMALL_MAX_AREA {
            Stratum::Small
        } else if area <= MEDIUM_MAX_AREA {
            Stratum::Medium
        } else {
            Stratum::Large
        }
    }

    pub fn contains(self, area: usize) -> bool {
        self == Stratum::All || Stratum::of_area(area) == self
    }

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Small => "small",
            Stratum::Medium => "medium",
            Stratum::Large => "large",
        }
    }
}

/// `|a & b| / |a | b|`, zero when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_extent(b)?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalMatch {
    /// True positive flag per prediction, in the given order.
    pub flags: Vec<bool>,
    /// Ground truth claimed by each prediction.
    pub claimed: Vec<Option<usize>>,
    pub missed: usize,
}

/// Greedy matching from a precomputed `ious[pred][gt]` table. Predictions
/// must already be in descending score order; each claims the unclaimed
/// ground truth of highest IoU at or above `threshold` (lowest index on ties).
pub fn match_ious(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> EvalMatch {
    let mut taken = vec![false; n_gt];
    let mut claimed = Vec::with_capacity(ious.len());
    for row in ious {
        let mut best: Option<(usize, f64)> = None;
        for (j, &iou) in row.iter().enumerate() {
            if !taken[j] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        claimed.push(best.map(|(j, _)| j));
    }
    let flags = claimed.iter().map(Option::is_some).collect();
    EvalMatch { flags, claimed, missed: taken.iter().filter(|t| !**t).count() }
}

pub fn match_for_eval(predictions: &[&BinaryMask], gts: &[&BinaryMask], iou_threshold: f64) -> Result<EvalMatch> {
    let ious = predictions
        .iter()
        .map(|p| gts.iter().map(|g| mask_iou(p, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(match_ious(&ious, gts.len(), iou_threshold))
}

/// Running precision after each detection, then the envelope (running max
/// from the right).
fn enveloped_precision(flags: &[bool]) -> Vec<f64> {
    let mut tp = 0usize;
    let mut prec: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    prec
}

/// Area under the enveloped precision-recall curve: each true positive adds
/// `1 / total_gt` of recall at the envelope precision. Zero when `total_gt`
/// is zero.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let env = enveloped_precision(flags);
    let mut ap = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            ap += env[i];
        }
    }
    ap / total_gt as f64
}

/// One predicted instance of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedInstance {
    pub tile_id: String,
    pub score: f64,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    tile_id: String,
    score: f64,
    class_id: usize,
    height: usize,
    width: usize,
    rle: String,
}

impl PredictedInstance {
    pub fn to_json_line(&self) -> String {
        let r = PredictionRecord {
            tile_id: self.tile_id.clone(),
            score: self.score,
            class_id: self.class_id,
            height: self.mask.height(),
            width: self.mask.width(),
            rle: rle_encode(&self.mask),
        };
        serde_json::to_string(&r).expect("record serializes")
    }
}

pub fn write_predictions(preds: &[PredictedInstance]) -> String {
    preds.iter().map(|p| p.to_json_line() + "\n").collect()
}

pub fn read_predictions(text: &str) -> Result<Vec<PredictedInstance>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: PredictionRecord = serde_json::from_str(l)?;
            Ok(PredictedInstance {
                mask: rle_decode(&r.rle, r.height, r.width)?,
                tile_id: r.tile_id,
                score: r.score,
                class_id: r.class_id,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub num_classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5, num_classes: 1 }
    }
}

/// One point per detection of a class, at the report threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub stratum: Stratum,
    pub class_id: usize,
    pub rank: usize,
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_threshold: f64,
    /// AP over all instances at `iou_threshold`.
    pub ap50: f64,
    /// Strata APs averaged over IoU 0.50:0.05:0.95; `None` when the stratum
    /// has no ground truth.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Strata APs at `iou_threshold` only.
    pub ap50_small: Option<f64>,
    pub ap50_medium: Option<f64>,
    pub ap50_large: Option<f64>,
    /// AP over all instances averaged over 0.50:0.95.
    pub ap: f64,
    pub count_small: usize,
    pub count_medium: usize,
    pub count_large: usize,
    pub total_gt: usize,
    pub total_predictions: usize,
    pub pr_curve: Vec<PrPoint>,
}

impl ApReport {
    pub fn stratum_ap(&self, s: Stratum) -> Option<f64> {
        match s {
            Stratum::All => Some(self.ap),
            Stratum::Small => self.ap_small,
            Stratum::Medium => self.ap_medium,
            Stratum::Large => self.ap_large,
        }
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_VERSION}");
        let _ = writeln!(s, "iou_threshold={}", self.iou_threshold);
        let _ = writeln!(s, "ap50={:.6}", self.ap50);
        let _ = writeln!(s, "ap={:.6}", self.ap);
        let _ = writeln!(s, "ap_small={}", opt(self.ap_small));
        let _ = writeln!(s, "ap_medium={}", opt(self.ap_medium));
        let _ = writeln!(s, "ap_large={}", opt(self.ap_large));
        let _ = writeln!(s, "ap50_small={}", opt(self.ap50_small));
        let _ = writeln!(s, "ap50_medium={}", opt(self.ap50_medium));
        let _ = writeln!(s, "ap50_large={}", opt(self.ap50_large));
        let _ = writeln!(s, "count_small={}", self.count_small);
        let _ = writeln!(s, "count_medium={}", self.count_medium);
        let _ = writeln!(s, "count_large={}", self.count_large);
        let _ = writeln!(s, "total_gt={}", self.total_gt);
        let _ = writeln!(s, "total_predictions={}", self.total_predictions);
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = format!("{PR_CSV_VERSION}\n{PR_CSV_HEADER}\n");
        for p in &self.pr_curve {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.stratum.name(), p.class_id, p.rank, p.score, p.recall, p.precision);
        }
        s
    }
}

/// Per-tile data shared across thresholds and strata.
struct TileEval<'a> {
    tile_index: usize,
    /// `(class, area, mask)` of each ground truth.
    gts: Vec<(usize, usize, &'a BinaryMask)>,
    /// Prediction indices sorted by descending score (stable).
    preds: Vec<usize>,
    /// `ious[k][j]` for `preds[k]` against `gts[j]`.
    ious: Vec<Vec<f64>>,
}

/// Detection outcome for one class/stratum/threshold.
struct Scored {
    score: f64,
    tile_index: usize,
    order: usize,
    tp: bool,
}

fn class_of(class_id: usize, num_classes: usize) -> usize {
    if num_classes == 1 {
        0
    } else {
        class_id
    }
}

pub fn evaluate(predictions: &[PredictedInstance], tiles: &[AnnotatedTile], cfg: &EvalConfig) -> Result<ApReport> {
    let index: BTreeMap<&str, usize> = tiles.iter().enumerate().map(|(i, t)| (t.tile_id.as_str(), i)).collect();
    let mut unknown: Vec<String> =
        predictions.iter().filter(|p| !index.contains_key(p.tile_id.as_str())).map(|p| p.tile_id.clone()).collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownTiles(unknown));
    }
    let mut per_tile: Vec<Vec<usize>> = vec![Vec::new(); tiles.len()];
    for (k, p) in predictions.iter().enumerate() {
        per_tile[index[p.tile_id.as_str()]].push(k);
    }
    let mut evals = Vec::with_capacity(tiles.len());
    for (ti, tile) in tiles.iter().enumerate() {
        let gts: Vec<(usize, usize, &BinaryMask)> = tile
            .instances
            .iter()
            .map(|i| (class_of(i.class_id, cfg.num_classes), i.mask.area(), &i.mask))
            .collect();
        let mut preds = per_tile[ti].clone();
        preds.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
        let ious = preds
            .iter()
            .map(|&k| gts.iter().map(|g| mask_iou(&predictions[k].mask, g.2)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        evals.push(TileEval { tile_index: ti, gts, preds, ious });
    }

    let classes: Vec<usize> = (0..cfg.num_classes).collect();
    // AP for one stratum and threshold, averaged over classes with ground truth.
    let ap_for = |stratum: Stratum, threshold: f64, pr: Option<&mut Vec<PrPoint>>| -> Option<f64> {
        let mut per_class = Vec::new();
        let mut pr = pr;
        for &c in &classes {
            let mut scored: Vec<Scored> = Vec::new();
            let mut n_gt = 0;
            for e in &evals {
                let gt_idx: Vec<usize> = (0..e.gts.len()).filter(|&j| e.gts[j].0 == c).collect();
                let ignored: Vec<bool> = gt_idx.iter().map(|&j| !stratum.contains(e.gts[j].1)).collect();
                n_gt += ignored.iter().filter(|i| !**i).count();
                let mut taken = vec![false; gt_idx.len()];
                for (order, &k) in e.preds.iter().enumerate() {
                    let p = &predictions[k];
                    if class_of(p.class_id, cfg.num_classes) != c {
                        continue;
                    }
                    let row = &e.ious[order];
                    // best unclaimed non-ignored gt, then best unclaimed ignored gt
                    let pick = |want_ignored: bool| {
                        let mut best: Option<(usize, f64)> = None;
                        for (local, &j) in gt_idx.iter().enumerate() {
                            if taken[local] || ignored[local] != want_ignored || row[j] < threshold {
                                continue;
                            }
                            if best.is_none_or(|(_, b)| row[j] > b) {
                                best = Some((local, row[j]));
                            }
                        }
                        best.map(|(l, _)| l)
                    };
                    match pick(false) {
                        Some(l) => {
                            taken[l] = true;
                            scored.push(Scored { score: p.score, tile_index: e.tile_index, order, tp: true });
                        }
                        None => match pick(true) {
                            Some(l) => taken[l] = true,
                            None if stratum.contains(p.mask.area()) => {
                                scored.push(Scored { score: p.score, tile_index: e.tile_index, order, tp: false })
                            }
                            None => {}
                        },
                    }
                }
            }
            if n_gt == 0 {
                continue;
            }
            scored.sort_by(|a, b| {
                b.score.total_cmp(&a.score).then(a.tile_index.cmp(&b.tile_index)).then(a.order.cmp(&b.order))
            });
            let flags: Vec<bool> = scored.iter().map(|s| s.tp).collect();
            per_class.push(average_precision(&flags, n_gt));
            if let Some(points) = pr.as_deref_mut() {
                let env = enveloped_precision(&flags);
                let mut tp = 0;
                for (rank, s) in scored.iter().enumerate() {
                    tp += usize::from(s.tp);
                    points.push(PrPoint {
                        stratum,
                        class_id: c,
                        rank,
                        score: s.score,
                        recall: tp as f64 / n_gt as f64,
                        precision: env[rank],
                    });
                }
            }
        }
        if per_class.is_empty() {
            None
        } else {
            Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
        }
    };

    let thresholds = coco_thresholds();
    let averaged = |s: Stratum| -> Option<f64> {
        let v: Option<Vec<f64>> = thresholds.iter().map(|&t| ap_for(s, t, None)).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut pr_curve = Vec::new();
    let ap50 = ap_for(Stratum::All, cfg.iou_threshold, Some(&mut pr_curve)).unwrap_or(0.0);
    let mut single = BTreeMap::new();
    for s in Stratum::SIZED {
        single.insert(s, ap_for(s, cfg.iou_threshold, Some(&mut pr_curve)));
    }
    let count = |s: Stratum| evals.iter().flat_map(|e| &e.gts).filter(|g| Stratum::of_area(g.1) == s).count();
    Ok(ApReport {
        iou_threshold: cfg.iou_threshold,
        ap50,
        ap_small: averaged(Stratum::Small),
        ap_medium: averaged(Stratum::Medium),
        ap_large: averaged(Stratum::Large),
        ap50_small: single[&Stratum::Small],
        ap50_medium: single[&Stratum::Medium],
        ap50_large: single[&Stratum::Large],
        ap: averaged(Stratum::All).unwrap_or(0.0),
        count_small: count(Stratum::Small),
        count_medium: count(Stratum::Medium),
        count_large: count(Stratum::Large),
        total_gt: evals.iter().map(|e| e.gts.len()).sum(),
        total_predictions: predictions.len(),
        pr_curve,
    })
}
