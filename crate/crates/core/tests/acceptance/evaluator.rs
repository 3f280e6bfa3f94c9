use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg_core::datagen::{AnnotatedTile, Instance, Provenance};
use sparseseg_core::diffcore::Tensor;
use sparseseg_core::evaluator::{evaluate, ApReport, EvalConfig, PredictedInstance};
use sparseseg_core::mask::BinaryMask;

const SCENARIOS: usize = 50;
const TILES: usize = 5;
const SIDE: usize = 40;

/// Area bounds `[lo, hi)` of the size strata, written out independently.
const STRATA: [(usize, usize); 3] = [(0, 200), (200, 451), (451, usize::MAX)];
const ALL: (usize, usize) = (0, usize::MAX);

fn rect(y0: usize, x0: usize, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(SIDE, SIDE, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
}

fn tile(id: usize, instances: Vec<(BinaryMask, usize)>) -> AnnotatedTile {
    AnnotatedTile {
        tile_id: format!("t{id}"),
        image: Tensor::zeros(&[3, SIDE, SIDE]),
        instances: instances.into_iter().map(|(mask, class_id)| Instance { mask, class_id, polygon: Vec::new() }).collect(),
        provenance: Provenance { seed: 0, config_hash: String::new() },
    }
}

fn scenario(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<AnnotatedTile>, Vec<PredictedInstance>) {
    let mut tiles = Vec::new();
    let mut preds = Vec::new();
    let random_rect = |rng: &mut ChaCha8Rng| {
        // sides from 3 to 30 give areas on both sides of every stratum bound
        let h = rng.gen_range(3..=30);
        let w = rng.gen_range(3..=30);
        (rng.gen_range(0..=SIDE - h), rng.gen_range(0..=SIDE - w), h, w)
    };
    for t in 0..TILES {
        let n = rng.gen_range(0..=6);
        let mut gts = Vec::new();
        for _ in 0..n {
            let (y, x, h, w) = random_rect(rng);
            let class = rng.gen_range(0..classes);
            gts.push((rect(y, x, h, w), class, (y, x, h, w)));
            let copies = [0, 1, 1, 1, 2][rng.gen_range(0..5)];
            for _ in 0..copies {
                let dy = rng.gen_range(0..=3usize);
                let dx = rng.gen_range(0..=3usize);
                let (py, px) = ((y + dy).min(SIDE - h), (x + dx).min(SIDE - w));
                let dh = rng.gen_range(0..=2usize).min(h - 1);
                let pclass = if rng.gen_bool(0.9) { class } else { rng.gen_range(0..classes) };
                preds.push(PredictedInstance {
                    tile_id: format!("t{t}"),
                    // coarse scores produce ties across and within tiles
                    score: rng.gen_range(1..=10) as f64 / 10.0,
                    class_id: pclass,
                    mask: rect(py, px, h - dh, w),
                });
            }
        }
        for _ in 0..rng.gen_range(0..=3) {
            let (y, x, h, w) = random_rect(rng);
            preds.push(PredictedInstance {
                tile_id: format!("t{t}"),
                score: rng.gen_range(1..=10) as f64 / 10.0,
                class_id: rng.gen_range(0..classes),
                mask: rect(y, x, h, w),
            });
        }
        tiles.push(tile(t, gts.into_iter().map(|(m, c, _)| (m, c)).collect()));
    }
    (tiles, preds)
}

fn naive_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn inside(area: usize, (lo, hi): (usize, usize)) -> bool {
    area >= lo && area < hi
}

/// Reference AP for one class, one area range and one IoU threshold.
/// Detections are ranked over the whole set at once; ground truths and
/// detections outside the range are ignored the COCO way.
fn naive_class_ap(
    tiles: &[AnnotatedTile],
    preds: &[PredictedInstance],
    class: usize,
    range: (usize, usize),
    thr: f64,
    classes: usize,
) -> Option<f64> {
    let cls = |c: usize| if classes == 1 { 0 } else { c };
    let tile_of = |p: &PredictedInstance| tiles.iter().position(|t| t.tile_id == p.tile_id).unwrap();
    let mut total = 0;
    for t in tiles {
        total += t.instances.iter().filter(|i| cls(i.class_id) == class && inside(i.mask.area(), range)).count();
    }
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).filter(|&k| cls(preds[k].class_id) == class).collect();
    // bubble sort keeps the rule explicit: higher score first, then tile, then input order
    for i in 0..order.len() {
        for j in 0..order.len() - 1 - i {
            let (a, b) = (&preds[order[j]], &preds[order[j + 1]]);
            let key = |p: &PredictedInstance, k: usize| (-p.score, tile_of(p), k);
            if key(a, order[j]) > key(b, order[j + 1]) {
                order.swap(j, j + 1);
            }
        }
    }
    let mut claimed: Vec<Vec<bool>> = tiles.iter().map(|t| vec![false; t.instances.len()]).collect();
    let mut outcomes = Vec::new();
    for &k in &order {
        let p = &preds[k];
        let ti = tile_of(p);
        let mut best_in: Option<(usize, f64)> = None;
        let mut best_out: Option<(usize, f64)> = None;
        for (j, g) in tiles[ti].instances.iter().enumerate() {
            if claimed[ti][j] || cls(g.class_id) != class {
                continue;
            }
            let iou = naive_iou(&p.mask, &g.mask);
            if iou < thr {
                continue;
            }
            let slot = if inside(g.mask.area(), range) { &mut best_in } else { &mut best_out };
            if slot.is_none_or(|(_, b)| iou > b) {
                *slot = Some((j, iou));
            }
        }
        if let Some((j, _)) = best_in {
            claimed[ti][j] = true;
            outcomes.push(true);
        } else if let Some((j, _)) = best_out {
            claimed[ti][j] = true;
        } else if inside(p.mask.area(), range) {
            outcomes.push(false);
        }
    }
    let precision: Vec<f64> = (0..outcomes.len())
        .map(|i| outcomes[..=i].iter().filter(|&&o| o).count() as f64 / (i + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for i in 0..outcomes.len() {
        if outcomes[i] {
            sum += precision[i..].iter().cloned().fold(f64::MIN, f64::max);
        }
    }
    Some(sum / total as f64)
}

fn naive_ap(tiles: &[AnnotatedTile], preds: &[PredictedInstance], range: (usize, usize), thr: f64, classes: usize) -> Option<f64> {
    let per: Vec<f64> = (0..classes).filter_map(|c| naive_class_ap(tiles, preds, c, range, thr, classes)).collect();
    if per.is_empty() {
        None
    } else {
        Some(per.iter().sum::<f64>() / per.len() as f64)
    }
}

fn naive_averaged(tiles: &[AnnotatedTile], preds: &[PredictedInstance], range: (usize, usize), classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    for k in 0..10 {
        sum += naive_ap(tiles, preds, range, (50 + 5 * k) as f64 / 100.0, classes)?;
    }
    Some(sum / 10.0)
}

fn check(tiles: &[AnnotatedTile], preds: &[PredictedInstance], classes: usize, r: &ApReport, label: &str) {
    let cfg_thr = 0.5;
    assert_eq!(r.ap50, naive_ap(tiles, preds, ALL, cfg_thr, classes).unwrap_or(0.0), "{label}: ap50");
    assert_eq!(r.ap, naive_averaged(tiles, preds, ALL, classes).unwrap_or(0.0), "{label}: ap");
    let single = [r.ap50_small, r.ap50_medium, r.ap50_large];
    let avg = [r.ap_small, r.ap_medium, r.ap_large];
    for (k, range) in STRATA.iter().enumerate() {
        assert_eq!(single[k], naive_ap(tiles, preds, *range, cfg_thr, classes), "{label}: stratum {k} ap50");
        assert_eq!(avg[k], naive_averaged(tiles, preds, *range, classes), "{label}: stratum {k} ap");
    }
}

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nontrivial = 0;
    for s in 0..SCENARIOS {
        let classes = if s % 5 == 4 { 2 } else { 1 };
        let (tiles, preds) = scenario(&mut rng, classes);
        let cfg = EvalConfig { iou_threshold: 0.5, num_classes: classes };
        let r = evaluate(&preds, &tiles, &cfg).unwrap();
        check(&tiles, &preds, classes, &r, &format!("scenario {s}"));
        if r.ap50 > 0.0 && r.ap50 < 1.0 {
            nontrivial += 1;
        }

        // perfect and empty predictions on the same ground truth
        let perfect: Vec<PredictedInstance> = tiles
            .iter()
            .flat_map(|t| {
                t.instances.iter().map(|i| PredictedInstance {
                    tile_id: t.tile_id.clone(),
                    score: 1.0,
                    class_id: i.class_id,
                    mask: i.mask.clone(),
                })
            })
            .collect();
        let has_gt = tiles.iter().any(|t| !t.instances.is_empty());
        let p = evaluate(&perfect, &tiles, &cfg).unwrap();
        let e = evaluate(&[], &tiles, &cfg).unwrap();
        let want = |v: f64| if has_gt { v } else { 0.0 };
        assert_eq!((p.ap50, p.ap), (want(1.0), want(1.0)), "scenario {s}: perfect");
        assert_eq!((e.ap50, e.ap), (0.0, 0.0), "scenario {s}: empty");
        for (ps, es) in [
            (p.ap50_small, e.ap50_small),
            (p.ap50_medium, e.ap50_medium),
            (p.ap50_large, e.ap50_large),
            (p.ap_small, e.ap_small),
            (p.ap_medium, e.ap_medium),
            (p.ap_large, e.ap_large),
        ] {
            assert_eq!(ps.is_some(), es.is_some());
            if let (Some(a), Some(b)) = (ps, es) {
                assert_eq!((a, b), (1.0, 0.0), "scenario {s}: stratum perfect/empty");
            }
        }
    }
    format!("{SCENARIOS} scenarios of {TILES} tiles match the reference exactly ({nontrivial} with 0 < AP50 < 1); perfect = 1.0, empty = 0.0")
}
