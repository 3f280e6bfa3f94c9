use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg_core::diffcore::{Graph, Tensor};
use sparseseg_core::matching::{compute_loss, match_slots, CostWeights, GtSet, LossWeights, SlotLogits};

const TRIALS: usize = 100;
const LOSS_TOL: f64 = 1e-6;

struct Slots {
    class: Tensor<f64>,
    obj: Tensor<f64>,
    masks: Tensor<f64>,
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(t.numel());
    for &r in order {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Pairs `(prediction, gt)` and the total loss.
fn match_and_loss(s: &Slots, gts: &GtSet) -> (Vec<(usize, usize)>, f64) {
    let mut g = Graph::new();
    let slots = SlotLogits {
        class_logits: g.input(s.class.clone()),
        objectness_logits: g.input(s.obj.clone()),
        mask_logits: g.input(s.masks.clone()),
    };
    let a = match_slots(&g, &slots, gts, CostWeights::default()).unwrap();
    let loss = compute_loss(&mut g, &slots, gts, &a, LossWeights::default()).unwrap();
    (a.pairs, loss.breakdown(&g).total)
}

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let n = rng.gen_range(2..=24);
        let k = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let g_count = rng.gen_range(0..=n.min(6));
        let gts = GtSet {
            grid: (h, w),
            masks: (0..g_count).map(|_| (0..h * w).map(|_| rng.gen_bool(0.4)).collect()).collect(),
            classes: (0..g_count).map(|_| rng.gen_range(0..k)).collect(),
        };
        let mut rand_t = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale));
        let s = Slots { class: rand_t(&[n, k], 3.0), obj: rand_t(&[n, 1], 3.0), masks: rand_t(&[n, h, w], 4.0) };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p = Slots {
            class: permute_rows(&s.class, &order),
            obj: permute_rows(&s.obj, &order),
            masks: permute_rows(&s.masks, &order),
        };
        let (pairs, loss) = match_and_loss(&s, &gts);
        let (ppairs, ploss) = match_and_loss(&p, &gts);
        // permuted slot i is original slot order[i]
        let mapped: Vec<(usize, usize)> = ppairs.iter().map(|&(i, g)| (order[i], g)).collect();
        assert_eq!(mapped, pairs, "trial {trial}: matched pairs differ");
        let diff = (loss - ploss).abs();
        worst = worst.max(diff);
        assert!(diff <= LOSS_TOL, "trial {trial}: loss {loss} vs {ploss}");
    }
    format!("{TRIALS} permutations: identical pairs, max loss difference {worst:.2e} (tolerance {LOSS_TOL:.0e})")
}
