use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg_core::matching::{hungarian, CostMatrix};

const TRIALS_PER_SIZE: usize = 200;
const MAX_SIDE: usize = 7;
/// Real-valued costs: optimal totals may be reached by different pair sets
/// whose sums differ in the last bits.
const REAL_TOL: f64 = 1e-12;

/// Minimum over every injective map of columns into rows, summed in column order.
fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, col: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if col == c.cols() {
            *best = best.min(acc);
            return;
        }
        for r in 0..c.rows() {
            if !used[r] {
                used[r] = true;
                go(c, col + 1, used, acc + c.get(r, col), best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best
}

pub fn run() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for rows in 1..=MAX_SIDE {
        for cols in 1..=rows {
            for trial in 0..TRIALS_PER_SIZE {
                // alternate real costs with small integers (many ties)
                let integer = trial % 2 == 1;
                let c = CostMatrix::from_fn(rows, cols, |_, _| {
                    if integer {
                        rng.gen_range(0..4) as f64
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                });
                let a = hungarian(&c).unwrap();
                assert_eq!(a.pairs.len(), cols);
                let mut seen_rows = vec![false; rows];
                for (k, &(r, g)) in a.pairs.iter().enumerate() {
                    assert_eq!(g, k, "pairs must be sorted by column");
                    assert!(!seen_rows[r], "row {r} used twice");
                    seen_rows[r] = true;
                }
                let total: f64 = a.pairs.iter().map(|&(r, g)| c.get(r, g)).sum();
                let best = brute_force(&c);
                if integer {
                    assert_eq!(total, best, "{rows}x{cols} trial {trial}");
                } else {
                    assert!((total - best).abs() <= REAL_TOL, "{rows}x{cols} trial {trial}: {total} vs {best}");
                }
                assert!((a.total_cost - total).abs() <= REAL_TOL);
                checked += 1;
            }
        }
    }
    format!("{checked} matrices over all {} shapes up to {MAX_SIDE}x{MAX_SIDE}, zero violations", checked / TRIALS_PER_SIZE)
}
