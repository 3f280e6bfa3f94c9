use sparseseg_core::datagen::{generate_scene, pad_to_grid, SceneConfig};
use sparseseg_core::decoder::ScoredMask;
use sparseseg_core::diffcore::{Graph, Tensor};
use sparseseg_core::model::{forward, Model, ModelConfig};

const N_VALUES: [usize; 5] = [1, 7, 64, 100, 300];
const IAM_SUM_TOL: f64 = 1e-5;
/// Slots removed in the no-suppression check.
const REMOVED: [usize; 3] = [0, 17, 63];

fn image() -> Tensor<f32> {
    let cfg = SceneConfig { tile_extent: 70, polygon_count: [6, 12], seed: 11, ..SceneConfig::default() };
    generate_scene(&cfg, "probe").unwrap().image
}

fn same(a: &ScoredMask, b: &ScoredMask) -> bool {
    a.score.to_bits() == b.score.to_bits() && a.class_id == b.class_id && a.mask == b.mask
}

/// Model with slot `k` deleted from the activation-map head.
fn without_slot(m: &Model<f32>, k: usize) -> Model<f32> {
    let mut r = Model { config: m.config.clone(), params: m.params.clone() };
    let n = m.config.decoder.n_instances;
    r.config.decoder.n_instances = n - 1;
    for name in ["decoder.iam.weight", "decoder.iam.bias"] {
        let t = m.params.get(name).unwrap();
        let row = t.numel() / n;
        let mut data = t.data().to_vec();
        data.drain(k * row..(k + 1) * row);
        let mut shape = t.shape().to_vec();
        shape[0] = n - 1;
        r.params.insert(name, Tensor::new(shape, data).unwrap());
    }
    r
}

pub fn run() -> String {
    let img = image();
    let (padded, _) = pad_to_grid(&img, 16);
    let s = padded.shape().to_vec();
    let batch = padded.reshape(&[1, s[0], s[1], s[2]]).unwrap();
    let mut worst_sum: f64 = 0.0;
    for &n in &N_VALUES {
        let model = Model::<f32>::new(ModelConfig::desk(n), 5).unwrap();
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = forward(&mut g, x, &model.config, &model.params).unwrap();
        let hw = out.grid.0 * out.grid.1;
        assert_eq!(g.shape(out.iams), &[n, hw]);
        assert_eq!(g.shape(out.class_logits)[0], n);
        assert_eq!(g.shape(out.objectness), &[n, 1]);
        assert_eq!(g.shape(out.mask_logits), &[n, out.grid.0, out.grid.1]);
        for row in g.value(out.iams).data().chunks(hw) {
            assert!(row.iter().all(|&v| v >= 0.0), "N={n}: negative activation");
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            assert!((sum - 1.0).abs() <= IAM_SUM_TOL, "N={n}: map sums to {sum}");
        }
        // scores are products of probabilities, so a zero threshold keeps every slot
        let all = model.infer(&img, 0.0).unwrap();
        assert_eq!(all.len(), n, "N={n}: predictions before thresholding");
        assert!(all.iter().enumerate().all(|(i, p)| p.slot == i));
    }

    let model = Model::<f32>::new(ModelConfig::desk(64), 5).unwrap();
    let full = model.infer(&img, 0.0).unwrap();
    // thresholding only drops; kept slots are untouched
    let median = {
        let mut s: Vec<f64> = full.iter().map(|p| p.score).collect();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let kept = model.infer(&img, median).unwrap();
    assert!(!kept.is_empty() && kept.len() < full.len());
    for p in &kept {
        assert!(same(p, &full[p.slot]), "slot {} changed under thresholding", p.slot);
    }
    for &k in &REMOVED {
        let reduced = without_slot(&model, k).infer(&img, 0.0).unwrap();
        assert_eq!(reduced.len(), full.len() - 1);
        for (i, p) in reduced.iter().enumerate() {
            let orig = if i < k { i } else { i + 1 };
            assert!(same(p, &full[orig]), "removing slot {k} changed slot {orig}");
        }
    }
    format!(
        "N in {N_VALUES:?} give exactly N predictions; activation maps nonnegative, max |sum - 1| = {worst_sum:.1e}; removing slots {REMOVED:?} leaves the rest bit-identical"
    )
}
