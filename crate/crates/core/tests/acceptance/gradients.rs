use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg_core::datagen::{generate_scene, pad_to_grid, SceneConfig};
use sparseseg_core::diffcore::gradcheck::{check_inputs, relative_error};
use sparseseg_core::diffcore::{Graph, NodeId, ParamSet, PoolKind, Tensor};
use sparseseg_core::matching::{
    compute_loss, compute_loss_frozen, match_slots, targets_for_tile, Assignment, CostWeights, GtSet, LossWeights, SlotLogits,
};
use sparseseg_core::model::{forward, Model, ModelConfig};
use sparseseg_core::Result;

const OP_TOL: f64 = 1e-4;
const OP_EPS: f64 = 1e-5;
const GRAPH_TOL: f64 = 1e-3;
const GRAPH_EPS: f64 = 1e-6;
/// Relative error denominators never drop below this.
const FLOOR: f64 = 1e-6;
const COORDS_PER_TENSOR: usize = 2;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Positive values away from zero, for ops with a kink at zero.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum so every output coordinate gets a distinct gradient.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = g.input(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>);

fn op_cases() -> Vec<OpCase> {
    let target = Tensor::from_fn(&[3, 6], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let t2 = target.clone();
    vec![
        ("conv2d s1 p1", vec![random(&[1, 2, 5, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)], Box::new(|g, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
            project(g, y, 10)
        })),
        ("conv2d s2 p1", vec![random(&[2, 2, 6, 5], 4), random(&[3, 2, 3, 3], 5), random(&[3], 6)], Box::new(|g, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), 2, 1)?;
            project(g, y, 11)
        })),
        ("conv2d 1x1", vec![random(&[1, 3, 4, 4], 7), random(&[2, 3, 1, 1], 8)], Box::new(|g, x| {
            let y = g.conv2d(x[0], x[1], None, 1, 0)?;
            project(g, y, 12)
        })),
        ("relu", vec![away_from_zero(&[2, 3, 4], 13)], Box::new(|g, x| {
            let y = g.relu(x[0]);
            project(g, y, 14)
        })),
        ("sigmoid", vec![random(&[2, 3, 4], 15)], Box::new(|g, x| {
            let y = g.sigmoid(x[0]);
            project(g, y, 16)
        })),
        ("softmax", vec![random(&[2, 3, 4], 17)], Box::new(|g, x| {
            let y = g.softmax(x[0], 1)?;
            project(g, y, 18)
        })),
        ("max pool", vec![random(&[1, 2, 6, 5], 19)], Box::new(|g, x| {
            let y = g.pool2d(PoolKind::Max, x[0], (3, 5))?;
            project(g, y, 20)
        })),
        ("avg pool", vec![random(&[1, 2, 6, 6], 21)], Box::new(|g, x| {
            let y = g.pool2d(PoolKind::Avg, x[0], (3, 2))?;
            project(g, y, 22)
        })),
        ("adaptive avg pool", vec![random(&[1, 2, 7, 5], 23)], Box::new(|g, x| {
            let y = g.pool2d(PoolKind::AdaptiveAvg, x[0], (3, 2))?;
            project(g, y, 24)
        })),
        ("bilinear upsample", vec![random(&[1, 2, 3, 4], 25)], Box::new(|g, x| {
            let y = g.upsample_bilinear(x[0], (7, 9))?;
            project(g, y, 26)
        })),
        ("matmul", vec![random(&[3, 4], 27), random(&[4, 5], 28)], Box::new(|g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, 29)
        })),
        ("transpose", vec![random(&[3, 4], 30)], Box::new(|g, x| {
            let y = g.transpose(x[0])?;
            project(g, y, 31)
        })),
        ("reshape", vec![random(&[3, 4], 32)], Box::new(|g, x| {
            let y = g.reshape(x[0], &[2, 6])?;
            project(g, y, 33)
        })),
        ("group norm", vec![random(&[2, 4, 3, 2], 34), random(&[4], 35), random(&[4], 36)], Box::new(|g, x| {
            let y = g.group_norm(x[0], 2, x[1], x[2], 1e-5)?;
            project(g, y, 37)
        })),
        ("add", vec![random(&[3, 4], 38), random(&[3, 4], 39)], Box::new(|g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y, 40)
        })),
        ("mul", vec![random(&[3, 4], 41), random(&[3, 4], 42)], Box::new(|g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y, 43)
        })),
        ("affine and scale", vec![random(&[3, 4], 44)], Box::new(|g, x| {
            let a = g.affine(x[0], -1.5, 0.25);
            let y = g.scale(a, 3.0);
            project(g, y, 45)
        })),
        ("row bias", vec![random(&[3, 4], 46), random(&[4], 47)], Box::new(|g, x| {
            let y = g.add_row_bias(x[0], x[1])?;
            project(g, y, 48)
        })),
        ("concat", vec![random(&[3, 4], 49), random(&[3, 2], 50)], Box::new(|g, x| {
            let y = g.concat(&[x[0], x[1]], 1)?;
            project(g, y, 51)
        })),
        ("sum and mean", vec![random(&[3, 4], 52)], Box::new(|g, x| {
            let sq = g.mul(x[0], x[0])?;
            let s = g.sum(sq);
            let m = g.mean(x[0]);
            g.add(s, m)
        })),
        ("gather rows", vec![random(&[4, 3], 53)], Box::new(|g, x| {
            let y = g.gather_rows(x[0], &[2, 0, 2])?;
            project(g, y, 54)
        })),
        ("normalize rows", vec![random(&[3, 5], 55)], Box::new(|g, x| {
            let p = g.sigmoid(x[0]);
            let y = g.normalize_rows(p, 1e-8)?;
            project(g, y, 56)
        })),
        ("bce with logits", vec![random(&[3, 6], 57)], Box::new(move |g, x| {
            let y = g.bce_with_logits(x[0], &target)?;
            project(g, y, 58)
        })),
        ("dice rows", vec![random(&[3, 6], 59)], Box::new(move |g, x| {
            let p = g.sigmoid(x[0]);
            let y = g.dice_rows(p, &t2, 1e-6)?;
            project(g, y, 60)
        })),
    ]
}

/// Assignment and objectness targets from the unperturbed point.
struct Frozen {
    assignment: Assignment,
    objectness: Vec<f64>,
}

/// Full training loss of one tile as a function of the parameters. With
/// `frozen` set, the slot assignment and the objectness targets (both
/// piecewise constant in the parameters) come from the base point.
fn tile_loss(
    g: &mut Graph<f64>,
    model: &Model<f64>,
    params: &ParamSet<f64>,
    image: &Tensor<f64>,
    gts: &GtSet,
    frozen: Option<&Frozen>,
) -> Result<(NodeId, Frozen)> {
    let x = g.input(image.clone());
    let out = forward(g, x, &model.config, params)?;
    let slots = SlotLogits::from(&out);
    if let Some(f) = frozen {
        let loss = compute_loss_frozen(g, &slots, gts, &f.assignment, LossWeights::default(), &f.objectness)?;
        return Ok((loss.total, Frozen { assignment: f.assignment.clone(), objectness: f.objectness.clone() }));
    }
    let a = match_slots(g, &slots, gts, CostWeights::default())?;
    let loss = compute_loss(g, &slots, gts, &a, LossWeights::default())?;
    Ok((loss.total, Frozen { assignment: a, objectness: loss.objectness_target }))
}

fn full_graph() -> (f64, usize) {
    let scene = SceneConfig { tile_extent: 64, polygon_count: [4, 8], seed: 4, ..SceneConfig::default() };
    let tile = generate_scene(&scene, "grad").unwrap();
    let model = Model::<f64>::new(ModelConfig::desk(8), 9).unwrap();
    let (padded, _) = pad_to_grid(&tile.image.cast::<f64>(), 16);
    let s = padded.shape().to_vec();
    let image = padded.reshape(&[1, s[0], s[1], s[2]]).unwrap();
    let gts = targets_for_tile(&tile, 1).unwrap();
    assert!(!gts.is_empty(), "gradient scene has no instances");

    let mut g = Graph::new();
    let (loss, frozen) = tile_loss(&mut g, &model, &model.params, &image, &gts, None).unwrap();
    assert!(frozen.objectness.iter().any(|&t| t > 0.0));
    let analytic = g.param_grads(loss).unwrap();
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let (l, _) = tile_loss(&mut g, &model, p, &image, &gts, Some(&frozen)).unwrap();
        g.value(l).data()[0]
    };
    // The frozen loss agrees with the live one at the base point.
    let base = g.value(loss).data()[0];
    assert!((eval(&model.params) - base).abs() <= 1e-12 * base.abs().max(1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in model.params.iter() {
        for _ in 0..COORDS_PER_TENSOR {
            let c = rng.gen_range(0..t.numel());
            let mut plus = model.params.clone();
            plus.get_mut(name).unwrap().data_mut()[c] += GRAPH_EPS;
            let mut minus = model.params.clone();
            minus.get_mut(name).unwrap().data_mut()[c] -= GRAPH_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * GRAPH_EPS);
            let a = analytic.get(name).map_or(0.0, |v| v[c]);
            let err = relative_error(a, numeric, FLOOR);
            if std::env::var("GRADCHECK_VERBOSE").is_ok() {
                println!("  {name}[{c}] analytic {a:+.6e} numeric {numeric:+.6e} rel {err:.2e}");
            }
            assert!(err <= GRAPH_TOL, "{name}[{c}]: analytic {a:e} numeric {numeric:e} rel {err:e}");
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn run() -> String {
    let mut worst_op: f64 = 0.0;
    let cases = op_cases();
    for (name, inputs, build) in &cases {
        let r = check_inputs(inputs, OP_EPS, FLOOR, |g, ids| build(g, ids)).unwrap();
        assert!(r.max_rel_err <= OP_TOL, "{name}: {r:?}");
        worst_op = worst_op.max(r.max_rel_err);
    }
    let (worst_graph, checked) = full_graph();
    format!(
        "{} ops max rel err {worst_op:.1e} (tol {OP_TOL:.0e}); full graph {checked} coords over every tensor max rel err {worst_graph:.1e} (tol {GRAPH_TOL:.0e})",
        cases.len()
    )
}
