//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor name or index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((label.to_string(), coord, analytic, numeric));
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar(g: &Graph<f64>, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.numel() != 1 {
        return Err(Error::shape(format!("gradient check needs a scalar output, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Checks `d f / d inputs` for a function built on fresh leaf variables.
/// Every coordinate of every input is perturbed.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let run = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (g, ids, out) = run(inputs)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.of(ids[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for coord in 0..t.numel() {
            let numeric = central_difference(eps, |delta| {
                let mut perturbed = inputs.to_vec();
                perturbed[ti].data_mut()[coord] += delta;
                let (g, _, out) = run(&perturbed)?;
                eval_scalar(&g, out)
            })?;
            report.record(&format!("input{ti}"), coord, analytic[coord], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar function of a [`ParamSet`] at
/// `samples` randomly chosen coordinates (seeded).
pub fn check_params<F>(
    params: &ParamSet<f64>,
    eps: f64,
    floor: f64,
    samples: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    eval_scalar(&g, out)?;
    let mut with_grads = params.clone();
    with_grads.clear_grads();
    g.backward_into(out, &mut with_grads)?;

    let index: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(name, t)| (0..t.numel()).map(move |c| (name.to_string(), c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, index.len(), samples.min(index.len()));
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for pick in picks.into_iter() {
        let (name, coord) = &index[pick];
        let analytic = with_grads.get(name).and_then(|t| t.grad()).map(|g| g[*coord]).unwrap_or(0.0);
        let numeric = central_difference(eps, |delta| {
            let mut perturbed = params.clone();
            perturbed.get_mut(name).expect("indexed").data_mut()[*coord] += delta;
            let mut g = Graph::new();
            let out = build(&mut g, &perturbed)?;
            eval_scalar(&g, out)
        })?;
        report.record(name, *coord, analytic, numeric, floor);
    }
    Ok(report)
}

fn central_difference(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let plus = f(eps)?;
    let minus = f(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}
