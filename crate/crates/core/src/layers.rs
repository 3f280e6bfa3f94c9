//! Parameter initialization and small layer wrappers shared by the model
//! modules. Parameters are named `<prefix>.weight`, `<prefix>.bias`,
//! `<prefix>.gain`, `<prefix>.shift`.

use rand::Rng;

use crate::diffcore::{Graph, NodeId, ParamSet, Real, Tensor};
use crate::error::Result;

pub(crate) const GN_EPS: f64 = 1e-5;

/// Uniform `U(-b, b)` with `b = sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
pub fn fan_in_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

pub(crate) fn init_conv<T: Real, R: Rng>(
    params: &mut ParamSet<T>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = in_ch * k * k;
    params.insert(format!("{name}.weight"), fan_in_uniform(&[out_ch, in_ch, k, k], fan_in, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
}

pub(crate) fn init_norm<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize) {
    params.insert(format!("{name}.gain"), Tensor::full(&[channels], T::one()));
    params.insert(format!("{name}.shift"), Tensor::zeros(&[channels]));
}

/// Weight stored as `[in, out]` so rows of the input multiply directly.
pub(crate) fn init_linear<T: Real, R: Rng>(
    params: &mut ParamSet<T>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) {
    params.insert(format!("{name}.weight"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
}

pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    name: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}.weight"))?;
    let b = g.param(params, &format!("{name}.bias"))?;
    let pad = g.shape(w)[2] / 2;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn norm<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    name: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let gain = g.param(params, &format!("{name}.gain"))?;
    let shift = g.param(params, &format!("{name}.shift"))?;
    g.group_norm(x, groups, gain, shift, T::lit(GN_EPS))
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}.weight"))?;
    let b = g.param(params, &format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

pub(crate) fn hw(g: &Graph<impl Real>, x: NodeId) -> (usize, usize) {
    let s = g.shape(x);
    (s[2], s[3])
}
