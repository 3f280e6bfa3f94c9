//! Instance-activation-map decoder.
//!
//! The fused map (plus two normalized coordinate channels) feeds two
//! branches. The instance branch produces `n_instances` activation maps,
//! uses them to pool one feature vector per slot and maps each vector to a
//! class/objectness/kernel triple. The mask branch produces `kernel_dim`
//! mask features; each slot's mask logits are its kernel dotted with those
//! features at every pixel. The slot count is fixed, so there is no
//! suppression step anywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels;
use crate::diffcore::{Graph, NodeId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::layers;
use crate::mask::BinaryMask;
use crate::model::ModelConfig;

/// Initial probability for the IAM, class and objectness biases.
const PRIOR_PROB: f64 = 0.01;
pub const IAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n_instances: usize,
    pub kernel_dim: usize,
    pub num_classes: usize,
    pub mask_branch_channels: usize,
    pub instance_branch_channels: usize,
    /// Append normalized x/y coordinate channels to the decoder input.
    pub coord_features: bool,
    /// Scale applied to the kernel head's initial weights.
    pub kernel_init_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_instances: 500,
            kernel_dim: 32,
            num_classes: 1,
            mask_branch_channels: 64,
            instance_branch_channels: 64,
            coord_features: true,
            kernel_init_scale: 0.25,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.kernel_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("n_instances, kernel_dim and num_classes must be at least 1"));
        }
        if self.mask_branch_channels == 0 || self.instance_branch_channels == 0 {
            return Err(Error::config("branch widths must be positive"));
        }
        Ok(())
    }

    fn input_channels(&self, fused_channels: usize) -> usize {
        fused_channels + if self.coord_features { 2 } else { 0 }
    }
}

/// Graph handles for one tile's decoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[N, h*w]`, rows sum to one.
    pub iams: NodeId,
    /// `[N, num_classes]`
    pub class_logits: NodeId,
    /// `[N, 1]`, before the sigmoid.
    pub objectness_logits: NodeId,
    /// `[N, 1]`, after the sigmoid.
    pub objectness: NodeId,
    /// `[N, kernel_dim]`
    pub kernels: NodeId,
    /// `[N, h, w]`
    pub mask_logits: NodeId,
    pub grid: (usize, usize),
}

/// Activation maps `[N, h*w]` on an `(h, w)` grid.
#[derive(Clone, Copy, Debug)]
pub struct IamSet {
    pub maps: NodeId,
    pub grid: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub class_logits: NodeId,
    pub objectness_logits: NodeId,
    pub objectness: NodeId,
    pub kernels: NodeId,
}

fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

pub fn init_params_into<T: Real>(
    cfg: &DecoderConfig,
    fused_channels: usize,
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let cin = cfg.input_channels(fused_channels);
    let d = cfg.instance_branch_channels;
    layers::init_conv(params, "decoder.inst_conv1", d, cin, 3, rng);
    layers::init_conv(params, "decoder.inst_conv2", d, d, 3, rng);
    layers::init_conv(params, "decoder.iam", cfg.n_instances, d, 3, rng);
    params.insert("decoder.iam.bias", Tensor::full(&[cfg.n_instances], T::lit(prior_bias())));
    layers::init_linear(params, "decoder.fc", d, d, rng);
    layers::init_linear(params, "decoder.cls", d, cfg.num_classes, rng);
    params.insert("decoder.cls.bias", Tensor::full(&[cfg.num_classes], T::lit(prior_bias())));
    layers::init_linear(params, "decoder.obj", d, 1, rng);
    params.insert("decoder.obj.bias", Tensor::full(&[1], T::lit(prior_bias())));
    layers::init_linear(params, "decoder.kernel", d, cfg.kernel_dim, rng);
    if let Some(w) = params.get_mut("decoder.kernel.weight") {
        let s = T::lit(cfg.kernel_init_scale);
        w.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    let m = cfg.mask_branch_channels;
    layers::init_conv(params, "decoder.mask_conv1", m, cin, 3, rng);
    layers::init_conv(params, "decoder.mask_conv2", cfg.kernel_dim, m, 3, rng);
    Ok(())
}

pub fn init_params<T: Real>(cfg: &DecoderConfig, fused_channels: usize, seed: u64) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    init_params_into(cfg, fused_channels, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(params)
}

/// `[1, 2, h, w]` with x then y coordinates spanning `[-1, 1]`.
pub fn coordinate_channels<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        for x in 0..w {
            data.push(T::lit(lin(x, w)));
        }
    }
    for y in 0..h {
        for _ in 0..w {
            data.push(T::lit(lin(y, h)));
        }
    }
    Tensor::new(vec![1, 2, h, w], data).expect("sized above")
}

fn single_image(g: &Graph<impl Real>, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("{what}: expected [1, C, h, w], got {s:?}"))),
    }
}

/// 3x3 conv to one channel per slot, sigmoid, then each map divided by its
/// spatial sum plus `1e-8`.
pub fn compute_iams<T: Real>(g: &mut Graph<T>, features: NodeId, params: &ParamSet<T>) -> Result<IamSet> {
    let (_, h, w) = single_image(g, features, "compute_iams")?;
    let logits = layers::conv(g, params, "decoder.iam", features, 1)?;
    let n = g.shape(logits)[1];
    let act = g.sigmoid(logits);
    let flat = g.reshape(act, &[n, h * w])?;
    let maps = g.normalize_rows(flat, T::lit(IAM_EPS))?;
    Ok(IamSet { maps, grid: (h, w) })
}

/// IAM-weighted spatial average of `features` per slot: `[N, C]`.
pub fn aggregate<T: Real>(g: &mut Graph<T>, iams: &IamSet, features: NodeId) -> Result<NodeId> {
    let (c, h, w) = single_image(g, features, "aggregate")?;
    if (h, w) != iams.grid {
        return Err(Error::shape(format!("aggregate: IAM grid {:?} vs feature grid {:?}", iams.grid, (h, w))));
    }
    let flat = g.reshape(features, &[c, h * w])?;
    let pix_major = g.transpose(flat)?;
    g.matmul(iams.maps, pix_major)
}

/// Shared fully connected layer, then the class, objectness and kernel heads.
pub fn predict_heads<T: Real>(g: &mut Graph<T>, instance_features: NodeId, params: &ParamSet<T>) -> Result<Heads> {
    let hidden = layers::linear(g, params, "decoder.fc", instance_features)?;
    let hidden = g.relu(hidden);
    let class_logits = layers::linear(g, params, "decoder.cls", hidden)?;
    let objectness_logits = layers::linear(g, params, "decoder.obj", hidden)?;
    let objectness = g.sigmoid(objectness_logits);
    let kernels = layers::linear(g, params, "decoder.kernel", hidden)?;
    Ok(Heads { class_logits, objectness_logits, objectness, kernels })
}

/// Per-slot inner product of the kernel with the mask features at every
/// pixel: `[N, kernel_dim] x [1, kernel_dim, h, w] -> [N, h, w]`.
pub fn compose_masks<T: Real>(g: &mut Graph<T>, kernels: NodeId, mask_features: NodeId) -> Result<NodeId> {
    let (kd, h, w) = single_image(g, mask_features, "compose_masks")?;
    let ks = g.shape(kernels).to_vec();
    if ks.len() != 2 || ks[1] != kd {
        return Err(Error::shape(format!("compose_masks: kernels {ks:?} vs {kd} mask feature channels")));
    }
    let flat = g.reshape(mask_features, &[kd, h * w])?;
    let logits = g.matmul(kernels, flat)?;
    g.reshape(logits, &[ks[0], h, w])
}

/// Runs both decoder branches on a `[1, C, h, w]` fused map.
pub fn decode<T: Real>(g: &mut Graph<T>, fused: NodeId, cfg: &DecoderConfig, params: &ParamSet<T>) -> Result<DecoderOutput> {
    let (_, h, w) = single_image(g, fused, "decode")?;
    let input = if cfg.coord_features {
        let coords = g.input(coordinate_channels(h, w));
        g.concat(&[fused, coords], 1)?
    } else {
        fused
    };
    let inst = layers::conv(g, params, "decoder.inst_conv1", input, 1)?;
    let inst = g.relu(inst);
    let inst = layers::conv(g, params, "decoder.inst_conv2", inst, 1)?;
    let inst = g.relu(inst);
    let iams = compute_iams(g, inst, params)?;
    let features = aggregate(g, &iams, inst)?;
    let heads = predict_heads(g, features, params)?;

    let mask = layers::conv(g, params, "decoder.mask_conv1", input, 1)?;
    let mask = g.relu(mask);
    let mask_features = layers::conv(g, params, "decoder.mask_conv2", mask, 1)?;
    let mask_logits = compose_masks(g, heads.kernels, mask_features)?;
    Ok(DecoderOutput {
        iams: iams.maps,
        class_logits: heads.class_logits,
        objectness_logits: heads.objectness_logits,
        objectness: heads.objectness,
        kernels: heads.kernels,
        mask_logits,
        grid: (h, w),
    })
}

/// One kept instance from [`infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    /// Slot index in `0..n_instances`.
    pub slot: usize,
    pub score: f64,
    pub class_id: usize,
    pub mask: BinaryMask,
}

/// Per-slot `(score, class_id)` with score = class probability x objectness.
pub fn slot_scores<T: Real>(g: &Graph<T>, out: &DecoderOutput) -> Vec<(f64, usize)> {
    let cls = g.value(out.class_logits);
    let k = cls.shape()[1];
    let obj = g.value(out.objectness).data();
    cls.data()
        .chunks(k)
        .zip(obj)
        .map(|(row, &o)| {
            let (best, logit) = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let prob = 1.0 / (1.0 + (-logit.as_f64()).exp());
            (prob * o.as_f64(), best)
        })
        .collect()
}

/// Full forward pass on a `[3, H, W]` image (any extent). Slots scoring
/// below `score_threshold` are dropped; the rest are returned in slot order
/// with masks binarized at probability 0.5 on the original extent. Nothing
/// is suppressed.
pub fn infer<T: Real>(image: &Tensor<T>, params: &ParamSet<T>, cfg: &ModelConfig, score_threshold: f64) -> Result<Vec<ScoredMask>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("infer expects [3, H, W], got {s:?}"))),
    };
    let (padded, _) = crate::datagen::pad_to_grid(image, crate::backbone::GRID);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let mut g = Graph::new();
    let x = g.input(padded.reshape(&[1, 3, ph, pw])?);
    let out = crate::model::forward(&mut g, x, cfg, params)?;
    Ok(collect_instances(&g, &out, (ph, pw), (h, w), score_threshold))
}

/// Thresholds slots and renders kept masks at `original` extent.
pub fn collect_instances<T: Real>(
    g: &Graph<T>,
    out: &DecoderOutput,
    padded: (usize, usize),
    original: (usize, usize),
    score_threshold: f64,
) -> Vec<ScoredMask> {
    let (gh, gw) = out.grid;
    let (ph, pw) = padded;
    let logits = g.value(out.mask_logits).data();
    let ty = kernels::bilinear_taps::<T>(gh, ph);
    let tx = kernels::bilinear_taps::<T>(gw, pw);
    let mut probs = vec![T::zero(); gh * gw];
    let mut full = vec![T::zero(); ph * pw];
    let half = T::lit(0.5);
    slot_scores(g, out)
        .into_iter()
        .enumerate()
        .filter(|(_, (score, _))| *score >= score_threshold)
        .map(|(slot, (score, class_id))| {
            for (p, &l) in probs.iter_mut().zip(&logits[slot * gh * gw..(slot + 1) * gh * gw]) {
                *p = T::one() / (T::one() + (-l).exp());
            }
            kernels::bilinear_plane(&probs, gh, gw, &ty, &tx, &mut full);
            let mask = BinaryMask::from_fn(original.0, original.1, |y, x| full[y * pw + x] > half);
            ScoredMask { slot, score, class_id, mask }
        })
        .collect()
}
