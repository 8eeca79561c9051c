//! Miniature transformer pose decoder.
//!
//! A strided conv backbone turns the image into a small feature grid with
//! sinusoidal position encoding. Learned queries — one human token plus one
//! token per keypoint for each instance group — pass through decoder layers
//! of: group-masked self-attention (pose prior), deformable cross-attention
//! that bilinearly samples the feature grid at learned offsets around each
//! token's reference point (image cues), and a fusion step combining the
//! two. Fusion is either a plain residual sum or a learned per-token gate:
//! a two-layer MLP on the concatenated pair emits softmax weights
//! `(w_pose, w_image)` and the fused token is the weighted sum, replacing
//! the residual. Reference points refine across layers on inverse-sigmoid
//! logits and are detached between layers; linear heads read out class,
//! box, and keypoint coordinates.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_data::Image;
use crate::nn::{self, BoundParams};
use crate::params::{Adam, ParamSet, TrainConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

use super::losses::{total_loss_vars, LossWeights, OksConstants, PredVars};
use super::{PoseInstance, NUM_KEYPOINTS};

/// Backbone downsampling factor; input dims must be multiples of this.
pub const STRIDE: usize = 8;

/// How pose-prior and image-cue tokens are combined in each decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learned per-token gate: softmax MLP weights, fused = weighted sum.
    Gated,
    /// Plain residual: fused = q_pose + q_image.
    Residual,
    /// Gate pinned to (0.5, 0.5); exercises the gated path with constant
    /// weights, so fused = 0.5 * (q_pose + q_image) exactly.
    PinnedHalf,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseConfig {
    /// Token channel width.
    pub dim: usize,
    /// Instance groups (maximum detectable persons).
    pub num_groups: usize,
    /// Decoder layers.
    pub num_layers: usize,
    /// Deformable samples per token.
    pub num_samples: usize,
    /// Self-attention heads.
    pub num_heads: usize,
    pub fusion: FusionMode,
}

impl Default for PoseConfig {
    fn default() -> PoseConfig {
        PoseConfig {
            dim: 64,
            num_groups: 8,
            num_layers: 3,
            num_samples: 4,
            num_heads: 4,
            fusion: FusionMode::Gated,
        }
    }
}

impl PoseConfig {
    /// Tokens per instance group: one human token + one per keypoint.
    pub fn tokens_per_group(&self) -> usize {
        1 + NUM_KEYPOINTS
    }

    pub fn num_tokens(&self) -> usize {
        self.num_groups * self.tokens_per_group()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads must divide dim, got {} / {}",
                self.num_heads, self.dim
            )));
        }
        if self.num_groups == 0 || self.num_layers == 0 || self.num_samples == 0 {
            return Err(Error::Config(
                "num_groups, num_layers, num_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh parameter set for the decoder; everything trainable.
pub fn init_pose_params(seed: u64, cfg: &PoseConfig) -> ParamSet {
    let mut rng = stream(seed, Stream::Pose);
    let mut ps = ParamSet::new();
    let d = cfg.dim;
    nn::add_conv(&mut ps, &mut rng, "backbone1", 32, 3, 3, true);
    nn::add_conv(&mut ps, &mut rng, "backbone2", 64, 32, 3, true);
    nn::add_conv(&mut ps, &mut rng, "backbone3", d, 64, 3, true);

    let t = cfg.num_tokens();
    let embed: Vec<f64> = (0..t * d).map(|_| 0.5 * nn::normal(&mut rng)).collect();
    ps.insert("query_embed", Tensor::new(vec![t, d], embed), true);
    let refs: Vec<f64> = (0..t * 2).map(|_| rng.gen_range(-1.5..1.5)).collect();
    ps.insert("ref_logits", Tensor::new(vec![t, 2], refs), true);

    for l in 0..cfg.num_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        nn::add_linear(&mut ps, &mut rng, &p("q"), d, d, true);
        nn::add_linear(&mut ps, &mut rng, &p("k"), d, d, true);
        nn::add_linear(&mut ps, &mut rng, &p("v"), d, d, true);
        nn::add_linear(&mut ps, &mut rng, &p("o"), d, d, true);
        nn::add_layer_norm(&mut ps, &p("ln1"), d, true);
        // offsets start at a fixed ring of directions (weights zero) so
        // initial samples spread around the reference point
        nn::add_linear(&mut ps, &mut rng, &p("offset"), d, 2 * cfg.num_samples, true);
        let ow = ps.tensor_mut(&p("offset.w")).expect("just added");
        ow.data.iter_mut().for_each(|v| *v = 0.0);
        let mut ring = Vec::with_capacity(2 * cfg.num_samples);
        for s in 0..cfg.num_samples {
            let ang = 2.0 * std::f64::consts::PI * s as f64 / cfg.num_samples as f64;
            ring.push(0.1 * ang.cos());
            ring.push(0.1 * ang.sin());
        }
        *ps.tensor_mut(&p("offset.b")).expect("just added") =
            Tensor::new(vec![2 * cfg.num_samples], ring);
        nn::add_linear(&mut ps, &mut rng, &p("samp"), d, cfg.num_samples, true);
        ps.tensor_mut(&p("samp.w")).expect("just added").data.fill(0.0);
        nn::add_linear(&mut ps, &mut rng, &p("cross_v"), d, d, true);
        nn::add_linear(&mut ps, &mut rng, &p("gate1"), 2 * d, d, true);
        nn::add_linear(&mut ps, &mut rng, &p("gate2"), d, 2, true);
        nn::add_layer_norm(&mut ps, &p("ln2"), d, true);
        nn::add_linear(&mut ps, &mut rng, &p("ffn1"), d, 2 * d, true);
        nn::add_linear(&mut ps, &mut rng, &p("ffn2"), 2 * d, d, true);
        nn::add_layer_norm(&mut ps, &p("ln3"), d, true);
    }
    nn::add_linear(&mut ps, &mut rng, "kp_head", d, 2, true);
    nn::add_linear(&mut ps, &mut rng, "box_head", d, 4, true);
    nn::add_linear(&mut ps, &mut rng, "cls_head", d, 1, true);
    // start with low confidence so unmatched predictions are cheap
    ps.tensor_mut("cls_head.b").expect("just added").data[0] = -2.0;
    ps
}

/// Checkpoint architecture tag carrying the full config.
pub fn arch_descriptor(cfg: &PoseConfig) -> String {
    format!(
        "pose-decoder-v1 {}",
        serde_json::to_string(cfg).expect("config serializes")
    )
}

/// Recover the config from a checkpoint's architecture tag.
pub fn config_from_descriptor(desc: &str) -> Result<PoseConfig> {
    let rest = desc.strip_prefix("pose-decoder-v1 ").ok_or(Error::Format {
        what: "architecture descriptor",
        reason: format!("`{desc}` is not a pose-decoder-v1 tag"),
    })?;
    let cfg: PoseConfig = serde_json::from_str(rest).map_err(|e| Error::Format {
        what: "architecture descriptor",
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Per-layer gate weights and token norms recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLayer {
    pub layer: usize,
    pub w_pose: Vec<f64>,
    pub w_image: Vec<f64>,
    pub norm_pose: Vec<f64>,
    pub norm_image: Vec<f64>,
}

impl ProbeLayer {
    /// `‖q_image‖ / ‖q_pose‖` for one token; undefined when the pose-prior
    /// norm is below 1e-9.
    pub fn norm_ratio(&self, token: usize) -> Option<f64> {
        if self.norm_pose[token] > 1e-9 {
            Some(self.norm_image[token] / self.norm_pose[token])
        } else {
            None
        }
    }
}

fn check_dims(img: &Image) -> Result<()> {
    if img.height == 0
        || img.width == 0
        || img.height % STRIDE != 0
        || img.width % STRIDE != 0
        || img.channels != 3
    {
        return Err(Error::invalid(
            "image dims",
            format!(
                "{}x{}x{} must be positive multiples of {STRIDE} with 3 channels",
                img.height, img.width, img.channels
            ),
        ));
    }
    Ok(())
}

fn inv_sigmoid(t: &Tensor) -> Tensor {
    t.map(|p| {
        let q = p.clamp(1e-6, 1.0 - 1e-6);
        (q / (1.0 - q)).ln()
    })
}

/// Backbone feature tokens (with position encoding) as a grid Var
/// `[Hf, Wf, D]`.
fn feature_grid<'t>(
    tape: &'t Tape,
    img: &Image,
    p: &BoundParams<'t>,
    cfg: &PoseConfig,
) -> Var<'t> {
    let x = tape.leaf(img.to_chw());
    let h1 = nn::conv(x, p, "backbone1", 2, 1).relu();
    let h2 = nn::conv(h1, p, "backbone2", 2, 1).relu();
    let h3 = nn::conv(h2, p, "backbone3", 2, 1).relu();
    let (hf, wf) = (img.height / STRIDE, img.width / STRIDE);
    let flat = h3.chw_to_hwc().reshape(vec![hf * wf, cfg.dim]);
    let pe = tape.leaf(nn::sinusoidal_positions(hf, wf, cfg.dim));
    flat.add(pe).reshape(vec![hf, wf, cfg.dim])
}

/// Block-diagonal self-attention mask: tokens attend within their group.
fn group_mask(cfg: &PoseConfig) -> Vec<bool> {
    let (t, tpg) = (cfg.num_tokens(), cfg.tokens_per_group());
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            mask[i * t + j] = i / tpg == j / tpg;
        }
    }
    mask
}

/// Multi-head self-attention + residual + layer norm: the pose prior.
fn self_attention<'t>(
    x: Var<'t>,
    mask: &[bool],
    p: &BoundParams<'t>,
    cfg: &PoseConfig,
    layer: usize,
) -> Var<'t> {
    let d = cfg.dim;
    let dh = d / cfg.num_heads;
    let pre = |n: &str| format!("layer{layer}.{n}");
    let q = nn::linear(x, p, &pre("q"));
    let k = nn::linear(x, p, &pre("k"));
    let v = nn::linear(x, p, &pre("v"));
    let mut heads: Option<Var> = None;
    for h in 0..cfg.num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let scores = qh.matmul_nt(kh).scale(1.0 / (dh as f64).sqrt());
        let attn = scores.masked_softmax_rows(mask);
        let out = attn.matmul(vh);
        heads = Some(match heads {
            Some(acc) => acc.concat_cols(out),
            None => out,
        });
    }
    let attn_out = nn::linear(heads.expect("at least one head"), p, &pre("o"));
    nn::layer_norm(x.add(attn_out), p, &pre("ln1"))
}

/// Deformable cross-attention: sample the feature grid at learned offsets
/// around each token's reference point, softmax-weight the samples, and
/// project. `refs` is a `[T, 2]` Var of normalized (x, y) points.
fn deformable_cross_attention<'t>(
    q_pose: Var<'t>,
    grid: Var<'t>,
    refs: Var<'t>,
    p: &BoundParams<'t>,
    cfg: &PoseConfig,
    layer: usize,
) -> Var<'t> {
    let pre = |n: &str| format!("layer{layer}.{n}");
    let t = q_pose.shape()[0];
    let offsets = nn::linear(q_pose, p, &pre("offset"));
    let weights = nn::linear(q_pose, p, &pre("samp")).softmax_rows();
    let mut acc: Option<Var> = None;
    for s in 0..cfg.num_samples {
        let coords = refs.add(offsets.slice_cols(2 * s, 2 * s + 2));
        let sampled = grid.bilinear_sample(coords);
        let w = weights.slice_cols(s, s + 1).reshape(vec![t]);
        let contrib = sampled.mul_broadcast_col(w);
        acc = Some(match acc {
            Some(a) => a.add(contrib),
            None => contrib,
        });
    }
    nn::linear(acc.expect("at least one sample"), p, &pre("cross_v"))
}

/// Combine pose-prior and image-cue banks; returns the fused bank and the
/// per-token `(w_pose, w_image)` weights actually applied.
fn fuse<'t>(
    tape: &'t Tape,
    q_pose: Var<'t>,
    q_image: Var<'t>,
    p: &BoundParams<'t>,
    cfg: &PoseConfig,
    layer: usize,
) -> (Var<'t>, Tensor) {
    let t = q_pose.shape()[0];
    match cfg.fusion {
        FusionMode::Residual => {
            let fused = q_pose.add(q_image);
            (fused, Tensor::new(vec![t, 2], vec![1.0; t * 2]))
        }
        FusionMode::PinnedHalf => {
            let half = tape.leaf(Tensor::full(vec![t], 0.5));
            let fused = q_pose
                .mul_broadcast_col(half)
                .add(q_image.mul_broadcast_col(half));
            (fused, Tensor::new(vec![t, 2], vec![0.5; t * 2]))
        }
        FusionMode::Gated => {
            let pre = |n: &str| format!("layer{layer}.{n}");
            let cat = q_pose.concat_cols(q_image);
            let hidden = nn::linear(cat, p, &pre("gate1")).relu();
            let gates = nn::linear(hidden, p, &pre("gate2")).softmax_rows();
            let wp = gates.slice_cols(0, 1).reshape(vec![t]);
            let wi = gates.slice_cols(1, 2).reshape(vec![t]);
            let fused = q_pose
                .mul_broadcast_col(wp)
                .add(q_image.mul_broadcast_col(wi));
            (fused, gates.value())
        }
    }
}

/// Plain-tensor fusion for probing the gate in isolation: returns
/// (fused bank, per-token weight pairs).
pub fn fuse_queries(
    q_pose: &Tensor,
    q_image: &Tensor,
    params: &ParamSet,
    cfg: &PoseConfig,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    if q_pose.shape != q_image.shape || q_pose.shape.len() != 2 {
        return Err(Error::dim_mismatch(
            "fuse_queries",
            format!("{:?}", q_pose.shape),
            format!("{:?}", q_image.shape),
        ));
    }
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let (fused, w) = fuse(
        &tape,
        tape.leaf(q_pose.clone()),
        tape.leaf(q_image.clone()),
        &bound,
        cfg,
        layer,
    );
    Ok((fused.value(), w))
}

/// Row-wise `‖q_image‖ / ‖q_pose‖`; `None` where the pose norm is < 1e-9.
pub fn norm_ratios(q_pose: &Tensor, q_image: &Tensor) -> Vec<Option<f64>> {
    let (t, d) = (q_pose.shape[0], q_pose.shape[1]);
    (0..t)
        .map(|i| {
            let np = q_pose.data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let ni = q_image.data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if np > 1e-9 {
                Some(ni / np)
            } else {
                None
            }
        })
        .collect()
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape[0], t.shape[1]);
    (0..r)
        .map(|i| t.data[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Full decoder pass on the tape. Returns per-group predictions and the
/// per-layer probe records.
pub fn forward_vars<'t>(
    tape: &'t Tape,
    img: &Image,
    bound: &BoundParams<'t>,
    cfg: &PoseConfig,
) -> Result<(Vec<PredVars<'t>>, Vec<ProbeLayer>)> {
    check_dims(img)?;
    cfg.validate()?;
    let grid = feature_grid(tape, img, bound, cfg);
    let mask = group_mask(cfg);
    let t = cfg.num_tokens();

    let mut x = bound.var("query_embed");
    // initial reference points stay differentiable so the logits train
    // through the sampler; refinements between layers are detached
    let mut refs = bound.var("ref_logits").sigmoid();
    let mut probe = Vec::with_capacity(cfg.num_layers);
    let mut coords = None;
    for l in 0..cfg.num_layers {
        let q_pose = self_attention(x, &mask, bound, cfg, l);
        let q_image = deformable_cross_attention(q_pose, grid, refs, bound, cfg, l);
        let (fused, gates) = fuse(tape, q_pose, q_image, bound, cfg, l);
        probe.push(ProbeLayer {
            layer: l,
            w_pose: (0..t).map(|i| gates.data[i * 2]).collect(),
            w_image: (0..t).map(|i| gates.data[i * 2 + 1]).collect(),
            norm_pose: row_norms(&q_pose.value()),
            norm_image: row_norms(&q_image.value()),
        });
        let pre = |n: &str| format!("layer{l}.{n}");
        let x2 = nn::layer_norm(fused, bound, &pre("ln2"));
        let ffn = nn::linear(nn::linear(x2, bound, &pre("ffn1")).relu(), bound, &pre("ffn2"));
        x = nn::layer_norm(x2.add(ffn), bound, &pre("ln3"));

        let delta = nn::linear(x, bound, "kp_head");
        let base = tape.leaf(inv_sigmoid(&refs.value()));
        let refined = base.add(delta).sigmoid();
        if l + 1 == cfg.num_layers {
            coords = Some(refined);
        } else {
            refs = tape.leaf(refined.value());
        }
    }
    let coords = coords.expect("at least one layer");

    let tpg = cfg.tokens_per_group();
    let human_rows: Vec<usize> = (0..cfg.num_groups).map(|g| g * tpg).collect();
    let humans = x.gather_rows(&human_rows);
    let logits = nn::linear(humans, bound, "cls_head");
    let boxes = nn::linear(humans, bound, "box_head").sigmoid();
    let mut preds = Vec::with_capacity(cfg.num_groups);
    for g in 0..cfg.num_groups {
        let kp_rows: Vec<usize> = (1..tpg).map(|k| g * tpg + k).collect();
        preds.push(PredVars {
            logit: logits.gather_rows(&[g]).reshape(vec![1]),
            box_cxcywh: boxes.gather_rows(&[g]).reshape(vec![4]),
            keypoints: coords.gather_rows(&kp_rows),
        });
    }
    Ok((preds, probe))
}

/// Feature grid `[Hf, Wf, D]` (conv features + position encoding).
pub fn extract_features(img: &Image, params: &ParamSet, cfg: &PoseConfig) -> Result<Tensor> {
    check_dims(img)?;
    cfg.validate()?;
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    Ok(feature_grid(&tape, img, &bound, cfg).value())
}

/// Evaluation pass: plain predictions + probe records.
pub fn forward(
    img: &Image,
    params: &ParamSet,
    cfg: &PoseConfig,
) -> Result<(Vec<PoseInstance>, Vec<ProbeLayer>)> {
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let (preds, probe) = forward_vars(&tape, img, &bound, cfg)?;
    Ok((preds.iter().map(PredVars::instance).collect(), probe))
}

/// One optimizer step of training history (batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub total: f64,
    pub l_h: f64,
    pub l_c: f64,
    pub l_k: f64,
    pub matched: usize,
}

/// Train the decoder on (image, ground-truth instances) pairs.
pub fn train_pose(
    dataset: &[(Image, Vec<PoseInstance>)],
    cfg: &PoseConfig,
    weights: &LossWeights,
    oks: &OksConstants,
    tcfg: &TrainConfig,
    mut params: ParamSet,
) -> Result<(ParamSet, Vec<StepRow>)> {
    cfg.validate()?;
    weights.validate()?;
    oks.validate()?;
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("train_pose"));
    }
    for (img, gts) in dataset {
        check_dims(img)?;
        for g in gts {
            if g.keypoints.len() != oks.k.len() {
                return Err(Error::dim_mismatch(
                    "train_pose ground truth",
                    format!("{} keypoints", oks.k.len()),
                    format!("{}", g.keypoints.len()),
                ));
            }
        }
    }

    let mut rng = stream(tcfg.seed, Stream::Pose);
    let mut opt = Adam::new();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(tcfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut s_total, mut s_h, mut s_c, mut s_k, mut s_m) = (0.0, 0.0, 0.0, 0.0, 0usize);
            for &i in batch {
                let (img, gts) = &dataset[i];
                let tape = Tape::new();
                let bound = nn::bind(&tape, &params);
                let (preds, _) = forward_vars(&tape, img, &bound, cfg)?;
                let (total, breakdown, _) = total_loss_vars(&tape, &preds, gts, weights, oks)?;
                s_total += breakdown.total;
                s_h += breakdown.l_h;
                s_c += breakdown.l_c;
                s_k += breakdown.l_k;
                s_m += breakdown.matched;
                let grads = tape.backward(total);
                bound.accumulate_trainable_grads(&params, &grads, &mut acc);
            }
            nn::scale_grads(&mut acc, batch.len() as f64);
            opt.step(&mut params, &acc, lr)?;
            step += 1;
            let n = batch.len() as f64;
            history.push(StepRow {
                step,
                total: s_total / n,
                l_h: s_h / n,
                l_c: s_c / n,
                l_k: s_k / n,
                matched: s_m,
            });
        }
    }
    Ok((params, history))
}
