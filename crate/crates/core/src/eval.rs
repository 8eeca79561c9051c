//! Keypoint evaluation and robustness experiments.
//!
//! `oks_match_eval` scores predictions against ground truth with the
//! COCO-style protocol: per image, predictions greedily match unmatched
//! ground truths in descending confidence when OKS clears the threshold;
//! detections pool globally into a precision-recall curve integrated at
//! 101 recall points; AR is the max recall reached. Thresholds sweep
//! 0.50:0.05:0.95. Ground truths with no supervised keypoint are skipped.
//!
//! Also here: PSNR (100 dB cap) and sliding-window SSIM on unit-range
//! images, Gaussian-heatmap KL divergence between instances, the
//! keypoint-masking robustness experiment (square occluders at ground-truth
//! keypoints, set to the image's darkest value), and the
//! training-set-size scaling sweep.

use crate::error::{Error, Result};
use crate::image_data::Image;
use crate::params::{ParamSet, TrainConfig};
use crate::pose::losses::{oks_similarity, LossWeights, OksConstants};
use crate::pose::model::{forward, train_pose, PoseConfig};
use crate::pose::PoseInstance;
use crate::rng::{item_stream, Stream};
use crate::synthesis::AnnotatedSample;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// The evaluation thresholds: 0.50:0.05:0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Aggregated AP/AR plus the per-threshold table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap_mean: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ar_mean: f64,
    pub ar_50: f64,
    pub ar_75: f64,
    /// Rows of (threshold, ap, ar).
    pub per_threshold: Vec<(f64, f64, f64)>,
    pub num_images: usize,
    pub num_gts: usize,
    pub num_preds: usize,
}

/// One pooled detection: sort key is (score desc, image, rank in image).
struct Detection {
    score: f64,
    image: usize,
    rank: usize,
    tp: bool,
}

fn average_precision(mut dets: Vec<Detection>, num_gts: usize) -> (f64, f64) {
    if num_gts == 0 {
        return (0.0, 0.0);
    }
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.image.cmp(&b.image))
            .then(a.rank.cmp(&b.rank))
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for d in &dets {
        if d.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    // precision envelope, then 101-point interpolation
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rc| rc >= target - 1e-12)
            .map_or(0.0, |idx| precision[idx]);
        ap += p;
    }
    let max_recall = recall.last().copied().unwrap_or(0.0);
    (ap / 101.0, max_recall)
}

/// Evaluate prediction lists against ground-truth lists, image by image.
pub fn oks_match_eval(
    predictions: &[Vec<PoseInstance>],
    gts: &[Vec<PoseInstance>],
    thresholds: &[f64],
    kc: &OksConstants,
) -> Result<EvalReport> {
    if predictions.len() != gts.len() {
        return Err(Error::dim_mismatch(
            "oks_match_eval",
            format!("{} images", gts.len()),
            format!("{}", predictions.len()),
        ));
    }
    kc.validate()?;
    for t in thresholds {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::invalid("oks threshold", *t));
        }
    }

    // OKS of every (pred, supervised gt) pair, once per image
    let mut per_image: Vec<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
    let mut num_gts = 0;
    let mut num_preds = 0;
    for (preds, g) in predictions.iter().zip(gts.iter()) {
        let usable: Vec<usize> = (0..g.len()).filter(|&j| g[j].visible_count() > 0).collect();
        num_gts += usable.len();
        num_preds += preds.len();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .score
                .partial_cmp(&preds[a].score)
                .expect("scores are finite")
        });
        let mut oks_table = Vec::with_capacity(order.len());
        for &pi in &order {
            let mut row = Vec::with_capacity(usable.len());
            for &gj in &usable {
                row.push(oks_similarity(
                    &preds[pi].keypoints,
                    &g[gj].keypoints,
                    &g[gj].visibility,
                    g[gj].scale(),
                    kc,
                )?);
            }
            oks_table.push(row);
        }
        let scores: Vec<f64> = order.iter().map(|&pi| preds[pi].score).collect();
        per_image.push((usable, oks_table, scores));
    }

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut dets = Vec::new();
        for (image, (usable, oks_table, scores)) in per_image.iter().enumerate() {
            let mut taken = vec![false; usable.len()];
            for (rank, row) in oks_table.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (j, &oks) in row.iter().enumerate() {
                    if !taken[j] && oks >= t && best.map_or(true, |(_, b)| oks > b) {
                        best = Some((j, oks));
                    }
                }
                let tp = if let Some((j, _)) = best {
                    taken[j] = true;
                    true
                } else {
                    false
                };
                dets.push(Detection {
                    score: scores[rank],
                    image,
                    rank,
                    tp,
                });
            }
        }
        let (ap, ar) = average_precision(dets, num_gts);
        per_threshold.push((t, ap, ar));
    }

    let pick = |want: f64| {
        per_threshold
            .iter()
            .find(|(t, _, _)| (t - want).abs() < 1e-9)
            .map_or((0.0, 0.0), |&(_, ap, ar)| (ap, ar))
    };
    let n = per_threshold.len().max(1) as f64;
    let (ap_50, ar_50) = pick(0.50);
    let (ap_75, ar_75) = pick(0.75);
    Ok(EvalReport {
        ap_mean: per_threshold.iter().map(|r| r.1).sum::<f64>() / n,
        ap_50,
        ap_75,
        ar_mean: per_threshold.iter().map(|r| r.2).sum::<f64>() / n,
        ar_50,
        ar_75,
        per_threshold,
        num_images: gts.len(),
        num_gts,
        num_preds,
    })
}

/// Run the model over a split (in parallel) and score it.
pub fn evaluate_model(
    params: &ParamSet,
    cfg: &PoseConfig,
    dataset: &[AnnotatedSample],
    kc: &OksConstants,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let predictions: Vec<Vec<PoseInstance>> = dataset
        .par_iter()
        .map(|s| forward(&s.image, params, cfg).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let gts: Vec<Vec<PoseInstance>> = dataset.iter().map(|s| s.instances.clone()).collect();
    oks_match_eval(&predictions, &gts, thresholds, kc)
}

/// Peak signal-to-noise ratio on unit-range images, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::dim_mismatch(
            "psnr",
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Mean structural similarity over sliding 8x8 windows, per channel, with
/// the standard stabilizers on unit range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::dim_mismatch(
            "ssim",
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    const WIN: usize = 8;
    if a.height < WIN || a.width < WIN {
        return Err(Error::invalid(
            "ssim dims",
            format!("{}x{} below {WIN}x{WIN}", a.height, a.width),
        ));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y0 in 0..=(a.height - WIN) {
            for x0 in 0..=(a.width - WIN) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in y0..y0 + WIN {
                    for x in x0..x0 + WIN {
                        ma += a.get(y, x, c);
                        mb += b.get(y, x, c);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + WIN {
                    for x in x0..x0 + WIN {
                        let da = a.get(y, x, c) - ma;
                        let db = b.get(y, x, c) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Sum-of-Gaussians keypoint heatmap on a grid, floored and normalized to
/// a probability distribution.
pub fn keypoint_heatmap(
    inst: &PoseInstance,
    sigma: f64,
    grid: (usize, usize),
) -> Result<Tensor> {
    let (gh, gw) = grid;
    if gh < 2 || gw < 2 {
        return Err(Error::invalid("heatmap grid", format!("{gh}x{gw}")));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("heatmap sigma", sigma));
    }
    if inst.visible_count() == 0 {
        return Err(Error::invalid(
            "heatmap instance",
            "no supervised keypoints",
        ));
    }
    let mut heat = Tensor::zeros(vec![gh, gw]);
    for (kp, &v) in inst.keypoints.iter().zip(inst.visibility.iter()) {
        if v == 0 {
            continue;
        }
        let gx = kp[0] * (gw - 1) as f64;
        let gy = kp[1] * (gh - 1) as f64;
        for i in 0..gh {
            for j in 0..gw {
                let d2 = (j as f64 - gx).powi(2) + (i as f64 - gy).powi(2);
                heat.data[i * gw + j] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let mut sum = 0.0;
    for v in &mut heat.data {
        *v = v.max(1e-12);
        sum += *v;
    }
    for v in &mut heat.data {
        *v /= sum;
    }
    Ok(heat)
}

/// KL divergence KL(A || B) between the two instances' heatmaps. Directional
/// by definition: `heatmap_kl(a, b)` and `heatmap_kl(b, a)` may differ.
pub fn heatmap_kl(
    a: &PoseInstance,
    b: &PoseInstance,
    sigma: f64,
    grid: (usize, usize),
) -> Result<f64> {
    let ha = keypoint_heatmap(a, sigma, grid)?;
    let hb = keypoint_heatmap(b, sigma, grid)?;
    Ok(ha
        .data
        .iter()
        .zip(hb.data.iter())
        .map(|(&p, &q)| p * (p / q).ln())
        .sum())
}

/// Square occluders (side `2 * mask_sigma`, darkest image value) over `k`
/// randomly chosen ground-truth keypoints of every instance.
pub fn mask_keypoints(
    sample: &AnnotatedSample,
    k: usize,
    mask_sigma: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> AnnotatedSample {
    let mut out = sample.clone();
    let floor = out
        .image
        .data
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let (h, w) = (out.image.height as f64, out.image.width as f64);
    for inst in &sample.instances {
        let mut slots: Vec<usize> = (0..inst.keypoints.len()).collect();
        slots.shuffle(rng);
        for &slot in slots.iter().take(k) {
            let cx = inst.keypoints[slot][0] * w;
            let cy = inst.keypoints[slot][1] * h;
            let x0 = ((cx - mask_sigma).floor().max(0.0)) as usize;
            let x1 = ((cx + mask_sigma).ceil().min(w)) as usize;
            let y0 = ((cy - mask_sigma).floor().max(0.0)) as usize;
            let y1 = ((cy + mask_sigma).ceil().min(h)) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..out.image.channels {
                        out.image.set(y, x, c, floor);
                    }
                }
            }
        }
    }
    out
}

/// One (k, trial) measurement of the masking experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRow {
    pub k: usize,
    pub trial: usize,
    pub ap_mean: f64,
}

/// Masking robustness curve for one model: AP at each masking level,
/// `trials` random occluder draws per level.
pub fn mask_experiment(
    params: &ParamSet,
    cfg: &PoseConfig,
    dataset: &[AnnotatedSample],
    k_values: &[usize],
    trials: usize,
    mask_sigma: f64,
    seed: u64,
    kc: &OksConstants,
) -> Result<Vec<MaskRow>> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be positive"));
    }
    let mut rows = Vec::with_capacity(k_values.len() * trials);
    for &k in k_values {
        for trial in 0..trials {
            let masked: Vec<AnnotatedSample> = dataset
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = item_stream(
                        seed,
                        Stream::Experiment,
                        ((k as u64) << 32) ^ ((trial as u64) << 16) ^ i as u64,
                    );
                    mask_keypoints(s, k, mask_sigma, &mut rng)
                })
                .collect();
            let report = evaluate_model(params, cfg, &masked, kc, &OKS_THRESHOLDS)?;
            rows.push(MaskRow {
                k,
                trial,
                ap_mean: report.ap_mean,
            });
        }
    }
    Ok(rows)
}

/// Mean AP per masking level.
pub fn mask_curve_means(rows: &[MaskRow], k_values: &[usize]) -> Vec<(usize, f64)> {
    k_values
        .iter()
        .map(|&k| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.ap_mean).collect();
            (k, vals.iter().sum::<f64>() / vals.len().max(1) as f64)
        })
        .collect()
}

/// Train at increasing synthetic-set sizes and report held-out AP rows.
#[allow(clippy::too_many_arguments)]
pub fn scaling_experiment(
    sizes: &[usize],
    train_set: &[(Image, Vec<PoseInstance>)],
    test_set: &[AnnotatedSample],
    cfg: &PoseConfig,
    weights: &LossWeights,
    kc: &OksConstants,
    tcfg: &TrainConfig,
    init_seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > train_set.len() {
            return Err(Error::invalid(
                "scaling size",
                format!("{size} outside 1..={}", train_set.len()),
            ));
        }
        let params = crate::pose::model::init_pose_params(init_seed, cfg);
        let (trained, _) = train_pose(&train_set[..size], cfg, weights, kc, tcfg, params)?;
        let report = evaluate_model(&trained, cfg, test_set, kc, &OKS_THRESHOLDS)?;
        rows.push((size, report.ap_mean));
    }
    Ok(rows)
}
