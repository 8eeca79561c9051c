//! Set-based pose training objective: `L = L_h + L_c + L_k`.
//!
//! Predictions and ground truths are matched by minimum-cost bipartite
//! assignment; matched pairs contribute a box term (L1 + GIoU), a positive
//! focal class term, and a keypoint term (L1 + OKS); unmatched predictions
//! contribute a negative focal term only. The assignment is recomputed
//! every step but treated as a constant during differentiation.
//!
//! Every loss exists in two forms that must agree: a plain scalar version
//! (used for matching costs and as the reference in tests) and a tape
//! version used for training gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::hungarian::{hungarian_match, Assignment};
use super::PoseInstance;

/// Scalar weights of the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Box L1 weight.
    pub mu: f64,
    /// GIoU weight.
    pub beta: f64,
    /// Class (focal) weight.
    pub lambda_c: f64,
    /// Keypoint L1 weight.
    pub omega: f64,
    /// OKS weight.
    pub theta: f64,
    /// Focal weighting factor.
    pub focal_alpha: f64,
    /// Focal focusing exponent.
    pub focal_gamma: f64,
    /// When true, negative examples are weighted `1 - alpha` instead of
    /// the same constant `alpha` as positives.
    pub alpha_balanced: bool,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            mu: 5.0,
            beta: 2.0,
            lambda_c: 2.0,
            omega: 10.0,
            theta: 4.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            alpha_balanced: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu", self.mu),
            ("beta", self.beta),
            ("lambda_c", self.lambda_c),
            ("omega", self.omega),
            ("theta", self.theta),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-keypoint OKS falloff constants.
#[derive(Debug, Clone, PartialEq)]
pub struct OksConstants {
    pub k: Vec<f64>,
    /// Use squared Euclidean distance in the OKS exponent instead of the
    /// default per-keypoint L1 distance.
    pub squared_distance: bool,
}

impl OksConstants {
    /// Uniform falloff for `n` keypoints.
    pub fn uniform(k: f64, n: usize) -> OksConstants {
        OksConstants {
            k: vec![k; n],
            squared_distance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("OKS constants must all be positive".into()));
        }
        Ok(())
    }
}

/// Default falloff constant applied to every keypoint.
pub const DEFAULT_OKS_K: f64 = 0.079;

const FOCAL_EPS: f64 = 1e-7;

fn corners(b: [f64; 4]) -> Result<[f64; 4]> {
    let [cx, cy, w, h] = b;
    if !(w > 0.0) || !(h > 0.0) {
        return Err(Error::invalid(
            "box",
            format!("width/height must be positive, got w={w} h={h}"),
        ));
    }
    Ok([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0])
}

/// Generalized IoU of two (cx, cy, w, h) boxes, in (-1, 1].
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (hull - union) / hull)
}

/// Box regression term: `mu * L1(pred, gt) + beta * (1 - GIoU)` over the
/// (cx, cy, w, h) parameterization.
pub fn box_loss(pred: [f64; 4], gt: [f64; 4], w: &LossWeights) -> Result<f64> {
    let l1: f64 = pred.iter().zip(gt.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(w.mu * l1 + w.beta * (1.0 - giou(pred, gt)?))
}

fn focal_alpha_for(w: &LossWeights, positive: bool) -> f64 {
    if positive || !w.alpha_balanced {
        w.focal_alpha
    } else {
        1.0 - w.focal_alpha
    }
}

/// Focal classification term for probability `p` and label `positive`.
pub fn focal_loss(p: f64, positive: bool, w: &LossWeights) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let p_t = if positive { p } else { 1.0 - p };
    -w.lambda_c * focal_alpha_for(w, positive) * (1.0 - p_t).powf(w.focal_gamma) * p_t.ln()
}

/// Per-keypoint distance entering the OKS exponent: coordinate-summed L1
/// by default, squared Euclidean behind the flag.
fn kp_distance(a: [f64; 2], b: [f64; 2], squared: bool) -> f64 {
    if squared {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    } else {
        (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
    }
}

/// Object keypoint similarity in [0, 1]: mean over visible keypoints of
/// `exp(-d_i / (2 s^2 k_i^2))`.
pub fn oks_similarity(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    visibility: &[u8],
    s: f64,
    kc: &OksConstants,
) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != visibility.len() || gt.len() != kc.k.len() {
        return Err(Error::dim_mismatch(
            "oks_similarity",
            format!("{} keypoints", gt.len()),
            format!("{}/{}/{}", pred.len(), visibility.len(), kc.k.len()),
        ));
    }
    if !(s > 0.0) {
        return Err(Error::invalid("scale", format!("must be positive, got {s}")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if visibility[i] > 0 {
            let d = kp_distance(pred[i], gt[i], kc.squared_distance);
            sum += (-d / (2.0 * s * s * kc.k[i] * kc.k[i])).exp();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid(
            "visibility",
            "no visible keypoints to compare",
        ));
    }
    Ok(sum / n as f64)
}

/// Keypoint regression term:
/// `omega * mean_visible(L1) + theta * (1 - OKS)`.
pub fn keypoint_loss(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    visibility: &[u8],
    s: f64,
    w: &LossWeights,
    kc: &OksConstants,
) -> Result<f64> {
    let oks = oks_similarity(pred, gt, visibility, s, kc)?;
    let mut l1 = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if visibility[i] > 0 {
            l1 += (pred[i][0] - gt[i][0]).abs() + (pred[i][1] - gt[i][1]).abs();
            n += 1;
        }
    }
    Ok(w.omega * l1 / n as f64 + w.theta * (1.0 - oks))
}

/// Matching cost between one prediction and one ground truth: positive
/// focal class cost + box + keypoint terms with the shared weights.
/// Ground truths with no visible keypoints contribute class + box only.
pub fn match_cost(
    pred: &PoseInstance,
    gt: &PoseInstance,
    w: &LossWeights,
    kc: &OksConstants,
) -> Result<f64> {
    let mut cost = focal_loss(pred.score, true, w) + box_loss(pred.box_cxcywh, gt.box_cxcywh, w)?;
    if gt.visible_count() > 0 {
        cost += keypoint_loss(
            &pred.keypoints,
            &gt.keypoints,
            &gt.visibility,
            gt.scale(),
            w,
            kc,
        )?;
    }
    Ok(cost)
}

/// Component breakdown of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_h: f64,
    pub l_c: f64,
    pub l_k: f64,
    pub matched: usize,
}

/// Match predictions to ground truths by cost and return the assignment.
pub fn assign(
    preds: &[PoseInstance],
    gts: &[PoseInstance],
    w: &LossWeights,
    kc: &OksConstants,
) -> Result<Assignment> {
    let mut cost = Tensor::zeros(vec![preds.len(), gts.len()]);
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            cost.data[i * gts.len() + j] = match_cost(p, g, w, kc)?;
        }
    }
    hungarian_match(&cost)
}

/// Full objective over one image. Matched pairs contribute all three
/// terms with a positive label; unmatched predictions contribute the
/// negative focal term only.
pub fn total_loss(
    preds: &[PoseInstance],
    gts: &[PoseInstance],
    w: &LossWeights,
    kc: &OksConstants,
) -> Result<LossBreakdown> {
    let a = assign(preds, gts, w, kc)?;
    let (mut l_h, mut l_c, mut l_k) = (0.0, 0.0, 0.0);
    for &(i, j) in &a.pairs {
        let (p, g) = (&preds[i], &gts[j]);
        l_h += box_loss(p.box_cxcywh, g.box_cxcywh, w)?;
        l_c += focal_loss(p.score, true, w);
        if g.visible_count() > 0 {
            l_k += keypoint_loss(&p.keypoints, &g.keypoints, &g.visibility, g.scale(), w, kc)?;
        }
    }
    for &i in &a.unmatched_rows {
        l_c += focal_loss(preds[i].score, false, w);
    }
    Ok(LossBreakdown {
        total: l_h + l_c + l_k,
        l_h,
        l_c,
        l_k,
        matched: a.pairs.len(),
    })
}

// ---- tape versions (training path) ----

/// One prediction on the tape: a raw class logit `[1]`, a box `[4]` in
/// (cx, cy, w, h), and keypoints `[K, 2]`, all already in normalized
/// coordinates (the model applies sigmoid before the loss sees them).
#[derive(Clone, Copy)]
pub struct PredVars<'t> {
    pub logit: Var<'t>,
    pub box_cxcywh: Var<'t>,
    pub keypoints: Var<'t>,
}

impl<'t> PredVars<'t> {
    /// Realize the current values as a plain instance (visibility all-2).
    pub fn instance(&self) -> PoseInstance {
        let p = sigmoid_scalar(self.logit.value().data[0]);
        let b = self.box_cxcywh.value();
        let kp = self.keypoints.value();
        let n = kp.shape[0];
        let keypoints = (0..n).map(|i| [kp.data[2 * i], kp.data[2 * i + 1]]).collect();
        PoseInstance::new(p, [b.data[0], b.data[1], b.data[2], b.data[3]], keypoints)
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn at<'t>(v: Var<'t>, n: usize, i: usize) -> Var<'t> {
    v.reshape(vec![n, 1]).gather_rows(&[i]).reshape(vec![1])
}

/// Tape focal term on a raw logit.
fn focal_var<'t>(logit: Var<'t>, positive: bool, w: &LossWeights) -> Var<'t> {
    let p = logit.sigmoid().clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let p_t = if positive { p } else { p.neg().add_scalar(1.0) };
    let one_minus = p_t.neg().add_scalar(1.0);
    one_minus
        .powc(w.focal_gamma)
        .mul(p_t.ln())
        .scale(-w.lambda_c * focal_alpha_for(w, positive))
}

/// Tape box term against a constant ground-truth box.
fn box_loss_var<'t>(tape: &'t Tape, pred: Var<'t>, gt: [f64; 4], w: &LossWeights) -> Var<'t> {
    let g = tape.leaf(Tensor::new(vec![4], gt.to_vec()));
    let l1 = pred.sub(g).abs().sum();

    let cx = at(pred, 4, 0);
    let cy = at(pred, 4, 1);
    let bw = at(pred, 4, 2);
    let bh = at(pred, 4, 3);
    let ax0 = cx.sub(bw.scale(0.5));
    let ay0 = cy.sub(bh.scale(0.5));
    let ax1 = cx.add(bw.scale(0.5));
    let ay1 = cy.add(bh.scale(0.5));
    let c = corners(gt).expect("ground-truth boxes are validated upstream");
    let bx0 = tape.leaf(Tensor::new(vec![1], vec![c[0]]));
    let by0 = tape.leaf(Tensor::new(vec![1], vec![c[1]]));
    let bx1 = tape.leaf(Tensor::new(vec![1], vec![c[2]]));
    let by1 = tape.leaf(Tensor::new(vec![1], vec![c[3]]));
    let zero = tape.leaf(Tensor::new(vec![1], vec![0.0]));

    let iw = ax1.min2(bx1).sub(ax0.max2(bx0)).max2(zero);
    let ih = ay1.min2(by1).sub(ay0.max2(by0)).max2(zero);
    let inter = iw.mul(ih);
    let union = bw.mul(bh).add_scalar(gt[2] * gt[3]).sub(inter);
    let hull_w = ax1.max2(bx1).sub(ax0.min2(bx0));
    let hull_h = ay1.max2(by1).sub(ay0.min2(by0));
    let hull = hull_w.mul(hull_h);
    let giou = inter.div(union).sub(hull.sub(union).div(hull));
    l1.scale(w.mu).add(giou.neg().add_scalar(1.0).scale(w.beta))
}

/// Tape keypoint term against a constant ground truth; requires at least
/// one visible keypoint.
fn keypoint_loss_var<'t>(
    tape: &'t Tape,
    pred_kp: Var<'t>,
    gt: &PoseInstance,
    w: &LossWeights,
    kc: &OksConstants,
) -> Var<'t> {
    let k = gt.keypoints.len();
    let flat: Vec<f64> = gt.keypoints.iter().flatten().copied().collect();
    let g = tape.leaf(Tensor::new(vec![k, 2], flat));
    let ones2 = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
    // per-keypoint coordinate-summed L1 distance as a [k] vector
    let d = pred_kp.sub(g).abs().matmul(ones2).reshape(vec![k]);
    let vis: Vec<f64> = gt.visibility.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    let n_vis = vis.iter().sum::<f64>();
    let vis_mask = tape.leaf(Tensor::new(vec![k], vis));
    let s = gt.scale();
    let neg_scale: Vec<f64> = kc.k.iter().map(|ki| -1.0 / (2.0 * s * s * ki * ki)).collect();
    let exponent_scale = tape.leaf(Tensor::new(vec![k], neg_scale));
    let d_for_oks = if kc.squared_distance {
        // squared Euclidean per keypoint
        let sq = pred_kp.sub(g);
        sq.mul(sq).matmul(ones2).reshape(vec![k])
    } else {
        d
    };
    let oks = d_for_oks
        .mul(exponent_scale)
        .exp()
        .mul(vis_mask)
        .sum()
        .scale(1.0 / n_vis);
    let l1_mean = d.mul(vis_mask).sum().scale(1.0 / n_vis);
    l1_mean
        .scale(w.omega)
        .add(oks.neg().add_scalar(1.0).scale(w.theta))
}

/// Tape objective. The assignment is computed from the realized values
/// and held fixed; gradients flow only through the loss terms.
pub fn total_loss_vars<'t>(
    tape: &'t Tape,
    preds: &[PredVars<'t>],
    gts: &[PoseInstance],
    w: &LossWeights,
    kc: &OksConstants,
) -> Result<(Var<'t>, LossBreakdown, Assignment)> {
    let realized: Vec<PoseInstance> = preds.iter().map(PredVars::instance).collect();
    let a = assign(&realized, gts, w, kc)?;

    let zero = || tape.leaf(Tensor::new(vec![1], vec![0.0]));
    let (mut l_h, mut l_c, mut l_k) = (zero(), zero(), zero());
    for &(i, j) in &a.pairs {
        let g = &gts[j];
        l_h = l_h.add(box_loss_var(tape, preds[i].box_cxcywh, g.box_cxcywh, w));
        l_c = l_c.add(focal_var(preds[i].logit, true, w));
        if g.visible_count() > 0 {
            l_k = l_k.add(keypoint_loss_var(tape, preds[i].keypoints, g, w, kc));
        }
    }
    for &i in &a.unmatched_rows {
        l_c = l_c.add(focal_var(preds[i].logit, false, w));
    }
    let total = l_h.add(l_c).add(l_k);
    let breakdown = LossBreakdown {
        total: total.value().data[0],
        l_h: l_h.value().data[0],
        l_c: l_c.value().data[0],
        l_k: l_k.value().data[0],
        matched: a.pairs.len(),
    };
    Ok((total, breakdown, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn w() -> LossWeights {
        LossWeights::default()
    }

    fn random_box(rng: &mut StdRng) -> [f64; 4] {
        [
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.05..0.4),
        ]
    }

    #[test]
    fn giou_spot_values() {
        assert!((giou([0.5, 0.5, 1.0, 1.0], [0.5, 0.5, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // corner touch: unit boxes at [0,1]^2 and [1,2]^2
        let g = giou([0.5, 0.5, 1.0, 1.0], [1.5, 1.5, 1.0, 1.0]).unwrap();
        assert!((g - (-0.5)).abs() < 1e-12, "{g}");
        // unit box nested in a 2x2 box sharing a corner
        let g = giou([1.0, 1.0, 2.0, 2.0], [0.5, 0.5, 1.0, 1.0]).unwrap();
        assert!((g - 0.25).abs() < 1e-12, "{g}");
    }

    #[test]
    fn giou_properties_hold_on_random_boxes() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let g = giou(a, b).unwrap();
            // recompute the plain IoU for the bound
            let [ax0, ay0, ax1, ay1] = corners(a).unwrap();
            let [bx0, by0, bx1, by1] = corners(b).unwrap();
            let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
            let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
            let inter = iw * ih;
            let iou = inter / (a[2] * a[3] + b[2] * b[3] - inter);
            assert!(g <= iou + 1e-12);
            assert!(g > -1.0 && g <= 1.0);
            assert!((g - giou(b, a).unwrap()).abs() < 1e-12, "symmetry");
            assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(giou([0.5, 0.5, 0.0, 1.0], [0.5, 0.5, 1.0, 1.0]).is_err());
    }

    #[test]
    fn box_loss_spot_values() {
        let a = [0.5, 0.5, 1.0, 1.0];
        assert_eq!(box_loss(a, a, &w()).unwrap(), 0.0);
        // corner-touch case: L1 = 1 + 1 + 0 + 0 = 2, GIoU = -0.5
        let l = box_loss(a, [1.5, 1.5, 1.0, 1.0], &w()).unwrap();
        assert!((l - 13.0).abs() < 1e-12, "{l}");
        // doubling mu doubles the L1 term exactly
        let mut w2 = w();
        w2.mu = 10.0;
        let l2 = box_loss(a, [1.5, 1.5, 1.0, 1.0], &w2).unwrap();
        assert!((l2 - (l + 5.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_spot_values() {
        assert!(focal_loss(1.0 - 1e-9, true, &w()) < 1e-12);
        let v = focal_loss(0.5, true, &w());
        assert!((v - 2.0 * 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-10);
        assert!((v - 0.0866434).abs() < 1e-7);
        // p_t is 0.5 for either label at p = 0.5
        assert!((focal_loss(0.5, false, &w()) - v).abs() < 1e-12);
        // balanced mode reweights only the negative class
        let mut wb = w();
        wb.alpha_balanced = true;
        assert!((focal_loss(0.5, true, &wb) - v).abs() < 1e-12);
        assert!((focal_loss(0.5, false, &wb) - 3.0 * v).abs() < 1e-10);
    }

    #[test]
    fn oks_spot_values() {
        let kc = OksConstants::uniform(0.079, 1);
        let s = 0.5;
        let p = [[0.3, 0.4]];
        assert_eq!(oks_similarity(&p, &p, &[2], s, &kc).unwrap(), 1.0);
        // displacement with L1 distance exactly 2 s^2 k^2 gives exp(-1)
        let d = 2.0 * s * s * 0.079 * 0.079;
        let q = [[0.3 + d, 0.4]];
        let v = oks_similarity(&q, &p, &[2], s, &kc).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn invisible_keypoints_are_ignored() {
        let kc = OksConstants::uniform(0.079, 2);
        let gt = [[0.3, 0.4], [0.6, 0.6]];
        let hit_and_junk = [[0.3, 0.4], [99.0, -5.0]];
        let v = oks_similarity(&hit_and_junk, &gt, &[2, 0], 0.5, &kc).unwrap();
        assert_eq!(v, 1.0);
        let l = keypoint_loss(&hit_and_junk, &gt, &[2, 0], 0.5, &w(), &kc).unwrap();
        assert_eq!(l, 0.0);
        assert!(oks_similarity(&gt, &gt, &[0, 0], 0.5, &kc).is_err());
    }

    #[test]
    fn oks_is_monotone_in_distance() {
        let kc = OksConstants::uniform(0.079, 1);
        let gt = [[0.5, 0.5]];
        let mut last = 1.0;
        for step in 1..20 {
            let p = [[0.5 + step as f64 * 0.01, 0.5]];
            let v = oks_similarity(&p, &gt, &[2], 0.4, &kc).unwrap();
            assert!(v <= last && (0.0..=1.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn keypoint_loss_single_keypoint_hand_value() {
        let kc = OksConstants::uniform(0.1, 1);
        let s = 0.5;
        let d = 0.03f64;
        let gt = [[0.5, 0.5]];
        let p = [[0.5 + d, 0.5]];
        let want = 10.0 * d + 4.0 * (1.0 - (-d / (2.0 * s * s * 0.01)).exp());
        let got = keypoint_loss(&p, &gt, &[2], s, &w(), &kc).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn squared_distance_variant_changes_the_exponent_only() {
        let mut kc = OksConstants::uniform(0.1, 1);
        let s = 0.5;
        let gt = [[0.5, 0.5]];
        let p = [[0.53, 0.54]];
        let l1 = 0.03 + 0.04;
        let sq = 0.03f64.powi(2) + 0.04f64.powi(2);
        let denom = 2.0 * s * s * 0.01;
        let a = oks_similarity(&p, &gt, &[2], s, &kc).unwrap();
        assert!((a - (-l1 / denom).exp()).abs() < 1e-12);
        kc.squared_distance = true;
        let b = oks_similarity(&p, &gt, &[2], s, &kc).unwrap();
        assert!((b - (-sq / denom).exp()).abs() < 1e-12);
    }

    fn toy_instance(score: f64, dx: f64) -> PoseInstance {
        PoseInstance::new(
            score,
            [0.5 + dx, 0.5, 0.4, 0.4],
            vec![[0.4 + dx, 0.4], [0.6 + dx, 0.6]],
        )
    }

    #[test]
    fn match_cost_is_small_for_perfect_and_monotone_in_offset() {
        let kc = OksConstants::uniform(0.079, 2);
        let gt = toy_instance(1.0, 0.0);
        let perfect = toy_instance(1.0 - 1e-9, 0.0);
        assert!(match_cost(&perfect, &gt, &w(), &kc).unwrap() < 1e-6);
        let near = match_cost(&toy_instance(0.9, 0.01), &gt, &w(), &kc).unwrap();
        let far = match_cost(&toy_instance(0.9, 0.05), &gt, &w(), &kc).unwrap();
        assert!(near < far);
    }

    #[test]
    fn total_loss_perfect_predictions_vanish() {
        let kc = OksConstants::uniform(0.079, 2);
        let gts = vec![toy_instance(1.0, 0.0), toy_instance(1.0, 0.15)];
        let preds = vec![toy_instance(1.0 - 1e-9, 0.0), toy_instance(1.0 - 1e-9, 0.15)];
        let b = total_loss(&preds, &gts, &w(), &kc).unwrap();
        assert!(b.total < 1e-6, "{b:?}");
        assert_eq!(b.matched, 2);
    }

    #[test]
    fn empty_ground_truth_leaves_only_negative_focal() {
        let kc = OksConstants::uniform(0.079, 2);
        let preds = vec![toy_instance(0.3, 0.0), toy_instance(0.7, 0.1)];
        let b = total_loss(&preds, &[], &w(), &kc).unwrap();
        assert_eq!((b.l_h, b.l_k, b.matched), (0.0, 0.0, 0));
        let want = focal_loss(0.3, false, &w()) + focal_loss(0.7, false, &w());
        assert!((b.l_c - want).abs() < 1e-12);
        assert!((b.total - want).abs() < 1e-12);
    }

    #[test]
    fn two_pred_one_gt_composes_matched_and_unmatched_terms() {
        let kc = OksConstants::uniform(0.079, 2);
        let gt = toy_instance(1.0, 0.0);
        let close = toy_instance(0.8, 0.01);
        let far = toy_instance(0.4, 0.3);
        let b = total_loss(&[close.clone(), far.clone()], &[gt.clone()], &w(), &kc).unwrap();
        assert_eq!(b.matched, 1);
        let l_h = box_loss(close.box_cxcywh, gt.box_cxcywh, &w()).unwrap();
        let l_k = keypoint_loss(
            &close.keypoints,
            &gt.keypoints,
            &gt.visibility,
            gt.scale(),
            &w(),
            &kc,
        )
        .unwrap();
        let l_c = focal_loss(0.8, true, &w()) + focal_loss(0.4, false, &w());
        assert!((b.total - (l_h + l_c + l_k)).abs() < 1e-10, "{b:?}");
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn pred_vars<'t>(tape: &'t Tape, inst: &PoseInstance) -> PredVars<'t> {
        let flat: Vec<f64> = inst.keypoints.iter().flatten().copied().collect();
        PredVars {
            logit: tape.leaf(Tensor::new(vec![1], vec![logit(inst.score)])),
            box_cxcywh: tape.leaf(Tensor::new(vec![4], inst.box_cxcywh.to_vec())),
            keypoints: tape.leaf(Tensor::new(vec![inst.keypoints.len(), 2], flat)),
        }
    }

    #[test]
    fn tape_total_agrees_with_plain_total() {
        let kc = OksConstants::uniform(0.079, 2);
        let gts = vec![toy_instance(1.0, 0.0), toy_instance(1.0, 0.2)];
        let preds = vec![
            toy_instance(0.8, 0.03),
            toy_instance(0.6, 0.22),
            toy_instance(0.3, -0.1),
        ];
        let plain = total_loss(&preds, &gts, &w(), &kc).unwrap();
        let tape = Tape::new();
        let pv: Vec<PredVars> = preds.iter().map(|p| pred_vars(&tape, p)).collect();
        let (total, breakdown, a) = total_loss_vars(&tape, &pv, &gts, &w(), &kc).unwrap();
        assert!((total.value().data[0] - plain.total).abs() < 1e-10);
        assert!((breakdown.l_h - plain.l_h).abs() < 1e-10);
        assert!((breakdown.l_c - plain.l_c).abs() < 1e-10);
        assert!((breakdown.l_k - plain.l_k).abs() < 1e-10);
        assert_eq!(a.pairs.len(), 2);
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        // d(total)/d(logits, boxes, keypoints) with the matching held fixed;
        // all components differ so no |x| or min/max kink sits at zero
        let kc = OksConstants::uniform(0.079, 2);
        let gts = vec![PoseInstance::new(
            1.0,
            [0.5, 0.45, 0.4, 0.35],
            vec![[0.42, 0.41], [0.61, 0.58]],
        )];
        let preds = vec![
            PoseInstance::new(0.8, [0.53, 0.49, 0.37, 0.41], vec![[0.45, 0.44], [0.58, 0.62]]),
            PoseInstance::new(0.4, [0.81, 0.77, 0.21, 0.27], vec![[0.78, 0.72], [0.88, 0.83]]),
        ];

        let tape = Tape::new();
        let pv: Vec<PredVars> = preds.iter().map(|p| pred_vars(&tape, p)).collect();
        let (total, _, assignment) = total_loss_vars(&tape, &pv, &gts, &w(), &kc).unwrap();
        let grads = tape.backward(total);

        // FD evaluation that reuses the frozen assignment
        let eval = |ps: &[PoseInstance]| -> f64 {
            let (mut l_h, mut l_c, mut l_k) = (0.0, 0.0, 0.0);
            for &(i, j) in &assignment.pairs {
                l_h += box_loss(ps[i].box_cxcywh, gts[j].box_cxcywh, &w()).unwrap();
                l_c += focal_loss(ps[i].score, true, &w());
                l_k += keypoint_loss(
                    &ps[i].keypoints,
                    &gts[j].keypoints,
                    &gts[j].visibility,
                    gts[j].scale(),
                    &w(),
                    &kc,
                )
                .unwrap();
            }
            for &i in &assignment.unmatched_rows {
                l_c += focal_loss(ps[i].score, false, &w());
            }
            l_h + l_c + l_k
        };

        let step = 1e-6;
        for (pi, pred) in preds.iter().enumerate() {
            // logit gradient: chain through p = sigmoid(logit) numerically
            let g_logit = grads.wrt(pv[pi].logit).data[0];
            let l0 = logit(pred.score);
            let mut plus = preds.clone();
            plus[pi].score = sigmoid_scalar(l0 + step);
            let mut minus = preds.clone();
            minus[pi].score = sigmoid_scalar(l0 - step);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(
                (fd - g_logit).abs() / fd.abs().max(g_logit.abs()).max(1e-6) < 1e-3,
                "logit {pi}: {fd} vs {g_logit}"
            );

            let g_box = grads.wrt(pv[pi].box_cxcywh);
            for k in 0..4 {
                let mut plus = preds.clone();
                plus[pi].box_cxcywh[k] += step;
                let mut minus = preds.clone();
                minus[pi].box_cxcywh[k] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let g = g_box.data[k];
                assert!(
                    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-3,
                    "box {pi}[{k}]: {fd} vs {g}"
                );
            }

            let g_kp = grads.wrt(pv[pi].keypoints);
            for k in 0..4 {
                let mut plus = preds.clone();
                plus[pi].keypoints[k / 2][k % 2] += step;
                let mut minus = preds.clone();
                minus[pi].keypoints[k / 2][k % 2] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let g = g_kp.data[k];
                assert!(
                    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-3,
                    "kp {pi}[{k}]: {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn weights_validate() {
        assert!(w().validate().is_ok());
        let mut bad = w();
        bad.mu = -1.0;
        assert!(bad.validate().is_err());
        assert!(OksConstants::uniform(0.079, 3).validate().is_ok());
        assert!(OksConstants::uniform(0.0, 3).validate().is_err());
    }
}
