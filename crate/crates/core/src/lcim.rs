//! Convolutional autoencoder backbone, the per-scale injection adapters,
//! and their training loop.
//!
//! The backbone is a small strided conv encoder/decoder pair standing in for
//! a large pretrained autoencoder: it is trained once on well-lit images,
//! then frozen. The adapters map multi-scale encoder features of a
//! high-pass-filtered dark reference into additive injections at the end of
//! each decoder block:
//!
//! ```text
//! out = head(d4(d3(d2(d1(z0) + f1) + f2) + f3) + f4)
//! ```
//!
//! so low-light texture enters the reconstruction at every scale while the
//! latent `z0` carries scene structure. Adapter training minimizes
//! `L = L_mse + lambda * L_freq` with the backbone frozen.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::freq;
use crate::image_data::Image;
use crate::nn::{self, BoundParams};
use crate::params::{ParamSet, TrainConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Checkpoint architecture tag for this backbone + adapter stack.
pub const ARCH_DESCRIPTOR: &str = "lcim-adapters-v2 enc(16,32,64,64) dec(64,32,16,16)";

/// Encoder block output channels, shallow to deep.
pub const ENC_WIDTHS: [usize; 4] = [16, 32, 64, 64];
/// Channels of the bottleneck latent (1/16 scale).
pub const LATENT_CHANNELS: usize = 64;
/// Decoder block output channels, deep to shallow.
pub const DEC_WIDTHS: [usize; 4] = [64, 32, 16, 16];

/// Fresh parameter set: encoder, decoder, and adapters, all trainable,
/// biases zero. `channels` is the image channel count (3 for color).
pub fn init_params(seed: u64, channels: usize) -> ParamSet {
    let mut rng = stream(seed, Stream::Lcim);
    let mut ps = ParamSet::new();
    nn::add_conv(&mut ps, &mut rng, "enc1", ENC_WIDTHS[0], channels, 3, true);
    nn::add_conv(&mut ps, &mut rng, "enc2", ENC_WIDTHS[1], ENC_WIDTHS[0], 3, true);
    nn::add_conv(&mut ps, &mut rng, "enc3", ENC_WIDTHS[2], ENC_WIDTHS[1], 3, true);
    nn::add_conv(&mut ps, &mut rng, "enc4", ENC_WIDTHS[3], ENC_WIDTHS[2], 3, true);
    nn::add_conv(&mut ps, &mut rng, "dec1", DEC_WIDTHS[0], LATENT_CHANNELS, 3, true);
    nn::add_conv(&mut ps, &mut rng, "dec2", DEC_WIDTHS[1], DEC_WIDTHS[0], 3, true);
    nn::add_conv(&mut ps, &mut rng, "dec3", DEC_WIDTHS[2], DEC_WIDTHS[1], 3, true);
    nn::add_conv(&mut ps, &mut rng, "dec4", DEC_WIDTHS[3], DEC_WIDTHS[2], 3, true);
    nn::add_conv(&mut ps, &mut rng, "head", channels, DEC_WIDTHS[3], 3, true);
    // adapters pair each injection site with the encoder level one octave
    // deeper, so a x2 nearest upsample puts every feature at site scale:
    // z4 (1/16) -> d1 (1/8), z3 (1/8) -> d2 (1/4), z2 (1/4) -> d3 (1/2),
    // z1 (1/2) -> d4 (1/1). The shallowest level feeds the full-resolution
    // site, which is what lets fine noise texture reach the output.
    nn::add_conv(&mut ps, &mut rng, "adapter1", DEC_WIDTHS[0], ENC_WIDTHS[3], 3, true);
    nn::add_conv(&mut ps, &mut rng, "adapter2", DEC_WIDTHS[1], ENC_WIDTHS[2], 3, true);
    nn::add_conv(&mut ps, &mut rng, "adapter3", DEC_WIDTHS[2], ENC_WIDTHS[1], 3, true);
    nn::add_conv(&mut ps, &mut rng, "adapter4", DEC_WIDTHS[3], ENC_WIDTHS[0], 3, true);
    ps
}

fn is_adapter(name: &str) -> bool {
    name.starts_with("adapter")
}

/// Freeze encoder/decoder/head; leave adapters trainable.
pub fn freeze_backbone(params: &mut ParamSet) {
    params.set_trainable_where(|n| !is_adapter(n), false);
    params.set_trainable_where(is_adapter, true);
}

/// True when every non-adapter tensor is frozen and the adapters are not.
pub fn backbone_frozen(params: &ParamSet) -> bool {
    params
        .iter()
        .all(|(n, p)| p.trainable == is_adapter(n))
}

fn check_image_dims(img: &Image) -> Result<()> {
    if img.height % 16 != 0 || img.width % 16 != 0 || img.height == 0 || img.width == 0 {
        return Err(Error::invalid(
            "image dims",
            format!(
                "{}x{} must be positive multiples of 16",
                img.height, img.width
            ),
        ));
    }
    Ok(())
}

// ---- tape-level forwards ----

/// All four encoder block outputs for a `[C,H,W]` input.
pub fn encode_levels<'t>(x: Var<'t>, p: &BoundParams<'t>) -> [Var<'t>; 4] {
    let z1 = nn::conv(x, p, "enc1", 2, 1).relu();
    let z2 = nn::conv(z1, p, "enc2", 2, 1).relu();
    let z3 = nn::conv(z2, p, "enc3", 2, 1).relu();
    let z4 = nn::conv(z3, p, "enc4", 2, 1).relu();
    [z1, z2, z3, z4]
}

/// Adapter outputs, one per encoder level, resampled to the matching
/// decoder injection site (deepest level to the coarsest site, shallowest
/// to the full-resolution site).
pub fn adapter_outputs<'t>(z: &[Var<'t>; 4], p: &BoundParams<'t>) -> [Var<'t>; 4] {
    let f1 = nn::conv(z[3].upsample_nearest(2), p, "adapter1", 1, 1);
    let f2 = nn::conv(z[2].upsample_nearest(2), p, "adapter2", 1, 1);
    let f3 = nn::conv(z[1].upsample_nearest(2), p, "adapter3", 1, 1);
    let f4 = nn::conv(z[0].upsample_nearest(2), p, "adapter4", 1, 1);
    [f1, f2, f3, f4]
}

/// Decode a latent, adding the injection `f_i` after each decoder block;
/// output is clamped to `[0, 1]`.
pub fn decode_inject<'t>(z0: Var<'t>, f: Option<&[Var<'t>; 4]>, p: &BoundParams<'t>) -> Var<'t> {
    let mut h = nn::conv(z0.upsample_nearest(2), p, "dec1", 1, 1).relu();
    if let Some(f) = f {
        h = h.add(f[0]);
    }
    h = nn::conv(h.upsample_nearest(2), p, "dec2", 1, 1).relu();
    if let Some(f) = f {
        h = h.add(f[1]);
    }
    h = nn::conv(h.upsample_nearest(2), p, "dec3", 1, 1).relu();
    if let Some(f) = f {
        h = h.add(f[2]);
    }
    h = nn::conv(h.upsample_nearest(2), p, "dec4", 1, 1).relu();
    if let Some(f) = f {
        h = h.add(f[3]);
    }
    nn::conv(h, p, "head", 1, 1).clamp(0.0, 1.0)
}

// ---- plain (non-training) wrappers ----

/// Multi-scale encoder features of an image at scales 1/2, 1/4, 1/8, 1/16.
pub fn encode_multiscale(img: &Image, params: &ParamSet) -> Result<Vec<Tensor>> {
    check_image_dims(img)?;
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let x = tape.leaf(img.to_chw());
    let levels = encode_levels(x, &bound);
    Ok(levels.iter().map(|v| v.value()).collect())
}

/// Bottleneck latent (deepest encoder feature) of an image.
pub fn encode_latent(img: &Image, params: &ParamSet) -> Result<Tensor> {
    Ok(encode_multiscale(img, params)?.pop().expect("four levels"))
}

/// Expected injection shape at each site for an `height x width` image.
fn injection_shape(level: usize, height: usize, width: usize) -> Vec<usize> {
    let scale = [8, 4, 2, 1][level];
    vec![DEC_WIDTHS[level], height / scale, width / scale]
}

/// Map encoder features to injection features, one conv per level.
pub fn lcim_transform(levels: &[Tensor], params: &ParamSet) -> Result<Vec<Tensor>> {
    if levels.len() != 4 {
        return Err(Error::dim_mismatch("lcim_transform", 4usize, levels.len()));
    }
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let z: [Var; 4] = std::array::from_fn(|i| tape.leaf(levels[i].clone()));
    let f = adapter_outputs(&z, &bound);
    Ok(f.iter().map(|v| v.value()).collect())
}

/// Decode with per-block injections. `f` must hold exactly four features
/// whose dims match the injection sites.
pub fn decode_with_injection(z0: &Tensor, f: &[Tensor], params: &ParamSet) -> Result<Image> {
    if f.len() != 4 {
        return Err(Error::dim_mismatch("decode_with_injection", 4usize, f.len()));
    }
    let (height, width) = latent_image_dims(z0)?;
    for (i, fi) in f.iter().enumerate() {
        let want = injection_shape(i, height, width);
        if fi.shape != want {
            return Err(Error::InjectionMismatch {
                level: i + 1,
                expected: format!("{want:?}"),
                got: format!("{:?}", fi.shape),
            });
        }
    }
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let z0v = tape.leaf(z0.clone());
    let fv: [Var; 4] = std::array::from_fn(|i| tape.leaf(f[i].clone()));
    let out = decode_inject(z0v, Some(&fv), &bound);
    Ok(Image::from_chw(&out.value()))
}

/// Decode a latent without injections.
pub fn decode_plain(z0: &Tensor, params: &ParamSet) -> Result<Image> {
    latent_image_dims(z0)?;
    let tape = Tape::new();
    let bound = nn::bind(&tape, params);
    let z0v = tape.leaf(z0.clone());
    let out = decode_inject(z0v, None, &bound);
    Ok(Image::from_chw(&out.value()))
}

fn latent_image_dims(z0: &Tensor) -> Result<(usize, usize)> {
    if z0.shape.len() != 3 || z0.shape[0] != LATENT_CHANNELS {
        return Err(Error::dim_mismatch(
            "latent",
            format!("[{LATENT_CHANNELS}, h, w]"),
            format!("{:?}", z0.shape),
        ));
    }
    Ok((z0.shape[1] * 16, z0.shape[2] * 16))
}

/// Composite reconstruction loss `(total, l_mse, l_freq)` where
/// `total = l_mse + lambda_freq * l_freq`.
pub fn lcim_loss(target: &Image, recon: &Image, lambda_freq: f64) -> Result<(f64, f64, f64)> {
    if (target.height, target.width, target.channels)
        != (recon.height, recon.width, recon.channels)
    {
        return Err(Error::dim_mismatch(
            "lcim_loss",
            format!("{}x{}x{}", target.height, target.width, target.channels),
            format!("{}x{}x{}", recon.height, recon.width, recon.channels),
        ));
    }
    let l_mse = target
        .data
        .iter()
        .zip(recon.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / target.data.len() as f64;
    let l_freq = freq::frequency_loss(recon, target)?;
    Ok((l_mse + lambda_freq * l_freq, l_mse, l_freq))
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub total: f64,
    pub l_mse: f64,
    pub l_freq: f64,
    pub lr: f64,
}

/// Tape version of the composite loss against a fixed target.
/// `target_mags` are the per-channel magnitude spectra of the target and
/// `wplane` the spectral weight plane, both precomputed.
fn loss_vars<'t>(
    tape: &'t Tape,
    recon: Var<'t>,
    target: &Tensor,
    target_mags: &[Tensor],
    wplane: &Tensor,
    lambda_freq: f64,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let shape = recon.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let t = tape.leaf(target.clone());
    let d = recon.sub(t);
    let l_mse = d.mul(d).mean();
    let flat = recon.reshape(vec![c, h * w]);
    let mut acc: Option<Var> = None;
    for ci in 0..c {
        let plane = flat.gather_rows(&[ci]).reshape(vec![h, w]);
        let mag = plane.spectrum_mag();
        let dd = mag.sub(tape.leaf(target_mags[ci].clone()));
        let term = dd.mul(dd).mul(tape.leaf(wplane.clone())).sum();
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    let l_freq = acc.expect("at least one channel").scale(1.0 / (c * h * w) as f64);
    let total = l_mse.add(l_freq.scale(lambda_freq));
    (total, l_mse, l_freq)
}

/// Graph form of [`lcim_loss`] against a plain target image. `recon` must
/// be a `C x H x W` tensor on the tape (as produced by [`decode_inject`]);
/// the target's magnitude spectra and the weight plane are computed here.
pub fn loss_graph<'t>(
    tape: &'t Tape,
    recon: Var<'t>,
    target: &Image,
    lambda_freq: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let mags: Vec<Tensor> = (0..target.channels)
        .map(|c| Ok(freq::spectrum(&target.channel_plane(c))?.magnitude()))
        .collect::<Result<_>>()?;
    let wplane = Tensor::new(
        vec![target.height, target.width],
        freq::weight_plane(target.height, target.width),
    );
    Ok(loss_vars(
        tape,
        recon,
        &target.to_chw(),
        &mags,
        &wplane,
        lambda_freq,
    ))
}

/// Per-sample tensors precomputed once before adapter training (the frozen
/// encoder's outputs never change).
struct Precomp {
    z_levels: [Tensor; 4],
    z0: Tensor,
    target: Tensor,
    target_mags: Vec<Tensor>,
}

/// Train the adapters to reconstruct the given (already normalized) images.
/// The reconstruction path per sample `x` is:
/// encoder features of the high-pass + mean-corrected `x` -> adapters ->
/// decode with injection from the latent of `x`. The backbone must be
/// frozen; only adapters move.
pub fn train_lcim(
    dataset: &[Image],
    cfg: &TrainConfig,
    mut params: ParamSet,
    cutoff_radius: f64,
) -> Result<(ParamSet, Vec<HistoryRow>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("train_lcim"));
    }
    if !backbone_frozen(&params) {
        return Err(Error::NotFrozen(
            "encoder/decoder must be frozen before adapter training".into(),
        ));
    }
    for img in dataset {
        check_image_dims(img)?;
    }

    let mut pre = Vec::with_capacity(dataset.len());
    for img in dataset {
        let mask = freq::make_highpass_mask(img.height, img.width, cutoff_radius)?;
        let hp = freq::high_pass_filter(img, &mask)?;
        let dhf = freq::dhf_correct(&hp, img)?;
        let levels = encode_multiscale(&dhf, &params)?;
        let z0 = levels[3].clone();
        let target = img.to_chw();
        let target_mags: Vec<Tensor> = (0..img.channels)
            .map(|c| {
                freq::spectrum(&img.channel_plane(c))
                    .map(|s| s.magnitude())
            })
            .collect::<Result<_>>()?;
        let z_levels: [Tensor; 4] = levels.try_into().expect("four levels");
        pre.push(Precomp {
            z_levels,
            z0,
            target,
            target_mags,
        });
    }
    let wplane = Tensor::new(
        vec![dataset[0].height, dataset[0].width],
        freq::weight_plane(dataset[0].height, dataset[0].width),
    );

    let mut rng = stream(cfg.seed, Stream::Lcim);
    let mut opt = crate::params::Adam::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_mse, mut sum_freq) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let s = &pre[i];
                let tape = Tape::new();
                let bound = nn::bind(&tape, &params);
                let z: [Var; 4] = std::array::from_fn(|k| tape.leaf(s.z_levels[k].clone()));
                let f = adapter_outputs(&z, &bound);
                let recon = decode_inject(tape.leaf(s.z0.clone()), Some(&f), &bound);
                let (total, l_mse, l_freq) =
                    loss_vars(&tape, recon, &s.target, &s.target_mags, &wplane, cfg.lambda_freq);
                sum_total += total.value().data[0];
                sum_mse += l_mse.value().data[0];
                sum_freq += l_freq.value().data[0];
                let grads = tape.backward(total);
                bound.accumulate_trainable_grads(&params, &grads, &mut acc);
            }
            nn::scale_grads(&mut acc, batch.len() as f64);
            opt.step(&mut params, &acc, lr)?;
        }
        let n = dataset.len() as f64;
        history.push(HistoryRow {
            epoch: epoch + 1,
            total: sum_total / n,
            l_mse: sum_mse / n,
            l_freq: sum_freq / n,
            lr,
        });
    }
    Ok((params, history))
}

/// Pretrain the encoder/decoder as a plain autoencoder (no injection, MSE
/// only). On return the backbone is frozen and the adapters are left
/// trainable, ready for [`train_lcim`].
pub fn pretrain_backbone(
    dataset: &[Image],
    cfg: &TrainConfig,
    params: &mut ParamSet,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("pretrain_backbone"));
    }
    for img in dataset {
        check_image_dims(img)?;
    }
    params.set_trainable_where(is_adapter, false);
    params.set_trainable_where(|n| !is_adapter(n), true);

    let mut rng = stream(cfg.seed, Stream::Lcim);
    let mut opt = crate::params::Adam::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let targets: Vec<Tensor> = dataset.iter().map(Image::to_chw).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum_mse = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let tape = Tape::new();
                let bound = nn::bind(&tape, params);
                let x = tape.leaf(targets[i].clone());
                let z = encode_levels(x, &bound);
                let recon = decode_inject(z[3], None, &bound);
                let d = recon.sub(x);
                let l_mse = d.mul(d).mean();
                sum_mse += l_mse.value().data[0];
                let grads = tape.backward(l_mse);
                bound.accumulate_trainable_grads(params, &grads, &mut acc);
            }
            nn::scale_grads(&mut acc, batch.len() as f64);
            opt.step(params, &acc, lr)?;
        }
        let mean = sum_mse / dataset.len() as f64;
        history.push(HistoryRow {
            epoch: epoch + 1,
            total: mean,
            l_mse: mean,
            l_freq: 0.0,
            lr,
        });
    }
    freeze_backbone(params);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_rel_err;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = StdRng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect())
    }

    #[test]
    fn multiscale_dims_follow_halving_schedule() {
        let params = init_params(1, 3);
        let img = random_image(1, 32, 32);
        let levels = encode_multiscale(&img, &params).unwrap();
        let want = [
            vec![16, 16, 16],
            vec![32, 8, 8],
            vec![64, 4, 4],
            vec![64, 2, 2],
        ];
        for (l, w) in levels.iter().zip(want.iter()) {
            assert_eq!(&l.shape, w);
        }
    }

    #[test]
    fn zero_input_gives_zero_features_with_fresh_biases() {
        let params = init_params(2, 3);
        let img = Image::zeros(32, 32, 3);
        let levels = encode_multiscale(&img, &params).unwrap();
        for l in levels {
            assert!(l.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let img = random_image(3, 32, 32);
        let a = encode_multiscale(&img, &init_params(7, 3)).unwrap();
        let b = encode_multiscale(&img, &init_params(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_has_bottleneck_shape() {
        let params = init_params(4, 3);
        let z0 = encode_latent(&random_image(4, 32, 32), &params).unwrap();
        assert_eq!(z0.shape, vec![64, 2, 2]);
    }

    #[test]
    fn non_multiple_of_16_rejected() {
        let params = init_params(5, 3);
        let img = Image::zeros(30, 32, 3);
        assert!(encode_multiscale(&img, &params).is_err());
    }

    #[test]
    fn adapter_outputs_match_injection_sites() {
        let params = init_params(6, 3);
        let img = random_image(6, 32, 32);
        let levels = encode_multiscale(&img, &params).unwrap();
        let f = lcim_transform(&levels, &params).unwrap();
        assert_eq!(f[0].shape, vec![64, 4, 4]);
        assert_eq!(f[1].shape, vec![32, 8, 8]);
        assert_eq!(f[2].shape, vec![16, 16, 16]);
        assert_eq!(f[3].shape, vec![16, 32, 32]);
    }

    #[test]
    fn fresh_adapters_are_linear() {
        // biases start at zero, so doubling the features doubles the output
        let params = init_params(7, 3);
        let img = random_image(7, 32, 32);
        let levels = encode_multiscale(&img, &params).unwrap();
        let doubled: Vec<Tensor> = levels.iter().map(|t| t.map(|v| 2.0 * v)).collect();
        let f1 = lcim_transform(&levels, &params).unwrap();
        let f2 = lcim_transform(&doubled, &params).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((2.0 * x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adapter_gradient_of_sum_of_squares_matches_fd() {
        // d(Σ f²)/d(adapter weights), spot-checked on sampled coordinates
        let params = init_params(8, 3);
        let img = random_image(8, 16, 16);
        let levels = encode_multiscale(&img, &params).unwrap();

        let tape = Tape::new();
        let bound = nn::bind(&tape, &params);
        let z: [Var; 4] = std::array::from_fn(|i| tape.leaf(levels[i].clone()));
        let f = adapter_outputs(&z, &bound);
        let loss = f
            .iter()
            .map(|v| v.mul(*v).sum())
            .reduce(|a, b| a.add(b))
            .unwrap();
        let grads = tape.backward(loss);

        let mut rng = StdRng::seed_from_u64(99);
        for name in ["adapter1.w", "adapter2.w", "adapter3.w", "adapter4.w"] {
            let analytic = grads.wrt(bound.var(name));
            let base = params.tensor(name).unwrap().clone();
            for _ in 0..10 {
                let k = rng.gen_range(0..base.len());
                let eval = |v: f64| {
                    let mut p = params.clone();
                    p.tensor_mut(name).unwrap().data[k] = v;
                    let f = lcim_transform(&levels, &p).unwrap();
                    f.iter()
                        .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
                        .sum::<f64>()
                };
                let step = 1e-6;
                let fd = (eval(base.data[k] + step) - eval(base.data[k] - step)) / (2.0 * step);
                let denom = fd.abs().max(analytic.data[k].abs()).max(1e-6);
                assert!(
                    (fd - analytic.data[k]).abs() / denom < 1e-4,
                    "{name}[{k}]: fd {fd} vs {}",
                    analytic.data[k]
                );
            }
        }
    }

    #[test]
    fn zero_injection_equals_plain_decode() {
        let params = init_params(9, 3);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..5 {
            let z0 = Tensor::new(
                vec![64, 2, 2],
                (0..256).map(|_| rng.gen::<f64>() - 0.5).collect(),
            );
            let zeros: Vec<Tensor> = (0..4)
                .map(|i| Tensor::zeros(injection_shape(i, 32, 32)))
                .collect();
            let with = decode_with_injection(&z0, &zeros, &params).unwrap();
            let plain = decode_plain(&z0, &params).unwrap();
            for (a, b) in with.data.iter().zip(plain.data.iter()) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn late_injection_perturbs_the_output() {
        let params = init_params(10, 3);
        let mut rng = StdRng::seed_from_u64(10);
        let z0 = Tensor::new(
            vec![64, 2, 2],
            (0..256).map(|_| rng.gen::<f64>()).collect(),
        );
        let mut f: Vec<Tensor> = (0..4)
            .map(|i| Tensor::zeros(injection_shape(i, 32, 32)))
            .collect();
        let base = decode_with_injection(&z0, &f, &params).unwrap();
        f[3].data[100] = 0.05;
        let bumped = decode_with_injection(&z0, &f, &params).unwrap();
        let max_delta = base
            .data
            .iter()
            .zip(bumped.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_delta > 0.0);
    }

    #[test]
    fn tiny_latent_decodes_to_full_resolution() {
        let params = init_params(11, 3);
        let z0 = Tensor::zeros(vec![64, 2, 2]);
        let img = decode_plain(&z0, &params).unwrap();
        assert_eq!((img.height, img.width, img.channels), (32, 32, 3));
    }

    #[test]
    fn injection_mismatch_reports_level() {
        let params = init_params(12, 3);
        let z0 = Tensor::zeros(vec![64, 2, 2]);
        let mut f: Vec<Tensor> = (0..4)
            .map(|i| Tensor::zeros(injection_shape(i, 32, 32)))
            .collect();
        f[2] = Tensor::zeros(vec![16, 8, 8]); // wrong dims at level 3
        let err = decode_with_injection(&z0, &f, &params).unwrap_err();
        assert!(err.to_string().contains("level 3"), "{err}");
    }

    #[test]
    fn loss_components_compose() {
        let a = random_image(13, 8, 8);
        let b = random_image(14, 8, 8);
        let (zero_total, zero_mse, zero_freq) = lcim_loss(&a, &a, 4e-4).unwrap();
        assert_eq!((zero_total, zero_mse, zero_freq), (0.0, 0.0, 0.0));

        let (t0, m0, _) = lcim_loss(&a, &b, 0.0).unwrap();
        assert_eq!(t0, m0);

        let (total, l_mse, l_freq) = lcim_loss(&a, &b, 4e-4).unwrap();
        let mse_direct = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.data.len() as f64;
        let freq_direct = freq::frequency_loss(&b, &a).unwrap();
        assert!((l_mse - mse_direct).abs() < 1e-15);
        assert!((l_freq - freq_direct).abs() < 1e-12);
        assert!((total - (mse_direct + 4e-4 * freq_direct)).abs() < 1e-10);
    }

    #[test]
    fn tape_loss_agrees_with_plain_loss() {
        let target = random_image(15, 16, 16);
        let recon = random_image(16, 16, 16);
        let (want_total, want_mse, want_freq) = lcim_loss(&target, &recon, 4e-4).unwrap();
        let tape = Tape::new();
        let r = tape.leaf(recon.to_chw());
        let mags: Vec<Tensor> = (0..3)
            .map(|c| freq::spectrum(&target.channel_plane(c)).unwrap().magnitude())
            .collect();
        let wplane = Tensor::new(vec![16, 16], freq::weight_plane(16, 16));
        let (total, l_mse, l_freq) = loss_vars(&tape, r, &target.to_chw(), &mags, &wplane, 4e-4);
        assert!((total.value().data[0] - want_total).abs() < 1e-12);
        assert!((l_mse.value().data[0] - want_mse).abs() < 1e-12);
        assert!((l_freq.value().data[0] - want_freq).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_adapter_gradient_matches_fd() {
        // full reconstruction loss on one 16x16 image, d(total)/d(adapter2.w)
        let mut params = init_params(17, 3);
        freeze_backbone(&mut params);
        let img = random_image(17, 16, 16);
        let mask = freq::make_highpass_mask(16, 16, 0.1).unwrap();
        let dhf = freq::dhf_correct(&freq::high_pass_filter(&img, &mask).unwrap(), &img).unwrap();
        let levels = encode_multiscale(&dhf, &params).unwrap();
        let z0 = levels[3].clone();
        let mags: Vec<Tensor> = (0..3)
            .map(|c| freq::spectrum(&img.channel_plane(c)).unwrap().magnitude())
            .collect();
        let wplane = Tensor::new(vec![16, 16], freq::weight_plane(16, 16));

        let forward = |p: &ParamSet| -> f64 {
            let f = lcim_transform(&levels, p).unwrap();
            let recon = decode_with_injection(&z0, &f, p).unwrap();
            lcim_loss(&img, &recon, 4e-4).unwrap().0
        };

        let tape = Tape::new();
        let bound = nn::bind(&tape, &params);
        let z: [Var; 4] = std::array::from_fn(|i| tape.leaf(levels[i].clone()));
        let f = adapter_outputs(&z, &bound);
        let recon = decode_inject(tape.leaf(z0.clone()), Some(&f), &bound);
        let (total, _, _) = loss_vars(&tape, recon, &img.to_chw(), &mags, &wplane, 4e-4);
        let grads = tape.backward(total);

        let mut rng = StdRng::seed_from_u64(55);
        let name = "adapter2.w";
        let analytic = grads.wrt(bound.var(name));
        let base = params.tensor(name).unwrap().clone();
        let mut checked = Vec::new();
        for _ in 0..12 {
            let k = rng.gen_range(0..base.len());
            let step = 1e-6;
            let mut p = params.clone();
            p.tensor_mut(name).unwrap().data[k] = base.data[k] + step;
            let fp = forward(&p);
            p.tensor_mut(name).unwrap().data[k] = base.data[k] - step;
            let fm = forward(&p);
            checked.push(((fp - fm) / (2.0 * step), analytic.data[k]));
        }
        let (fd, an): (Vec<f64>, Vec<f64>) = checked.into_iter().unzip();
        let err = max_rel_err(&fd, &an, 1e-8);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn training_respects_freeze_and_reproduces() {
        let mut params = init_params(18, 3);
        freeze_backbone(&mut params);
        let data: Vec<Image> = (0..4).map(|i| random_image(100 + i, 16, 16)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            lr_drop_epoch: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let frozen_before: Vec<Tensor> = params
            .iter()
            .filter(|(n, _)| !is_adapter(n))
            .map(|(_, p)| p.tensor.clone())
            .collect();
        let (trained, hist) = train_lcim(&data, &cfg, params.clone(), 0.1).unwrap();
        let frozen_after: Vec<Tensor> = trained
            .iter()
            .filter(|(n, _)| !is_adapter(n))
            .map(|(_, p)| p.tensor.clone())
            .collect();
        assert_eq!(frozen_before, frozen_after, "backbone must not move");
        assert_eq!(hist.len(), 3);
        assert!(hist.iter().all(|r| r.total.is_finite()));

        let (_, hist2) = train_lcim(&data, &cfg, params, 0.1).unwrap();
        assert_eq!(hist, hist2, "same seed, same history");
    }

    #[test]
    fn training_rejects_unfrozen_backbone_and_empty_data() {
        let params = init_params(19, 3); // everything still trainable
        let data = vec![random_image(1, 16, 16)];
        let cfg = TrainConfig {
            epochs: 1,
            lr_drop_epoch: 1,
            ..TrainConfig::default()
        };
        assert!(train_lcim(&data, &cfg, params.clone(), 0.1).is_err());
        let mut frozen = params;
        freeze_backbone(&mut frozen);
        assert!(train_lcim(&[], &cfg, frozen, 0.1).is_err());
    }

    #[test]
    fn pretraining_freezes_backbone_on_return() {
        let mut params = init_params(20, 3);
        let data: Vec<Image> = (0..2).map(|i| random_image(200 + i, 16, 16)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            lr_drop_epoch: 1,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let hist = pretrain_backbone(&data, &cfg, &mut params).unwrap();
        assert_eq!(hist.len(), 2);
        assert!(backbone_frozen(&params));
    }
}
