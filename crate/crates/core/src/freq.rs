//! Frequency-domain operations and channel statistics.
//!
//! Everything closed-form lives here: the 2-D FFT wrapper with centered
//! ordering, high-pass masking, the mean-restoring correction that follows
//! high-pass extraction, adaptive intensity normalization (plus the
//! alternative normalization strategies kept for ablations), the weighted
//! spectral loss, channel mean/std alignment, and histogram matching.
//!
//! Spectra use CENTERED ordering throughout: the DC coefficient sits at
//! index `(floor(M/2), floor(N/2))` and the highest frequencies at the array
//! corners. The spectral weight `W(u, v)` is defined on this ordering so DC
//! receives weight 0 and high frequencies up to 2.

use crate::error::{Error, Result};
use crate::image_data::Image;
use crate::tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use std::cell::RefCell;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2-D FFT (rows then columns). `Forward` is the unnormalized
/// e^{-2πi} transform; `Inverse` is unnormalized e^{+2πi} — divide by `h·w`
/// yourself when a true inverse is wanted.
fn fft2_inplace(data: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    debug_assert_eq!(data.len(), h * w);
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = planner.plan_fft(w, direction);
        let col_fft = planner.plan_fft(h, direction);
        drop(planner);
        for r in 0..h {
            row_fft.process(&mut data[r * w..(r + 1) * w]);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = data[r * w + c];
            }
            col_fft.process(&mut col);
            for r in 0..h {
                data[r * w + c] = col[r];
            }
        }
    });
}

/// Map a centered index to its unshifted position along an axis of length `n`.
fn uncentered(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

/// Move an unshifted coefficient grid into centered ordering.
fn shift_to_center(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] = data[uncentered(u, h) * w + uncentered(v, w)];
        }
    }
    out
}

/// Move a centered coefficient grid back to unshifted ordering.
fn shift_from_center(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            out[uncentered(u, h) * w + uncentered(v, w)] = data[u * w + v];
        }
    }
    out
}

/// Forward transform of a real plane, returned in centered ordering
/// (unnormalized coefficients).
pub(crate) fn fft2_centered(plane: &Tensor) -> Vec<Complex64> {
    let (h, w) = (plane.shape[0], plane.shape[1]);
    let mut buf: Vec<Complex64> = plane.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, FftDirection::Forward);
    shift_to_center(&buf, h, w)
}

/// Unnormalized e^{+2πi} transform of a centered coefficient grid. This is
/// the adjoint of [`fft2_centered`], used by gradient computations; divide by
/// `h·w` to obtain the actual inverse.
pub(crate) fn ifft2_unnormalized_from_centered(
    coeffs: &[Complex64],
    h: usize,
    w: usize,
) -> Vec<Complex64> {
    let mut buf = shift_from_center(coeffs, h, w);
    fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
    buf
}

/// Complex 2-D spectrum of one channel, stored in centered ordering.
#[derive(Debug, Clone)]
pub struct SpectrumField {
    pub height: usize,
    pub width: usize,
    /// Row-major centered coefficients; DC at `(height/2, width/2)`.
    pub coeffs: Vec<Complex64>,
}

impl SpectrumField {
    /// Elementwise modulus as an H x W plane.
    pub fn magnitude(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.coeffs.iter().map(|c| c.norm()).collect(),
        )
    }

    /// Multiply coefficients by a real mask of equal dims.
    pub fn apply_mask(&self, mask: &SpectralMask) -> Result<SpectrumField> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::dim_mismatch(
                "apply_mask",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", mask.height, mask.width),
            ));
        }
        Ok(SpectrumField {
            height: self.height,
            width: self.width,
            coeffs: self
                .coeffs
                .iter()
                .zip(mask.weights.iter())
                .map(|(c, &m)| c * m)
                .collect(),
        })
    }

    /// Inverse transform back to a real plane. The imaginary residue of a
    /// (conjugate-symmetric) spectrum is below 1e-6 and is discarded.
    pub fn inverse(&self) -> Tensor {
        let buf = ifft2_unnormalized_from_centered(&self.coeffs, self.height, self.width);
        let scale = 1.0 / (self.height * self.width) as f64;
        Tensor::new(
            vec![self.height, self.width],
            buf.iter().map(|c| c.re * scale).collect(),
        )
    }
}

/// Forward 2-D transform of one real channel with centered ordering.
pub fn spectrum(plane: &Tensor) -> Result<SpectrumField> {
    if plane.shape.len() != 2 {
        return Err(Error::dim_mismatch(
            "spectrum",
            "2-D plane",
            format!("{:?}", plane.shape),
        ));
    }
    let (h, w) = (plane.shape[0], plane.shape[1]);
    if h < 2 || w < 2 {
        return Err(Error::invalid("spectrum dims", format!("{h}x{w} < 2x2")));
    }
    if !plane.all_finite() {
        return Err(Error::NonFinite("spectrum input"));
    }
    Ok(SpectrumField {
        height: h,
        width: w,
        coeffs: fft2_centered(plane),
    })
}

/// Binary high-pass mask in centered ordering: 0 within `cutoff_radius`
/// (a fraction of `floor(min(M,N)/2)` frequency bins) of the DC bin,
/// 1 outside. Radius 0 removes exactly the DC bin.
#[derive(Debug, Clone)]
pub struct SpectralMask {
    pub height: usize,
    pub width: usize,
    pub cutoff_radius: f64,
    /// Row-major weights in {0, 1}.
    pub weights: Vec<f64>,
}

pub fn make_highpass_mask(m: usize, n: usize, cutoff_radius: f64) -> Result<SpectralMask> {
    if m < 2 || n < 2 {
        return Err(Error::invalid("mask dims", format!("{m}x{n} < 2x2")));
    }
    if cutoff_radius < 0.0 || !cutoff_radius.is_finite() {
        return Err(Error::invalid(
            "cutoff_radius",
            format!("{cutoff_radius} must be finite and >= 0"),
        ));
    }
    let (cu, cv) = (m / 2, n / 2);
    let r = cutoff_radius * (m.min(n) / 2) as f64;
    let r2 = r * r;
    let mut weights = vec![1.0; m * n];
    for u in 0..m {
        for v in 0..n {
            let du = u as f64 - cu as f64;
            let dv = v as f64 - cv as f64;
            if du * du + dv * dv <= r2 {
                weights[u * n + v] = 0.0;
            }
        }
    }
    Ok(SpectralMask {
        height: m,
        width: n,
        cutoff_radius,
        weights,
    })
}

/// High-pass filter every channel: transform, mask, inverse. The output is
/// NOT clipped — values may leave `[0, 1]`; the following mean correction
/// handles re-centering before any clip.
pub fn high_pass_filter(image: &Image, mask: &SpectralMask) -> Result<Image> {
    if mask.height != image.height || mask.width != image.width {
        return Err(Error::dim_mismatch(
            "high_pass_filter",
            format!("{}x{}", image.height, image.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let mut out = Image::zeros(image.height, image.width, image.channels);
    for c in 0..image.channels {
        let filtered = spectrum(&image.channel_plane(c))?.apply_mask(mask)?.inverse();
        out.set_channel_plane(c, &filtered);
    }
    Ok(out)
}

/// Add, per channel, the constant that moves the high-pass output's global
/// channel mean onto the reference's. No clipping — see [`dhf_correct`].
pub fn dhf_shift(i_hp: &Image, i_ref: &Image) -> Result<Image> {
    if (i_hp.height, i_hp.width, i_hp.channels) != (i_ref.height, i_ref.width, i_ref.channels) {
        return Err(Error::dim_mismatch(
            "dhf_correct",
            format!("{}x{}x{}", i_ref.height, i_ref.width, i_ref.channels),
            format!("{}x{}x{}", i_hp.height, i_hp.width, i_hp.channels),
        ));
    }
    let mut out = i_hp.clone();
    for c in 0..out.channels {
        let shift = i_ref.channel_mean(c) - i_hp.channel_mean(c);
        for y in 0..out.height {
            for x in 0..out.width {
                let v = out.get(y, x, c);
                out.set(y, x, c, v + shift);
            }
        }
    }
    Ok(out)
}

/// Mean-restoring correction after high-pass extraction: shift each channel
/// so its mean matches the reference's, then clip to `[0, 1]`. Compared to
/// clipping the high-pass output directly, far fewer pixels die at 0 because
/// the signal is re-centered at the reference brightness first.
pub fn dhf_correct(i_hp: &Image, i_ref: &Image) -> Result<Image> {
    let mut out = dhf_shift(i_hp, i_ref)?;
    out.clip_count();
    Ok(out)
}

/// Target global mean used by adaptive intensity normalization: the mean
/// intensity of ImageNet across all channels.
pub const INTENSITY_TARGET: f64 = 0.449;

/// Rescale the whole image by the single factor `delta / global_mean`, then
/// clip. One cross-channel scalar preserves inter-channel ratios (no color
/// shift); an all-black input has no defined factor and is rejected.
pub fn ain_normalize(i_ll: &Image, delta: f64) -> Result<Image> {
    let mu = i_ll.mean();
    if mu <= 0.0 {
        return Err(Error::invalid(
            "ain_normalize input",
            format!("global mean {mu} must be > 0 (all-black image?)"),
        ));
    }
    let factor = delta / mu;
    let mut out = i_ll.map_pixels(|v| v * factor);
    out.clip_count();
    Ok(out)
}

/// Input normalization strategies. `Adaptive` is the default; the others
/// exist for ablation comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizationMode {
    /// Single content-aware factor `delta / global_mean` (the default).
    Adaptive { delta: f64 },
    /// Feed the image through unchanged.
    Direct,
    /// Global z-score to target statistics:
    /// `out = (sigma_t / sigma) * (I - mu) + mu_t`.
    ZScore { target_mean: f64, target_std: f64 },
    /// One dataset-wide constant factor `I * k`.
    FixedFactor { k: f64 },
    /// Per-channel rescaling of each channel mean onto a target triple
    /// (breaks inter-channel ratios, kept for comparison).
    PerChannel,
}

impl Default for NormalizationMode {
    fn default() -> Self {
        NormalizationMode::Adaptive {
            delta: INTENSITY_TARGET,
        }
    }
}

/// Per-channel targets for [`NormalizationMode::PerChannel`] (the standard
/// ImageNet channel means).
pub const PER_CHANNEL_TARGETS: [f64; 3] = [0.485, 0.456, 0.406];

/// Default target std for [`NormalizationMode::ZScore`] (mean of the
/// standard ImageNet channel stds 0.229/0.224/0.225).
pub const ZSCORE_TARGET_STD: f64 = 0.226;

/// Apply the selected normalization strategy; every variant clips to [0, 1].
pub fn normalize_input(img: &Image, mode: NormalizationMode) -> Result<Image> {
    match mode {
        NormalizationMode::Adaptive { delta } => ain_normalize(img, delta),
        NormalizationMode::Direct => Ok(img.clone()),
        NormalizationMode::ZScore {
            target_mean,
            target_std,
        } => {
            let mu = img.mean();
            let n = img.data.len() as f64;
            let var = img.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sigma = var.sqrt();
            let mut out = if sigma < 1e-8 {
                img.map_pixels(|v| v - mu + target_mean)
            } else {
                let s = target_std / sigma;
                img.map_pixels(|v| (v - mu) * s + target_mean)
            };
            out.clip_count();
            Ok(out)
        }
        NormalizationMode::FixedFactor { k } => {
            if k <= 0.0 {
                return Err(Error::invalid("fixed factor", format!("{k} must be > 0")));
            }
            let mut out = img.map_pixels(|v| v * k);
            out.clip_count();
            Ok(out)
        }
        NormalizationMode::PerChannel => {
            let mut out = img.clone();
            for c in 0..img.channels {
                let mu = img.channel_mean(c);
                if mu <= 0.0 {
                    return Err(Error::invalid(
                        "per-channel normalization",
                        format!("channel {c} mean {mu} must be > 0"),
                    ));
                }
                let target = if img.channels == 3 {
                    PER_CHANNEL_TARGETS[c]
                } else {
                    INTENSITY_TARGET
                };
                let f = target / mu;
                for y in 0..img.height {
                    for x in 0..img.width {
                        out.set(y, x, c, img.get(y, x, c) * f);
                    }
                }
            }
            out.clip_count();
            Ok(out)
        }
    }
}

/// Spectral weight on the centered grid:
/// `W = sin(π|2u−M| / 2M) + sin(π|2v−N| / 2N)`.
/// Zero at the centered DC bin, up to 2 at the corners (highest frequencies).
pub fn frequency_weight(u: usize, v: usize, m: usize, n: usize) -> f64 {
    assert!(u < m && v < n, "frequency index ({u},{v}) out of {m}x{n}");
    let wu = (std::f64::consts::PI * (2.0 * u as f64 - m as f64).abs() / (2.0 * m as f64)).sin();
    let wv = (std::f64::consts::PI * (2.0 * v as f64 - n as f64).abs() / (2.0 * n as f64)).sin();
    wu + wv
}

/// Precomputed W(u, v) plane for an M x N spectrum.
pub(crate) fn weight_plane(m: usize, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; m * n];
    for u in 0..m {
        for v in 0..n {
            w[u * n + v] = frequency_weight(u, v, m, n);
        }
    }
    w
}

/// Weighted MSE between magnitude spectra, `(1/MN) Σ W(u,v)·(|F_a|−|F_b|)²`,
/// averaged over channels. Insensitive to global brightness differences
/// (DC weight is zero); emphasizes mid-to-high frequency content.
pub fn frequency_loss(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::dim_mismatch(
            "frequency_loss",
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    let (m, n) = (a.height, a.width);
    let w = weight_plane(m, n);
    let mut total = 0.0;
    for c in 0..a.channels {
        let ma = spectrum(&a.channel_plane(c))?.magnitude();
        let mb = spectrum(&b.channel_plane(c))?.magnitude();
        let mut s = 0.0;
        for k in 0..m * n {
            let d = ma.data[k] - mb.data[k];
            s += w[k] * d * d;
        }
        total += s / (m * n) as f64;
    }
    Ok(total / a.channels as f64)
}

/// Analytic gradient of [`frequency_loss`] with respect to `a`, as an
/// image-shaped buffer (row-major H x W x C). Derivation: with
/// `m_k = |F_a(k)|`, `∂L/∂m_k = (2/MNC)·W_k·(m_k − |F_b(k)|)` and
/// `∂m_k/∂a = Re(X_k/m_k · e^{+iθ})`, so the gradient is the real part of
/// the unnormalized adjoint transform of `g_k·X_k/m_k` (zero where the
/// magnitude vanishes).
pub fn frequency_loss_grad(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::dim_mismatch(
            "frequency_loss_grad",
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    let (m, n) = (a.height, a.width);
    let w = weight_plane(m, n);
    let scale = 2.0 / ((m * n) as f64 * a.channels as f64);
    let mut grad = vec![0.0; a.data.len()];
    for c in 0..a.channels {
        let fa = spectrum(&a.channel_plane(c))?;
        let mb = spectrum(&b.channel_plane(c))?.magnitude();
        let cotangent: Vec<Complex64> = fa
            .coeffs
            .iter()
            .zip(mb.data.iter())
            .enumerate()
            .map(|(k, (x, &nb))| {
                let mag = x.norm();
                if mag < 1e-12 {
                    Complex64::new(0.0, 0.0)
                } else {
                    x * (scale * w[k] * (mag - nb) / mag)
                }
            })
            .collect();
        let back = ifft2_unnormalized_from_centered(&cotangent, m, n);
        for y in 0..m {
            for x in 0..n {
                grad[(y * n + x) * a.channels + c] = back[y * n + x].re;
            }
        }
    }
    Ok(grad)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(img: &Image) -> ChannelStats {
    let n = (img.height * img.width) as f64;
    let mut mean = Vec::with_capacity(img.channels);
    let mut std = Vec::with_capacity(img.channels);
    for c in 0..img.channels {
        let mu = img.channel_mean(c);
        let mut var = 0.0;
        for y in 0..img.height {
            for x in 0..img.width {
                let d = img.get(y, x, c) - mu;
                var += d * d;
            }
        }
        mean.push(mu);
        std.push((var / n).sqrt());
    }
    ChannelStats { mean, std }
}

/// Threshold below which a channel std counts as degenerate and the
/// alignment falls back to a mean-only shift.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Align each channel of `src` to `reference`'s mean/std, without clipping.
pub fn channel_stats_align_preclip(src: &Image, reference: &Image) -> Result<Image> {
    if src.channels != reference.channels {
        return Err(Error::dim_mismatch(
            "channel_stats_align",
            reference.channels,
            src.channels,
        ));
    }
    let ss = channel_stats(src);
    let rs = channel_stats(reference);
    let mut out = src.clone();
    for c in 0..src.channels {
        let (mu_s, sd_s) = (ss.mean[c], ss.std[c]);
        let (mu_r, sd_r) = (rs.mean[c], rs.std[c]);
        let degenerate = sd_s < DEGENERATE_STD || sd_r < DEGENERATE_STD;
        for y in 0..src.height {
            for x in 0..src.width {
                let v = src.get(y, x, c);
                let t = if degenerate {
                    v - mu_s + mu_r
                } else {
                    (v - mu_s) * (sd_r / sd_s) + mu_r
                };
                out.set(y, x, c, t);
            }
        }
    }
    Ok(out)
}

/// [`channel_stats_align_preclip`] followed by a clip to `[0, 1]`.
pub fn channel_stats_align(src: &Image, reference: &Image) -> Result<Image> {
    let mut out = channel_stats_align_preclip(src, reference)?;
    out.clip_count();
    Ok(out)
}

/// The same per-channel mean/std alignment rule applied to C x H x W latent
/// tensors. Latents are unbounded, so no clipping happens here.
pub fn stats_align_chw(src: &Tensor, reference: &Tensor) -> Tensor {
    assert_eq!(src.shape.len(), 3, "stats_align_chw needs C x H x W");
    assert_eq!(src.shape, reference.shape, "latent shape mismatch");
    let (c, h, w) = (src.shape[0], src.shape[1], src.shape[2]);
    let plane = h * w;
    let mut out = src.clone();
    for ci in 0..c {
        let s = &src.data[ci * plane..(ci + 1) * plane];
        let r = &reference.data[ci * plane..(ci + 1) * plane];
        let mu_s = s.iter().sum::<f64>() / plane as f64;
        let mu_r = r.iter().sum::<f64>() / plane as f64;
        let sd_s = (s.iter().map(|v| (v - mu_s).powi(2)).sum::<f64>() / plane as f64).sqrt();
        let sd_r = (r.iter().map(|v| (v - mu_r).powi(2)).sum::<f64>() / plane as f64).sqrt();
        let degenerate = sd_s < DEGENERATE_STD || sd_r < DEGENERATE_STD;
        for k in 0..plane {
            out.data[ci * plane + k] = if degenerate {
                s[k] - mu_s + mu_r
            } else {
                (s[k] - mu_s) * (sd_r / sd_s) + mu_r
            };
        }
    }
    out
}

/// 256-bin quantization used by histogram matching.
fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)
}

/// Monotone CDF-to-CDF histogram matching, per channel with 256-bin
/// quantization of the source. Each source pixel maps to the reference value
/// at the matching quantile (nearest rank on the sorted reference values),
/// so order relations within a channel are preserved.
pub fn histogram_match(src: &Image, reference: &Image) -> Result<Image> {
    if src.channels != reference.channels {
        return Err(Error::dim_mismatch(
            "histogram_match",
            reference.channels,
            src.channels,
        ));
    }
    let n_src = src.height * src.width;
    let n_ref = reference.height * reference.width;
    if n_src == 0 || n_ref == 0 {
        return Err(Error::EmptyDataset("histogram_match"));
    }
    let mut out = src.clone();
    for c in 0..src.channels {
        let mut hist = [0usize; 256];
        for y in 0..src.height {
            for x in 0..src.width {
                hist[bin_of(src.get(y, x, c))] += 1;
            }
        }
        let mut cum = [0usize; 256];
        let mut acc = 0;
        for (b, h) in hist.iter().enumerate() {
            acc += h;
            cum[b] = acc;
        }
        let mut ref_sorted: Vec<f64> = Vec::with_capacity(n_ref);
        for y in 0..reference.height {
            for x in 0..reference.width {
                ref_sorted.push(reference.get(y, x, c));
            }
        }
        ref_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for y in 0..src.height {
            for x in 0..src.width {
                let count = cum[bin_of(src.get(y, x, c))];
                // nearest-rank inverse CDF: index = ceil(count/n_src · n_ref) − 1
                let idx = (count * n_ref).div_ceil(n_src) - 1;
                out.set(y, x, c, ref_sorted[idx]);
            }
        }
    }
    Ok(out)
}

impl Image {
    /// Elementwise map over all samples (no clipping).
    pub fn map_pixels(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
