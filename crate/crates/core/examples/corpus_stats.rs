//! Distribution diagnostics: how close is each synthetic corpus to the
//! degraded test distribution? Prints per-corpus means of global
//! intensity, contrast, and local high-frequency energy.

use udapose::freq::{normalize_input, NormalizationMode};
use udapose::lcim;
use udapose::params::TrainConfig;
use udapose::synthesis::{
    generate_reference_set, generate_test_set, generate_well_lit_set, synthesize_training_set,
    synthesize_training_set_z0_only, SceneConfig,
};
use udapose::{Image, Result};

/// Mean absolute 4-neighbor Laplacian over interior pixels.
fn laplacian_energy(img: &Image) -> f64 {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = 4.0 * img.get(y, x, ch)
                    - img.get(y - 1, x, ch)
                    - img.get(y + 1, x, ch)
                    - img.get(y, x - 1, ch)
                    - img.get(y, x + 1, ch);
                sum += v.abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn stats(name: &str, imgs: &[Image]) {
    let n = imgs.len() as f64;
    let mean: f64 = imgs
        .iter()
        .map(|i| i.data.iter().sum::<f64>() / i.data.len() as f64)
        .sum::<f64>()
        / n;
    let std: f64 = imgs
        .iter()
        .map(|i| {
            let m = i.data.iter().sum::<f64>() / i.data.len() as f64;
            (i.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / i.data.len() as f64).sqrt()
        })
        .sum::<f64>()
        / n;
    let lap: f64 = imgs.iter().map(laplacian_energy).sum::<f64>() / n;
    println!("{name:>10}: mean {mean:.4}  std {std:.4}  laplacian {lap:.5}");
}

fn main() -> Result<()> {
    let seed = 7;
    let scene = SceneConfig::default();
    let mode = NormalizationMode::default();
    let cutoff = 0.25;
    let well_lit = generate_well_lit_set(seed, 40, &scene)?;
    let refs = generate_reference_set(seed, 12, &scene)?;
    let test = generate_test_set(seed, 20, &scene)?;

    let normed: Vec<Image> = refs
        .iter()
        .map(|r| normalize_input(r, mode))
        .collect::<Result<_>>()?;
    let mut adapters = lcim::init_params(seed, 3);
    let pre = TrainConfig {
        lambda_freq: 0.0,
        epochs: 4,
        lr_drop_epoch: 4,
        seed,
        ..TrainConfig::default()
    };
    lcim::pretrain_backbone(&normed, &pre, &mut adapters)?;
    let cfg = TrainConfig {
        epochs: 6,
        lr_drop_epoch: 5,
        seed,
        ..TrainConfig::default()
    };
    let (adapters, _) = lcim::train_lcim(&normed, &cfg, adapters, cutoff)?;

    let full = synthesize_training_set(&well_lit, &refs, 1, &adapters, cutoff, mode, seed)?;
    let z0 = synthesize_training_set_z0_only(&well_lit, &refs, 1, &adapters, mode, seed)?;

    stats("well-lit", &well_lit.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    stats("test", &test.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    stats("full", &full.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    stats("z0-only", &z0.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    Ok(())
}
