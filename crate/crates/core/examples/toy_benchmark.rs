//! End-to-end toy benchmark on procedural scenes.
//!
//! Builds a well-lit corpus, trains the frequency adapters, synthesizes a
//! low-light training set three ways (full injection, style-latent only,
//! well-lit passthrough), trains one pose model per variant plus a
//! residual-fusion twin, and reports held-out AP on degraded test images.
//!
//! Sizes can be overridden positionally:
//! `toy_benchmark [well_lit] [repeats] [refs] [test] [pose_epochs] [dim]
//!  [oks_k_x100] [lcim_epochs] [cutoff_x100]`

use std::time::Instant;

use udapose::eval::{evaluate_model, mask_curve_means, mask_experiment, OKS_THRESHOLDS};
use udapose::freq::{normalize_input, NormalizationMode};
use udapose::lcim;
use udapose::params::TrainConfig;
use udapose::pose::losses::{LossWeights, OksConstants};
use udapose::pose::model::{init_pose_params, train_pose, FusionMode, PoseConfig};
use udapose::pose::NUM_KEYPOINTS;
use udapose::synthesis::{
    generate_reference_set, generate_test_set, generate_well_lit_set, AnnotatedSample,
    SceneConfig,
};
use udapose::pose::PoseInstance;
use udapose::{Image, Result};

fn arg(n: usize, default: usize) -> usize {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn pairs(samples: &[AnnotatedSample]) -> Vec<(Image, Vec<PoseInstance>)> {
    samples
        .iter()
        .map(|s| (s.image.clone(), s.instances.clone()))
        .collect()
}

fn replicate(samples: &[AnnotatedSample], repeats: usize) -> Vec<AnnotatedSample> {
    let mut out = Vec::with_capacity(samples.len() * repeats);
    for s in samples {
        for _ in 0..repeats {
            out.push(s.clone());
        }
    }
    out
}

fn main() -> Result<()> {
    let seed = 7;
    let num_wl = arg(1, 150);
    let repeats = arg(2, 2);
    let num_refs = arg(3, 24);
    let num_test = arg(4, 60);
    let pose_epochs = arg(5, 8);
    let dim = arg(6, 48);
    let oks_k = arg(7, 50) as f64 / 100.0;
    let lcim_epochs = arg(8, 8);
    let cutoff = arg(9, 25) as f64 / 100.0;

    let scene = SceneConfig::default();
    let mode = NormalizationMode::default();

    let t0 = Instant::now();
    let well_lit = generate_well_lit_set(seed, num_wl, &scene)?;
    let refs = generate_reference_set(seed, num_refs, &scene)?;
    let test_set = generate_test_set(seed, num_test, &scene)?;
    println!("data: {} well-lit, {} refs, {} test ({:.1?})", num_wl, num_refs, num_test, t0.elapsed());

    // Adapter training on normalized references.
    let t0 = Instant::now();
    let normed: Vec<Image> = refs
        .iter()
        .map(|r| normalize_input(r, mode))
        .collect::<Result<_>>()?;
    let mut adapters = lcim::init_params(seed, 3);
    let pre_cfg = TrainConfig {
        lambda_freq: 0.0,
        epochs: 6,
        lr_drop_epoch: 6,
        seed,
        ..TrainConfig::default()
    };
    lcim::pretrain_backbone(&normed, &pre_cfg, &mut adapters)?;
    let lcim_cfg = TrainConfig {
        epochs: lcim_epochs,
        lr_drop_epoch: (3 * lcim_epochs).div_ceil(4),
        seed,
        ..TrainConfig::default()
    };
    let (adapters, hist) = lcim::train_lcim(&normed, &lcim_cfg, adapters, cutoff)?;
    println!(
        "adapters: final total {:.5} ({:.1?})",
        hist.last().map_or(f64::NAN, |r| r.total),
        t0.elapsed()
    );

    // Three training corpora with identical reference pairing.
    let t0 = Instant::now();
    let full = udapose::synthesis::synthesize_training_set(
        &well_lit, &refs, repeats, &adapters, cutoff, mode, seed,
    )?;
    let z0 = udapose::synthesis::synthesize_training_set_z0_only(
        &well_lit, &refs, repeats, &adapters, mode, seed,
    )?;
    let wl_rep = replicate(&well_lit, repeats);
    println!("synthesis: {} images per corpus ({:.1?})", full.len(), t0.elapsed());

    let gated_cfg = PoseConfig {
        dim,
        num_groups: 4,
        num_layers: 2,
        num_samples: 4,
        num_heads: 4,
        fusion: FusionMode::Gated,
    };
    let residual_cfg = PoseConfig {
        fusion: FusionMode::Residual,
        ..gated_cfg.clone()
    };
    let weights = LossWeights::default();
    let kc = OksConstants::uniform(oks_k, NUM_KEYPOINTS);
    let tcfg = TrainConfig {
        lambda_freq: 0.0,
        epochs: pose_epochs,
        lr_drop_epoch: pose_epochs.saturating_sub(2).max(1),
        seed,
        ..TrainConfig::default()
    };

    let mut aps = Vec::new();
    for (name, corpus, cfg) in [
        ("full+gated", &full, &gated_cfg),
        ("full+residual", &full, &residual_cfg),
        ("z0-only", &z0, &gated_cfg),
        ("well-lit-only", &wl_rep, &gated_cfg),
    ] {
        let t0 = Instant::now();
        let params = init_pose_params(seed, cfg);
        let (trained, rows) = train_pose(&pairs(corpus), cfg, &weights, &kc, &tcfg, params)?;
        let train_time = t0.elapsed();
        let t1 = Instant::now();
        let report = evaluate_model(&trained, cfg, &test_set, &kc, &OKS_THRESHOLDS)?;
        println!(
            "{name:>14}: AP {:.4}  AP@.50 {:.4}  AR {:.4}  loss {:.3}  (train {:.1?}, eval {:.1?})",
            report.ap_mean,
            report.ap_50,
            report.ar_mean,
            rows.last().map_or(f64::NAN, |r| r.total),
            train_time,
            t1.elapsed()
        );
        aps.push((name, trained, report.ap_mean));
    }

    // Masking robustness: gated vs residual.
    let t0 = Instant::now();
    let ks = [0usize, 2, 4];
    let gated_rows = mask_experiment(&aps[0].1, &gated_cfg, &test_set, &ks, 5, 2.0, seed, &kc)?;
    let resid_rows =
        mask_experiment(&aps[1].1, &residual_cfg, &test_set, &ks, 5, 2.0, seed, &kc)?;
    let gm = mask_curve_means(&gated_rows, &ks);
    let rm = mask_curve_means(&resid_rows, &ks);
    for ((k, g), (_, r)) in gm.iter().zip(&rm) {
        println!("mask k={k}: gated {g:.4}  residual {r:.4}");
    }
    println!("masking ({:.1?})", t0.elapsed());
    Ok(())
}
