//! Run configuration: one TOML document with sections `[data]`, `[lcim]`,
//! `[pose]`, `[loss]`, and `[eval]`, plus one mandatory top-level `seed`.
//!
//! Unknown keys anywhere are rejected, every numeric range is validated at
//! load, and all documented defaults live in the `Default` impls below so a
//! config file only needs to name what it changes. The `UDAPOSE_SEED`
//! environment variable overrides the file's seed at load time; CLI flags
//! are applied after loading and therefore win over both.

use crate::error::{Error, Result};
use crate::freq::{NormalizationMode, INTENSITY_TARGET, ZSCORE_TARGET_STD};
use crate::params::TrainConfig;
use crate::pose::losses::{LossWeights, OksConstants};
use crate::pose::model::{FusionMode, PoseConfig};
use crate::pose::NUM_KEYPOINTS;
use crate::synthesis::{DatasetConfig, SceneConfig};
use serde::{Deserialize, Serialize};

/// Scene generation and dataset build settings.
///
/// Defaults: 10 well-lit scenes, 2 repeats, 10 references, 5 test images,
/// 32x32 scenes with 1-2 figures, cutoff 0.25, adaptive normalization,
/// fixed-factor constant 2.8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_well_lit: usize,
    pub repeats: usize,
    pub num_refs: usize,
    pub num_test: usize,
    pub height: usize,
    pub width: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    pub cutoff_radius: f64,
    /// One of `adaptive`, `direct`, `zscore`, `fixed_factor`, `per_channel`.
    pub normalization: String,
    /// Constant used by the `fixed_factor` normalization variant.
    pub fixed_factor: f64,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection {
            num_well_lit: 10,
            repeats: 2,
            num_refs: 10,
            num_test: 5,
            height: 32,
            width: 32,
            min_persons: 1,
            max_persons: 2,
            cutoff_radius: 0.25,
            normalization: "adaptive".to_string(),
            fixed_factor: 2.8,
        }
    }
}

/// Adapter training settings.
///
/// Defaults: 10 backbone pretrain epochs, then 40 adapter epochs at 4e-4
/// dropping to 4e-5 at epoch 30, batches of 8, spectral weight 4e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcimSection {
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_late: f64,
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    pub lambda_freq: f64,
}

impl Default for LcimSection {
    fn default() -> LcimSection {
        LcimSection {
            pretrain_epochs: 10,
            epochs: 40,
            lr_initial: 4e-4,
            lr_late: 4e-5,
            lr_drop_epoch: 30,
            batch_size: 8,
            lambda_freq: 4e-4,
        }
    }
}

/// Pose decoder architecture and training settings.
///
/// Defaults: 64-dim tokens, 8 groups, 3 layers, 4 sampling points, 4 heads,
/// gated fusion; 8 epochs at 4e-4 dropping to 4e-5 at epoch 6, batches of 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseSection {
    pub dim: usize,
    pub num_groups: usize,
    pub num_layers: usize,
    pub num_samples: usize,
    pub num_heads: usize,
    pub fusion: FusionMode,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_late: f64,
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
}

impl Default for PoseSection {
    fn default() -> PoseSection {
        PoseSection {
            dim: 64,
            num_groups: 8,
            num_layers: 3,
            num_samples: 4,
            num_heads: 4,
            fusion: FusionMode::Gated,
            epochs: 8,
            lr_initial: 4e-4,
            lr_late: 4e-5,
            lr_drop_epoch: 6,
            batch_size: 8,
        }
    }
}

/// Loss weights and OKS falloff.
///
/// Defaults: box 5, GIoU 2, class 2, keypoint 10, OKS 4, focal alpha 0.25
/// and gamma 2 (non-balanced), uniform OKS falloff 0.5 sized for toy scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mu: f64,
    pub beta: f64,
    pub lambda_c: f64,
    pub omega: f64,
    pub theta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub alpha_balanced: bool,
    pub oks_k: f64,
}

impl Default for LossSection {
    fn default() -> LossSection {
        let w = LossWeights::default();
        LossSection {
            mu: w.mu,
            beta: w.beta,
            lambda_c: w.lambda_c,
            omega: w.omega,
            theta: w.theta,
            focal_alpha: w.focal_alpha,
            focal_gamma: w.focal_gamma,
            alpha_balanced: w.alpha_balanced,
            oks_k: 0.5,
        }
    }
}

/// Evaluation and experiment settings.
///
/// Defaults: masking patches of sigma 2 over levels {0,2,4} with 5 trials,
/// scaling sizes {50,100,200}, spectral-weight sweep {0, 4e-5, 4e-4, 4e-3}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mask_sigma: f64,
    pub mask_trials: usize,
    pub mask_levels: Vec<usize>,
    pub scale_sizes: Vec<usize>,
    pub lambda_values: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            mask_sigma: 2.0,
            mask_trials: 5,
            mask_levels: vec![0, 2, 4],
            scale_sizes: vec![50, 100, 200],
            lambda_values: vec![0.0, 4e-5, 4e-4, 4e-3],
        }
    }
}

/// The full run configuration. `seed` has no default and must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub lcim: LcimSection,
    #[serde(default)]
    pub pose: PoseSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            lcim: LcimSection::default(),
            pose: PoseSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML document and validate every range. Does not consult the
    /// environment; see [`RunConfig::load`].
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, then let `UDAPOSE_SEED` override the seed.
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        cfg.seed = crate::rng::effective_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height % 16 != 0 || d.width % 16 != 0 {
            return Err(Error::invalid(
                "data.height/width",
                "must be positive multiples of 16",
            ));
        }
        self.scene().validate()?;
        for (name, v) in [
            ("data.num_well_lit", d.num_well_lit),
            ("data.repeats", d.repeats),
            ("data.num_refs", d.num_refs),
            ("data.num_test", d.num_test),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&d.cutoff_radius) {
            return Err(Error::invalid("data.cutoff_radius", "must lie in [0, 1]"));
        }
        if d.fixed_factor <= 0.0 || !d.fixed_factor.is_finite() {
            return Err(Error::invalid("data.fixed_factor", "must be positive"));
        }
        self.normalization_mode()?;
        self.lcim_train().validate()?;
        if self.lcim.lambda_freq < 0.0 {
            return Err(Error::invalid("lcim.lambda_freq", "must be non-negative"));
        }
        self.pose_train().validate()?;
        self.pose_config().validate()?;

        let l = &self.loss;
        for (name, v) in [
            ("loss.mu", l.mu),
            ("loss.beta", l.beta),
            ("loss.lambda_c", l.lambda_c),
            ("loss.omega", l.omega),
            ("loss.theta", l.theta),
            ("loss.focal_gamma", l.focal_gamma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(name, "must be non-negative and finite"));
            }
        }
        if !(l.focal_alpha > 0.0 && l.focal_alpha < 1.0) {
            return Err(Error::invalid("loss.focal_alpha", "must lie in (0, 1)"));
        }
        if l.oks_k <= 0.0 || !l.oks_k.is_finite() {
            return Err(Error::invalid("loss.oks_k", "must be positive"));
        }

        let e = &self.eval;
        if e.mask_sigma <= 0.0 || !e.mask_sigma.is_finite() {
            return Err(Error::invalid("eval.mask_sigma", "must be positive"));
        }
        if e.mask_trials == 0 {
            return Err(Error::invalid("eval.mask_trials", "must be at least 1"));
        }
        if e.mask_levels.iter().any(|&k| k > NUM_KEYPOINTS) {
            return Err(Error::invalid(
                "eval.mask_levels",
                "levels cannot exceed the keypoint count",
            ));
        }
        if e.scale_sizes.is_empty() || e.scale_sizes.contains(&0) {
            return Err(Error::invalid(
                "eval.scale_sizes",
                "must be non-empty positive sizes",
            ));
        }
        if e.lambda_values.is_empty()
            || e.lambda_values.iter().any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(Error::invalid(
                "eval.lambda_values",
                "must be non-empty, non-negative, finite",
            ));
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.data.height,
            width: self.data.width,
            min_persons: self.data.min_persons,
            max_persons: self.data.max_persons,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            num_well_lit: self.data.num_well_lit,
            repeats: self.data.repeats,
            num_refs: self.data.num_refs,
            num_test: self.data.num_test,
            scene: self.scene(),
            cutoff_radius: self.data.cutoff_radius,
            normalization: self.normalization_mode().unwrap_or_default(),
            seed: self.seed,
        }
    }

    pub fn lcim_train(&self) -> TrainConfig {
        TrainConfig {
            lambda_freq: self.lcim.lambda_freq,
            epochs: self.lcim.epochs,
            lr_initial: self.lcim.lr_initial,
            lr_late: self.lcim.lr_late,
            lr_drop_epoch: self.lcim.lr_drop_epoch,
            batch_size: self.lcim.batch_size,
            seed: self.seed,
        }
    }

    pub fn pose_train(&self) -> TrainConfig {
        TrainConfig {
            lambda_freq: 0.0,
            epochs: self.pose.epochs,
            lr_initial: self.pose.lr_initial,
            lr_late: self.pose.lr_late,
            lr_drop_epoch: self.pose.lr_drop_epoch,
            batch_size: self.pose.batch_size,
            seed: self.seed,
        }
    }

    pub fn pose_config(&self) -> PoseConfig {
        PoseConfig {
            dim: self.pose.dim,
            num_groups: self.pose.num_groups,
            num_layers: self.pose.num_layers,
            num_samples: self.pose.num_samples,
            num_heads: self.pose.num_heads,
            fusion: self.pose.fusion,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mu: self.loss.mu,
            beta: self.loss.beta,
            lambda_c: self.loss.lambda_c,
            omega: self.loss.omega,
            theta: self.loss.theta,
            focal_alpha: self.loss.focal_alpha,
            focal_gamma: self.loss.focal_gamma,
            alpha_balanced: self.loss.alpha_balanced,
        }
    }

    pub fn oks(&self) -> OksConstants {
        OksConstants::uniform(self.loss.oks_k, NUM_KEYPOINTS)
    }

    pub fn normalization_mode(&self) -> Result<NormalizationMode> {
        match self.data.normalization.as_str() {
            "adaptive" => Ok(NormalizationMode::Adaptive {
                delta: INTENSITY_TARGET,
            }),
            "direct" => Ok(NormalizationMode::Direct),
            "zscore" => Ok(NormalizationMode::ZScore {
                target_mean: INTENSITY_TARGET,
                target_std: ZSCORE_TARGET_STD,
            }),
            "fixed_factor" => Ok(NormalizationMode::FixedFactor {
                k: self.data.fixed_factor,
            }),
            "per_channel" => Ok(NormalizationMode::PerChannel),
            other => Err(Error::invalid(
                "data.normalization",
                format!(
                    "unknown mode {other:?}; expected adaptive, direct, zscore, \
                     fixed_factor, or per_channel"
                ),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_gets_all_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data, DataSection::default());
        assert_eq!(cfg.pose.fusion, FusionMode::Gated);
        assert_eq!(cfg.lcim.epochs, 40);
        assert_eq!(cfg.eval.lambda_values, vec![0.0, 4e-5, 4e-4, 4e-3]);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml_str("[data]\nheight = 32").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for doc in [
            "seed = 1\nbogus = 2",
            "seed = 1\n[data]\nbogus = 2",
            "seed = 1\n[pose]\nhidden_dim = 64",
            "seed = 1\n[nonsense]\nx = 1",
        ] {
            let err = RunConfig::from_toml_str(doc).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{doc} -> {err}");
        }
    }

    #[test]
    fn section_values_flow_into_typed_configs() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\n\
             [data]\nheight = 48\nwidth = 32\nmax_persons = 3\n\
             [pose]\nfusion = \"residual\"\ndim = 32\nnum_heads = 2\nnum_groups = 4\n\
             [loss]\noks_k = 0.25\n\
             [lcim]\nepochs = 5\nlr_drop_epoch = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.scene().height, 48);
        assert_eq!(cfg.dataset().seed, 3);
        assert_eq!(cfg.pose_config().fusion, FusionMode::Residual);
        assert_eq!(cfg.pose_config().dim, 32);
        assert_eq!(cfg.lcim_train().epochs, 5);
        assert_eq!(cfg.pose_train().lambda_freq, 0.0);
        assert_eq!(cfg.oks().k, vec![0.25; NUM_KEYPOINTS]);
        assert!(!cfg.loss_weights().alpha_balanced);
    }

    #[test]
    fn ranges_are_validated() {
        for doc in [
            "seed = 1\n[data]\nheight = 20",
            "seed = 1\n[data]\nmax_persons = 9",
            "seed = 1\n[data]\ncutoff_radius = 1.5",
            "seed = 1\n[data]\nnormalization = \"mystery\"",
            "seed = 1\n[loss]\nfocal_alpha = 1.5",
            "seed = 1\n[loss]\noks_k = 0.0",
            "seed = 1\n[lcim]\nlr_drop_epoch = 100",
            "seed = 1\n[pose]\nnum_heads = 3",
            "seed = 1\n[eval]\nmask_levels = [2, 99]",
            "seed = 1\n[eval]\nscale_sizes = []",
        ] {
            assert!(RunConfig::from_toml_str(doc).is_err(), "{doc} accepted");
        }
    }

    #[test]
    fn normalization_strings_map_to_modes() {
        let mut cfg = RunConfig::default();
        let cases: [(&str, NormalizationMode); 5] = [
            ("adaptive", NormalizationMode::Adaptive { delta: INTENSITY_TARGET }),
            ("direct", NormalizationMode::Direct),
            (
                "zscore",
                NormalizationMode::ZScore {
                    target_mean: INTENSITY_TARGET,
                    target_std: ZSCORE_TARGET_STD,
                },
            ),
            ("fixed_factor", NormalizationMode::FixedFactor { k: 2.8 }),
            ("per_channel", NormalizationMode::PerChannel),
        ];
        for (name, want) in cases {
            cfg.data.normalization = name.to_string();
            assert_eq!(cfg.normalization_mode().unwrap(), want, "{name}");
        }
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.pose.fusion = FusionMode::PinnedHalf;
        cfg.eval.mask_levels = vec![0, 4];
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn load_reads_files_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 9\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(RunConfig::load(&dir.path().join("absent.toml")).is_err());
    }
}
