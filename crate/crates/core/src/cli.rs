//! Command-line operator surface: one binary, seven subcommands.
//!
//! Every command loads one TOML run configuration, applies flag overrides
//! (flags win over both the file and the `UDAPOSE_SEED` environment
//! variable), echoes the resolved configuration, and writes its artifacts
//! under `--out`. Exit codes: 0 success, 2 usage or input error, 1 internal
//! error. Reruns with identical config and seed produce byte-identical CSV
//! and data artifacts; SVG plots are regenerated alongside them.

use crate::config::RunConfig;
use crate::containers::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, OKS_THRESHOLDS};
use crate::freq::{dhf_correct, high_pass_filter, make_highpass_mask, normalize_input};
use crate::image_data::Image;
use crate::lcim;
use crate::params::{ParamSet, TrainConfig};
use crate::pose::model::{self, FusionMode, PoseConfig, StepRow};
use crate::pose::probe::{probe_csv, probe_rows};
use crate::pose::PoseInstance;
use crate::report::{self, LambdaRow, Series};
use crate::synthesis::{self, AnnotatedSample, DomainTag};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "udapose",
    version,
    about = "Frequency-domain low-light synthesis and gated pose decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the four dataset splits (well-lit, refs, synthetic, test).
    BuildData(BuildDataArgs),
    /// Pretrain the image backbone, then train the injection adapters.
    TrainLcim(TrainLcimArgs),
    /// Train the pose decoder on an annotated split.
    TrainPose(TrainPoseArgs),
    /// Synthesize low-light images from a well-lit split plus references.
    Synthesize(SynthesizeArgs),
    /// Evaluate a pose checkpoint on an annotated split.
    Eval(EvalArgs),
    /// Emit per-layer gate-weight and norm-ratio tables for one image.
    Probe(ProbeArgs),
    /// Run the masking, scaling, or spectral-weight experiments.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Path to the run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed (flags win over config and environment).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BuildDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Adapter checkpoint used for synthesis; untrained adapters when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for sample-parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainLcimArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root (containing `refs/`) or a reference image directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `adapters.ckpt` in --out, extending the loss CSV.
    #[arg(long)]
    resume: bool,
    /// Override the configured adapter epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainPoseArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root (containing `synthetic/`) or an annotated split directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `pose.ckpt` in --out, extending the loss CSV.
    #[arg(long)]
    resume: bool,
    /// Override the configured pose epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the configured fusion: gated, residual, or pinned_half.
    #[arg(long)]
    fusion: Option<String>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root containing `well_lit/` and `refs/`.
    #[arg(long)]
    data: PathBuf,
    /// Adapter checkpoint used for synthesis; untrained adapters when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output split directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for sample-parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Pose checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (containing `test/`) or an annotated split directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for sample-parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Pose checkpoint to probe.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (containing `test/`) or an annotated split directory.
    #[arg(long)]
    data: PathBuf,
    /// Image index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output directory for the probe table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    kind: ExperimentKind,
}

#[derive(Subcommand, Debug)]
enum ExperimentKind {
    /// Keypoint-masking robustness: gated fusion vs a residual baseline.
    Mask {
        /// Gated-fusion pose checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Residual-fusion baseline checkpoint.
        #[arg(long)]
        baseline: PathBuf,
        /// Dataset root (containing `test/`) or an annotated split directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean AP as a function of training-set size.
    Scale {
        /// Annotated training split (or dataset root with `synthetic/`).
        #[arg(long)]
        data: PathBuf,
        /// Annotated held-out split (or dataset root with `test/`).
        #[arg(long)]
        test: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral-loss-weight sweep: reconstruction quality and downstream AP.
    Lambda {
        /// Dataset root containing `well_lit/`, `refs/`, and `test/`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildData(a) => cmd_build_data(a),
        Command::TrainLcim(a) => cmd_train_lcim(a),
        Command::TrainPose(a) => cmd_train_pose(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Usage and input problems exit 2; internal failures exit 1.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::Format { .. }
        | Error::EmptyDataset(_)
        | Error::Io(_) => 2,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    println!("# resolved configuration\n{text}");
    Ok(cfg)
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    match jobs {
        None => Ok(()),
        Some(0) => Err(Error::invalid("jobs", "must be at least 1")),
        Some(n) => {
            // Ignored if a global pool already exists (first setting wins).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
    }
}

/// Accept either a dataset root holding `sub/` or the split directory itself.
fn split_dir(data: &Path, sub: &str) -> PathBuf {
    let nested = data.join(sub);
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn load_adapters(path: Option<&Path>, seed: u64) -> Result<ParamSet> {
    match path {
        None => Ok(lcim::init_params(seed, 3)),
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.arch != lcim::ARCH_DESCRIPTOR {
                return Err(Error::Config(format!(
                    "checkpoint {} is not an adapter checkpoint (architecture {:?})",
                    p.display(),
                    ck.arch
                )));
            }
            Ok(ck.params)
        }
    }
}

fn load_pose(path: &Path) -> Result<(ParamSet, PoseConfig)> {
    let ck = load_checkpoint(path)?;
    let cfg = model::config_from_descriptor(&ck.arch)?;
    Ok((ck.params, cfg))
}

fn parse_fusion(name: &str) -> Result<FusionMode> {
    match name {
        "gated" => Ok(FusionMode::Gated),
        "residual" => Ok(FusionMode::Residual),
        "pinned_half" => Ok(FusionMode::PinnedHalf),
        other => Err(Error::invalid(
            "fusion",
            format!("unknown mode {other:?}; expected gated, residual, or pinned_half"),
        )),
    }
}

/// Shift a schedule forward past `done` completed epochs so a resumed run
/// sees the same learning rate per absolute epoch. `None` when finished.
fn resume_train_config(base: &TrainConfig, done: usize) -> Option<TrainConfig> {
    if done >= base.epochs {
        return None;
    }
    let mut cfg = base.clone();
    cfg.epochs = base.epochs - done;
    if done >= base.lr_drop_epoch {
        cfg.lr_initial = base.lr_late;
        cfg.lr_drop_epoch = cfg.epochs;
    } else {
        cfg.lr_drop_epoch = base.lr_drop_epoch - done;
    }
    Some(cfg)
}

/// Write a fresh CSV, or append the body of `csv_text` to an existing one.
fn write_or_append_csv(path: &Path, csv_text: &str, append: bool) -> Result<()> {
    if append && path.exists() {
        let mut existing = std::fs::read_to_string(path)?;
        let body = csv_text.split_once('\n').map(|(_, b)| b).unwrap_or("");
        existing.push_str(body);
        std::fs::write(path, existing)?;
    } else {
        std::fs::write(path, csv_text)?;
    }
    Ok(())
}

fn count_csv_rows(path: &Path) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    Ok(std::fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count())
}

fn csv_field<T: std::str::FromStr>(field: Option<&str>, what: &'static str) -> Result<T> {
    field
        .and_then(|s| s.trim().parse::<T>().ok())
        .ok_or_else(|| Error::Format {
            what,
            reason: "unparseable row".to_string(),
        })
}

fn parse_lcim_rows(text: &str) -> Result<Vec<lcim::HistoryRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split(',');
            Ok(lcim::HistoryRow {
                epoch: csv_field(it.next(), "adapter history csv")?,
                total: csv_field(it.next(), "adapter history csv")?,
                l_mse: csv_field(it.next(), "adapter history csv")?,
                l_freq: csv_field(it.next(), "adapter history csv")?,
                lr: csv_field(it.next(), "adapter history csv")?,
            })
        })
        .collect()
}

fn parse_pose_rows(text: &str) -> Result<Vec<StepRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split(',');
            Ok(StepRow {
                step: csv_field(it.next(), "pose history csv")?,
                total: csv_field(it.next(), "pose history csv")?,
                l_h: csv_field(it.next(), "pose history csv")?,
                l_c: csv_field(it.next(), "pose history csv")?,
                l_k: csv_field(it.next(), "pose history csv")?,
                matched: csv_field(it.next(), "pose history csv")?,
            })
        })
        .collect()
}

fn cmd_build_data(a: BuildDataArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    set_jobs(a.jobs)?;
    let params = load_adapters(a.checkpoint.as_deref(), cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let manifest = synthesis::build_dataset(&a.out, &cfg.dataset(), &params)?;
    println!(
        "built dataset at {}: {} well-lit, {} refs, {} synthetic, {} test",
        a.out.display(),
        manifest.num_well_lit,
        manifest.num_refs,
        manifest.synthetic_count,
        manifest.num_test
    );
    Ok(())
}

fn cmd_train_lcim(a: TrainLcimArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.lcim.epochs = e;
        cfg.validate()?;
    }
    let mode = cfg.normalization_mode()?;
    let raw = synthesis::load_reference_images(&split_dir(&a.data, "refs"))?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset("train-lcim reference images"));
    }
    let images: Vec<Image> = raw
        .iter()
        .map(|img| normalize_input(img, mode))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join("adapters.ckpt");
    let csv_path = a.out.join("lcim_history.csv");
    let base = cfg.lcim_train();

    let (params, done) = if a.resume {
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "--resume given but {} does not exist",
                ckpt_path.display()
            )));
        }
        let ck = load_checkpoint(&ckpt_path)?;
        if ck.arch != lcim::ARCH_DESCRIPTOR {
            return Err(Error::Config(format!(
                "cannot resume from non-adapter checkpoint ({:?})",
                ck.arch
            )));
        }
        (ck.params, count_csv_rows(&csv_path)?)
    } else {
        let mut params = lcim::init_params(cfg.seed, 3);
        if cfg.lcim.pretrain_epochs > 0 {
            let pre = TrainConfig {
                lambda_freq: 0.0,
                epochs: cfg.lcim.pretrain_epochs,
                lr_drop_epoch: cfg.lcim.pretrain_epochs,
                ..base.clone()
            };
            lcim::pretrain_backbone(&images, &pre, &mut params)?;
        } else {
            lcim::freeze_backbone(&mut params);
        }
        (params, 0)
    };

    let Some(tcfg) = resume_train_config(&base, done) else {
        println!("nothing to train: {done} of {} epochs already recorded", base.epochs);
        return Ok(());
    };
    let (params, mut rows) = lcim::train_lcim(&images, &tcfg, params, cfg.data.cutoff_radius)?;
    for r in &mut rows {
        r.epoch += done;
    }

    write_or_append_csv(&csv_path, &report::lcim_history_csv(&rows), done > 0)?;
    let all = parse_lcim_rows(&std::fs::read_to_string(&csv_path)?)?;
    std::fs::write(a.out.join("lcim_history.svg"), report::lcim_history_svg(&all))?;
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            arch: lcim::ARCH_DESCRIPTOR.to_string(),
            train_config: base,
            params,
        },
    )?;
    let last = all.last().expect("at least one epoch");
    println!(
        "adapter training complete: {} epochs, final total {:.6} (mse {:.6}, spectral {:.6})",
        all.len(),
        last.total,
        last.l_mse,
        last.l_freq
    );
    Ok(())
}

fn cmd_train_pose(a: TrainPoseArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.pose.epochs = e;
    }
    if let Some(name) = &a.fusion {
        cfg.pose.fusion = parse_fusion(name)?;
    }
    cfg.validate()?;
    let pose_cfg = cfg.pose_config();
    let samples = synthesis::load_split(
        &split_dir(&a.data, "synthetic"),
        DomainTag::SyntheticLowLight,
    )?;
    let pairs: Vec<(Image, Vec<PoseInstance>)> = samples
        .into_iter()
        .map(|s| (s.image, s.instances))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("train-pose split"));
    }

    std::fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join("pose.ckpt");
    let csv_path = a.out.join("pose_history.csv");
    let base = cfg.pose_train();
    let steps_per_epoch = pairs.len().div_ceil(base.batch_size);

    let (params, done_steps) = if a.resume {
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "--resume given but {} does not exist",
                ckpt_path.display()
            )));
        }
        let ck = load_checkpoint(&ckpt_path)?;
        let ck_cfg = model::config_from_descriptor(&ck.arch)?;
        if ck_cfg != pose_cfg {
            return Err(Error::Config(format!(
                "checkpoint architecture {ck_cfg:?} differs from configured {pose_cfg:?}"
            )));
        }
        let rows = count_csv_rows(&csv_path)?;
        if rows % steps_per_epoch != 0 {
            return Err(Error::Config(format!(
                "loss history has {rows} rows, not a whole number of {steps_per_epoch}-step epochs"
            )));
        }
        (ck.params, rows)
    } else {
        (model::init_pose_params(cfg.seed, &pose_cfg), 0)
    };

    let done_epochs = done_steps / steps_per_epoch;
    let Some(tcfg) = resume_train_config(&base, done_epochs) else {
        println!(
            "nothing to train: {done_epochs} of {} epochs already recorded",
            base.epochs
        );
        return Ok(());
    };
    let (params, mut rows) = model::train_pose(
        &pairs,
        &pose_cfg,
        &cfg.loss_weights(),
        &cfg.oks(),
        &tcfg,
        params,
    )?;
    for r in &mut rows {
        r.step += done_steps;
    }

    write_or_append_csv(&csv_path, &report::pose_history_csv(&rows), done_steps > 0)?;
    let all = parse_pose_rows(&std::fs::read_to_string(&csv_path)?)?;
    std::fs::write(a.out.join("pose_history.svg"), report::pose_history_svg(&all))?;
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            arch: model::arch_descriptor(&pose_cfg),
            train_config: base,
            params,
        },
    )?;
    let last = all.last().expect("at least one step");
    println!(
        "pose training complete: {} steps, final total {:.6} ({} matched in last batch)",
        all.len(),
        last.total,
        last.matched
    );
    Ok(())
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    set_jobs(a.jobs)?;
    let params = load_adapters(a.checkpoint.as_deref(), cfg.seed)?;
    let well_lit = synthesis::load_split(&split_dir(&a.data, "well_lit"), DomainTag::WellLit)?;
    let refs = synthesis::load_reference_images(&a.data.join("refs"))?;
    let synth = synthesis::synthesize_training_set(
        &well_lit,
        &refs,
        cfg.data.repeats,
        &params,
        cfg.data.cutoff_radius,
        cfg.normalization_mode()?,
        cfg.seed,
    )?;
    synthesis::save_split(&a.out, &synth, cfg.seed)?;
    println!(
        "synthesized {} images from {} well-lit sources and {} references into {}",
        synth.len(),
        well_lit.len(),
        refs.len(),
        a.out.display()
    );
    Ok(())
}

fn load_test_split(data: &Path) -> Result<Vec<AnnotatedSample>> {
    synthesis::load_split(&split_dir(data, "test"), DomainTag::LowLightTest)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    set_jobs(a.jobs)?;
    let (params, pose_cfg) = load_pose(&a.checkpoint)?;
    let samples = load_test_split(&a.data)?;
    let rep = eval::evaluate_model(&params, &pose_cfg, &samples, &cfg.oks(), &OKS_THRESHOLDS)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("eval.csv"), report::eval_csv(&rep))?;
    std::fs::write(a.out.join("summary.json"), report::eval_summary_json(&rep))?;
    println!(
        "AP@[.50:.95] = {:.4}  AP@.50 = {:.4}  AP@.75 = {:.4}  AR = {:.4} \
         ({} images, {} gts, {} preds)",
        rep.ap_mean, rep.ap_50, rep.ap_75, rep.ar_mean, rep.num_images, rep.num_gts, rep.num_preds
    );
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let _cfg = load_config(&a.common)?;
    let (params, pose_cfg) = load_pose(&a.checkpoint)?;
    let samples = load_test_split(&a.data)?;
    let sample = samples.get(a.index).ok_or_else(|| {
        Error::invalid(
            "index",
            format!("split has {} images, index {} out of range", samples.len(), a.index),
        )
    })?;
    let (_preds, probe) = model::forward(&sample.image, &params, &pose_cfg)?;
    let rows = probe_rows(&probe, &pose_cfg);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("probe.csv"), probe_csv(&rows))?;
    println!(
        "probed image {}: {} rows across {} layers and {} instance slots",
        a.index,
        rows.len(),
        probe.len(),
        pose_cfg.num_groups
    );
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    match a.kind {
        ExperimentKind::Mask { checkpoint, baseline, data, out } => {
            let cfg = load_config(&a.common)?;
            experiment_mask(&cfg, &checkpoint, &baseline, &data, &out)
        }
        ExperimentKind::Scale { data, test, out } => {
            let cfg = load_config(&a.common)?;
            experiment_scale(&cfg, &data, &test, &out)
        }
        ExperimentKind::Lambda { data, out } => {
            let cfg = load_config(&a.common)?;
            experiment_lambda(&cfg, &data, &out)
        }
    }
}

fn experiment_mask(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let (gp, gcfg) = load_pose(checkpoint)?;
    let (bp, bcfg) = load_pose(baseline)?;
    let samples = load_test_split(data)?;
    let kc = cfg.oks();
    let levels = &cfg.eval.mask_levels;
    let rows_g = eval::mask_experiment(
        &gp, &gcfg, &samples, levels, cfg.eval.mask_trials, cfg.eval.mask_sigma, cfg.seed, &kc,
    )?;
    let rows_b = eval::mask_experiment(
        &bp, &bcfg, &samples, levels, cfg.eval.mask_trials, cfg.eval.mask_sigma, cfg.seed, &kc,
    )?;
    let means_g = eval::mask_curve_means(&rows_g, levels);
    let means_b = eval::mask_curve_means(&rows_b, levels);
    let gated: Vec<f64> = means_g.iter().map(|&(_, ap)| ap).collect();
    let residual: Vec<f64> = means_b.iter().map(|&(_, ap)| ap).collect();

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("mask_trials_gated.csv"), report::mask_trials_csv(&rows_g))?;
    std::fs::write(out.join("mask_trials_residual.csv"), report::mask_trials_csv(&rows_b))?;
    std::fs::write(
        out.join("mask_curves.csv"),
        report::mask_curves_csv(levels, &gated, &residual)?,
    )?;
    let to_points = |means: &[(usize, f64)]| {
        means.iter().map(|&(k, ap)| (k as f64, ap)).collect::<Vec<_>>()
    };
    std::fs::write(
        out.join("mask_curves.svg"),
        report::line_plot_svg(
            "masking robustness",
            "masked keypoints",
            "mean AP",
            &[
                Series::new("gated", to_points(&means_g)),
                Series::new("residual", to_points(&means_b)),
            ],
        ),
    )?;
    for (i, &k) in levels.iter().enumerate() {
        println!("k={k}: gated {:.4} vs residual {:.4}", gated[i], residual[i]);
    }
    Ok(())
}

fn experiment_scale(cfg: &RunConfig, data: &Path, test: &Path, out: &Path) -> Result<()> {
    let train = synthesis::load_split(
        &split_dir(data, "synthetic"),
        DomainTag::SyntheticLowLight,
    )?;
    let pairs: Vec<(Image, Vec<PoseInstance>)> = train
        .into_iter()
        .map(|s| (s.image, s.instances))
        .collect();
    let test_samples = load_test_split(test)?;
    let rows = eval::scaling_experiment(
        &cfg.eval.scale_sizes,
        &pairs,
        &test_samples,
        &cfg.pose_config(),
        &cfg.loss_weights(),
        &cfg.oks(),
        &cfg.pose_train(),
        cfg.seed,
    )?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scaling.csv"), report::scaling_csv(&rows))?;
    std::fs::write(
        out.join("scaling.svg"),
        report::line_plot_svg(
            "training-set scaling",
            "training images",
            "mean AP",
            &[Series::new(
                "ap",
                rows.iter().map(|&(n, ap)| (n as f64, ap)).collect(),
            )],
        ),
    )?;
    for (n, ap) in &rows {
        println!("{n} images: AP {ap:.4}");
    }
    Ok(())
}

fn lcim_reconstruct(img: &Image, params: &ParamSet, cutoff: f64) -> Result<Image> {
    let mask = make_highpass_mask(img.height, img.width, cutoff)?;
    let dhf = dhf_correct(&high_pass_filter(img, &mask)?, img)?;
    let levels = lcim::encode_multiscale(&dhf, params)?;
    let f = lcim::lcim_transform(&levels, params)?;
    lcim::decode_with_injection(&levels[3], &f, params)
}

fn experiment_lambda(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let mode = cfg.normalization_mode()?;
    let raw_refs = synthesis::load_reference_images(&data.join("refs"))?;
    let refs_norm: Vec<Image> = raw_refs
        .iter()
        .map(|img| normalize_input(img, mode))
        .collect::<Result<_>>()?;
    let well_lit = synthesis::load_split(&split_dir(data, "well_lit"), DomainTag::WellLit)?;
    let test_samples = load_test_split(data)?;
    let pose_cfg = cfg.pose_config();
    let kc = cfg.oks();

    let mut rows = Vec::new();
    for &lambda in &cfg.eval.lambda_values {
        let mut params = lcim::init_params(cfg.seed, 3);
        let base = TrainConfig {
            lambda_freq: lambda,
            ..cfg.lcim_train()
        };
        if cfg.lcim.pretrain_epochs > 0 {
            let pre = TrainConfig {
                lambda_freq: 0.0,
                epochs: cfg.lcim.pretrain_epochs,
                lr_drop_epoch: cfg.lcim.pretrain_epochs,
                ..base.clone()
            };
            lcim::pretrain_backbone(&refs_norm, &pre, &mut params)?;
        } else {
            lcim::freeze_backbone(&mut params);
        }
        let (params, _) = lcim::train_lcim(&refs_norm, &base, params, cfg.data.cutoff_radius)?;

        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for img in &refs_norm {
            let recon = lcim_reconstruct(img, &params, cfg.data.cutoff_radius)?;
            psnr_sum += eval::psnr(&recon, img)?;
            ssim_sum += eval::ssim(&recon, img)?;
        }
        let n = refs_norm.len() as f64;

        let synth = synthesis::synthesize_training_set(
            &well_lit,
            &raw_refs,
            cfg.data.repeats,
            &params,
            cfg.data.cutoff_radius,
            mode,
            cfg.seed,
        )?;
        let pairs: Vec<(Image, Vec<PoseInstance>)> = synth
            .into_iter()
            .map(|s| (s.image, s.instances))
            .collect();
        let (pose_params, _) = model::train_pose(
            &pairs,
            &pose_cfg,
            &cfg.loss_weights(),
            &kc,
            &cfg.pose_train(),
            model::init_pose_params(cfg.seed, &pose_cfg),
        )?;
        let rep =
            eval::evaluate_model(&pose_params, &pose_cfg, &test_samples, &kc, &OKS_THRESHOLDS)?;
        println!(
            "lambda {lambda}: psnr {:.3}, ssim {:.4}, AP {:.4}",
            psnr_sum / n,
            ssim_sum / n,
            rep.ap_mean
        );
        rows.push(LambdaRow {
            lambda,
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            ap_mean: rep.ap_mean,
        });
    }

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("lambda.csv"), report::lambda_csv(&rows))?;
    std::fs::write(
        out.join("lambda.svg"),
        report::line_plot_svg(
            "spectral weight sweep",
            "lambda",
            "score",
            &[
                Series::new("ap", rows.iter().map(|r| (r.lambda, r.ap_mean)).collect()),
                Series::new("ssim", rows.iter().map(|r| (r.lambda, r.ssim)).collect()),
            ],
        ),
    )?;
    Ok(())
}
