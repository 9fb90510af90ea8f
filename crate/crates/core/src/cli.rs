//! The `boxdistill` command line.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 partial teacher
//! failure, 3 training abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::annotations::{load_manifest, DatasetManifest, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, format_table, Evaluation};
use crate::model::checkpoint::load_checkpoint;
use crate::pseudo_labels::{build_pseudo_labels, cache_fingerprint, LabelCache, PseudoLabelReport};
use crate::synthetic::{
    emit_dataset, format_paired, generate_dataset, run_paired, AblationSetup, NoiseProfile,
};
use crate::teacher::Teacher;
use crate::trainer::{
    evaluate_model, fit, predict_image, FitOptions, LabelSource, ManifestSplit, SampleSource,
};
use crate::util::write_atomic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_TEACHER: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "boxdistill",
    version,
    about = "Box-supervised defect segmentation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted configuration override, e.g. `loss.tau=0.95`.
    #[arg(long = "override", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Directory for the command's outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Query the teacher for every train/val box and fill the label cache.
    PseudoLabel {
        /// Exit 0 even when some images failed.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Train the student on cached pseudo-labels.
    Train,
    /// Score predicted class maps against ground truth.
    Eval,
    /// Write class maps and foreground probabilities for a split.
    Predict,
    /// Emit a synthetic dataset and run the paired correction ablation.
    SynthBench {
        /// Number of paired seeds; 0 only emits the dataset and its
        /// pseudo-labels.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

/// Error type of a command together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn input(e: Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        error: e,
    }
}

fn training(e: Error) -> Failure {
    let code = match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::Tensor(_) => {
            EXIT_TRAINING
        }
        _ => EXIT_INPUT,
    };
    Failure { code, error: e }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let level = if cli.common.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult {
    let cfg =
        RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides).map_err(input)?;
    let out = cli.common.output.as_deref();
    match &cli.command {
        Command::PseudoLabel { allow_partial } => cmd_pseudo_label(&cfg, out, *allow_partial),
        Command::Train => cmd_train(&cfg, out),
        Command::Eval => cmd_eval(&cfg, out),
        Command::Predict => cmd_predict(&cfg, out),
        Command::SynthBench { seeds } => cmd_synth_bench(&cfg, out, *seeds),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.manifest is required"))?;
    let (m, warnings) = load_manifest(path)?;
    for w in warnings {
        log::warn!("{w:?}");
    }
    Ok(m)
}

fn teacher_and_cache(
    cfg: &RunConfig,
    m: &DatasetManifest,
) -> Result<(Box<dyn Teacher>, LabelCache)> {
    let teacher = cfg.teacher.clone().with_env_override().build()?;
    let fp = cache_fingerprint(&teacher.fingerprint(), &cfg.pseudo_label);
    let cache = LabelCache::new(&cfg.data.cache_root, fp, m.num_classes());
    Ok((teacher, cache))
}

fn check_classes(cfg: &RunConfig, m: &DatasetManifest) -> Result<()> {
    if cfg.training.model.num_classes != m.num_classes() {
        return Err(Error::config(format!(
            "model.num_classes is {} but the manifest lists {} classes",
            cfg.training.model.num_classes,
            m.num_classes()
        )));
    }
    Ok(())
}

pub fn cmd_pseudo_label(cfg: &RunConfig, out: Option<&Path>, allow_partial: bool) -> CmdResult {
    let m = manifest(cfg).map_err(input)?;
    let (teacher, cache) = teacher_and_cache(cfg, &m).map_err(input)?;
    let report: PseudoLabelReport =
        build_pseudo_labels(&m, teacher.as_ref(), &cfg.pseudo_label, &cache);
    let report_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cache.dir());
    write_json(&report_dir.join("pseudo_label_report.json"), &report).map_err(input)?;
    println!(
        "{} images, {} generated, {} cached, {} failed -> {}",
        report.images,
        report.generated,
        report.cache_hits,
        report.failures.len(),
        cache.dir().display()
    );
    for f in &report.failures {
        eprintln!("failed: {} ({})", f.image_id, f.message);
    }
    if !report.failures.is_empty() && !allow_partial {
        return Ok(EXIT_TEACHER);
    }
    Ok(EXIT_OK)
}

/// Summary written next to the checkpoints.
#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub metric_name: String,
    pub steps: usize,
    pub pixels_eligible: u64,
    pub pixels_corrected: u64,
    pub class_weights: Vec<f64>,
}

pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let m = manifest(cfg).map_err(input)?;
    check_classes(cfg, &m).map_err(input)?;
    let (teacher, cache) = teacher_and_cache(cfg, &m).map_err(input)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    std::fs::create_dir_all(&dir).map_err(|e| input(e.into()))?;
    write_atomic(
        &dir.join("config.toml"),
        cfg.to_toml().map_err(input)?.as_bytes(),
    )
    .map_err(input)?;
    let train = ManifestSplit::new(&m, Split::Train, LabelSource::Cache(cache.clone()));
    let val = ManifestSplit::new(&m, Split::Val, LabelSource::Cache(cache));
    let opts = FitOptions {
        out_dir: Some(dir.clone()),
        teacher_fingerprint: teacher.fingerprint(),
    };
    let outcome = fit(&cfg.training, &train, Some(&val), &opts).map_err(training)?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        metric_name: cfg.training.selection_metric.name().to_string(),
        steps: outcome.steps.len(),
        pixels_eligible: outcome.correction.pixels_eligible,
        pixels_corrected: outcome.correction.pixels_corrected,
        class_weights: outcome.class_weights.clone(),
    };
    write_json(&dir.join("summary.json"), &summary).map_err(input)?;
    if let Some(gt) = &cfg.data.gt_dir {
        let split = cfg.data.eval_split;
        let source = ManifestSplit::new(&m, split, LabelSource::Dir(gt.clone()));
        if !source.is_empty() {
            let ev = evaluate_model(&outcome.best_model, &source, cfg.data.ignore_label)
                .map_err(input)?;
            write_eval(
                &dir,
                &format!("{}_metrics", split.as_str()),
                &ev,
                &m.class_names,
            )
            .map_err(input)?;
            println!("{}", format_table(&ev.report, &m.class_names));
        }
    }
    println!(
        "best epoch {} ({} = {:?}); checkpoints in {}",
        outcome.best_epoch,
        summary.metric_name,
        outcome.best_metric,
        dir.display()
    );
    Ok(EXIT_OK)
}

fn write_eval(dir: &Path, stem: &str, ev: &Evaluation, class_names: &[String]) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), ev)?;
    write_atomic(
        &dir.join(format!("{stem}.txt")),
        format_table(&ev.report, class_names).as_bytes(),
    )
}

pub fn cmd_predict(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let m = manifest(cfg).map_err(input)?;
    let ckpt_path = cfg
        .data
        .checkpoint
        .as_ref()
        .ok_or_else(|| input(Error::config("data.checkpoint is required")))?;
    let ckpt = load_checkpoint(ckpt_path).map_err(input)?;
    if ckpt.config.num_classes != m.num_classes() {
        return Err(input(Error::Checkpoint(format!(
            "checkpoint predicts {} classes, manifest lists {}",
            ckpt.config.num_classes,
            m.num_classes()
        ))));
    }
    let model = ckpt.inference_model(cfg.training.use_ema);
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs/predict"));
    let classes_dir = dir.join("classes");
    let fg_dir = dir.join("foreground");
    std::fs::create_dir_all(&classes_dir).map_err(|e| input(e.into()))?;
    std::fs::create_dir_all(&fg_dir).map_err(|e| input(e.into()))?;
    let split = cfg.data.eval_split;
    let mut n = 0;
    for rec in m.records_in(split) {
        let image = crate::pseudo_labels::load_rgb(&m.image_file(rec)).map_err(input)?;
        let pred = predict_image(model, &image).map_err(training)?;
        pred.classes
            .write_png(&classes_dir.join(format!("{}.png", rec.image_id)))
            .map_err(input)?;
        pred.foreground_image()
            .save(fg_dir.join(format!("{}.png", rec.image_id)))
            .map_err(|e| input(e.into()))?;
        n += 1;
    }
    println!("{n} {} images -> {}", split.as_str(), dir.display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let m = manifest(cfg).map_err(input)?;
    let pred = cfg
        .data
        .predictions
        .as_ref()
        .ok_or_else(|| input(Error::config("data.predictions is required")))?;
    let gt = cfg
        .data
        .gt_dir
        .as_ref()
        .ok_or_else(|| input(Error::config("data.gt_dir is required")))?;
    let split = cfg.data.eval_split;
    let ev = evaluate_split(&m, split, pred, gt, cfg.data.ignore_label).map_err(input)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs/eval"));
    write_eval(
        &dir,
        &format!("{}_metrics", split.as_str()),
        &ev,
        &m.class_names,
    )
    .map_err(input)?;
    println!("{}", format_table(&ev.report, &m.class_names));
    Ok(EXIT_OK)
}

/// Paired results of `synth-bench`.
#[derive(Debug, Serialize)]
pub struct SynthBenchReport {
    pub noisy: crate::synthetic::PairedReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean: Option<crate::synthetic::PairedReport>,
}

pub fn cmd_synth_bench(cfg: &RunConfig, out: Option<&Path>, seeds: u64) -> CmdResult {
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs/synth-bench"));
    let synth = &cfg.synth;
    let data_dir = dir.join("dataset");
    let items = generate_dataset(&synth.scene, &synth.noise, synth.sizes).map_err(input)?;
    let emitted = emit_dataset(&data_dir, &synth.scene, &synth.noise, &items).map_err(input)?;
    let mut data_cfg = cfg.clone();
    data_cfg.data.manifest = Some(emitted.manifest_path.clone());
    data_cfg.data.gt_dir = Some(emitted.gt_dir.clone());
    data_cfg.data.cache_root = data_dir.join("cache");
    data_cfg.teacher = emitted.teacher.clone();
    let (teacher, cache) = teacher_and_cache(&data_cfg, &emitted.manifest).map_err(input)?;
    let report = build_pseudo_labels(
        &emitted.manifest,
        teacher.as_ref(),
        &data_cfg.pseudo_label,
        &cache,
    );
    if !report.failures.is_empty() {
        return Err(Failure {
            code: EXIT_TEACHER,
            error: Error::Teacher {
                message: format!("{} synthetic images failed", report.failures.len()),
                retriable: false,
            },
        });
    }
    write_atomic(
        &data_dir.join("config.toml"),
        data_cfg.to_toml().map_err(input)?.as_bytes(),
    )
    .map_err(input)?;
    println!("dataset -> {}", data_dir.display());
    if seeds == 0 {
        return Ok(EXIT_OK);
    }

    let setup = AblationSetup {
        scene: synth.scene.clone(),
        noise: synth.noise.clone(),
        sizes: synth.sizes,
        train: cfg.training.clone(),
    };
    let seed_list: Vec<u64> = (0..seeds).map(|i| synth.scene.seed + i).collect();
    let progress = |o: &crate::synthetic::AblationOutcome| {
        log::info!(
            "seed {} correction {}: recall_bin {:?}, miou_anom {:?}",
            o.seed,
            if o.with_correction { "on" } else { "off" },
            o.test.recall_bin,
            o.test.miou_anom
        );
    };
    let noisy = run_paired(&setup, &seed_list, progress).map_err(training)?;
    let clean = if synth.clean_control {
        let clean_setup = AblationSetup {
            noise: NoiseProfile::clean(),
            ..setup.clone()
        };
        Some(run_paired(&clean_setup, &seed_list, progress).map_err(training)?)
    } else {
        None
    };
    let mut text = format!("noisy teacher\n{}", format_paired(&noisy));
    if let Some(c) = &clean {
        text.push_str(&format!("\nclean teacher\n{}", format_paired(c)));
    }
    let bench = SynthBenchReport { noisy, clean };
    write_json(&dir.join("paired_report.json"), &bench).map_err(input)?;
    write_atomic(&dir.join("paired_report.txt"), text.as_bytes()).map_err(input)?;
    println!("{text}");
    Ok(EXIT_OK)
}
