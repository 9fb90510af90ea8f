//! Train the desk-scale student on noisy synthetic pseudo-labels, reload the
//! best checkpoint and score it on clean held-out ground truth.
//!
//! Usage: `train_student [EPOCHS]` (default 4).

use boxdistill::annotations::Split;
use boxdistill::metrics::format_table;
use boxdistill::model::checkpoint::load_checkpoint;
use boxdistill::model::ModelConfig;
use boxdistill::synthetic::{
    generate_dataset, NoiseProfile, SceneConfig, SplitSizes, SYNTHETIC_CLASSES,
};
use boxdistill::trainer::{
    evaluate_model, fit, FitOptions, InMemory, Sample, TrainingConfig, CKPT_BEST, TRAIN_LOG,
};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(4);
    let items = generate_dataset(
        &SceneConfig::default(),
        &NoiseProfile::default(),
        SplitSizes {
            train: 16,
            val: 4,
            test: 8,
        },
    )?;
    let split = |s: Split, clean: bool| {
        InMemory(
            items
                .iter()
                .filter(|it| it.split == s)
                .map(|it| Sample {
                    image_id: it.image_id.clone(),
                    image: it.sample.image.clone(),
                    labels: if clean {
                        it.sample.gt.clone()
                    } else {
                        it.labels.pseudo.clone()
                    },
                })
                .collect(),
        )
    };
    let cfg = TrainingConfig {
        model: ModelConfig::desk_scale(2),
        epochs,
        lr: 3e-3,
        ema_decay: 0.95,
        ..TrainingConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        teacher_fingerprint: "synthetic".into(),
    };
    let out = fit(
        &cfg,
        &split(Split::Train, false),
        Some(&split(Split::Val, false)),
        &opts,
    )?;
    for e in &out.epochs {
        println!(
            "epoch {}: loss {:.4}, selection {:?}, corrected {} px",
            e.epoch, e.mean_loss, e.selection, e.correction.pixels_corrected
        );
    }
    let log_lines = std::fs::read_to_string(dir.path().join(TRAIN_LOG))?
        .lines()
        .count();
    println!("best epoch {} ({log_lines} log records)", out.best_epoch);

    let ckpt = load_checkpoint(&dir.path().join(CKPT_BEST))?;
    println!(
        "checkpoint: step {}, {} = {:?}",
        ckpt.meta.step, ckpt.meta.metric_name, ckpt.meta.metric
    );
    let test = evaluate_model(
        ckpt.inference_model(cfg.use_ema),
        &split(Split::Test, true),
        None,
    )?;
    let names: Vec<String> = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    print!("{}", format_table(&test.report, &names));
    Ok(())
}
