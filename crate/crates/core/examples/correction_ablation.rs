//! Paired training runs with and without label correction under a noisy
//! teacher, scored on clean ground truth.
//!
//! Usage: `correction_ablation [SEEDS] [EPOCHS]` (defaults 1 and the setup's).

use boxdistill::synthetic::{format_paired, run_paired, AblationSetup};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let mut setup = AblationSetup::default();
    if let Some(e) = args.next() {
        setup.train.epochs = e.parse()?;
    }
    let seed_list: Vec<u64> = (1..=seeds).collect();
    let report = run_paired(&setup, &seed_list, |o| {
        println!(
            "seed {} correction {:>3}: recall_bin {:?}, corrected {:.3}%",
            o.seed,
            if o.with_correction { "on" } else { "off" },
            o.test.recall_bin,
            100.0 * o.corrected_fraction()
        )
    })?;
    print!("{}", format_paired(&report));
    Ok(())
}
