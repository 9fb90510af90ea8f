//! Load a run configuration with dotted overrides and print the result.
//!
//! Usage: `run_config [CONFIG.toml] [KEY=VALUE ...]`.

use boxdistill::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let path = match args.peek() {
        Some(a) if !a.contains('=') => args.next().map(std::path::PathBuf::from),
        _ => None,
    };
    let mut overrides: Vec<String> = args.collect();
    if overrides.is_empty() && path.is_none() {
        overrides = vec![
            "loss.tau=0.95".into(),
            "epochs=20".into(),
            "model.input_size=448".into(),
        ];
    }
    let cfg = RunConfig::load(path.as_deref(), &overrides)?;
    print!("{}", cfg.to_toml()?);
    println!("# training config hash {}", cfg.training.hash());
    match RunConfig::load(None, &["loss.tua=0.95".to_string()]) {
        Ok(_) => println!("# typo accepted?"),
        Err(e) => println!("# a misspelled key is rejected: {e}"),
    }
    Ok(())
}
