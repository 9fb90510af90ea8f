//! Build the student, inspect its parameter budget and run a forward pass.

use boxdistill::model::{preprocess, ModelConfig, ParamRole, StudentModel};
use boxdistill::synthetic::{generate_scene, SceneConfig};
use rand::SeedableRng;

fn main() -> anyhow::Result<()> {
    let full = ModelConfig::default().parameter_budget();
    println!(
        "ViT-S/14 student (analytic): {} of {} parameters trainable ({:.1}%)",
        full.trainable,
        full.total,
        100.0 * full.trainable_ratio()
    );

    let cfg = ModelConfig::desk_scale(2);
    let model = StudentModel::new(&cfg, 0)?;
    let report = model.parameter_report();
    println!(
        "desk-scale student: {} of {} trainable, backbone {} of {}",
        report.trainable, report.total, report.backbone_trainable, report.backbone_total
    );
    let mut by_role = std::collections::BTreeMap::new();
    for p in model.params().iter() {
        *by_role.entry(format!("{:?}", p.role)).or_insert(0usize) += p.elem_count();
    }
    for (role, n) in by_role {
        println!("  {role:>16}: {n}");
    }
    let frozen = model
        .params()
        .iter()
        .filter(|p| p.role == ParamRole::BackboneFrozen)
        .count();
    println!(
        "  {frozen} frozen backbone tensors, {} trainable tensors",
        model.trainable_vars().len()
    );

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let scene = generate_scene(&SceneConfig::default(), &mut rng);
    let x = preprocess(&scene.image, cfg.input_size)?.unsqueeze(0)?;
    let taps = model.extract_features(&x)?;
    println!(
        "backbone taps: {:?}",
        taps.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>()
    );
    let out = model.forward(&x, false)?;
    println!(
        "binary logits {:?}, fine logits {:?}",
        out.binary_logits.dims(),
        out.fine_logits.dims()
    );
    Ok(())
}
