//! Generate synthetic defect scenes, corrupt them with a noisy teacher and
//! write the images, ground truth and pseudo-labels as PNGs.
//!
//! Usage: `synthetic_scenes [OUT_DIR]` (default `synthetic_scenes_out`).

use boxdistill::labels::LabelMap;
use boxdistill::synthetic::{generate_dataset, NoiseProfile, SceneConfig, SplitSizes};

fn scaled(map: &LabelMap) -> image::GrayImage {
    let mut img = map.to_gray_image();
    img.pixels_mut()
        .for_each(|p| p.0[0] = p.0[0].saturating_mul(120));
    img
}

fn main() -> anyhow::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "synthetic_scenes_out".into()),
    );
    std::fs::create_dir_all(&out)?;
    let scene = SceneConfig {
        seed: 3,
        ..SceneConfig::default()
    };
    let sizes = SplitSizes {
        train: 6,
        val: 0,
        test: 0,
    };
    for (name, noise) in [
        ("clean", NoiseProfile::clean()),
        ("noisy", NoiseProfile::default()),
    ] {
        let items = generate_dataset(&scene, &noise, sizes)?;
        let (mut gt_px, mut pseudo_px, mut boxes, mut components) = (0, 0, 0, 0);
        for it in &items {
            gt_px += it.sample.gt.count_nonzero();
            pseudo_px += it.labels.pseudo.count_nonzero();
            boxes += it.labels.boxes.len();
            components += it.sample.components.len();
            it.sample
                .image
                .save(out.join(format!("{}_image.png", it.image_id)))?;
            scaled(&it.sample.gt).save(out.join(format!("{}_gt.png", it.image_id)))?;
            scaled(&it.labels.pseudo)
                .save(out.join(format!("{}_pseudo_{name}.png", it.image_id)))?;
        }
        println!(
            "{name} teacher: {components} components, {boxes} boxes, {gt_px} gt defect px, {pseudo_px} pseudo defect px"
        );
    }
    println!("PNGs in {}", out.display());
    Ok(())
}
