//! Parse YOLO box files, convert them to pixel rectangles and round-trip a
//! dataset manifest.

use boxdistill::annotations::{
    box_to_pixels, format_yolo_annotations, load_manifest, parse_yolo_annotations, save_manifest,
    DatasetManifest, ImageRecord, Split,
};

fn main() -> anyhow::Result<()> {
    let text = "0 0.50 0.50 0.20 0.10\n1 0.10 0.90 0.05 0.30\n";
    let boxes = parse_yolo_annotations(text, 2)?;
    for b in &boxes {
        let px = box_to_pixels(b, 640, 480);
        println!(
            "class {} -> pixels [{}, {}) x [{}, {}), area {}",
            b.class_id,
            px.x0,
            px.x1,
            px.y0,
            px.y1,
            px.area()
        );
    }
    print!("re-encoded:\n{}", format_yolo_annotations(&boxes));

    match parse_yolo_annotations("0 0.5 0.5 0.2\n", 2) {
        Ok(_) => println!("unexpectedly accepted a short line"),
        Err(e) => println!("rejected: {e}"),
    }

    let dir = tempfile::tempdir()?;
    let manifest = DatasetManifest {
        class_names: vec!["dirt".into(), "damage".into()],
        records: ["a", "b", "c"]
            .iter()
            .zip([Split::Train, Split::Val, Split::Test])
            .map(|(id, split)| ImageRecord {
                image_id: id.to_string(),
                image_path: format!("images/{id}.png").into(),
                annotation_path: format!("labels/{id}.txt").into(),
                width: 640,
                height: 480,
                split,
                boxes: boxes.clone(),
            })
            .collect(),
        root: dir.path().to_path_buf(),
    };
    let path = dir.path().join("manifest.json");
    save_manifest(&manifest, &path)?;
    let (loaded, warnings) = load_manifest(&path)?;
    println!(
        "{} classes, splits {:?}",
        loaded.num_classes(),
        loaded.split_counts()
    );
    println!(
        "{} warnings (image files were never written)",
        warnings.len()
    );
    Ok(())
}
