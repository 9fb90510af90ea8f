//! Confusion-matrix metrics for predicted class maps.

use boxdistill::labels::LabelMap;
use boxdistill::metrics::{evaluate_pairs, format_table, ConfusionMatrix, IGNORE_LABEL};

fn main() -> anyhow::Result<()> {
    let gt = LabelMap::from_vec(4, 2, vec![0, 0, 1, 1, 0, 2, 2, IGNORE_LABEL])?;
    let pred = LabelMap::from_vec(4, 2, vec![0, 1, 1, 0, 0, 2, 1, 2])?;
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate_maps(&pred, &gt, Some(IGNORE_LABEL))?;
    println!("confusion (rows gt, cols pred): {:?}", cm.counts());
    println!("binary (tp, fp, fn, tn): {:?}", cm.binary_counts());

    let pairs = vec![
        ("a".to_string(), pred.clone(), gt.clone()),
        ("b".to_string(), gt.clone(), gt.clone()),
    ];
    let ev = evaluate_pairs(&pairs, 3, Some(IGNORE_LABEL))?;
    let names = vec!["dirt".to_string(), "damage".to_string()];
    print!("{}", format_table(&ev.report, &names));
    for img in &ev.per_image {
        println!("{}: miou_anom {:?}", img.image_id, img.report.miou_anom);
    }
    println!(
        "f1_anom collapsed {:?} vs per-class mean {:?}",
        ev.report.f1_anom, ev.report.f1_anom_macro
    );
    Ok(())
}
