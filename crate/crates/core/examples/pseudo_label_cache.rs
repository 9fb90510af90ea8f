//! Turn boxes into pixel labels with two reference teachers, cache the result
//! and score it against the ground truth it was derived from.

use boxdistill::annotations::Split;
use boxdistill::labels::LabelMap;
use boxdistill::metrics::evaluate_pairs;
use boxdistill::pseudo_labels::{
    build_pseudo_labels, cache_fingerprint, LabelCache, PseudoLabelOptions,
};
use boxdistill::synthetic::{
    emit_dataset, generate_dataset, NoiseProfile, SceneConfig, SplitSizes,
};
use boxdistill::teacher::TeacherKind;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let scene = SceneConfig {
        seed: 7,
        ..SceneConfig::default()
    };
    let noise = NoiseProfile::clean();
    let items = generate_dataset(
        &scene,
        &noise,
        SplitSizes {
            train: 12,
            val: 4,
            test: 0,
        },
    )?;
    let data = emit_dataset(dir.path(), &scene, &noise, &items)?;
    let opts = PseudoLabelOptions::default();

    for kind in [
        TeacherKind::OracleBoxfill,
        TeacherKind::OracleGt {
            gt_dir: data.gt_dir.clone(),
        },
    ] {
        let teacher = kind.build()?;
        let cache = LabelCache::new(
            dir.path().join("cache"),
            cache_fingerprint(&teacher.fingerprint(), &opts),
            2,
        );
        let report = build_pseudo_labels(&data.manifest, teacher.as_ref(), &opts, &cache);
        let again = build_pseudo_labels(&data.manifest, teacher.as_ref(), &opts, &cache);
        println!(
            "{}: {} images, {} boxes, {} generated; second pass {} cache hits",
            teacher.fingerprint(),
            report.images,
            report.boxes,
            report.generated,
            again.cache_hits
        );

        let pairs: Vec<(String, LabelMap, LabelMap)> = data
            .manifest
            .records
            .iter()
            .filter(|r| r.split != Split::Test)
            .map(|r| {
                let pseudo = cache.require(&r.image_id)?;
                let gt = LabelMap::read_png(&data.gt_dir.join(format!("{}.png", r.image_id)))?;
                Ok((r.image_id.clone(), pseudo, gt))
            })
            .collect::<boxdistill::Result<_>>()?;
        let r = evaluate_pairs(&pairs, 3, None)?.report;
        println!(
            "  pseudo vs gt: binary precision {:?}, recall {:?}",
            r.precision_bin, r.recall_bin
        );
    }
    Ok(())
}
