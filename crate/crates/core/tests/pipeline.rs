use std::collections::BTreeSet;

use proptest::prelude::*;
use refseg_core::dataset::{
    assemble, load_manifest, save_manifest, split_by_scene, Scene, Split,
};
use refseg_core::exprgen::enumerate_expressions;
use refseg_core::maskgen::{generate_mask, SpatialPredicateConfig};
use refseg_core::metrics::{
    default_thresholds, mean_iou, overall_iou, precision_at, EvalReport, Overlap, ThresholdRule,
};
use refseg_core::raster::{load_label_map, BinaryMask, LabelMap, RasterError};
use refseg_core::synth::synth_scene;
use refseg_core::taxonomy::Taxonomy;

#[test]
fn label_png_round_trip_and_unknown_ids() {
    let tax = Taxonomy::refsegrs();
    let dir = tempfile::tempdir().unwrap();
    let map = synth_scene(&tax, 40, 3).unwrap();
    let path = dir.path().join("labels.png");
    map.save_png(&path).unwrap();
    assert_eq!(load_label_map(&path, &tax).unwrap(), map);

    let mut bad = map.clone();
    bad.set(7, 5, 25);
    bad.save_png(&path).unwrap();
    match load_label_map(&path, &tax) {
        Err(RasterError::UnknownClassId { x, y, value }) => assert_eq!((x, y, value), (7, 5, 25)),
        other => panic!("expected UnknownClassId, got {other:?}"),
    }
}

#[test]
fn assemble_matches_per_expression_oracle() {
    let tax = Taxonomy::refsegrs();
    let cfg = SpatialPredicateConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<Scene> = (0..4)
        .map(|i| Scene {
            id: format!("scene-{i}"),
            labels: synth_scene(&tax, 48, 100 + i).unwrap(),
            image_path: format!("images/scene-{i}.png").into(),
            label_path: format!("labels/scene-{i}.png").into(),
        })
        .collect();
    let (manifest, summary) = assemble(&scenes, &tax, &cfg, dir.path()).unwrap();

    let exprs = enumerate_expressions(&tax);
    let mut expected = 0;
    for s in &scenes {
        for e in &exprs {
            let mask = generate_mask(&s.labels, &tax, e, &cfg).unwrap();
            if mask.is_empty() {
                continue;
            }
            expected += 1;
            let rec = manifest
                .records
                .iter()
                .find(|r| r.scene_id == s.id && r.expression.text == e.text)
                .expect("non-empty mask has a record");
            assert_eq!(BinaryMask::load_png(&dir.path().join(&rec.mask_path)).unwrap(), mask);
            assert_eq!(rec.foreground_ratio, mask.foreground_ratio());
        }
    }
    assert_eq!(summary.triplets, expected);
    assert_eq!(summary.triplets + summary.dropped_empty, scenes.len() * exprs.len());

    let split = split_by_scene(&manifest, [0.5, 0.25, 0.25], 9).unwrap();
    split.check_scene_disjoint().unwrap();
    let path = dir.path().join("manifest.jsonl");
    save_manifest(&split, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, split);
    back.verify_masks(dir.path()).unwrap();
    let splits: BTreeSet<Split> = back.records.iter().filter_map(|r| r.split).collect();
    assert_eq!(splits.len(), 3);
}

#[test]
fn synthetic_scenes_are_valid_labels() {
    let tax = Taxonomy::refsegrs();
    for seed in 0..20 {
        let m: LabelMap = synth_scene(&tax, 32 + seed as usize, seed).unwrap();
        m.validate(&tax).unwrap();
    }
}

fn overlaps() -> impl Strategy<Value = Vec<Overlap>> {
    prop::collection::vec(
        (0u64..50, 0u64..50).prop_map(|(i, extra)| Overlap { intersection: i, union: i + extra }),
        1..20,
    )
}

proptest! {
    #[test]
    fn metrics_are_bounded_monotone_and_order_free(mut ov in overlaps()) {
        let report = EvalReport::from_overlaps(&ov, &default_thresholds(), ThresholdRule::Strict).unwrap();
        for w in report.pr.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
        for v in report.pr.iter().map(|p| p.1).chain([report.oiou, report.miou]) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        ov.reverse();
        let again = EvalReport::from_overlaps(&ov, &default_thresholds(), ThresholdRule::Strict).unwrap();
        prop_assert_eq!(report, again);
    }

    #[test]
    fn single_sample_metrics_coincide(i in 0u64..100, extra in 0u64..100) {
        let o = [Overlap { intersection: i, union: i + extra }];
        let iou = o[0].iou();
        prop_assert_eq!(overall_iou(&o).unwrap(), iou);
        prop_assert_eq!(mean_iou(&o).unwrap(), iou);
        for t in default_thresholds() {
            let p = precision_at(&o, t, ThresholdRule::Strict).unwrap();
            prop_assert_eq!(p, if iou > t.value() { 1.0 } else { 0.0 });
        }
    }
}
