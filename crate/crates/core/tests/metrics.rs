mod common;

use common::*;
use lightseg::metrics::{mean_of_ious, ClassSet, ConfusionMatrix, LabelMask, MetricsReport, UndefinedPolicy};
use proptest::prelude::*;
use rand::Rng;

const TABLE_IOUS: [f64; 9] = [43.5, 59.3, 21.2, 61.2, 73.3, 64.9, 15.1, 32.7, 82.8];

#[test]
fn published_per_class_ious_average_to_the_published_mean() {
    let ious: Vec<Option<f64>> = TABLE_IOUS.iter().map(|&v| Some(v)).collect();
    let m = mean_of_ious(&ious, UndefinedPolicy::Exclude).unwrap();
    assert!((m - 50.44).abs() <= 0.01, "{m}");
}

#[test]
fn matrix_iou_equals_set_counting() {
    let mut r = rng(5);
    let classes = ClassSet::numbered(5);
    for _ in 0..100 {
        let pred: Vec<u8> = (0..256).map(|_| r.random_range(0..5)).collect();
        // some ground-truth pixels are ignored
        let gt: Vec<u8> = (0..256)
            .map(|_| if r.random_bool(0.05) { 255 } else { r.random_range(0..5) })
            .collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&LabelMask::new(1, 16, 16, pred.clone()), &LabelMask::new(1, 16, 16, gt.clone()), &classes)
            .unwrap();
        let ious = cm.iou_per_class();
        let mut defined = Vec::new();
        for k in 0..5u8 {
            let want = set_iou(&pred, &gt, k, 255);
            assert_eq!(ious[k as usize], want);
            defined.extend(want);
        }
        let want_miou = defined.iter().sum::<f64>() / defined.len() as f64;
        assert_eq!(cm.mean_iou(UndefinedPolicy::Exclude).unwrap(), want_miou);
    }
}

#[test]
fn floodnet_report_table() {
    let classes = ClassSet::floodnet();
    let gt = LabelMask::new(1, 3, 3, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
    let mut cm = ConfusionMatrix::new(9);
    cm.accumulate(&gt, &gt, &classes).unwrap();
    let report = MetricsReport::from_confusion(&cm, &classes).unwrap();
    assert_eq!(report.miou, 1.0);
    assert_eq!(report.pixel_accuracy, 1.0);
    let table = report.to_table();
    assert!(table.contains("pool") && table.contains("grass"));
}

fn masks(k: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0..k, 64), prop::collection::vec(0..k, 64))
}

proptest! {
    #[test]
    fn ious_are_bounded_and_symmetric((pred, gt) in masks(4)) {
        let classes = ClassSet::numbered(4);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&LabelMask::new(1, 8, 8, pred.clone()), &LabelMask::new(1, 8, 8, gt.clone()), &classes).unwrap();
        let mut swapped = ConfusionMatrix::new(4);
        swapped.accumulate(&LabelMask::new(1, 8, 8, gt), &LabelMask::new(1, 8, 8, pred), &classes).unwrap();
        prop_assert_eq!(cm.transpose(), swapped.clone());
        prop_assert_eq!(cm.iou_per_class(), swapped.iou_per_class());
        for v in cm.iou_per_class().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(cm.total(), 64);
        let acc = cm.pixel_accuracy().unwrap().global;
        prop_assert_eq!(acc, cm.trace() as f64 / 64.0);
    }

    #[test]
    fn accumulation_is_additive((p1, g1) in masks(3), (p2, g2) in masks(3)) {
        let classes = ClassSet::numbered(3);
        let m = |v: &Vec<u8>| LabelMask::new(1, 8, 8, v.clone());
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&m(&p1), &m(&g1), &classes).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&m(&p2), &m(&g2), &classes).unwrap();
        let mut both = ConfusionMatrix::new(3);
        both.accumulate(&LabelMask::stack(&[m(&p1), m(&p2)]).unwrap(), &LabelMask::stack(&[m(&g1), m(&g2)]).unwrap(), &classes).unwrap();
        prop_assert_eq!(a + b, both);
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0u8..5, 64)) {
        let classes = ClassSet::numbered(5);
        let mut cm = ConfusionMatrix::new(5);
        let m = LabelMask::new(1, 8, 8, gt);
        cm.accumulate(&m, &m, &classes).unwrap();
        prop_assert_eq!(cm.mean_iou(UndefinedPolicy::Exclude).unwrap(), 1.0);
    }
}
