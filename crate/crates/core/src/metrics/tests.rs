use std::collections::VecDeque;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::manifest::{DatasetManifest, Format, Split, TimepointRecord};
use crate::rng::seeded;
use crate::volume::Grid;

fn grid(n: usize) -> Grid {
    Grid::isotropic([n; 3], 1.0).unwrap()
}

/// 26-connected components by breadth-first search, in first-voxel order.
fn flood(m: &Mask) -> Vec<Vec<usize>> {
    let g = m.grid();
    let d = g.dims;
    let mut label = vec![usize::MAX; g.len()];
    let mut out = Vec::new();
    for s in m.indices() {
        if label[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[s] = id;
        let mut comp = vec![s];
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            let c = g.coords(v);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let p = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if (0..3).any(|a| p[a] < 0 || p[a] >= d[a] as i64) {
                            continue;
                        }
                        let w = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                        if m.contains(w) && label[w] == usize::MAX {
                            label[w] = id;
                            comp.push(w);
                            q.push_back(w);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Applies the rule to every (gt, pred) component pair directly.
fn oracle(pred: &Mask, gt: &Mask, p: &DetectionParams) -> (usize, usize, usize, usize, f64) {
    let keep = |m: &Mask| -> Vec<Vec<usize>> {
        flood(m).into_iter().filter(|c| c.len() as f64 * m.grid().voxel_volume() >= p.min_volume_mm3).collect()
    };
    let gts = keep(gt);
    let preds = keep(pred);
    let inter = |a: &[usize], b: &[usize]| a.iter().filter(|v| b.contains(v)).count();
    let mut tp = 0;
    for l in &gts {
        let hit: usize = preds.iter().map(|q| inter(l, q)).sum();
        let (hit, n) = (hit as f64, l.len() as f64);
        let ok = match p.rule {
            OverlapRule::LowerOnly => hit >= p.min_overlap * n,
            OverlapRule::Literal => hit >= p.min_overlap * n && hit <= p.max_overlap * n,
        };
        tp += ok as usize;
    }
    let tp_pred = preds.iter().filter(|q| gts.iter().any(|l| inter(l, q) > 0)).count();
    let s = if gts.is_empty() { 1.0 } else { tp as f64 / gts.len() as f64 };
    let pr = if preds.is_empty() { 1.0 } else { tp_pred as f64 / preds.len() as f64 };
    let f1 = if s + pr == 0.0 { 0.0 } else { 2.0 * s * pr / (s + pr) };
    (tp, tp_pred, gts.len(), preds.len(), f1)
}

fn blobs(seed: u64, n: usize) -> Mask {
    let g = grid(n);
    let mut rng = seeded(seed);
    let mut m = Mask::empty(g.clone());
    for _ in 0..rng.random_range(1..8) {
        let c = [0; 3].map(|_| rng.random_range(0..n) as i64);
        let r = rng.random_range(0.5..2.5f64);
        for i in 0..g.len() {
            let p = g.coords(i);
            let d2: f64 = (0..3).map(|a| (p[a] as i64 - c[a]).pow(2) as f64).sum();
            if d2 <= r * r {
                m.set(i, true);
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        m.set(rng.random_range(0..g.len()), true);
    }
    m
}

#[test]
fn dice_fixtures() {
    let g = grid(4);
    let a = Mask::from_indices(g.clone(), 0..8);
    let b = Mask::from_indices(g.clone(), 4..12);
    assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
    assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    assert_eq!(dice_score(&a, &Mask::from_indices(g.clone(), 20..30)).unwrap(), 0.0);
    assert_eq!(dice_score(&Mask::empty(g.clone()), &Mask::empty(g.clone())).unwrap(), 1.0);
    let other = Mask::empty(grid(5));
    assert!(matches!(dice_score(&a, &other), Err(Error::Validation(_))));
}

#[test]
fn perfect_single_lesion() {
    let g = grid(8);
    let gt = Mask::from_indices(g.clone(), (0..100).map(|i| i + 100));
    let r = detection_f1(&gt, &gt, &DetectionParams::default()).unwrap();
    assert_eq!((r.sensitivity, r.precision, r.f1), (1.0, 1.0, 1.0));
    let lit = DetectionParams {
        rule: OverlapRule::Literal,
        ..Default::default()
    };
    let r = detection_f1(&gt, &gt, &lit).unwrap();
    assert_eq!(r.tp, 0);
}

#[test]
fn five_percent_overlap_not_detected() {
    let g = grid(10);
    // 100-voxel slab, prediction covers 5 of its voxels
    let gt = Mask::from_indices(g.clone(), 0..100);
    let pred = Mask::from_indices(g.clone(), 0..5);
    let r = detection_f1(&pred, &gt, &DetectionParams::default()).unwrap();
    assert_eq!(r.tp, 0);
    assert_eq!(r.per_lesion[0].overlap_fraction, 0.05);
    assert_eq!(r.sensitivity, 0.0);
    // the prediction still touches the lesion
    assert_eq!(r.precision, 1.0);
    let p = DetectionParams {
        min_overlap: 0.1,
        ..Default::default()
    };
    let pred = Mask::from_indices(g, 0..10);
    assert_eq!(detection_f1(&pred, &gt, &p).unwrap().tp, 1);
}

#[test]
fn miss_everything_gives_zero_f1() {
    let g = grid(10);
    let gt = Mask::from_indices(g.clone(), 0..100);
    let pred = Mask::from_indices(g, 600..700);
    let r = detection_f1(&pred, &gt, &DetectionParams::default()).unwrap();
    assert_eq!(r.f1, 0.0);
}

#[test]
fn empty_conventions() {
    let g = grid(6);
    let e = Mask::empty(g);
    let r = detection_f1(&e, &e, &DetectionParams::default()).unwrap();
    assert_eq!((r.sensitivity, r.precision, r.f1), (1.0, 1.0, 1.0));
}

#[test]
fn small_components_filtered() {
    let g = grid(12);
    let two = [g.index(1, 1, 1), g.index(2, 1, 1)];
    let three = [g.index(6, 6, 6), g.index(7, 6, 6), g.index(8, 6, 6)];
    let gt = Mask::from_indices(g.clone(), two.iter().chain(&three).copied());
    let r = detection_f1(&gt, &gt, &DetectionParams::default()).unwrap();
    assert_eq!(r.n_gt_lesions, 1);
    assert_eq!(r.n_pred_lesions, 1);
}

#[test]
fn merged_prediction_counts_once_for_precision() {
    let g = grid(12);
    let gt = Mask::from_indices(g.clone(), (0..4).map(|x| g.index(x, 0, 0)).chain((6..10).map(|x| g.index(x, 0, 0))));
    let pred = Mask::from_indices(g.clone(), (0..10).map(|x| g.index(x, 0, 0)));
    let r = detection_f1(&pred, &gt, &DetectionParams::default()).unwrap();
    assert_eq!((r.tp, r.tp_pred, r.n_pred_lesions), (2, 1, 1));
}

#[test]
fn oracle_agreement_on_random_pairs() {
    for case in 0..50u64 {
        let pred = blobs(2 * case, 16);
        let gt = blobs(2 * case + 1, 16);
        for rule in [OverlapRule::LowerOnly, OverlapRule::Literal] {
            let p = DetectionParams {
                rule,
                ..Default::default()
            };
            let r = detection_f1(&pred, &gt, &p).unwrap();
            let (tp, tp_pred, ng, np, f1) = oracle(&pred, &gt, &p);
            assert_eq!((r.tp, r.tp_pred, r.n_gt_lesions, r.n_pred_lesions), (tp, tp_pred, ng, np), "case {case}");
            assert!((r.f1 - f1).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dice_symmetric(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (blobs(a, 10), blobs(b, 10));
        prop_assert_eq!(dice_score(&x, &y).unwrap(), dice_score(&y, &x).unwrap());
    }

    #[test]
    fn self_detection_is_perfect(seed in any::<u64>()) {
        let m = blobs(seed, 12);
        let r = detection_f1(&m, &m, &DetectionParams::default()).unwrap();
        prop_assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn report_bounds(a in any::<u64>(), b in any::<u64>()) {
        let r = detection_f1(&blobs(a, 12), &blobs(b, 12), &DetectionParams::default()).unwrap();
        prop_assert!(r.tp <= r.n_gt_lesions && r.tp_pred <= r.n_pred_lesions);
        for v in [r.sensitivity, r.precision, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mirroring_does_not_change_report(a in any::<u64>(), b in any::<u64>()) {
        let (p, g) = (blobs(a, 10), blobs(b, 10));
        let flip = |m: &Mask| {
            let gr = m.grid();
            Mask::from_indices(gr.clone(), m.indices().map(|i| {
                let c = gr.coords(i);
                gr.index(9 - c[0], c[1], 9 - c[2])
            }))
        };
        let r1 = detection_f1(&p, &g, &DetectionParams::default()).unwrap();
        let r2 = detection_f1(&flip(&p), &flip(&g), &DetectionParams::default()).unwrap();
        prop_assert_eq!((r1.tp, r1.tp_pred, r1.f1), (r2.tp, r2.tp_pred, r2.f1));
    }
}

fn longitudinal(t: usize) -> SubjectRecord {
    SubjectRecord {
        id: "m".into(),
        dataset: None,
        format: Format::Longitudinal,
        availability: LabelAvailability {
            new_t2: true,
            ..Default::default()
        },
        split: Split::Train,
        timepoints: (0..t)
            .map(|k| TimepointRecord {
                image: format!("img{k}.nii.gz").into(),
                wm: Some(format!("wm{k}.nii.gz").into()),
                new: (k > 0).then(|| format!("new{k}.nii.gz").into()),
                ..Default::default()
            })
            .collect(),
    }
}

#[test]
fn inversion_swaps_new_for_vanishing() {
    let s = longitudinal(2);
    let v = invert_timepoints(&s).unwrap();
    assert_eq!(v.timepoints[0].image, s.timepoints[1].image);
    assert_eq!(v.timepoints[1].image, s.timepoints[0].image);
    assert_eq!(v.timepoints[1].vanishing, s.timepoints[1].new);
    assert!(v.timepoints[1].new.is_none());
    assert!(v.availability.vanishing_t2 && !v.availability.new_t2);
    assert_eq!(invert_timepoints(&v).unwrap(), s);
}

#[test]
fn inversion_of_longer_series() {
    let mut s = longitudinal(4);
    s.timepoints[0].all = Some("all0.nii.gz".into());
    s.availability.all_t1 = true;
    let v = invert_timepoints(&s).unwrap();
    // new at old 3 vanishes at old 2, which is position 1 after reversal
    assert_eq!(v.timepoints[1].vanishing, s.timepoints[3].new);
    assert_eq!(v.timepoints[3].all, s.timepoints[0].all);
    assert!(!v.availability.all_t1 && v.availability.all_t2);
    assert_eq!(invert_timepoints(&v).unwrap(), s);
}

#[test]
fn inverted_subject_validates() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DatasetManifest::new("van", dir.path());
    m.subjects.push(invert_timepoints(&longitudinal(3)).unwrap());
    let json = m.to_json_string();
    DatasetManifest::from_json_str(&json, dir.path()).unwrap();
}

#[test]
fn inversion_rejects_cross_sectional() {
    let mut s = longitudinal(1);
    s.format = Format::CrossSectional;
    assert!(matches!(invert_timepoints(&s), Err(Error::Argument(_))));
}

#[test]
fn trajectories() {
    let g = grid(5);
    let e = Mask::empty(g.clone());
    let t = volume_trajectory("s", &[e.clone(), e.clone()], &[e.clone(), e.clone()]).unwrap();
    assert_eq!(t.predicted_mm3, vec![0.0, 0.0]);
    let ten = Mask::from_indices(g, 0..10);
    let t = volume_trajectory("s", &[ten.clone(), e.clone()], &[e.clone(), ten]).unwrap();
    assert_eq!(t.predicted_mm3, vec![10.0, 0.0]);
    assert_eq!(t.ground_truth_mm3, vec![0.0, 10.0]);
    assert!(matches!(volume_trajectory("s", &[e.clone()], &[e.clone(), e]), Err(Error::Argument(_))));
}

#[test]
fn pearson_cases() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-15);
    // means 2.5 and 2.75; sxy = 6.5, sxx = 5, syy = 8.75
    let expect = 6.5 / (5.0f64 * 8.75).sqrt();
    assert!((pearson(&x, &[1.0, 2.0, 3.0, 5.0]).unwrap() - expect).abs() < 1e-12);
    assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(pearson(&x, &[1.0; 3]), Err(Error::Argument(_))));
}
