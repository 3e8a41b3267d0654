mod common;

use common::{grid, naive_conv};
use coperception::detection::{
    assign_targets, decode_cell, decode_heads, detection_loss_t, encode_cell, evaluate_ap, evaluate_ap_frames, extract_boxes,
    focal_loss, smooth_l1, Detection, HeadOutput, LossConfig,
};
use coperception::geometry::{rotated_iou_bev, Box7};
use coperception::gridcore::gradcheck::GradCheck;
use coperception::gridcore::{ConvGeom, ConvParams, FeatureGrid};
use coperception::rng::keyed;
use coperception::scenario::GridSpec;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn spec() -> GridSpec {
    GridSpec {
        x_range: [-4.0, 4.0],
        y_range: [-3.0, 3.0],
        voxel: 0.5,
        channels: 4,
    }
}

fn head_with(f: impl Fn(usize, usize) -> (f64, [f64; 7])) -> HeadOutput {
    let s = spec();
    let (h, w) = (s.height(), s.width());
    let mut cls = FeatureGrid::zeros(2, h, w);
    let mut reg = FeatureGrid::zeros(7, h, w);
    for r in 0..h {
        for c in 0..w {
            let (margin, rg) = f(r, c);
            cls.set(1, r, c, margin);
            for (k, v) in rg.into_iter().enumerate() {
                reg.set(k, r, c, v);
            }
        }
    }
    HeadOutput {
        regression: reg,
        classification: cls,
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn heads_match_conv_oracle() {
    let x = grid(5, 4, 6, 1);
    let mut rng = keyed(2, &[0]);
    let reg = ConvParams::xavier(ConvGeom::same(7, 5, 1), &mut rng);
    let cls = ConvParams::xavier(ConvGeom::same(2, 5, 1), &mut rng);
    let out = decode_heads(&x, &reg, &cls).unwrap();
    assert_eq!(out.regression.shape(), (7, 4, 6));
    assert_eq!(out.classification.shape(), (2, 4, 6));
    assert!(out.regression.max_abs_diff(&naive_conv(&x, &reg)) < 1e-12);
    assert!(out.classification.max_abs_diff(&naive_conv(&x, &cls)) < 1e-12);

    let mut b = ConvParams::zeros(ConvGeom::same(7, 5, 1));
    b.bias = (0..7).map(|i| i as f64 - 3.0).collect();
    let out = decode_heads(&FeatureGrid::zeros(5, 2, 2), &b, &ConvParams::zeros(ConvGeom::same(2, 5, 1))).unwrap();
    for k in 0..7 {
        assert!(out.regression.channel(k).iter().all(|&v| v == k as f64 - 3.0));
    }
    assert!(decode_heads(&x, &cls, &reg).is_err());
}

#[test]
fn background_everywhere_gives_nothing() {
    let out = head_with(|_, _| (-30.0, [0.0; 7]));
    assert!(extract_boxes(&out, &spec(), 0.3, 0.5).unwrap().is_empty());
}

#[test]
fn one_confident_cell_decodes_unit_box_at_centre() {
    let out = head_with(|r, c| if (r, c) == (5, 9) { (logit(0.99), [0.0; 7]) } else { (-30.0, [0.0; 7]) });
    let d = extract_boxes(&out, &spec(), 0.5, 0.5).unwrap();
    assert_eq!(d.len(), 1);
    assert!((d[0].score - 0.99).abs() < 1e-12);
    let (x, y) = spec().cell_center(5, 9);
    let b = d[0].bbox;
    assert_eq!((b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw), (x, y, 0.0, 1.0, 1.0, 1.0, 0.0));
}

#[test]
fn overlapping_cells_keep_the_stronger_box() {
    // Neighbouring cells both predict a 2 m box; 0.5 m apart they overlap heavily.
    let big = [0.0, 0.0, 0.0, 2f64.ln(), 2f64.ln(), 0.0, 0.0];
    let out = head_with(|r, c| match (r, c) {
        (4, 4) => (logit(0.8), big),
        (4, 5) => (logit(0.9), big),
        (10, 12) => (logit(0.6), big),
        _ => (-30.0, [0.0; 7]),
    });
    let dets = extract_boxes(&out, &spec(), 0.5, 0.3).unwrap();

    // Reference: greedy loop over candidates sorted by score.
    let mut cands: Vec<(f64, Box7)> = vec![];
    for (r, c, p) in [(4, 4, 0.8), (4, 5, 0.9), (10, 12, 0.6)] {
        cands.push((p, decode_cell(&out.regression.column(r, c), &spec(), r, c).unwrap()));
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<(f64, Box7)> = vec![];
    for (p, b) in cands {
        if kept.iter().all(|(_, k)| rotated_iou_bev(k, &b).unwrap() <= 0.3) {
            kept.push((p, b));
        }
    }
    assert_eq!(dets.len(), 2);
    for (d, (p, b)) in dets.iter().zip(&kept) {
        assert!((d.score - p).abs() < 1e-12);
        assert_eq!(d.bbox, *b);
    }
    assert_eq!(dets[0].bbox.cx, spec().cell_center(4, 5).0);
}

#[test]
fn targets_round_trip_through_decoding() {
    let s = spec();
    let gt = Box7::new(1.1, -0.7, 0.8, 3.0, 1.6, 1.5, 0.4).unwrap();
    let t = assign_targets(&[gt], &s);
    assert!(t.positives() > 10);
    for r in 0..s.height() {
        for c in 0..s.width() {
            let (x, y) = s.cell_center(r, c);
            assert_eq!(t.labels[r * s.width() + c], gt.contains_bev(x, y));
            if gt.contains_bev(x, y) {
                let b = decode_cell(&encode_cell(&gt, &s, r, c), &s, r, c).unwrap();
                assert!((b.cx - gt.cx).abs() < 1e-12 && (b.length - gt.length).abs() < 1e-12);
                assert_eq!(t.regression.column(r, c), encode_cell(&gt, &s, r, c).to_vec());
            }
        }
    }
}

#[test]
fn smooth_l1_values_and_joint() {
    assert!((smooth_l1(&[3.0], &[0.0], 1.0).unwrap() - 2.5).abs() < 1e-15);
    for beta in [1.0 / 9.0, 0.5, 2.0] {
        let f = |d: f64| smooth_l1(&[d], &[0.0], beta).unwrap();
        assert!((f(beta) - 0.5 * beta).abs() < 1e-15);
        assert!((0.5 * beta * beta / beta - 0.5 * beta).abs() < 1e-15);
        let h = 1e-7;
        assert!(((f(beta + h) - f(beta)) / h - 1.0).abs() < 1e-6);
        assert!(((f(beta) - f(beta - h)) / h - 1.0).abs() < 1e-5);
    }
}

#[test]
fn focal_reductions() {
    let z: f64 = 0.7;
    let logits = FeatureGrid::new(2, 1, 1, vec![0.0, z]).unwrap();
    let p = 1.0 / (1.0 + (-z).exp());
    let l = focal_loss(&logits, &[true], 0.5, 0.0).unwrap();
    assert!((l - 0.5 * -p.ln()).abs() < 1e-15);
    let l = focal_loss(&logits, &[false], 0.5, 0.0).unwrap();
    assert!((l - 0.5 * -(1.0 - p).ln()).abs() < 1e-15);

    let pt = FeatureGrid::new(2, 1, 1, vec![0.0, logit(0.9)]).unwrap();
    let l = focal_loss(&pt, &[true], 1.0, 2.0).unwrap();
    assert!((l - 0.00105361).abs() < 5e-9);
    assert!((l - (-(0.1f64).powi(2) * 0.9f64.ln())).abs() < 1e-15);

    let sure = FeatureGrid::new(2, 1, 1, vec![-40.0, 40.0]).unwrap();
    assert!(focal_loss(&sure, &[true], 0.25, 2.0).unwrap() < 1e-30);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let s = spec();
    let gt = Box7::new(0.3, 0.2, 0.8, 3.0, 1.6, 1.5, 0.4).unwrap();
    let t = assign_targets(&[gt], &s);
    let (h, w) = (s.height(), s.width());
    let reg = grid(7, h, w, 3);
    let cls = grid(2, h, w, 4);
    let r = GradCheck::new(1e-6)
        .inputs(&[reg, cls], |tape, v| detection_loss_t(tape, v[0], v[1], &t, &LossConfig::default()))
        .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn spread_boxes(n: usize) -> Vec<Box7> {
    (0..n)
        .map(|i| Box7::new(10.0 * i as f64, 0.0, 0.8, 4.0, 2.0, 1.6, 0.1 * i as f64).unwrap())
        .collect()
}

fn det(b: Box7, score: f64) -> Detection {
    Detection { bbox: b, score }
}

#[test]
fn ap_examples() {
    let gts = spread_boxes(3);
    let exact: Vec<_> = gts.iter().enumerate().map(|(i, &b)| det(b, 0.1 + 0.2 * i as f64)).collect();
    assert_eq!(evaluate_ap(&exact, &gts, 0.7).unwrap(), 1.0);
    assert_eq!(evaluate_ap(&[], &gts, 0.5).unwrap(), 0.0);
    assert_eq!(evaluate_ap(&[], &[], 0.5).unwrap(), 1.0);
    assert_eq!(evaluate_ap(&exact, &[], 0.5).unwrap(), 0.0);

    let stray = Box7::new(100.0, 50.0, 0.8, 4.0, 2.0, 1.6, 0.0).unwrap();
    let dets = [det(gts[0], 0.9), det(stray, 0.8), det(gts[1], 0.7)];
    let ap = evaluate_ap(&dets, &gts, 0.5).unwrap();
    let hand = 1.0 * (1.0 / 3.0) + (2.0 / 3.0) * (1.0 / 3.0);
    assert!((ap - hand).abs() < 1e-15);
    assert!((ap - 0.5556).abs() < 1e-4);
}

#[test]
fn duplicate_detection_counts_once() {
    let gts = spread_boxes(1);
    let dets = [det(gts[0], 0.9), det(gts[0], 0.8)];
    // PR points (1, 1) then (1, 1/2): the envelope keeps precision 1 at recall 1.
    assert_eq!(evaluate_ap(&dets, &gts, 0.5).unwrap(), 1.0);
}

#[test]
fn pooled_ap_ranks_globally_and_matches_per_frame() {
    let boxes = spread_boxes(2);
    let (a, b) = (boxes[0], boxes[1]);
    // Frame 1 holds `a`; frame 2 holds `b` and a detection where `a` would be.
    let f1 = ([det(a, 0.9)], [a]);
    let f2 = ([det(a, 0.8), det(b, 0.7)], [b]);
    let ap = evaluate_ap_frames(&[(&f1.0, &f1.1), (&f2.0, &f2.1)], 0.5).unwrap();
    // Ranked: TP (1/2, 1), FP (1/2, 1/2), TP (1, 2/3).
    let hand = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    assert!((ap - hand).abs() < 1e-15);
    let mean = (evaluate_ap(&f1.0, &f1.1, 0.5).unwrap() + evaluate_ap(&f2.0, &f2.1, 0.5).unwrap()) / 2.0;
    assert_eq!(mean, 0.75);
    let empty: [(&[Detection], &[Box7]); 2] = [(&[], &[]), (&f1.0, &f1.1)];
    assert_eq!(evaluate_ap_frames(&empty, 0.5).unwrap(), 1.0);
}

fn jittered(seed: u64, n_gt: usize, n_det: usize) -> (Vec<Box7>, Vec<Detection>) {
    let gts = spread_boxes(n_gt);
    let mut rng = keyed(seed, &[0]);
    let dets = (0..n_det)
        .map(|i| {
            let g = gts[i % n_gt];
            let b = Box7::new(
                g.cx + rng.random_range(-1.5..1.5),
                g.cy + rng.random_range(-1.0..1.0),
                0.8,
                g.length * rng.random_range(0.8..1.2),
                g.width,
                1.6,
                g.yaw + rng.random_range(-0.3..0.3),
            )
            .unwrap();
            det(b, rng.random_range(0.0..1.0))
        })
        .collect();
    (gts, dets)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn focal_nonnegative_and_decreasing(a in 0.0..1.0f64, g in 0.0..5.0f64, z1 in -20.0..20.0f64, dz in 0.01..5.0f64) {
        let at = |z: f64| focal_loss(&FeatureGrid::new(2, 1, 1, vec![0.0, z]).unwrap(), &[true], a, g).unwrap();
        prop_assert!(at(z1) >= 0.0);
        prop_assert!(at(z1 + dz) <= at(z1));
    }

    #[test]
    fn ap_order_invariant_and_threshold_monotone(seed in 0u64..2000, n_gt in 1usize..5, n_det in 0usize..9) {
        let (gts, mut dets) = jittered(seed, n_gt, n_det);
        let a = evaluate_ap(&dets, &gts, 0.5).unwrap();
        dets.shuffle(&mut keyed(seed, &[1]));
        prop_assert_eq!(a, evaluate_ap(&dets, &gts, 0.5).unwrap());
        prop_assert!(evaluate_ap(&dets, &gts, 0.7).unwrap() <= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn top_scoring_true_positive_never_hurts(seed in 0u64..2000, n_gt in 1usize..5, n_det in 0usize..9) {
        let (mut gts, dets) = jittered(seed, n_gt, n_det);
        let before = evaluate_ap(&dets, &gts, 0.5).unwrap();
        let extra = Box7::new(-50.0, 30.0, 0.8, 4.0, 2.0, 1.6, 0.0).unwrap();
        gts.push(extra);
        let base = evaluate_ap(&dets, &gts, 0.5).unwrap();
        let mut more = dets.clone();
        more.push(det(extra, 2.0));
        prop_assert!(evaluate_ap(&more, &gts, 0.5).unwrap() >= base);
        prop_assert!(before >= 0.0);
    }
}
