//! Library routines checked against deliberately naive reimplementations.
//! Each check panics on the first disagreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssacnn::eval::{mr_curve, GtBox};
use ssacnn::geometry::{decode, encode, iou, nms_indices, BBox, Detection};
use ssacnn::weakseg::{proposal_mask, rasterize_masks, FillRule, BACKGROUND, FOREGROUND, IGNORE};

fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    BBox { x: rng.random_range(-5.0..extent), y: rng.random_range(-5.0..extent), w, h }
}

/// IoU from corner coordinates, written independently of the library.
fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let (ax2, ay2, bx2, by2) = (a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h);
    let iw = ax2.min(bx2) - a.x.max(b.x);
    let ih = ay2.min(by2) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Quadratic NMS: repeatedly take the best remaining box and strike out all
/// remaining boxes overlapping it by more than the threshold.
fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && iou_oracle(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    keep
}

pub fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let n = rng.random_range(0..=20);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 60.0)).collect();
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        assert_eq!(nms_indices(&boxes, &scores, thr), nms_oracle(&boxes, &scores, thr), "case {case}");
    }
}

pub fn iou_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5000 {
        let (a, b) = (random_box(&mut rng, 50.0), random_box(&mut rng, 50.0));
        let v = iou(&a, &b);
        assert!((v - iou_oracle(&a, &b)).abs() < 1e-5);
        assert!((v - iou(&b, &a)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}

pub fn codec_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5000 {
        let anchor = BBox { w: rng.random_range(4.0..200.0), h: rng.random_range(4.0..200.0), ..random_box(&mut rng, 300.0) };
        let gt = BBox { w: rng.random_range(2.0..250.0), h: rng.random_range(2.0..250.0), ..random_box(&mut rng, 300.0) };
        let back = decode(&anchor, &encode(&anchor, &gt));
        for (p, q) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((p - q).abs() < 1e-5, "{back:?} vs {gt:?}");
        }
        let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let e = encode(&anchor, &decode(&anchor, &d));
        assert!(d.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}

/// Labels each cell by testing its center point against every clipped box.
fn mask_oracle(fg: &[BBox], ign: &[BBox], w: usize, h: usize, stride: usize) -> Vec<u8> {
    let clip = |b: &BBox| -> Option<(f64, f64, f64, f64)> {
        let x1 = b.x.max(0.0);
        let y1 = b.y.max(0.0);
        let x2 = (b.x + b.w).min(w as f64);
        let y2 = (b.y + b.h).min(h as f64);
        (x2 > x1 && y2 > y1).then_some((x1, y1, x2, y2))
    };
    let inside = |c: (f64, f64, f64, f64), px: f64, py: f64| px >= c.0 && px < c.2 && py >= c.1 && py < c.3;
    let (rows, cols) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let px = c as f64 * stride as f64 + stride as f64 / 2.0;
            let py = r as f64 * stride as f64 + stride as f64 / 2.0;
            let label = if fg.iter().filter_map(clip).any(|b| inside(b, px, py)) {
                FOREGROUND
            } else if ign.iter().filter_map(clip).any(|b| inside(b, px, py)) {
                IGNORE
            } else {
                BACKGROUND
            };
            out.push(label);
        }
    }
    out
}

pub fn weakseg_matches_center_rule_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for stride in [2, 4, 8, 16] {
        for _ in 0..200 {
            let (w, h) = (rng.random_range(16..120), rng.random_range(16..100));
            let fg: Vec<BBox> = (0..rng.random_range(0..4)).map(|_| random_box(&mut rng, 100.0)).collect();
            let ign: Vec<BBox> = (0..rng.random_range(0..3)).map(|_| random_box(&mut rng, 100.0)).collect();
            let m = rasterize_masks(&fg, &ign, w, h, stride, FillRule::Center);
            assert_eq!((m.rows, m.cols), (h.div_ceil(stride), w.div_ceil(stride)));
            assert_eq!(m.grid, mask_oracle(&fg, &ign, w, h, stride), "stride {stride}, {w}×{h}");
        }
    }
}

pub fn proposal_mask_is_the_resized_roi_rasterised() {
    let gt = BBox { x: 30.0, y: 20.0, w: 20.0, h: 50.0 };
    let roi = BBox { x: 25.0, y: 10.0, w: 30.0, h: 70.0 };
    let m = proposal_mask(&[gt], &[], &roi, 112, 112, 8, FillRule::Center);
    let mapped = BBox { x: 5.0 * 112.0 / 30.0, y: 10.0 * 112.0 / 70.0, w: 20.0 * 112.0 / 30.0, h: 50.0 * 112.0 / 70.0 };
    assert_eq!(m.grid, mask_oracle(&[mapped], &[], 112, 112, 8));
}

/// Greedy matching of the detections scoring at least `t`.
fn matched_at(dets: &[Detection], gts: &[GtBox], frame: u64, t: f64) -> (usize, usize) {
    let mut fd: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.frame_id == frame && d.score >= t).collect();
    fd.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
    let fg: Vec<&GtBox> = gts.iter().filter(|g| g.frame_id == frame).collect();
    let mut used = vec![false; fg.len()];
    let (mut tp, mut fp) = (0, 0);
    for (_, d) in fd {
        let mut best: Option<(usize, f64)> = None;
        let mut on_ignore = false;
        for (j, g) in fg.iter().enumerate() {
            let o = iou_oracle(&d.bbox, &g.bbox);
            if o < 0.5 {
                continue;
            }
            if g.ignore {
                on_ignore = true;
            } else if !used[j] && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                tp += 1;
            }
            None if on_ignore => {}
            None => fp += 1,
        }
    }
    (tp, fp)
}

/// Sweeps every threshold, then samples the curve at nine log-spaced FPPIs.
fn log_avg_mr_oracle(dets: &[Detection], gts: &[GtBox], n_frames: usize) -> f64 {
    let n_gt = gts.iter().filter(|g| !g.ignore).count() as f64;
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let frames: Vec<u64> = (0..n_frames as u64).collect();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, fp) = frames.iter().map(|&f| matched_at(dets, gts, f, t)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            (fp as f64 / n_frames as f64, 1.0 - tp as f64 / n_gt)
        })
        .collect();
    let mut acc = 0.0;
    for i in 0..9 {
        let r = 10f64.powf(-2.0 + 0.25 * i as f64);
        let fmax = points.iter().filter(|p| p.0 <= r).map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mr = points.iter().filter(|p| p.0 == fmax).map(|p| p.1).fold(f64::INFINITY, f64::min);
        acc += mr.max(1e-10).ln();
    }
    (acc / 9.0).exp()
}

fn fixture(rng: &mut impl Rng) -> (Vec<Detection>, Vec<GtBox>, usize) {
    let n_frames = rng.random_range(1..=10);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for f in 0..n_frames as u64 {
        for _ in 0..rng.random_range(0..4) {
            let h = rng.random_range(30.0..120.0);
            let bbox = BBox { x: rng.random_range(0.0..400.0), y: rng.random_range(0.0..200.0), w: 0.41 * h, h };
            gts.push(GtBox { bbox, visible_fraction: 1.0, ignore: rng.random_bool(0.2), frame_id: f });
        }
        let frame_gts: Vec<BBox> = gts.iter().filter(|g| g.frame_id == f).map(|g| g.bbox).collect();
        for _ in 0..rng.random_range(0..8) {
            let bbox = if !frame_gts.is_empty() && rng.random_bool(0.6) {
                let g = frame_gts[rng.random_range(0..frame_gts.len())];
                BBox { x: g.x + rng.random_range(-0.2..0.2) * g.w, y: g.y + rng.random_range(-0.2..0.2) * g.h, ..g }
            } else {
                BBox { x: rng.random_range(0.0..400.0), y: rng.random_range(0.0..200.0), w: 30.0, h: 70.0 }
            };
            dets.push(Detection { bbox, score: (rng.random_range(0..20) as f64) / 20.0, frame_id: f });
        }
    }
    if gts.iter().all(|g| g.ignore) {
        gts.push(GtBox { bbox: BBox { x: 1.0, y: 1.0, w: 20.0, h: 50.0 }, visible_fraction: 1.0, ignore: false, frame_id: 0 });
    }
    (dets, gts, n_frames)
}

pub fn mr_curve_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..300 {
        let (dets, gts, n) = fixture(&mut rng);
        let got = mr_curve(&dets, &gts, n, 9).unwrap().log_avg_mr;
        let want = log_avg_mr_oracle(&dets, &gts, n);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

pub fn mr_curve_hand_fixture() {
    // Two frames, three pedestrians; one true hit at 0.9, a false positive at
    // 0.8, a second hit at 0.7.
    let g = |x: f64, f: u64| GtBox { bbox: BBox { x, y: 0.0, w: 20.0, h: 50.0 }, visible_fraction: 1.0, ignore: false, frame_id: f };
    let gts = [g(0.0, 0), g(100.0, 0), g(0.0, 1)];
    let d = |x: f64, s: f64, f: u64| Detection { bbox: BBox { x, y: 0.0, w: 20.0, h: 50.0 }, score: s, frame_id: f };
    let dets = [d(0.0, 0.9, 0), d(300.0, 0.8, 1), d(0.0, 0.7, 1)];
    let c = mr_curve(&dets, &gts, 2, 9).unwrap();
    let (one_hit, two_hits) = (1.0 - 1.0 / 3.0, 1.0 - 2.0 / 3.0);
    assert_eq!(c.points, vec![(0.0, 1.0), (0.0, one_hit), (0.5, one_hit), (0.5, two_hits)]);
    // Below FPPI 0.5 the miss rate is 2/3; at 10^-0.25 and 1 it is 1/3.
    let want = ((7.0 * (2.0f64 / 3.0).ln() + 2.0 * (1.0f64 / 3.0).ln()) / 9.0).exp();
    assert!((c.log_avg_mr - want).abs() < 1e-12);
}
