//! Axis-aligned box arithmetic.
//!
//! Boxes are continuous `(x, y, w, h)` with `(0, 0)` at the top-left corner of
//! the top-left pixel; pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::config(format!("box ({x}, {y}, {w}, {h}) is not finite")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::config(format!("box ({x}, {y}, {w}, {h}) has non-positive size")));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Point containment with half-open extents.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.right().clamp(0.0, width);
        let y2 = self.bottom().clamp(0.0, height);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub frame_id: u64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // `right() - x` can round away from `w`; identical boxes must score exactly 1.
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Descending score order, ties broken by lower original index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Greedy NMS over parallel box/score slices. Returns kept indices in
/// descending score order. A box survives iff its IoU with every previously
/// kept box is at most `iou_threshold`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

/// Per-head anchor settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub stride: usize,
    /// Anchor heights in pixels.
    pub scales: Vec<f64>,
    /// Width over height.
    pub aspect_ratio: f64,
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len()
    }
}

/// Anchors laid out scale-major: index = `scale * rows * cols + row * cols + col`,
/// matching the `[A, ·, H, W]` view of a detection head's output.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratio: f64,
    pub rows: usize,
    pub cols: usize,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn generate_anchors(image_w: usize, image_h: usize, spec: &AnchorSpec) -> Result<AnchorGrid> {
    if spec.stride == 0 {
        return Err(Error::config("anchor stride must be positive"));
    }
    if spec.scales.is_empty() || spec.scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::config("anchor scales must be a non-empty list of positive heights"));
    }
    if !(spec.aspect_ratio > 0.0) {
        return Err(Error::config("anchor aspect ratio must be positive"));
    }
    let (cols, rows) = (image_w / spec.stride, image_h / spec.stride);
    if cols == 0 || rows == 0 {
        return Err(Error::config(format!(
            "stride {} leaves no anchor cells on a {image_w}×{image_h} image",
            spec.stride
        )));
    }
    let s = spec.stride as f64;
    let mut anchors = Vec::with_capacity(rows * cols * spec.scales.len());
    for &height in &spec.scales {
        let width = height * spec.aspect_ratio;
        for r in 0..rows {
            for c in 0..cols {
                anchors.push(BBox::from_center((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, width, height)?);
            }
        }
    }
    Ok(AnchorGrid {
        stride: spec.stride,
        scales: spec.scales.clone(),
        aspect_ratio: spec.aspect_ratio,
        rows,
        cols,
        anchors,
    })
}

/// Center-offset / log-size regression deltas `(tx, ty, tw, th)`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [(gx - ax) / anchor.w, (gy - ay) / anchor.h, (gt.w / anchor.w).ln(), (gt.h / anchor.h).ln()]
}

pub fn decode(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * anchor.w;
    let cy = ay + deltas[1] * anchor.h;
    let w = anchor.w * deltas[2].exp();
    let h = anchor.h * deltas[3].exp();
    BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }
}

/// How a padding fraction is distributed over the two sides of each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadSplit {
    /// The fraction is the total growth per dimension, half on each side.
    #[default]
    Total,
    /// The fraction is added on every side.
    PerSide,
}

/// Grows a box by `pad_fraction` of its size without clipping.
pub fn pad_box(b: &BBox, pad_fraction: f64, split: PadSplit) -> BBox {
    let (gx, gy) = match split {
        PadSplit::Total => (0.5 * pad_fraction * b.w, 0.5 * pad_fraction * b.h),
        PadSplit::PerSide => (pad_fraction * b.w, pad_fraction * b.h),
    };
    BBox { x: b.x - gx, y: b.y - gy, w: b.w + 2.0 * gx, h: b.h + 2.0 * gy }
}

/// Padded box clipped to the image. Fails when less than one pixel survives in
/// either dimension.
pub fn crop_with_padding(
    b: &BBox,
    pad_fraction: f64,
    split: PadSplit,
    image_w: usize,
    image_h: usize,
) -> Result<BBox> {
    if !(pad_fraction >= 0.0) {
        return Err(Error::config("pad fraction must be non-negative"));
    }
    let padded = pad_box(b, pad_fraction, split);
    match padded.clip(image_w as f64, image_h as f64) {
        Some(c) if c.w >= 1.0 && c.h >= 1.0 => Ok(c),
        _ => Err(Error::RejectedProposal(format!(
            "box ({:.1}, {:.1}, {:.1}, {:.1}) leaves less than one pixel inside {image_w}×{image_h}",
            b.x, b.y, b.w, b.h
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 5.0, 10.0, 10.0)) - 25.0 / 175.0).abs() < 1e-12);
        // edge contact is not overlap
        assert_eq!(iou(&a, &bx(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 5.0).is_err());
    }

    #[test]
    fn nms_examples() {
        let d = |x: f64, s: f64| Detection { bbox: bx(x, 0.0, 10.0, 10.0), score: s, frame_id: 0 };
        assert_eq!(nms(&[d(0.0, 0.3)], 0.5).len(), 1);
        let kept = nms(&[d(0.0, 0.8), d(0.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn single_cell_anchor() {
        let spec = AnchorSpec { stride: 16, scales: vec![16.0], aspect_ratio: 0.41 };
        let g = generate_anchors(16, 16, &spec).unwrap();
        assert_eq!(g.len(), 1);
        let a = g.anchors[0];
        assert_eq!(a.center(), (8.0, 8.0));
        assert!((a.w - 6.56).abs() < 1e-12);
        assert_eq!(a.h, 16.0);
    }

    #[test]
    fn anchor_cells_use_floor() {
        let spec = AnchorSpec { stride: 16, scales: vec![20.0, 40.0], aspect_ratio: 0.41 };
        let g = generate_anchors(70, 40, &spec).unwrap();
        assert_eq!((g.cols, g.rows), (4, 2));
        assert_eq!(g.len(), 16);
        assert!(generate_anchors(8, 40, &spec).is_err());
    }

    #[test]
    fn codec_identity_and_example() {
        let anchor = bx(0.0, 0.0, 10.0, 20.0);
        assert_eq!(encode(&anchor, &anchor), [0.0; 4]);
        assert_eq!(decode(&anchor, &[0.0; 4]), anchor);
        let gt = bx(2.0, 2.0, 12.0, 24.0);
        let d = encode(&anchor, &gt);
        // centers (5, 10) -> (8, 14); both sides grow by 1.2x
        let expected = [0.3, 0.2, 1.2f64.ln(), 1.2f64.ln()];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{d:?}");
        }
        let back = decode(&anchor, &d);
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn padding_examples() {
        let b = bx(10.0, 10.0, 20.0, 40.0);
        assert_eq!(crop_with_padding(&b, 0.0, PadSplit::Total, 1000, 1000).unwrap(), b);
        let p = crop_with_padding(&b, 0.25, PadSplit::Total, 1000, 1000).unwrap();
        assert_eq!(p, bx(7.5, 5.0, 25.0, 50.0));
        let p = crop_with_padding(&b, 0.25, PadSplit::PerSide, 1000, 1000).unwrap();
        assert_eq!(p, bx(5.0, 0.0, 30.0, 60.0));
    }

    #[test]
    fn padding_clips_at_corner() {
        let p = crop_with_padding(&bx(0.0, 0.0, 20.0, 40.0), 0.25, PadSplit::Total, 100, 100).unwrap();
        assert_eq!(p.x, 0.0);
        assert_eq!(p.y, 0.0);
        assert_eq!(p.right(), 22.5);
        assert_eq!(p.bottom(), 45.0);
    }

    #[test]
    fn degenerate_crop_rejected() {
        let far = bx(500.0, 500.0, 10.0, 10.0);
        assert!(matches!(
            crop_with_padding(&far, 0.25, PadSplit::Total, 100, 100),
            Err(Error::RejectedProposal(_))
        ));
        let sliver = bx(99.7, 10.0, 0.1, 10.0);
        assert!(crop_with_padding(&sliver, 0.0, PadSplit::Total, 100, 100).is_err());
    }
}
