//! Segmentation targets rasterised from box annotations.
//!
//! A grid cell at stride `s` covers pixels `[c·s, (c+1)·s)`; its label is decided
//! by where the cell center `((c+0.5)·s, (r+0.5)·s)` falls.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::tensor::IGNORE_LABEL;

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
pub const IGNORE: u8 = IGNORE_LABEL;

/// Rule deciding when a cell belongs to a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillRule {
    /// The cell center lies inside the box.
    #[default]
    Center,
    /// The cell square overlaps the box with positive area.
    AnyOverlap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTarget {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major labels: [`BACKGROUND`], [`FOREGROUND`] or [`IGNORE`].
    pub grid: Vec<u8>,
    pub source_frame: u64,
}

impl MaskTarget {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.cols + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == FOREGROUND).count()
    }
}

fn cell_hits(b: &BBox, row: usize, col: usize, stride: f64, rule: FillRule) -> bool {
    match rule {
        FillRule::Center => b.contains((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride),
        FillRule::AnyOverlap => {
            let cell = BBox { x: col as f64 * stride, y: row as f64 * stride, w: stride, h: stride };
            b.intersection_area(&cell) > 0.0
        }
    }
}

fn rasterize(
    boxes: &[BBox],
    ignore_boxes: &[BBox],
    width: f64,
    height: f64,
    rows: usize,
    cols: usize,
    stride: usize,
    rule: FillRule,
) -> Vec<u8> {
    let clip = |bs: &[BBox]| bs.iter().filter_map(|b| b.clip(width, height)).collect::<Vec<_>>();
    let (fg, ign) = (clip(boxes), clip(ignore_boxes));
    let s = stride as f64;
    let mut grid = vec![BACKGROUND; rows * cols];
    // Only cells a box can reach are visited.
    let paint = |b: &BBox, label: u8, grid: &mut Vec<u8>| {
        let r0 = ((b.y / s).floor().max(0.0) as usize).saturating_sub(1);
        let c0 = ((b.x / s).floor().max(0.0) as usize).saturating_sub(1);
        let r1 = ((b.bottom() / s).ceil() as usize + 1).min(rows);
        let c1 = ((b.right() / s).ceil() as usize + 1).min(cols);
        for r in r0..r1 {
            for c in c0..c1 {
                let cell = &mut grid[r * cols + c];
                if *cell != FOREGROUND && cell_hits(b, r, c, s, rule) {
                    *cell = label;
                }
            }
        }
    };
    for b in &ign {
        paint(b, IGNORE, &mut grid);
    }
    for b in &fg {
        paint(b, FOREGROUND, &mut grid);
    }
    grid
}

/// Labels every cell of the `⌈H/stride⌉ × ⌈W/stride⌉` grid of an image.
/// Foreground wins over ignore; boxes are clipped to the image first.
pub fn rasterize_masks(
    boxes: &[BBox],
    ignore_boxes: &[BBox],
    image_w: usize,
    image_h: usize,
    stride: usize,
    rule: FillRule,
) -> MaskTarget {
    assert!(stride >= 1, "stride must be at least 1");
    let rows = image_h.div_ceil(stride);
    let cols = image_w.div_ceil(stride);
    let grid = rasterize(boxes, ignore_boxes, image_w as f64, image_h as f64, rows, cols, stride, rule);
    MaskTarget { stride, rows, cols, grid, source_frame: 0 }
}

/// Maps a box from image coordinates into the frame of `roi` resized to `out_w × out_h`.
pub fn to_roi_frame(b: &BBox, roi: &BBox, out_w: usize, out_h: usize) -> BBox {
    let sx = out_w as f64 / roi.w;
    let sy = out_h as f64 / roi.h;
    BBox { x: (b.x - roi.x) * sx, y: (b.y - roi.y) * sy, w: b.w * sx, h: b.h * sy }
}

/// Segmentation target of one resized proposal crop.
pub fn proposal_mask(
    gt_boxes: &[BBox],
    ignore_boxes: &[BBox],
    roi: &BBox,
    out_w: usize,
    out_h: usize,
    stride: usize,
    rule: FillRule,
) -> MaskTarget {
    let map = |bs: &[BBox]| bs.iter().map(|b| to_roi_frame(b, roi, out_w, out_h)).collect::<Vec<_>>();
    rasterize_masks(&map(gt_boxes), &map(ignore_boxes), out_w, out_h, stride, rule)
}
