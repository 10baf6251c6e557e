//! Miss rate against false positives per image, and its log-average.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BBox, Detection};

pub const MATCH_IOU: f64 = 0.5;
pub const MR_FLOOR: f64 = 1e-10;

/// One annotated pedestrian or ignore region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub visible_fraction: f64,
    pub ignore: bool,
    pub frame_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Reasonable,
    Partial,
    Heavy,
    Small,
    All,
}

impl Subset {
    pub const ALL: [Subset; 5] = [Subset::Reasonable, Subset::Partial, Subset::Heavy, Subset::Small, Subset::All];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Reasonable => "reasonable",
            Subset::Partial => "partial",
            Subset::Heavy => "heavy",
            Subset::Small => "small",
            Subset::All => "all",
        }
    }

    /// Whether a ground truth of height `h` and visible fraction `v` counts.
    pub fn admits(self, h: f64, v: f64) -> bool {
        match self {
            Subset::Reasonable => h >= 50.0 && v >= 0.65,
            Subset::Partial => h >= 50.0 && (0.65..=0.99).contains(&v),
            Subset::Heavy => h >= 50.0 && (0.2..=0.65).contains(&v),
            Subset::Small => (50.0..=75.0).contains(&h) && (0.2..=0.65).contains(&v),
            Subset::All => h >= 20.0 && v >= 0.2,
        }
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown subset {s}; expected reasonable, partial, heavy, small or all")))
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Marks every ground truth outside the subset as ignore.
pub fn filter_subset(gts: &[GtBox], subset: Subset) -> Vec<GtBox> {
    gts.iter()
        .map(|g| GtBox { ignore: g.ignore || !subset.admits(g.bbox.h, g.visible_fraction), ..*g })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetStatus {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtStatus {
    Matched,
    Missed,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatch {
    /// Aligned with the input detections.
    pub dets: Vec<DetStatus>,
    /// Aligned with the input ground truths.
    pub gts: Vec<GtStatus>,
}

/// Greedy matching of one frame, visiting detections by descending score.
pub fn match_frame(dets: &[Detection], gts: &[GtBox]) -> FrameMatch {
    let mut gt_status: Vec<GtStatus> =
        gts.iter().map(|g| if g.ignore { GtStatus::Ignored } else { GtStatus::Missed }).collect();
    let mut det_status = vec![DetStatus::FalsePositive; dets.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    for i in score_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignore = false;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&dets[i].bbox, &g.bbox);
            if v < MATCH_IOU {
                continue;
            }
            match gt_status[j] {
                GtStatus::Missed if best.is_none_or(|(_, b)| v > b) => best = Some((j, v)),
                GtStatus::Ignored => hits_ignore = true,
                _ => {}
            }
        }
        det_status[i] = match best {
            Some((j, _)) => {
                gt_status[j] = GtStatus::Matched;
                DetStatus::TruePositive
            }
            None if hits_ignore => DetStatus::Ignored,
            None => DetStatus::FalsePositive,
        };
    }
    FrameMatch { dets: det_status, gts: gt_status }
}

/// `n` log-spaced values from 1e-2 to 1e0.
pub fn reference_fppis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (n - 1) as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    /// `(fppi, miss_rate)` from the strictest threshold (no detections) down.
    pub points: Vec<(f64, f64)>,
    pub reference_fppis: Vec<f64>,
    /// Miss rate sampled at each reference FPPI.
    pub sampled: Vec<f64>,
    pub log_avg_mr: f64,
}

impl EvalCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fppi,miss_rate\n");
        for (f, m) in &self.points {
            s.push_str(&format!("{f},{m}\n"));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!("log_avg_mr={:.4}", self.log_avg_mr)
    }
}

/// Samples a curve at the reference points: at each reference, the lowest
/// miss rate among points with the largest FPPI not above it.
pub fn sample_curve(points: &[(f64, f64)], refs: &[f64]) -> Vec<f64> {
    refs.iter()
        .map(|&r| {
            let below = points.iter().filter(|(f, _)| *f <= r);
            let fmax = below.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let best = below.filter(|p| p.0 == fmax).map(|p| p.1).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                best
            } else {
                points.first().map_or(1.0, |p| p.1)
            }
        })
        .collect()
}

pub fn log_average(miss_rates: &[f64]) -> f64 {
    let mean = miss_rates.iter().map(|m| m.max(MR_FLOOR).ln()).sum::<f64>() / miss_rates.len() as f64;
    mean.exp()
}

/// Builds the miss-rate curve over `n_frames` frames. Detections and ground
/// truths are grouped by `frame_id`; ground truths should already be filtered
/// with [`filter_subset`].
pub fn mr_curve(dets: &[Detection], gts: &[GtBox], n_frames: usize, n_refs: usize) -> Result<EvalCurve> {
    if n_frames == 0 {
        return Err(Error::Eval("no frames to evaluate".into()));
    }
    let n_gt = gts.iter().filter(|g| !g.ignore).count();
    if n_gt == 0 {
        return Err(Error::Eval("no ground truth left after subset filtering; miss rate is undefined".into()));
    }
    let mut frame_ids: Vec<u64> = dets.iter().map(|d| d.frame_id).chain(gts.iter().map(|g| g.frame_id)).collect();
    frame_ids.sort_unstable();
    frame_ids.dedup();
    // (score, is_tp) of every non-ignored detection
    let mut scored = Vec::new();
    for id in frame_ids {
        let fd: Vec<Detection> = dets.iter().filter(|d| d.frame_id == id).copied().collect();
        let fg: Vec<GtBox> = gts.iter().filter(|g| g.frame_id == id).copied().collect();
        let m = match_frame(&fd, &fg);
        for (d, s) in fd.iter().zip(&m.dets) {
            match s {
                DetStatus::TruePositive => scored.push((d.score, true)),
                DetStatus::FalsePositive => scored.push((d.score, false)),
                DetStatus::Ignored => {}
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_frames as f64, 1.0 - tp as f64 / n_gt as f64));
    }
    let refs = reference_fppis(n_refs);
    let sampled = sample_curve(&points, &refs);
    let log_avg_mr = log_average(&sampled);
    Ok(EvalCurve { points, reference_fppis: refs, sampled, log_avg_mr })
}
