//! Stage 2: classifies padded, resized proposal crops with segmentation attention.
//!
//! Parameter names follow the stage-1 trunk so weights transfer by name; the
//! branches are `<tap>_seg` and the classifier is `cls3`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionPool, NetworkConfig, Tap};
use crate::error::{Error, Result};
use crate::geometry::{crop_with_padding, iou, pad_box, BBox};
use crate::nn::{normalize_input, Backbone, LinearLayer};
use crate::rpn::{renamed_term, seg_term, LossTerms, SegBranch, LABEL_NEG, LABEL_POS};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var, IGNORE_LABEL};
use crate::weakseg::{proposal_mask, MaskTarget};

/// Stage-2 label of a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiLabel {
    Pos,
    Neg,
    Discard,
}

impl RoiLabel {
    pub fn class(self) -> u8 {
        match self {
            RoiLabel::Pos => LABEL_POS,
            RoiLabel::Neg => LABEL_NEG,
            RoiLabel::Discard => IGNORE_LABEL,
        }
    }
}

/// Positive iff best IoU with a ground truth exceeds `iou_pos_rcnn`, negative
/// iff it is below `iou_neg_rcnn`, discarded otherwise. Non-positive proposals
/// overlapping an ignore region by at least `iou_neg_rcnn` are discarded.
pub fn assign_rcnn_labels(proposals: &[BBox], gts: &[BBox], ignores: &[BBox], config: &NetworkConfig) -> Vec<RoiLabel> {
    proposals
        .iter()
        .map(|p| {
            let best = gts.iter().map(|g| iou(p, g)).fold(0.0, f64::max);
            let ign = ignores.iter().map(|g| iou(p, g)).fold(0.0, f64::max);
            if best > config.iou_pos_rcnn {
                RoiLabel::Pos
            } else if ign >= config.iou_neg_rcnn {
                RoiLabel::Discard
            } else if best < config.iou_neg_rcnn {
                RoiLabel::Neg
            } else {
                RoiLabel::Discard
            }
        })
        .collect()
}

/// Sampling positions along one axis: the padded window `[start, start+len)`
/// is resized to `out` samples, with taps clamped to the window's pixel range.
fn roi_taps(start: f64, len: f64, out: usize) -> Vec<(isize, isize, f64)> {
    let first = start.floor();
    let last = (start + len).ceil() - 1.0;
    let offset = start - first;
    let span = last - first;
    let scale = len / out as f64;
    (0..out)
        .map(|o| {
            let u = (offset + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, span);
            let lo = u.floor();
            let hi = (lo + 1.0).min(span);
            ((first + lo) as isize, (first + hi) as isize, u - lo)
        })
        .collect()
}

/// Crops `proposal` grown by the configured padding from a `[3,H,W]` image and
/// resizes it to `crop_size²`. Area outside the image reads as zero. Proposals
/// whose padded box keeps under one pixel inside the image are rejected.
pub fn prepare_roi(image: &Tensor<f32>, proposal: &BBox, config: &NetworkConfig) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::config(format!("expected a [C,H,W] image, got {s:?}"))),
    };
    crop_with_padding(proposal, config.crop_padding, config.pad_split, w, h)?;
    let roi = pad_box(proposal, config.crop_padding, config.pad_split);
    let size = config.crop_size;
    let tx = roi_taps(roi.x, roi.w, size);
    let ty = roi_taps(roi.y, roi.h, size);
    let src = image.data();
    let mut out = vec![0.0f32; c * size * size];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let px = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize] as f64
            }
        };
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out[(ch * size + oy) * size + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new([c, size, size], out)
}

/// Crops of one stage-2 minibatch.
#[derive(Clone, Debug)]
pub struct RoiBatch {
    /// `[B,3,S,S]` in `[0,1]`.
    pub crops: Tensor<f32>,
    pub sources: Vec<(u64, BBox)>,
    /// Class per crop; present iff the batch is for training.
    pub labels: Option<Vec<u8>>,
    /// Per branch, one mask target per crop.
    pub masks: Vec<(Tap, Vec<MaskTarget>)>,
}

impl RoiBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// One training crop before batching.
#[derive(Clone, Debug)]
pub struct RoiSample {
    pub frame_id: u64,
    pub proposal: BBox,
    pub label: RoiLabel,
}

#[derive(Clone, Debug)]
pub struct Rcnn {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub seg: Vec<SegBranch>,
    pub cls3: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct RcnnForward {
    pub seg_logits: Vec<(Tap, Var)>,
    pub seg_maps: Vec<(Tap, Var)>,
    /// `[B,2]` classification logits.
    pub cls3: Var,
}

impl Rcnn {
    pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<(Rcnn, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.channels(), &mut rng)?;
        let mut seg = Vec::new();
        for tap in config.rcnn.seg_taps() {
            seg.push(SegBranch::new(&mut store, tap, backbone.out_channels(tap), config.init_std, &mut rng)?);
        }
        let fan_in = backbone.out_channels(Tap::Conv5_3) + seg.len();
        let cls3 = LinearLayer::new(&mut store, "cls3", fan_in, 2, config.init_std, &mut rng)?;
        Ok((Rcnn { config: config.clone(), backbone, seg, cls3 }, store))
    }

    /// Input features of the classifier.
    pub fn classifier_in_channels(&self) -> usize {
        self.cls3.fan_in
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, crops: Var) -> Result<RcnnForward> {
        let taps = self.backbone.forward(g, store, crops)?;
        let (_, _, h5, w5) = g.value(taps.conv5_3).dims4()?;
        let mut seg_logits = Vec::new();
        let mut seg_maps = Vec::new();
        let mut attention = Vec::new();
        for branch in &self.seg {
            let logits = branch.conv.forward(g, store, taps.get(branch.tap))?;
            let map = g.foreground_prob(logits)?;
            let block = if branch.tap == Tap::Conv4_3 {
                match self.config.rcnn.attention_pool {
                    AttentionPool::Max => g.maxpool2d(map, 2, 2)?,
                    // Halving with half-pixel bilinear taps is a 2×2 mean.
                    AttentionPool::Average => g.bilinear_resize(map, h5, w5)?,
                }
            } else {
                map
            };
            seg_logits.push((branch.tap, logits));
            seg_maps.push((branch.tap, map));
            attention.push(block);
        }
        let mut parts = vec![taps.conv5_3];
        parts.extend(attention);
        let x = g.concat_channels(&parts)?;
        let pooled = g.global_avg_pool(x)?;
        let cls3 = self.cls3.forward(g, store, pooled)?;
        Ok(RcnnForward { seg_logits, seg_maps, cls3 })
    }

    /// Pedestrian probability of every crop in a `[B,3,S,S]` batch.
    pub fn classify(&self, store: &ParamStore<f32>, crops: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut g = Graph::<f32>::new();
        let x = g.input(normalize_input(crops));
        let out = self.forward(&mut g, store, x)?;
        let logits = g.value(out.cls3).data();
        Ok(logits.chunks(2).map(|l| 1.0 / (1.0 + (l[0] as f64 - l[1] as f64).exp())).collect())
    }

    /// Mask targets of every branch for the given crops.
    pub fn mask_targets(
        &self,
        crops: &[(BBox, &[BBox], &[BBox])],
    ) -> Vec<(Tap, Vec<MaskTarget>)> {
        let cfg = &self.config;
        self.seg
            .iter()
            .map(|s| {
                let masks = crops
                    .iter()
                    .map(|(proposal, gts, ignores)| {
                        let roi = pad_box(proposal, cfg.crop_padding, cfg.pad_split);
                        proposal_mask(gts, ignores, &roi, cfg.crop_size, cfg.crop_size, s.tap.stride(), cfg.mask_rule)
                    })
                    .collect();
                (s.tap, masks)
            })
            .collect()
    }
}

/// Weighted stage-2 loss: one classification term plus one segmentation term
/// per branch. There is no regression term.
pub fn rcnn_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &RcnnForward,
    labels: &[u8],
    masks: &[(Tap, Vec<MaskTarget>)],
    config: &NetworkConfig,
) -> Result<LossTerms> {
    let rc = &config.rcnn;
    let mut terms = Vec::new();
    let mut weighted = Vec::new();
    let cls = renamed_term(g.softmax_cross_entropy(out.cls3, labels), "cls3")?;
    terms.push(("cls3".to_string(), cls));
    weighted.push((cls, rc.alpha_c3));
    for &(tap, logits) in &out.seg_logits {
        let name = format!("seg_{}", tap.name());
        let target = masks
            .iter()
            .find(|(t, _)| *t == tap)
            .map(|(_, m)| m.iter().collect::<Vec<_>>())
            .ok_or_else(|| Error::config(format!("no mask target for {tap}")))?;
        let v = renamed_term(seg_term(g, logits, &target), &name)?;
        terms.push((name, v));
        weighted.push((v, rc.seg_weight(tap)));
    }
    let total = renamed_term(g.weighted_sum(&weighted), "total")?;
    Ok(LossTerms { total, terms })
}

/// Stacks `[3,S,S]` crops into one `[B,3,S,S]` tensor.
pub fn stack_crops(crops: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = crops.first().ok_or_else(|| Error::config("empty crop batch"))?;
    let mut shape = vec![crops.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * crops.len());
    for c in crops {
        if c.shape() != first.shape() {
            return Err(Error::config("crops of one batch must share a shape"));
        }
        data.extend_from_slice(c.data());
    }
    Tensor::new(shape, data)
}
