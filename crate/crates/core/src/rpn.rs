//! Stage 1: the proposal network with segmentation attention branches.
//!
//! Parameter names: trunk layers `conv1_1` … `conv5_3`; segmentation branches
//! `<tap>_seg`; main head `conv_proposal`, `cls2`, `reg2`; auxiliary conv4_3
//! head `conv4_3_proposal`, `cls1`, `reg1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{NetworkConfig, Tap};
use crate::error::{Error, Result};
use crate::geometry::{
    decode, encode, generate_anchors, iou, nms_indices, score_order, AnchorGrid, AnchorSpec, BBox, Detection,
};
use crate::nn::{normalize_input, Backbone, BackboneTaps, ConvLayer, Init};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var, IGNORE_LABEL};
use crate::weakseg::{rasterize_masks, MaskTarget};

/// Upper bound on predicted log-size deltas when decoding proposals.
pub const MAX_LOG_SIZE_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub const LABEL_NEG: u8 = 0;
pub const LABEL_POS: u8 = 1;

/// A 3×3 conv producing two-class logits on one backbone layer.
#[derive(Clone, Debug)]
pub struct SegBranch {
    pub tap: Tap,
    pub conv: ConvLayer,
}

impl SegBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        tap: Tap,
        channels: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ConvLayer::new(store, &format!("{}_seg", tap.name()), channels, 2, 3, Init::Gaussian(std), rng)?;
        Ok(SegBranch { tap, conv })
    }
}

/// 3×3 conv + ReLU, then sibling 1×1 classification and regression convs.
#[derive(Clone, Debug)]
pub struct DetHead {
    pub proposal: ConvLayer,
    pub cls: ConvLayer,
    pub reg: ConvLayer,
    pub anchors_per_cell: usize,
}

impl DetHead {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        names: [&str; 3],
        cin: usize,
        mid: usize,
        anchors_per_cell: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let a = anchors_per_cell;
        Ok(DetHead {
            proposal: ConvLayer::new(store, names[0], cin, mid, 3, Init::Gaussian(std), rng)?,
            cls: ConvLayer::new(store, names[1], mid, 2 * a, 1, Init::Gaussian(std), rng)?,
            reg: ConvLayer::new(store, names[2], mid, 4 * a, 1, Init::Gaussian(std), rng)?,
            anchors_per_cell,
        })
    }

    /// Returns `(cls, reg)` viewed as `[A,2,H,W]` and `[A,4,H,W]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.proposal.forward(g, store, x)?;
        let h = g.relu(h)?;
        let cls = self.cls.forward(g, store, h)?;
        let reg = self.reg.forward(g, store, h)?;
        let (_, _, fh, fw) = g.value(cls).dims4()?;
        let a = self.anchors_per_cell;
        Ok((g.reshape(cls, &[a, 2, fh, fw])?, g.reshape(reg, &[a, 4, fh, fw])?))
    }

    pub fn numel(&self) -> usize {
        self.proposal.numel() + self.cls.numel() + self.reg.numel()
    }
}

#[derive(Clone, Debug)]
pub struct Rpn {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub seg: Vec<SegBranch>,
    pub main: DetHead,
    pub aux: Option<DetHead>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct RpnForward {
    pub taps: BackboneTaps,
    pub seg_logits: Vec<(Tap, Var)>,
    pub seg_maps: Vec<(Tap, Var)>,
    pub cls2: Var,
    pub reg2: Var,
    /// conv4_3 head outputs; only built for training.
    pub aux: Option<(Var, Var)>,
}

impl Rpn {
    /// Builds the network and initialises its parameters from `seed`.
    pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<(Rpn, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.channels(), &mut rng)?;
        let std = config.init_std;
        let mut seg = Vec::new();
        for tap in config.rpn.seg_taps() {
            seg.push(SegBranch::new(&mut store, tap, backbone.out_channels(tap), std, &mut rng)?);
        }
        let main_in = backbone.out_channels(Tap::Conv5_3) + seg.iter().filter(|s| s.tap != Tap::Conv4_3).count();
        let mid = config.proposal_channels();
        let main = DetHead::new(
            &mut store,
            ["conv_proposal", "cls2", "reg2"],
            main_in,
            mid,
            config.rpn.conv5_anchors.per_cell(),
            std,
            &mut rng,
        )?;
        let aux = if config.rpn.conv4_3_dt {
            let cin = backbone.out_channels(Tap::Conv4_3) + usize::from(config.rpn.conv4_3_sa);
            Some(DetHead::new(
                &mut store,
                ["conv4_3_proposal", "cls1", "reg1"],
                cin,
                mid,
                config.rpn.conv4_anchors.per_cell(),
                std,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok((Rpn { config: config.clone(), backbone, seg, main, aux }, store))
    }

    /// Input channels of `conv_proposal`.
    pub fn proposal_in_channels(&self) -> usize {
        self.main.proposal.cin
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        training: bool,
    ) -> Result<RpnForward> {
        let (_, _, h, w) = g.value(image).dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!("RPN input {w}×{h} must have sides divisible by 16")));
        }
        let taps = self.backbone.forward(g, store, image)?;
        let mut seg_logits = Vec::new();
        let mut seg_maps = Vec::new();
        for branch in &self.seg {
            // The conv4_3 branch only serves the auxiliary head and is skipped at inference.
            if branch.tap == Tap::Conv4_3 && !training {
                continue;
            }
            let logits = branch.conv.forward(g, store, taps.get(branch.tap))?;
            seg_maps.push((branch.tap, g.foreground_prob(logits)?));
            seg_logits.push((branch.tap, logits));
        }
        let mut parts = vec![taps.conv5_3];
        parts.extend(seg_maps.iter().filter(|(t, _)| *t != Tap::Conv4_3).map(|&(_, m)| m));
        let main_in = g.concat_channels(&parts)?;
        let (cls2, reg2) = self.main.forward(g, store, main_in)?;
        let aux = match (&self.aux, training) {
            (Some(head), true) => {
                let mut parts = vec![taps.conv4_3];
                parts.extend(seg_maps.iter().filter(|(t, _)| *t == Tap::Conv4_3).map(|&(_, m)| m));
                let x = g.concat_channels(&parts)?;
                Some(head.forward(g, store, x)?)
            }
            _ => None,
        };
        Ok(RpnForward { taps, seg_logits, seg_maps, cls2, reg2, aux })
    }

    /// Inference on one `[3,H,W]` image in `[0,1]`.
    pub fn infer(&self, store: &ParamStore<f32>, image: &Tensor<f32>, frame_id: u64) -> Result<RpnOutput> {
        let (c, h, w) = match image.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::config(format!("expected a [3,H,W] image, got {s:?}"))),
        };
        let mut g = Graph::<f32>::new();
        let x = g.input(normalize_input(image).reshape([1, c, h, w])?);
        let out = self.forward(&mut g, store, x, false)?;
        let anchors = generate_anchors(w, h, &self.config.rpn.conv5_anchors)?;
        let cls2_scores = foreground_scores(g.value(out.cls2));
        let deltas = anchor_deltas(g.value(out.reg2));
        let proposals = extract_proposals(&anchors, &cls2_scores, &deltas, w, h, &self.config)
            .into_iter()
            .map(|mut d| {
                d.frame_id = frame_id;
                d
            })
            .collect();
        let seg_maps = out.seg_maps.iter().map(|&(t, v)| (t, g.value(v).clone())).collect();
        Ok(RpnOutput { proposals, cls2_scores, seg_maps })
    }
}

/// Result of running stage 1 on one image.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub proposals: Vec<Detection>,
    /// Foreground probability per conv5_3 anchor, in anchor-grid order.
    pub cls2_scores: Vec<f64>,
    pub seg_maps: Vec<(Tap, Tensor<f32>)>,
}

/// Foreground probability per anchor from `[A,2,H,W]` logits.
pub fn foreground_scores<T: Scalar>(cls: &Tensor<T>) -> Vec<f64> {
    let s = cls.shape();
    let hw = s[2] * s[3];
    let d = cls.data();
    let mut out = Vec::with_capacity(s[0] * hw);
    for a in 0..s[0] {
        for i in 0..hw {
            let (l0, l1) = (d[(a * 2) * hw + i].as_f64(), d[(a * 2 + 1) * hw + i].as_f64());
            out.push(1.0 / (1.0 + (l0 - l1).exp()));
        }
    }
    out
}

/// Per-anchor `(tx,ty,tw,th)` from `[A,4,H,W]` regression output.
pub fn anchor_deltas<T: Scalar>(reg: &Tensor<T>) -> Vec<[f64; 4]> {
    let s = reg.shape();
    let hw = s[2] * s[3];
    let d = reg.data();
    let mut out = Vec::with_capacity(s[0] * hw);
    for a in 0..s[0] {
        for i in 0..hw {
            out.push(std::array::from_fn(|k| d[(a * 4 + k) * hw + i].as_f64()));
        }
    }
    out
}

/// Decode, clip, drop small boxes, top-K, NMS, top-N.
pub fn extract_proposals(
    anchors: &AnchorGrid,
    scores: &[f64],
    deltas: &[[f64; 4]],
    image_w: usize,
    image_h: usize,
    config: &NetworkConfig,
) -> Vec<Detection> {
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    for ((anchor, &score), d) in anchors.anchors.iter().zip(scores).zip(deltas) {
        let d = [d[0], d[1], d[2].min(MAX_LOG_SIZE_DELTA), d[3].min(MAX_LOG_SIZE_DELTA)];
        let Some(b) = decode(anchor, &d).clip(image_w as f64, image_h as f64) else {
            continue;
        };
        if b.w < config.min_proposal_size || b.h < config.min_proposal_size {
            continue;
        }
        boxes.push(b);
        kept_scores.push(score);
    }
    let mut order = score_order(&kept_scores);
    order.truncate(config.pre_nms_top_k);
    let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = order.iter().map(|&i| kept_scores[i]).collect();
    let mut keep = nms_indices(&top_boxes, &top_scores, config.nms_thr);
    keep.truncate(config.post_nms_top_n);
    keep.into_iter().map(|i| Detection { bbox: top_boxes[i], score: top_scores[i], frame_id: 0 }).collect()
}

/// Per-anchor training labels of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLabels {
    /// [`LABEL_POS`], [`LABEL_NEG`] or [`IGNORE_LABEL`].
    pub labels: Vec<u8>,
    /// Regression target per anchor; meaningful for positives only.
    pub targets: Vec<[f64; 4]>,
    pub max_iou: Vec<f64>,
}

impl AnchorLabels {
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Positive iff the best IoU with a ground truth exceeds `iou_pos_rpn`;
/// optionally each ground truth's best anchors are also positive. A
/// non-positive anchor whose best overlap is an ignore region is ignored.
pub fn assign_rpn_labels(
    anchors: &AnchorGrid,
    gts: &[BBox],
    ignores: &[BBox],
    image_w: usize,
    image_h: usize,
    config: &NetworkConfig,
) -> AnchorLabels {
    let n = anchors.len();
    let mut labels = vec![LABEL_NEG; n];
    let mut targets = vec![[0.0; 4]; n];
    let mut max_iou = vec![0.0; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.anchors.iter().enumerate() {
        for (j, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            if v > max_iou[i] {
                max_iou[i] = v;
                best_gt[i] = j;
            }
            gt_best[j] = gt_best[j].max(v);
        }
        if max_iou[i] > config.iou_pos_rpn {
            labels[i] = LABEL_POS;
            targets[i] = encode(a, &gts[best_gt[i]]);
        }
    }
    if config.anchor_rescue {
        for (j, gt) in gts.iter().enumerate() {
            if gt_best[j] <= 0.0 {
                continue;
            }
            for (i, a) in anchors.anchors.iter().enumerate() {
                if labels[i] != LABEL_POS && iou(a, gt) == gt_best[j] {
                    labels[i] = LABEL_POS;
                    targets[i] = encode(a, gt);
                }
            }
        }
    }
    for (i, a) in anchors.anchors.iter().enumerate() {
        if labels[i] == LABEL_POS {
            continue;
        }
        let ign = ignores.iter().map(|b| iou(a, b)).fold(0.0, f64::max);
        let outside = a.x < 0.0 || a.y < 0.0 || a.right() > image_w as f64 || a.bottom() > image_h as f64;
        if (ign > 0.0 && ign > max_iou[i]) || (outside && !config.keep_cross_boundary) {
            labels[i] = IGNORE_LABEL;
        }
    }
    AnchorLabels { labels, targets, max_iou }
}

/// Samples up to `pos_quota` positives and fills the remaining
/// `pos_quota + neg_quota` slots with negatives. Returns sorted indices.
pub fn sample_minibatch<R: Rng + ?Sized>(labels: &[u8], pos_quota: usize, neg_quota: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == LABEL_POS).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == LABEL_NEG).collect();
    pos.shuffle(rng);
    pos.truncate(pos_quota);
    let neg_take = pos_quota + neg_quota - pos.len();
    neg.shuffle(rng);
    neg.truncate(neg_take);
    let mut out = pos;
    out.extend(neg);
    out.sort_unstable();
    out
}

/// Loss inputs for one detection head, laid out like its reshaped outputs.
#[derive(Clone, Debug)]
pub struct HeadTargets<T> {
    /// Per anchor: the sampled label or [`IGNORE_LABEL`].
    pub cls_labels: Vec<u8>,
    /// `[A,4,H,W]` regression targets and the matching positive mask.
    pub reg_targets: Vec<T>,
    pub reg_mask: Vec<T>,
}

impl<T: Scalar> HeadTargets<T> {
    pub fn from_labels(anchors: &AnchorGrid, labels: &AnchorLabels, sampled: &[usize]) -> Self {
        let hw = anchors.cells();
        let n = anchors.len();
        let mut cls_labels = vec![IGNORE_LABEL; n];
        let mut reg_targets = vec![T::zero(); 4 * n];
        let mut reg_mask = vec![T::zero(); 4 * n];
        for &i in sampled {
            cls_labels[i] = labels.labels[i];
            if labels.labels[i] == LABEL_POS {
                let (a, cell) = (i / hw, i % hw);
                for k in 0..4 {
                    reg_targets[(a * 4 + k) * hw + cell] = T::of(labels.targets[i][k]);
                    reg_mask[(a * 4 + k) * hw + cell] = T::one();
                }
            }
        }
        HeadTargets { cls_labels, reg_targets, reg_mask }
    }
}

/// All supervision for one training image.
#[derive(Clone, Debug)]
pub struct RpnTargets<T> {
    pub main: HeadTargets<T>,
    pub aux: Option<HeadTargets<T>>,
    pub masks: Vec<(Tap, MaskTarget)>,
}

impl Rpn {
    /// Labels, samples and rasterises the targets of one image.
    pub fn targets<T: Scalar, R: Rng + ?Sized>(
        &self,
        gts: &[BBox],
        ignores: &[BBox],
        image_w: usize,
        image_h: usize,
        rng: &mut R,
    ) -> Result<RpnTargets<T>> {
        let cfg = &self.config;
        let (pq, nq) = cfg.sample_quota();
        let mut head = |spec: &AnchorSpec| -> Result<HeadTargets<T>> {
            let anchors = generate_anchors(image_w, image_h, spec)?;
            let labels = assign_rpn_labels(&anchors, gts, ignores, image_w, image_h, cfg);
            let sampled = sample_minibatch(&labels.labels, pq, nq, rng);
            Ok(HeadTargets::from_labels(&anchors, &labels, &sampled))
        };
        let main = head(&cfg.rpn.conv5_anchors)?;
        let aux = if self.aux.is_some() { Some(head(&cfg.rpn.conv4_anchors)?) } else { None };
        let masks = self
            .seg
            .iter()
            .map(|s| (s.tap, rasterize_masks(gts, ignores, image_w, image_h, s.tap.stride(), cfg.mask_rule)))
            .collect();
        Ok(RpnTargets { main, aux, masks })
    }
}

/// Named loss terms and their weighted total.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// `(name, unweighted term)` in a fixed order.
    pub terms: Vec<(String, Var)>,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Vec<(String, f64)> {
        self.terms.iter().map(|(n, v)| (n.clone(), g.value(*v).item().as_f64())).collect()
    }
}

pub(crate) fn renamed_term<T>(r: Result<T>, term: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::non_finite(format!("loss term {term}")),
        other => other,
    })
}

/// Segmentation cross-entropy of one branch against its mask target.
pub(crate) fn seg_term<T: Scalar>(g: &mut Graph<T>, logits: Var, masks: &[&MaskTarget]) -> Result<Var> {
    let (n, _, h, w) = g.value(logits).dims4()?;
    if masks.len() != n || masks.iter().any(|m| (m.rows, m.cols) != (h, w)) {
        return Err(Error::config(format!("segmentation target does not cover the {h}×{w} logit map")));
    }
    let labels: Vec<u8> = masks.iter().flat_map(|m| m.grid.iter().copied()).collect();
    g.softmax_cross_entropy(logits, &labels)
}

/// Weighted multi-task stage-1 loss. Terms of disabled branches are absent.
pub fn rpn_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &RpnForward,
    targets: &RpnTargets<T>,
    config: &NetworkConfig,
) -> Result<LossTerms> {
    let r = &config.rpn;
    let mut terms = Vec::new();
    let mut weighted = Vec::new();
    let mut add = |name: &str, v: Var, w: f64| {
        terms.push((name.to_string(), v));
        weighted.push((v, w));
    };
    if let (Some((cls1, reg1)), Some(t)) = (out.aux, &targets.aux) {
        add("cls1", renamed_term(g.softmax_cross_entropy(cls1, &t.cls_labels), "cls1")?, r.alpha_c1);
        add("reg1", renamed_term(g.smooth_l1(reg1, &t.reg_targets, &t.reg_mask), "reg1")?, r.beta_r1);
    }
    for &(tap, logits) in &out.seg_logits {
        let name = format!("seg_{}", tap.name());
        let mask = targets
            .masks
            .iter()
            .find(|(t, _)| *t == tap)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::config(format!("no mask target for {tap}")))?;
        add(&name, renamed_term(seg_term(g, logits, &[mask]), &name)?, r.seg_weight(tap));
    }
    add("cls2", renamed_term(g.softmax_cross_entropy(out.cls2, &targets.main.cls_labels), "cls2")?, r.alpha_c2);
    add(
        "reg2",
        renamed_term(g.smooth_l1(out.reg2, &targets.main.reg_targets, &targets.main.reg_mask), "reg2")?,
        r.beta_r2,
    );
    let total = renamed_term(g.weighted_sum(&weighted), "total")?;
    Ok(LossTerms { total, terms })
}
