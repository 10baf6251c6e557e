//! Two-phase training and fused two-stage inference.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Manifest, NetKind};
use crate::config::{FusionMode, NetworkConfig, RunConfig, TrainConfig};
use crate::data::{write_file, Frame};
use crate::error::{Error, Result};
use crate::eval::{filter_subset, mr_curve, EvalCurve, GtBox, Subset};
use crate::geometry::{nms, BBox, Detection};
use crate::nn::{backbone_prefixes, normalize_input};
use crate::rcnn::{assign_rcnn_labels, prepare_roi, rcnn_loss, stack_crops, Rcnn, RoiLabel};
use crate::rpn::{rpn_loss, LossTerms, Rpn, RpnTargets};
use crate::tensor::{Graph, ParamStore, SgdState, Tensor};
use crate::weakseg::MaskTarget;

pub const RPN_CKPT: &str = "rpn.ckpt";
pub const RCNN_CKPT: &str = "rcnn.ckpt";
pub const LOSS_LOG: &str = "loss.log";
pub const RUN_CONFIG: &str = "config.toml";

/// Crops classified per stage-2 forward pass at inference.
const INFER_CHUNK: usize = 40;

pub fn fuse_scores(p_rpn: f64, p_rcnn: f64, mode: FusionMode) -> f64 {
    match mode {
        FusionMode::Multiply => p_rpn * p_rcnn,
        FusionMode::Mean => 0.5 * (p_rpn + p_rcnn),
        FusionMode::RcnnOnly => p_rcnn,
    }
}

/// A trained pair of networks.
#[derive(Clone, Debug)]
pub struct Detector {
    pub rpn: Rpn,
    pub rpn_params: ParamStore<f32>,
    pub rcnn: Rcnn,
    pub rcnn_params: ParamStore<f32>,
}

impl Detector {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = |kind, network: &NetworkConfig| Manifest { kind, network: network.clone() };
        checkpoint::save(&dir.join(RPN_CKPT), &m(NetKind::Rpn, &self.rpn.config), &self.rpn_params)?;
        checkpoint::save(&dir.join(RCNN_CKPT), &m(NetKind::Rcnn, &self.rcnn.config), &self.rcnn_params)
    }

    pub fn load(dir: &Path) -> Result<Detector> {
        let (rpn, rpn_params) = load_rpn(&dir.join(RPN_CKPT))?;
        let ck = checkpoint::load(&dir.join(RCNN_CKPT))?;
        if ck.manifest.kind != NetKind::Rcnn {
            return Err(Error::Checkpoint(format!("{RCNN_CKPT} does not hold a stage-2 network")));
        }
        let (rcnn, mut rcnn_params) = Rcnn::build::<f32>(&ck.manifest.network, 0)?;
        ck.restore_into(&mut rcnn_params)?;
        Ok(Detector { rpn, rpn_params, rcnn, rcnn_params })
    }

    /// Stage 1, crops, stage 2, fusion and a final NMS. Returns detections in
    /// descending score order together with the number of rejected proposals.
    pub fn detect_counted(&self, image: &Tensor<f32>, frame_id: u64, fusion: FusionMode) -> Result<(Vec<Detection>, usize)> {
        let out = self.rpn.infer(&self.rpn_params, image, frame_id)?;
        let cfg = &self.rcnn.config;
        let mut kept = Vec::new();
        let mut crops = Vec::new();
        let mut rejected = 0;
        for p in &out.proposals {
            match prepare_roi(image, &p.bbox, cfg) {
                Ok(c) => {
                    kept.push(*p);
                    crops.push(c);
                }
                Err(Error::RejectedProposal(_)) => rejected += 1,
                Err(e) => return Err(e),
            }
        }
        let mut fused = Vec::with_capacity(kept.len());
        for (props, chunk) in kept.chunks(INFER_CHUNK).zip(crops.chunks(INFER_CHUNK)) {
            let probs = self.rcnn.classify(&self.rcnn_params, &stack_crops(chunk)?)?;
            for (p, q) in props.iter().zip(probs) {
                fused.push(Detection { score: fuse_scores(p.score, q, fusion), ..*p });
            }
        }
        Ok((nms(&fused, self.rpn.config.nms_thr), rejected))
    }

    pub fn detect(&self, image: &Tensor<f32>, frame_id: u64) -> Result<Vec<Detection>> {
        Ok(self.detect_counted(image, frame_id, self.rpn.config.fusion_mode)?.0)
    }

    pub fn detect_frames(&self, frames: &[Frame]) -> Result<Vec<Detection>> {
        let mut all = Vec::new();
        for f in frames {
            all.extend(self.detect(&f.image, f.frame_id)?);
        }
        Ok(all)
    }
}

pub fn load_rpn(path: &Path) -> Result<(Rpn, ParamStore<f32>)> {
    let ck = checkpoint::load(path)?;
    if ck.manifest.kind != NetKind::Rpn {
        return Err(Error::Checkpoint(format!("{} does not hold a stage-1 network", path.display())));
    }
    let (rpn, mut params) = Rpn::build::<f32>(&ck.manifest.network, 0)?;
    ck.restore_into(&mut params)?;
    Ok((rpn, params))
}

/// Per-iteration loss values, written as `iter,term_name,value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<(usize, String, f64)>,
}

impl LossLog {
    fn push(&mut self, iter: usize, prefix: &str, values: &[(String, f64)], total: f64) {
        for (name, v) in values {
            self.records.push((iter, format!("{prefix}.{name}"), *v));
        }
        self.records.push((iter, format!("{prefix}.total"), total));
    }

    /// Values of one term in iteration order.
    pub fn series(&self, term: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.1 == term).map(|r| r.2).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, t, v) in &self.records {
            let _ = writeln!(s, "{i},{t},{v}");
        }
        s
    }
}

/// Outcome of [`train_two_phase`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub detector: Detector,
    pub log: LossLog,
}

fn params_finite(store: &ParamStore<f32>) -> Option<String> {
    store.iter().find(|(_, p)| !p.tensor.is_finite()).map(|(_, p)| p.name.clone())
}

/// One SGD step guarded against divergence: on a non-finite loss, gradient or
/// updated weight the parameters are left at their last finite values.
fn guarded_step(
    store: &mut ParamStore<f32>,
    sgd: &mut SgdState<f32>,
    iter: usize,
    build: impl FnOnce(&mut Graph<f32>, &ParamStore<f32>) -> Result<LossTerms>,
) -> Result<(Vec<(String, f64)>, f64)> {
    let diverged = |term: String| Error::Diverged { iter, term };
    let mut g = Graph::new();
    let terms = build(&mut g, store).map_err(|e| match e {
        Error::NonFinite { context } => diverged(context),
        other => other,
    })?;
    let values = terms.values(&g);
    let total = g.value(terms.total).item() as f64;
    let grads = g.backward(terms.total).map_err(|e| match e {
        Error::NonFinite { context } => diverged(format!("gradient ({context})")),
        other => other,
    })?;
    drop(g);
    store.zero_grads();
    grads.accumulate_into(store);
    let backup: Vec<Vec<f32>> = store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
    let stepped = sgd.step(store);
    if let Err(Error::NonFinite { context }) = stepped {
        return Err(diverged(context));
    }
    stepped?;
    if let Some(name) = params_finite(store) {
        for ((_, p), b) in store.iter_mut().zip(backup) {
            p.tensor.data_mut().copy_from_slice(&b);
        }
        return Err(diverged(format!("updated weight {name}")));
    }
    Ok((values, total))
}

/// One SGD step of stage 1 on a `[3,H,W]` image.
pub fn rpn_step(
    rpn: &Rpn,
    params: &mut ParamStore<f32>,
    sgd: &mut SgdState<f32>,
    image: &Tensor<f32>,
    targets: &RpnTargets<f32>,
    iter: usize,
) -> Result<(Vec<(String, f64)>, f64)> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let input = normalize_input::<f32>(image).reshape([1, 3, h, w])?;
    guarded_step(params, sgd, iter, |g, store| {
        let x = g.input(input);
        let out = rpn.forward(g, store, x, true)?;
        rpn_loss(g, &out, targets, &rpn.config)
    })
}

/// Phase 1 on its own; returns the trained stage-1 network.
pub fn train_rpn(
    frames: &[Frame],
    run: &RunConfig,
    log: &mut LossLog,
) -> std::result::Result<(Rpn, ParamStore<f32>), (Error, Option<(Rpn, ParamStore<f32>)>)> {
    let tc = &run.train;
    let (rpn, mut params) = Rpn::build::<f32>(&run.network, tc.seed).map_err(|e| (e, None))?;
    if tc.freeze_conv1 {
        params.freeze_prefix("conv1_");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut sgd = SgdState::new(tc.rpn_lr as f32, tc.momentum as f32).map_err(|e| (e, None))?;
    let drop_every = tc.rpn_drop_every();
    let mut order: Vec<usize> = Vec::new();
    for iter in 0..tc.rpn_iters {
        if order.is_empty() {
            order = (0..frames.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let Some(fi) = order.pop() else { break };
        let flip = tc.flip && rng.random_bool(0.5);
        let frame = if flip { frames[fi].flipped() } else { frames[fi].clone() };
        sgd.learning_rate = TrainConfig::lr_at(tc.rpn_lr, tc.lr_decay, drop_every, iter) as f32;
        let (w, h) = (frame.width(), frame.height());
        let targets = rpn
            .targets::<f32, _>(&frame.boxes(), &frame.ignore_boxes(), w, h, &mut rng)
            .map_err(|e| (e, None))?;
        match rpn_step(&rpn, &mut params, &mut sgd, &frame.image, &targets, iter) {
            Ok((values, total)) => {
                log.push(iter, "rpn", &values, total);
                if iter % 100 == 0 || iter + 1 == tc.rpn_iters {
                    info!("rpn iter {iter}: loss {total:.4} lr {}", sgd.learning_rate);
                }
            }
            Err(e) => return Err((e, Some((rpn, params)))),
        }
    }
    Ok((rpn, params))
}

/// A stage-2 training crop source.
#[derive(Clone, Copy, Debug)]
struct RoiRef {
    frame: usize,
    bbox: BBox,
    label: RoiLabel,
}

/// Labelled stage-2 candidates: stage-1 proposals of every frame plus,
/// optionally, the ground-truth boxes themselves.
fn collect_rois(frames: &[Frame], rpn: &Rpn, rpn_params: &ParamStore<f32>, tc: &TrainConfig) -> Result<Vec<RoiRef>> {
    let cfg = &rpn.config;
    let mut rois = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let out = rpn.infer(rpn_params, &f.image, f.frame_id)?;
        let mut boxes: Vec<BBox> = out.proposals.iter().map(|d| d.bbox).collect();
        if tc.inject_gt {
            boxes.extend(f.boxes());
        }
        let labels = assign_rcnn_labels(&boxes, &f.boxes(), &f.ignore_boxes(), cfg);
        for (b, l) in boxes.into_iter().zip(labels) {
            if l != RoiLabel::Discard {
                rois.push(RoiRef { frame: fi, bbox: b, label: l });
            }
        }
    }
    Ok(rois)
}

fn flip_mask(m: &MaskTarget) -> MaskTarget {
    let mut out = m.clone();
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.grid[r * m.cols + c] = m.grid[r * m.cols + (m.cols - 1 - c)];
        }
    }
    out
}

fn flip_crop(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let d = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    })
}

/// Crops, labels and mask targets of one stage-2 minibatch.
pub struct RcnnBatch {
    pub crops: Tensor<f32>,
    pub labels: Vec<u8>,
    pub masks: Vec<(crate::config::Tap, Vec<MaskTarget>)>,
}

/// Builds a stage-2 minibatch from `(frame index, box, label, flip)` picks.
pub fn build_batch(rcnn: &Rcnn, frames: &[Frame], picks: &[(usize, BBox, RoiLabel, bool)]) -> Result<RcnnBatch> {
    let mut crops = Vec::with_capacity(picks.len());
    let mut labels = Vec::with_capacity(picks.len());
    let mut mask_sets: Vec<Vec<MaskTarget>> = vec![Vec::new(); rcnn.seg.len()];
    for &(fi, bbox, label, flip) in picks {
        let f = &frames[fi];
        let crop = prepare_roi(&f.image, &bbox, &rcnn.config)?;
        let (gts, ign) = (f.boxes(), f.ignore_boxes());
        let masks = rcnn.mask_targets(&[(bbox, &gts, &ign)]);
        crops.push(if flip { flip_crop(&crop) } else { crop });
        labels.push(label.class());
        for (set, (_, m)) in mask_sets.iter_mut().zip(masks) {
            let m = m.into_iter().next().expect("one mask per crop");
            set.push(if flip { flip_mask(&m) } else { m });
        }
    }
    let masks = rcnn.seg.iter().map(|s| s.tap).zip(mask_sets).collect();
    Ok(RcnnBatch { crops: stack_crops(&crops)?, labels, masks })
}

/// Builds the stage-2 network with its trunk copied from stage 1.
pub fn init_rcnn_from_rpn(run: &RunConfig, rpn_params: &ParamStore<f32>) -> Result<(Rcnn, ParamStore<f32>)> {
    let (rcnn, mut params) = Rcnn::build::<f32>(&run.network, run.train.seed.wrapping_add(1))?;
    let prefixes = backbone_prefixes();
    let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    let copied = params.copy_matching(rpn_params, &refs)?;
    debug!("stage 2 initialised {} trunk tensors from stage 1", copied.len());
    if run.train.freeze_conv1 {
        params.freeze_prefix("conv1_");
    }
    Ok((rcnn, params))
}

/// One SGD step of stage 2 on a prepared batch.
pub fn rcnn_step(
    rcnn: &Rcnn,
    params: &mut ParamStore<f32>,
    sgd: &mut SgdState<f32>,
    batch: &RcnnBatch,
    iter: usize,
) -> Result<(Vec<(String, f64)>, f64)> {
    let input = normalize_input::<f32>(&batch.crops);
    guarded_step(params, sgd, iter, |g, store| {
        let x = g.input(input);
        let out = rcnn.forward(g, store, x)?;
        rcnn_loss(g, &out, &batch.labels, &batch.masks, &rcnn.config)
    })
}

/// Classification accuracy of stage 2 on a batch.
pub fn rcnn_accuracy(rcnn: &Rcnn, params: &ParamStore<f32>, batch: &RcnnBatch) -> Result<f64> {
    let probs = rcnn.classify(params, &batch.crops)?;
    let mut right = 0;
    let mut n = 0;
    for (p, &l) in probs.iter().zip(&batch.labels) {
        if l > 1 {
            continue;
        }
        n += 1;
        if (*p > 0.5) == (l == 1) {
            right += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { right as f64 / n as f64 })
}

/// Phase 2: stage-2 training on crops of stage-1 proposals.
pub fn train_rcnn(
    frames: &[Frame],
    run: &RunConfig,
    rpn: &Rpn,
    rpn_params: &ParamStore<f32>,
    log: &mut LossLog,
) -> std::result::Result<(Rcnn, ParamStore<f32>), (Error, Option<(Rcnn, ParamStore<f32>)>)> {
    let tc = &run.train;
    let rois = collect_rois(frames, rpn, rpn_params, tc).map_err(|e| (e, None))?;
    let pos: Vec<RoiRef> = rois.iter().filter(|r| r.label == RoiLabel::Pos).copied().collect();
    let neg: Vec<RoiRef> = rois.iter().filter(|r| r.label == RoiLabel::Neg).copied().collect();
    info!("stage-2 pool: {} positive, {} negative crops", pos.len(), neg.len());
    let (rcnn, mut params) = init_rcnn_from_rpn(run, rpn_params).map_err(|e| (e, None))?;
    if pos.is_empty() && neg.is_empty() {
        return Err((Error::config("no stage-2 training crops: every proposal was discarded"), Some((rcnn, params))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(2);
    let mut sgd = SgdState::new(tc.rcnn_lr as f32, tc.momentum as f32).map_err(|e| (e, None))?;
    let drop_every = tc.rcnn_drop_every();
    let want_pos = ((tc.rcnn_batch as f64 * tc.rcnn_pos_fraction).round() as usize).min(pos.len());
    for iter in 0..tc.rcnn_iters {
        let n_pos = if neg.is_empty() { tc.rcnn_batch.min(pos.len()) } else { want_pos };
        let mut picks = Vec::with_capacity(tc.rcnn_batch);
        for _ in 0..n_pos {
            picks.push(pos[rng.random_range(0..pos.len())]);
        }
        while picks.len() < tc.rcnn_batch && !neg.is_empty() {
            picks.push(neg[rng.random_range(0..neg.len())]);
        }
        let picks: Vec<_> = picks.into_iter().map(|r| (r.frame, r.bbox, r.label, tc.flip && rng.random_bool(0.5))).collect();
        sgd.learning_rate = TrainConfig::lr_at(tc.rcnn_lr, tc.lr_decay, drop_every, iter) as f32;
        let batch = match build_batch(&rcnn, frames, &picks) {
            Ok(b) => b,
            Err(e) => return Err((e, Some((rcnn, params)))),
        };
        match rcnn_step(&rcnn, &mut params, &mut sgd, &batch, iter) {
            Ok((values, total)) => {
                log.push(iter, "rcnn", &values, total);
                if iter % 50 == 0 || iter + 1 == tc.rcnn_iters {
                    info!("rcnn iter {iter}: loss {total:.4} lr {}", sgd.learning_rate);
                }
            }
            Err(e) => return Err((e, Some((rcnn, params)))),
        }
    }
    Ok((rcnn, params))
}

/// Trains both phases. With `out` set, writes `rpn.ckpt`, `rcnn.ckpt`,
/// `loss.log` and `config.toml` there; on divergence the last finite weights
/// of the failing phase are saved before the error is returned.
pub fn train_two_phase(frames: &[Frame], run: &RunConfig, out: Option<&Path>) -> Result<Trained> {
    run.validate()?;
    if frames.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    for f in frames {
        if f.width() % 16 != 0 || f.height() % 16 != 0 {
            return Err(Error::config(format!(
                "frame {} is {}×{}; sides must be multiples of 16",
                f.frame_id,
                f.width(),
                f.height()
            )));
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(RUN_CONFIG), run.to_toml_string().as_bytes())?;
    }
    let mut log = LossLog::default();
    let save_log = |log: &LossLog| -> Result<()> {
        match out {
            Some(dir) => write_file(&dir.join(LOSS_LOG), log.render().as_bytes()),
            None => Ok(()),
        }
    };
    let manifest = |kind| Manifest { kind, network: run.network.clone() };

    let (rpn, rpn_params) = match train_rpn(frames, run, &mut log) {
        Ok(v) => v,
        Err((e, last)) => {
            if let (Some(dir), Some((_, p))) = (out, last) {
                checkpoint::save(&dir.join(RPN_CKPT), &manifest(NetKind::Rpn), &p)?;
            }
            save_log(&log)?;
            return Err(e);
        }
    };
    if let Some(dir) = out {
        checkpoint::save(&dir.join(RPN_CKPT), &manifest(NetKind::Rpn), &rpn_params)?;
    }
    let (rcnn, rcnn_params) = match train_rcnn(frames, run, &rpn, &rpn_params, &mut log) {
        Ok(v) => v,
        Err((e, last)) => {
            if let (Some(dir), Some((_, p))) = (out, last) {
                checkpoint::save(&dir.join(RCNN_CKPT), &manifest(NetKind::Rcnn), &p)?;
            }
            save_log(&log)?;
            return Err(e);
        }
    };
    let detector = Detector { rpn, rpn_params, rcnn, rcnn_params };
    if let Some(dir) = out {
        detector.save(dir)?;
    }
    save_log(&log)?;
    Ok(Trained { detector, log })
}

/// Ground truths of a set of frames.
pub fn frame_gts(frames: &[Frame]) -> Vec<GtBox> {
    frames.iter().flat_map(|f| f.gts.iter().copied()).collect()
}

/// Detects on every frame and evaluates one subset.
pub fn evaluate(detector: &Detector, frames: &[Frame], subset: Subset) -> Result<(Vec<Detection>, EvalCurve)> {
    let dets = detector.detect_frames(frames)?;
    let gts = filter_subset(&frame_gts(frames), subset);
    let curve = mr_curve(&dets, &gts, frames.len(), 9)?;
    Ok((dets, curve))
}
