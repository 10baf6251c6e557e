//! Run configuration: network wiring, training schedule and synthetic data.
//!
//! Everything is read from one TOML file with optional `[network]`, `[train]`
//! and `[synth]` tables; missing keys take the defaults below.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, PadSplit};
use crate::weakseg::FillRule;

/// VGG-16 channel widths of the conv1..conv5 stages.
pub const VGG16_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Backbone layers whose output a branch can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    Conv4_3,
    Conv5_1,
    Conv5_2,
    Conv5_3,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Conv4_3, Tap::Conv5_1, Tap::Conv5_2, Tap::Conv5_3];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Conv4_3 => "conv4_3",
            Tap::Conv5_1 => "conv5_1",
            Tap::Conv5_2 => "conv5_2",
            Tap::Conv5_3 => "conv5_3",
        }
    }

    /// Downsampling factor of the layer relative to the network input.
    pub fn stride(self) -> usize {
        match self {
            Tap::Conv4_3 => 8,
            _ => 16,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the stage-1 and stage-2 probabilities combine into the final score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Multiply,
    Mean,
    RcnnOnly,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(FusionMode::Multiply),
            "mean" => Ok(FusionMode::Mean),
            "rcnn_only" => Ok(FusionMode::RcnnOnly),
            other => Err(Error::config(format!("unknown fusion mode {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPool {
    #[default]
    Max,
    Average,
}

/// Stage-1 switches and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    pub conv5_1_sa: bool,
    pub conv5_2_sa: bool,
    pub conv5_3_sa: bool,
    pub conv4_3_dt: bool,
    pub conv4_3_sa: bool,
    /// Auxiliary conv4_3 head: classification, regression, segmentation.
    pub alpha_c1: f64,
    pub beta_r1: f64,
    pub gamma_s1: f64,
    /// Main conv5_3 head.
    pub alpha_c2: f64,
    pub beta_r2: f64,
    pub gamma_s2: f64,
    /// Segmentation branches on conv5_1 / conv5_2 (switchboard only).
    pub gamma_conv5_1: f64,
    pub gamma_conv5_2: f64,
    pub conv5_anchors: AnchorSpec,
    pub conv4_anchors: AnchorSpec,
    pub proposal_channels: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        let ladder = |base: f64, n: usize| (0..n).map(|i| (base * 1.3f64.powi(i as i32)).round()).collect();
        RpnConfig {
            conv5_1_sa: false,
            conv5_2_sa: false,
            conv5_3_sa: true,
            conv4_3_dt: true,
            conv4_3_sa: true,
            alpha_c1: 1.0,
            beta_r1: 1.0,
            gamma_s1: 1.0,
            alpha_c2: 1.0,
            beta_r2: 1.0,
            gamma_s2: 1.0,
            gamma_conv5_1: 1.0,
            gamma_conv5_2: 1.0,
            conv5_anchors: AnchorSpec { stride: 16, scales: ladder(32.0, 7), aspect_ratio: 0.41 },
            conv4_anchors: AnchorSpec { stride: 8, scales: ladder(24.0, 5), aspect_ratio: 0.41 },
            proposal_channels: 512,
        }
    }
}

impl RpnConfig {
    /// Taps carrying a segmentation branch.
    pub fn seg_taps(&self) -> Vec<Tap> {
        let on = [self.conv4_3_sa, self.conv5_1_sa, self.conv5_2_sa, self.conv5_3_sa];
        Tap::ALL.into_iter().zip(on).filter(|(_, on)| *on).map(|(t, _)| t).collect()
    }

    pub fn seg_weight(&self, tap: Tap) -> f64 {
        match tap {
            Tap::Conv4_3 => self.gamma_s1,
            Tap::Conv5_1 => self.gamma_conv5_1,
            Tap::Conv5_2 => self.gamma_conv5_2,
            Tap::Conv5_3 => self.gamma_s2,
        }
    }
}

/// Stage-2 switches and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcnnConfig {
    pub conv5_1_sa: bool,
    pub conv5_2_sa: bool,
    pub conv5_3_sa: bool,
    pub conv4_3_sa: bool,
    pub alpha_c3: f64,
    /// conv4_3 segmentation.
    pub gamma_s3: f64,
    /// conv5_3 segmentation.
    pub gamma_s4: f64,
    pub gamma_conv5_1: f64,
    pub gamma_conv5_2: f64,
    pub attention_pool: AttentionPool,
}

impl Default for RcnnConfig {
    fn default() -> Self {
        RcnnConfig {
            conv5_1_sa: false,
            conv5_2_sa: false,
            conv5_3_sa: true,
            conv4_3_sa: true,
            alpha_c3: 1.0,
            gamma_s3: 1.0,
            gamma_s4: 1.0,
            gamma_conv5_1: 1.0,
            gamma_conv5_2: 1.0,
            attention_pool: AttentionPool::Max,
        }
    }
}

impl RcnnConfig {
    pub fn seg_taps(&self) -> Vec<Tap> {
        let on = [self.conv4_3_sa, self.conv5_1_sa, self.conv5_2_sa, self.conv5_3_sa];
        Tap::ALL.into_iter().zip(on).filter(|(_, on)| *on).map(|(t, _)| t).collect()
    }

    pub fn seg_weight(&self, tap: Tap) -> f64 {
        match tap {
            Tap::Conv4_3 => self.gamma_s3,
            Tap::Conv5_1 => self.gamma_conv5_1,
            Tap::Conv5_2 => self.gamma_conv5_2,
            Tap::Conv5_3 => self.gamma_s4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Every VGG-16 width is divided by this.
    pub width_factor: usize,
    pub rpn: RpnConfig,
    pub rcnn: RcnnConfig,
    pub iou_pos_rpn: f64,
    /// Each ground truth's best anchor is positive even below `iou_pos_rpn`.
    pub anchor_rescue: bool,
    /// Anchors crossing the image border are labelled normally instead of ignored.
    pub keep_cross_boundary: bool,
    pub nms_thr: f64,
    pub sample_count: usize,
    /// Positive : negative proportion of the sampled anchors.
    pub pos_neg_ratio: [usize; 2],
    pub pre_nms_top_k: usize,
    pub post_nms_top_n: usize,
    /// Decoded proposals smaller than this (px) in either side are dropped.
    pub min_proposal_size: f64,
    pub iou_pos_rcnn: f64,
    pub iou_neg_rcnn: f64,
    pub crop_padding: f64,
    pub pad_split: PadSplit,
    pub crop_size: usize,
    pub mask_rule: FillRule,
    pub fusion_mode: FusionMode,
    /// Standard deviation for layers outside the backbone.
    pub init_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width_factor: 4,
            rpn: RpnConfig::default(),
            rcnn: RcnnConfig::default(),
            iou_pos_rpn: 0.5,
            anchor_rescue: true,
            keep_cross_boundary: true,
            nms_thr: 0.5,
            sample_count: 120,
            pos_neg_ratio: [1, 5],
            pre_nms_top_k: 1000,
            post_nms_top_n: 40,
            min_proposal_size: 4.0,
            iou_pos_rcnn: 0.8,
            iou_neg_rcnn: 0.5,
            crop_padding: 0.25,
            pad_split: PadSplit::Total,
            crop_size: 112,
            mask_rule: FillRule::Center,
            fusion_mode: FusionMode::Multiply,
            init_std: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn channels(&self) -> [usize; 5] {
        VGG16_CHANNELS.map(|c| (c / self.width_factor.max(1)).max(1))
    }

    pub fn proposal_channels(&self) -> usize {
        (self.rpn.proposal_channels / self.width_factor.max(1)).max(1)
    }

    /// Positive and negative quota of one anchor minibatch.
    pub fn sample_quota(&self) -> (usize, usize) {
        let [p, n] = self.pos_neg_ratio;
        let pos = self.sample_count * p / (p + n).max(1);
        (pos, self.sample_count - pos)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_factor == 0 {
            return Err(Error::config("width_factor must be at least 1"));
        }
        let r = &self.rpn;
        let rc = &self.rcnn;
        let weights = [
            ("alpha_c1", r.alpha_c1),
            ("beta_r1", r.beta_r1),
            ("gamma_s1", r.gamma_s1),
            ("alpha_c2", r.alpha_c2),
            ("beta_r2", r.beta_r2),
            ("gamma_s2", r.gamma_s2),
            ("rpn.gamma_conv5_1", r.gamma_conv5_1),
            ("rpn.gamma_conv5_2", r.gamma_conv5_2),
            ("alpha_c3", rc.alpha_c3),
            ("gamma_s3", rc.gamma_s3),
            ("gamma_s4", rc.gamma_s4),
            ("rcnn.gamma_conv5_1", rc.gamma_conv5_1),
            ("rcnn.gamma_conv5_2", rc.gamma_conv5_2),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("loss weight {name} must be finite and non-negative")));
            }
        }
        if !(r.conv5_1_sa || r.conv5_2_sa || r.conv5_3_sa || r.conv4_3_dt || r.conv4_3_sa) {
            return Err(Error::config("the RPN switchboard must enable at least one branch"));
        }
        if r.conv5_anchors.stride != Tap::Conv5_3.stride() {
            return Err(Error::config("conv5 anchors must use stride 16"));
        }
        if r.conv4_anchors.stride != Tap::Conv4_3.stride() {
            return Err(Error::config("conv4 anchors must use stride 8"));
        }
        for spec in [&r.conv5_anchors, &r.conv4_anchors] {
            if spec.scales.is_empty() || spec.scales.iter().any(|s| !(*s > 0.0)) || !(spec.aspect_ratio > 0.0) {
                return Err(Error::config("anchor scales and aspect ratio must be positive"));
            }
        }
        for (name, v) in [
            ("iou_pos_rpn", self.iou_pos_rpn),
            ("iou_pos_rcnn", self.iou_pos_rcnn),
            ("iou_neg_rcnn", self.iou_neg_rcnn),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.nms_thr > 0.0 && self.nms_thr <= 1.0) {
            return Err(Error::config("nms_thr must lie in (0, 1]"));
        }
        if self.iou_neg_rcnn > self.iou_pos_rcnn {
            return Err(Error::config("iou_neg_rcnn must not exceed iou_pos_rcnn"));
        }
        if self.pos_neg_ratio.iter().sum::<usize>() == 0 {
            return Err(Error::config("pos_neg_ratio must not be 0:0"));
        }
        if self.crop_size < 16 || self.crop_size % 16 != 0 {
            return Err(Error::config("crop_size must be a positive multiple of 16"));
        }
        if !(self.crop_padding >= 0.0) {
            return Err(Error::config("crop_padding must be non-negative"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub rpn_iters: usize,
    pub rcnn_iters: usize,
    pub rpn_lr: f64,
    pub rcnn_lr: f64,
    pub momentum: f64,
    /// Learning-rate drop interval at full scale, multiplied by `schedule_factor`.
    pub rpn_lr_step: usize,
    pub rcnn_lr_step: usize,
    pub lr_decay: f64,
    pub schedule_factor: f64,
    pub rcnn_batch: usize,
    /// Upper bound on positive crops per stage-2 minibatch.
    pub rcnn_pos_fraction: f64,
    pub freeze_conv1: bool,
    /// Ground-truth boxes join the stage-2 training proposals as positives.
    pub inject_gt: bool,
    /// Random horizontal flips of training frames.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            rpn_iters: 1500,
            rcnn_iters: 500,
            rpn_lr: 0.005,
            rcnn_lr: 0.002,
            momentum: 0.9,
            rpn_lr_step: 70_000,
            rcnn_lr_step: 60_000,
            lr_decay: 0.1,
            schedule_factor: 0.02,
            rcnn_batch: 25,
            rcnn_pos_fraction: 0.3,
            freeze_conv1: true,
            inject_gt: true,
            flip: true,
        }
    }
}

impl TrainConfig {
    fn scaled_step(&self, step: usize) -> usize {
        ((step as f64 * self.schedule_factor).round() as usize).max(1)
    }

    /// Iteration at which the stage-1 learning rate drops for the first time.
    pub fn rpn_drop_every(&self) -> usize {
        self.scaled_step(self.rpn_lr_step)
    }

    pub fn rcnn_drop_every(&self) -> usize {
        self.scaled_step(self.rcnn_lr_step)
    }

    /// Step-decayed learning rate at a zero-based iteration.
    pub fn lr_at(base: f64, decay: f64, drop_every: usize, iter: usize) -> f64 {
        base * decay.powi((iter / drop_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rpn_lr > 0.0 && self.rcnn_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.schedule_factor > 0.0) {
            return Err(Error::config("schedule_factor must be positive"));
        }
        if self.rcnn_batch == 0 {
            return Err(Error::config("rcnn_batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rcnn_pos_fraction) {
            return Err(Error::config("rcnn_pos_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Synthetic scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    /// Median of the log-normal pedestrian height distribution, in pixels.
    pub height_median: f64,
    /// Standard deviation of ln(height).
    pub height_sigma: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Probability that a pedestrian gets an occluder.
    pub occluder_probability: f64,
    /// Range of occluded fraction for occluded pedestrians.
    pub occlusion_range: [f64; 2],
    /// Clutter shapes per 10 000 pixels.
    pub clutter_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 192,
            train_frames: 200,
            test_frames: 50,
            min_pedestrians: 1,
            max_pedestrians: 3,
            height_median: 70.0,
            height_sigma: 0.3,
            min_height: 30.0,
            max_height: 176.0,
            occluder_probability: 0.25,
            occlusion_range: [0.1, 0.5],
            clutter_density: 2.0,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::config("synthetic image sides must be positive multiples of 16"));
        }
        if self.min_pedestrians > self.max_pedestrians {
            return Err(Error::config("min_pedestrians exceeds max_pedestrians"));
        }
        if !(self.height_median > 0.0 && self.height_sigma >= 0.0) {
            return Err(Error::config("height distribution parameters must be positive"));
        }
        if !(self.min_height > 0.0 && self.min_height <= self.max_height) {
            return Err(Error::config("height bounds must satisfy 0 < min <= max"));
        }
        if self.max_height > self.height as f64 {
            return Err(Error::config("max_height exceeds the image height"));
        }
        let [lo, hi] = self.occlusion_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::config("occlusion_range must satisfy 0 <= lo <= hi < 1"));
        }
        if !(0.0..=1.0).contains(&self.occluder_probability) {
            return Err(Error::config("occluder_probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

impl NetworkConfig {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("network config serialises to TOML")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
