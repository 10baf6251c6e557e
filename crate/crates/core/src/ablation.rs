//! Branch-placement ablation: which trunk layers host segmentation and
//! detection branches in each stage.

use std::fmt::Write as _;
use std::str::FromStr;

use log::info;

use crate::config::{RcnnConfig, RpnConfig, RunConfig};
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::eval::{filter_subset, mr_curve, Subset};
use crate::pipeline::{frame_gts, train_rcnn, train_rpn, Detector, LossLog};
use crate::rpn::Rpn;
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rpn,
    Rcnn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rpn => "rpn",
            Stage::Rcnn => "rcnn",
        }
    }
}

/// The five switches; `conv4_3_dt` has no effect on stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub conv5_1_sa: bool,
    pub conv5_2_sa: bool,
    pub conv5_3_sa: bool,
    pub conv4_3_dt: bool,
    pub conv4_3_sa: bool,
}

impl Switches {
    const fn new(c51: bool, c52: bool, c53: bool, dt: bool, sa: bool) -> Self {
        Switches { conv5_1_sa: c51, conv5_2_sa: c52, conv5_3_sa: c53, conv4_3_dt: dt, conv4_3_sa: sa }
    }

    pub fn of_rpn(c: &RpnConfig) -> Self {
        Switches::new(c.conv5_1_sa, c.conv5_2_sa, c.conv5_3_sa, c.conv4_3_dt, c.conv4_3_sa)
    }

    pub fn of_rcnn(c: &RcnnConfig) -> Self {
        Switches::new(c.conv5_1_sa, c.conv5_2_sa, c.conv5_3_sa, false, c.conv4_3_sa)
    }

    pub fn apply_rpn(&self, c: &mut RpnConfig) {
        c.conv5_1_sa = self.conv5_1_sa;
        c.conv5_2_sa = self.conv5_2_sa;
        c.conv5_3_sa = self.conv5_3_sa;
        c.conv4_3_dt = self.conv4_3_dt;
        c.conv4_3_sa = self.conv4_3_sa;
    }

    pub fn apply_rcnn(&self, c: &mut RcnnConfig) {
        c.conv5_1_sa = self.conv5_1_sa;
        c.conv5_2_sa = self.conv5_2_sa;
        c.conv5_3_sa = self.conv5_3_sa;
        c.conv4_3_sa = self.conv4_3_sa;
    }

    fn entries(&self, stage: Stage) -> Vec<(&'static str, bool)> {
        let mut v = vec![
            ("conv5_1_SA", self.conv5_1_sa),
            ("conv5_2_SA", self.conv5_2_sa),
            ("conv5_3_SA", self.conv5_3_sa),
        ];
        if stage == Stage::Rpn {
            v.push(("conv4_3_DT", self.conv4_3_dt));
        }
        v.push(("conv4_3_SA", self.conv4_3_sa));
        v
    }

    /// Names of the branches switched off, e.g. `conv5_3_SA`.
    pub fn disabled(&self, stage: Stage) -> Vec<&'static str> {
        self.entries(stage).into_iter().filter(|e| !e.1).map(|e| e.0).collect()
    }
}

/// Stage-1 columns, left to right.
pub const RPN_COLUMNS: [Switches; 8] = [
    Switches::new(false, false, true, false, false),
    Switches::new(false, false, true, true, false),
    Switches::new(false, false, true, true, true),
    Switches::new(false, true, false, true, true),
    Switches::new(true, false, false, true, true),
    Switches::new(false, true, true, true, true),
    Switches::new(true, false, true, true, true),
    Switches::new(true, true, true, true, true),
];

/// Stage-2 columns; `conv4_3_dt` is unused here.
pub const RCNN_COLUMNS: [Switches; 8] = [
    Switches::new(false, false, false, false, false),
    Switches::new(false, false, true, false, false),
    Switches::new(false, false, true, false, true),
    Switches::new(false, true, false, false, true),
    Switches::new(true, false, false, false, true),
    Switches::new(false, true, true, false, true),
    Switches::new(true, false, true, false, true),
    Switches::new(true, true, true, false, true),
];

/// One `--switch` assignment: `[rpn.|rcnn.]name=on|off`. Without a stage
/// prefix it applies to both stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchArg {
    pub stage: Option<Stage>,
    pub name: String,
    pub on: bool,
}

const SWITCH_NAMES: [&str; 5] = ["conv5_1_sa", "conv5_2_sa", "conv5_3_sa", "conv4_3_dt", "conv4_3_sa"];

impl FromStr for SwitchArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("switch `{s}` must look like conv4_3_SA=off")))?;
        let on = match value.to_ascii_lowercase().as_str() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            v => return Err(Error::config(format!("switch value `{v}` must be on or off"))),
        };
        let key = key.to_ascii_lowercase();
        let (stage, name) = match key.split_once('.') {
            Some(("rpn", n)) => (Some(Stage::Rpn), n.to_string()),
            Some(("rcnn", n)) => (Some(Stage::Rcnn), n.to_string()),
            Some((p, _)) => return Err(Error::config(format!("unknown stage `{p}`; expected rpn or rcnn"))),
            None => (None, key),
        };
        if !SWITCH_NAMES.contains(&name.as_str()) {
            return Err(Error::config(format!("unknown switch `{name}`; expected one of {}", SWITCH_NAMES.join(", "))));
        }
        if name == "conv4_3_dt" && stage == Some(Stage::Rcnn) {
            return Err(Error::config("conv4_3_DT exists only in stage 1"));
        }
        Ok(SwitchArg { stage, name, on })
    }
}

fn set(sw: &mut Switches, name: &str, on: bool) {
    match name {
        "conv5_1_sa" => sw.conv5_1_sa = on,
        "conv5_2_sa" => sw.conv5_2_sa = on,
        "conv5_3_sa" => sw.conv5_3_sa = on,
        "conv4_3_dt" => sw.conv4_3_dt = on,
        _ => sw.conv4_3_sa = on,
    }
}

/// Applies switch assignments to a run configuration.
pub fn apply_switches(run: &mut RunConfig, args: &[SwitchArg]) -> Result<()> {
    let mut rpn = Switches::of_rpn(&run.network.rpn);
    let mut rcnn = Switches::of_rcnn(&run.network.rcnn);
    for a in args {
        if a.stage != Some(Stage::Rcnn) {
            set(&mut rpn, &a.name, a.on);
        }
        if a.stage != Some(Stage::Rpn) && a.name != "conv4_3_dt" {
            set(&mut rcnn, &a.name, a.on);
        }
    }
    rpn.apply_rpn(&mut run.network.rpn);
    rcnn.apply_rcnn(&mut run.network.rcnn);
    run.validate()
}

/// Human-readable summary of the branches a run configuration disables.
pub fn config_echo(run: &RunConfig) -> String {
    let list = |v: Vec<&str>| if v.is_empty() { "none".to_string() } else { v.join(", ") };
    format!(
        "rpn disabled: {}\nrcnn disabled: {}",
        list(Switches::of_rpn(&run.network.rpn).disabled(Stage::Rpn)),
        list(Switches::of_rcnn(&run.network.rcnn).disabled(Stage::Rcnn))
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub stage: Stage,
    /// 1-based column of the table, or 0 for a single custom run.
    pub column: usize,
    pub switches: Switches,
    pub log_avg_mr: f64,
}

pub const REPORT_HEADER: &str = "stage,column,conv5_1_SA,conv5_2_SA,conv5_3_SA,conv4_3_DT,conv4_3_SA,log_avg_mr";

pub fn render_report(rows: &[AblationRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    let flag = |b: bool| if b { "on" } else { "off" };
    for r in rows {
        let dt = if r.stage == Stage::Rpn { flag(r.switches.conv4_3_dt) } else { "-" };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6}",
            r.stage.name(),
            r.column,
            flag(r.switches.conv5_1_sa),
            flag(r.switches.conv5_2_sa),
            flag(r.switches.conv5_3_sa),
            dt,
            flag(r.switches.conv4_3_sa),
            r.log_avg_mr
        );
    }
    s
}

/// Miss rate of the stage-1 proposals alone, scored by stage-1 confidence.
pub fn rpn_log_avg_mr(rpn: &Rpn, params: &ParamStore<f32>, frames: &[Frame], subset: Subset) -> Result<f64> {
    let mut dets = Vec::new();
    for f in frames {
        dets.extend(rpn.infer(params, &f.image, f.frame_id)?.proposals);
    }
    Ok(mr_curve(&dets, &filter_subset(&frame_gts(frames), subset), frames.len(), 9)?.log_avg_mr)
}

fn fused_log_avg_mr(det: &Detector, frames: &[Frame], subset: Subset) -> Result<f64> {
    let dets = det.detect_frames(frames)?;
    Ok(mr_curve(&dets, &filter_subset(&frame_gts(frames), subset), frames.len(), 9)?.log_avg_mr)
}

fn strip<T>(r: std::result::Result<T, (Error, Option<impl Sized>)>) -> Result<T> {
    r.map_err(|(e, _)| e)
}

/// Runs every column of both stages. Stage-2 columns share the stage-1
/// network trained with the configuration's own stage-1 switches.
pub fn run_table(train: &[Frame], test: &[Frame], base: &RunConfig, subset: Subset) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for (i, sw) in RPN_COLUMNS.iter().enumerate() {
        let mut run = base.clone();
        sw.apply_rpn(&mut run.network.rpn);
        info!("ablation rpn column {}", i + 1);
        let (rpn, params) = strip(train_rpn(train, &run, &mut LossLog::default()))?;
        let mr = rpn_log_avg_mr(&rpn, &params, test, subset)?;
        rows.push(AblationRow { stage: Stage::Rpn, column: i + 1, switches: *sw, log_avg_mr: mr });
    }
    let (rpn, rpn_params) = strip(train_rpn(train, base, &mut LossLog::default()))?;
    for (i, sw) in RCNN_COLUMNS.iter().enumerate() {
        let mut run = base.clone();
        sw.apply_rcnn(&mut run.network.rcnn);
        info!("ablation rcnn column {}", i + 1);
        let (rcnn, rcnn_params) = strip(train_rcnn(train, &run, &rpn, &rpn_params, &mut LossLog::default()))?;
        let det = Detector { rpn: rpn.clone(), rpn_params: rpn_params.clone(), rcnn, rcnn_params };
        let mr = fused_log_avg_mr(&det, test, subset)?;
        rows.push(AblationRow { stage: Stage::Rcnn, column: i + 1, switches: *sw, log_avg_mr: mr });
    }
    Ok(rows)
}

/// Trains and evaluates one configuration; reports a row per stage.
pub fn run_single(train: &[Frame], test: &[Frame], run: &RunConfig, subset: Subset) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let (rpn, rpn_params) = strip(train_rpn(train, run, &mut LossLog::default()))?;
    let rpn_mr = rpn_log_avg_mr(&rpn, &rpn_params, test, subset)?;
    let (rcnn, rcnn_params) = strip(train_rcnn(train, run, &rpn, &rpn_params, &mut LossLog::default()))?;
    let det = Detector { rpn, rpn_params, rcnn, rcnn_params };
    let mr = fused_log_avg_mr(&det, test, subset)?;
    Ok(vec![
        AblationRow { stage: Stage::Rpn, column: 0, switches: Switches::of_rpn(&run.network.rpn), log_avg_mr: rpn_mr },
        AblationRow { stage: Stage::Rcnn, column: 0, switches: Switches::of_rcnn(&run.network.rcnn), log_avg_mr: mr },
    ])
}
