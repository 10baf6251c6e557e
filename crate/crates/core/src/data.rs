//! Dataset directories, annotation files and detection dumps.
//!
//! A dataset directory holds `frame_NNNNNN.png` images (8-bit RGB, channel
//! order R, G, B; pixel value `v` maps to `v / 255`) and one `annotations.txt`
//! with lines `frame_id x y w h visible_fraction ignore_flag`. Frames are the
//! image files present; blank lines and lines starting with `#` are skipped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::geometry::{BBox, Detection};
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor<f32>,
    pub gts: Vec<GtBox>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.gts.iter().filter(|g| !g.ignore).map(|g| g.bbox).collect()
    }

    pub fn ignore_boxes(&self) -> Vec<BBox> {
        self.gts.iter().filter(|g| g.ignore).map(|g| g.bbox).collect()
    }

    /// Mirror image about the vertical axis, boxes included.
    pub fn flipped(&self) -> Frame {
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        let image = Tensor::from_fn(self.image.shape().to_vec(), |i| {
            let (plane, x) = (i / w, i % w);
            src[plane * w + (w - 1 - x)]
        });
        debug_assert_eq!(image.numel(), 3 * h * w);
        let gts = self
            .gts
            .iter()
            .map(|g| GtBox { bbox: BBox { x: w as f64 - g.bbox.right(), ..g.bbox }, ..*g })
            .collect();
        Frame { frame_id: self.frame_id, image, gts }
    }
}

pub fn frame_file_name(frame_id: u64) -> String {
    format!("frame_{frame_id:06}.png")
}

fn parse_frame_file(name: &str) -> Option<u64> {
    name.strip_prefix("frame_")?.strip_suffix(".png")?.parse().ok()
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::config(format!("expected a [3,H,W] image, got {s:?}"))),
    };
    let d = image.data();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Parses annotation text. Boxes are not clipped here.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<GtBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let frame_id: u64 = fields[0].parse().map_err(|_| err(format!("bad frame id {:?}", fields[0])))?;
        let mut nums = [0.0f64; 5];
        for (k, f) in fields[1..6].iter().enumerate() {
            nums[k] = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
            if !nums[k].is_finite() {
                return Err(err(format!("non-finite number {f:?}")));
            }
        }
        let [x, y, w, h, vis] = nums;
        let bbox = BBox::new(x, y, w, h).map_err(|_| err(format!("box needs positive width and height, got {w}×{h}")))?;
        if !(0.0..=1.0).contains(&vis) {
            return Err(err(format!("visible fraction {vis} outside [0, 1]")));
        }
        let ignore = match fields[6] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("ignore flag must be 0 or 1, got {other:?}"))),
        };
        out.push(GtBox { bbox, visible_fraction: vis, ignore, frame_id });
    }
    Ok(out)
}

pub fn format_annotations(gts: &[GtBox]) -> String {
    let mut s = String::new();
    for g in gts {
        let b = &g.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            g.frame_id,
            b.x,
            b.y,
            b.w,
            b.h,
            g.visible_fraction,
            u8::from(g.ignore)
        ));
    }
    s
}

/// Frame ids of the images in a dataset directory, ascending.
pub fn list_frames(dir: &Path) -> Result<Vec<u64>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(parse_frame_file) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads every frame of a dataset directory. Ground truths are clipped to
/// their image; one lying fully outside is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<Frame>> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let gts = parse_annotations(&text, &ann_path)?;
    let ids = list_frames(dir)?;
    for g in &gts {
        if ids.binary_search(&g.frame_id).is_err() {
            return Err(Error::io(
                dir.join(frame_file_name(g.frame_id)),
                std::io::Error::new(std::io::ErrorKind::NotFound, "annotated frame has no image"),
            ));
        }
    }
    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image(&dir.join(frame_file_name(id)))?;
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        let mut fg = Vec::new();
        for g in gts.iter().filter(|g| g.frame_id == id) {
            let bbox = g.bbox.clip(w, h).ok_or_else(|| {
                Error::config(format!("frame {id}: box ({}, {}, {}, {}) lies outside the image", g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h))
            })?;
            fg.push(GtBox { bbox, ..*g });
        }
        frames.push(Frame { frame_id: id, image, gts: fg });
    }
    Ok(frames)
}

/// Loads only the annotations and frame count, without decoding images.
pub fn load_ground_truth(dir: &Path) -> Result<(Vec<GtBox>, usize)> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let gts = parse_annotations(&text, &ann_path)?;
    Ok((gts, list_frames(dir)?.len()))
}

pub fn save_dataset(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in frames {
        save_image(&dir.join(frame_file_name(f.frame_id)), &f.image)?;
    }
    let gts: Vec<GtBox> = frames.iter().flat_map(|f| f.gts.iter().copied()).collect();
    write_file(&dir.join(ANNOTATION_FILE), format_annotations(&gts).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Formats with six significant digits, `%g` style: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp) as usize, v))
    } else {
        format!("{}e{exp}", trim(mant.to_string()))
    }
}

/// One line per detection: `frame_id x y w h score`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            d.frame_id,
            format_sig6(b.x),
            format_sig6(b.y),
            format_sig6(b.w),
            format_sig6(b.h),
            format_sig6(d.score)
        ));
    }
    s
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let frame_id = f[0].parse().map_err(|_| err(format!("bad frame id {:?}", f[0])))?;
        let mut n = [0.0f64; 5];
        for (k, s) in f[1..].iter().enumerate() {
            n[k] = s.parse().map_err(|_| err(format!("bad number {s:?}")))?;
        }
        let bbox = BBox::new(n[0], n[1], n[2], n[3]).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&n[4]) {
            return Err(err(format!("score {} outside [0, 1]", n[4])));
        }
        out.push(Detection { bbox, score: n[4], frame_id });
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_file(path, format_detections(dets).as_bytes())
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

/// `dir/train` and `dir/test` of a generated dataset.
pub fn split_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("train"), dir.join("test"))
}
