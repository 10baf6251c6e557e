//! Seeded synthetic pedestrian scenes.
//!
//! Figures are built from capsules (torso, limbs) and a round head, drawn over
//! a two-tone background with random rectangles, ellipses and bars. Some
//! figures get a box occluder over their lower part, which sets the visible
//! fraction of the annotation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::config::SynthConfig;
use crate::data::{save_dataset, split_dirs, Frame};
use crate::error::Result;
use crate::eval::GtBox;
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;

/// Pedestrian box width over height.
pub const PEDESTRIAN_ASPECT: f64 = 0.41;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: vec![[0.0; 3]; w * h] }
    }

    /// Paints every pixel whose center satisfies `inside` within a bounding range.
    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f32; 3], inside: impl Fn(f64, f64) -> bool) {
        let cx0 = x0.floor().max(0.0) as usize;
        let cy0 = y0.floor().max(0.0) as usize;
        let cx1 = (x1.ceil().max(0.0) as usize).min(self.w);
        let cy1 = (y1.ceil().max(0.0) as usize).min(self.h);
        for y in cy0..cy1 {
            for x in cx0..cx1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.w + x] = color;
                }
            }
        }
    }

    fn rect(&mut self, b: &BBox, color: [f32; 3]) {
        let (r, btm) = (b.right(), b.bottom());
        self.fill(b.x, b.y, r, btm, color, |x, y| x >= b.x && x < r && y >= b.y && y < btm);
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f32; 3]) {
        self.fill(cx - rx, cy - ry, cx + rx, cy + ry, color, |x, y| {
            let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
            dx * dx + dy * dy <= 1.0
        });
    }

    fn capsule(&mut self, p0: (f64, f64), p1: (f64, f64), r: f64, color: [f32; 3]) {
        let (x0, x1) = (p0.0.min(p1.0) - r, p0.0.max(p1.0) + r);
        let (y0, y1) = (p0.1.min(p1.1) - r, p0.1.max(p1.1) + r);
        let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.fill(x0, y0, x1, y1, color, |x, y| {
            let t = (((x - p0.0) * dx + (y - p0.1) * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (x - p0.0 - t * dx, y - p0.1 - t * dy);
            ex * ex + ey * ey <= r * r
        });
    }

    fn luminance(&self, b: &BBox) -> f32 {
        let mut sum = 0.0;
        let mut n = 0;
        let bx = b.clip(self.w as f64, self.h as f64).unwrap_or(*b);
        for y in (bx.y as usize)..(bx.bottom() as usize).min(self.h) {
            for x in (bx.x as usize)..(bx.right() as usize).min(self.w) {
                let p = self.px[y * self.w + x];
                sum += 0.3 * p[0] + 0.59 * p[1] + 0.11 * p[2];
                n += 1;
            }
        }
        if n == 0 {
            0.5
        } else {
            sum / n as f32
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        let hw = self.w * self.h;
        let px = self.px;
        Tensor::from_fn([3, self.h, self.w], |i| px[i % hw][i / hw])
    }
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    let base = rng.random_range(lo..hi);
    std::array::from_fn(|_| (base + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0))
}

/// Draws pedestrian height from the log-normal, truncated by rejection.
pub fn sample_height<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> f64 {
    let dist = LogNormal::new(cfg.height_median.ln(), cfg.height_sigma).expect("validated height distribution");
    loop {
        let h = dist.sample(rng);
        if (cfg.min_height..=cfg.max_height).contains(&h) {
            return h;
        }
    }
}

fn draw_pedestrian<R: Rng>(canvas: &mut Canvas, b: &BBox, rng: &mut R) {
    let bright = canvas.luminance(b) < 0.5;
    let (lo, hi) = if bright { (0.65, 0.95) } else { (0.05, 0.35) };
    let shirt = color(rng, lo, hi);
    let pants = color(rng, lo, hi);
    let skin = color(rng, lo, hi);
    let h = b.h;
    let cx = b.x + b.w / 2.0;
    let y = b.y;
    let stride = rng.random_range(-0.06..0.06) * h;
    let swing = rng.random_range(-0.03..0.03) * h;
    for side in [-1.0, 1.0] {
        let foot = cx + side * 0.08 * h + side * stride;
        canvas.capsule((cx + side * 0.055 * h, y + 0.55 * h), (foot, y + 0.95 * h), 0.05 * h, pants);
    }
    canvas.capsule((cx, y + 0.27 * h), (cx, y + 0.5 * h), 0.12 * h, shirt);
    for side in [-1.0, 1.0] {
        let hand = (cx + side * 0.165 * h + side * swing, y + 0.52 * h);
        canvas.capsule((cx + side * 0.13 * h, y + 0.23 * h), hand, 0.035 * h, shirt);
    }
    canvas.ellipse(cx, y + 0.1 * h, 0.075 * h, 0.09 * h, skin);
}

fn draw_clutter<R: Rng>(canvas: &mut Canvas, cfg: &SynthConfig, rng: &mut R) {
    let (w, h) = (canvas.w as f64, canvas.h as f64);
    let count = (cfg.clutter_density * w * h / 10_000.0).round() as usize;
    for _ in 0..count {
        let c = color(rng, 0.0, 1.0);
        let (x, y) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        match rng.random_range(0..4) {
            0 => {
                let s = rng.random_range(6.0..40.0);
                let a = rng.random_range(0.6..2.5);
                canvas.rect(&BBox { x, y, w: s * a, h: s }, c);
            }
            1 => canvas.ellipse(x, y, rng.random_range(4.0..24.0), rng.random_range(3.0..14.0), c),
            2 => {
                let len = rng.random_range(15.0..70.0);
                let ang: f64 = rng.random_range(-0.5..0.5);
                canvas.capsule((x, y), (x + len * ang.cos(), y + len * ang.sin()), rng.random_range(1.5..5.0), c);
            }
            _ => {
                // Poles: thin, tall and of uniform width.
                let t = rng.random_range(2.0..5.0);
                canvas.rect(&BBox { x, y, w: t, h: rng.random_range(30.0..110.0) }, c);
            }
        }
    }
}

/// Renders one frame.
pub fn render_frame<R: Rng>(cfg: &SynthConfig, frame_id: u64, rng: &mut R) -> Frame {
    let (w, h) = (cfg.width, cfg.height);
    let mut canvas = Canvas::new(w, h);
    let top = color(rng, 0.2, 0.8);
    let bottom = color(rng, 0.2, 0.8);
    let horizon = rng.random_range(0.3..0.7) * h as f64;
    canvas.rect(&BBox { x: 0.0, y: 0.0, w: w as f64, h: horizon }, top);
    canvas.rect(&BBox { x: 0.0, y: horizon, w: w as f64, h: h as f64 - horizon }, bottom);
    draw_clutter(&mut canvas, cfg, rng);

    let n = rng.random_range(cfg.min_pedestrians..=cfg.max_pedestrians);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..n {
        let ph = sample_height(cfg, rng);
        let pw = ph * PEDESTRIAN_ASPECT;
        for _ in 0..50 {
            let x = rng.random_range(0.0..=(w as f64 - pw));
            let y = rng.random_range(0.0..=(h as f64 - ph));
            let b = BBox { x, y, w: pw, h: ph };
            if boxes.iter().all(|o| iou(o, &b) < 0.1) {
                boxes.push(b);
                break;
            }
        }
    }
    // Nearer figures (lower feet) are drawn last.
    boxes.sort_by(|a, b| a.bottom().total_cmp(&b.bottom()));
    let (lo, hi) = (cfg.occlusion_range[0], cfg.occlusion_range[1]);
    let mut gts = Vec::new();
    for b in &boxes {
        draw_pedestrian(&mut canvas, b, rng);
        let mut visible = 1.0;
        if hi > 0.0 && rng.random_bool(cfg.occluder_probability) {
            let frac = rng.random_range(lo..=hi);
            let margin = rng.random_range(0.1..0.6) * b.w;
            let occ = BBox { x: b.x - margin, y: b.bottom() - frac * b.h, w: b.w + 2.0 * margin, h: frac * b.h };
            canvas.rect(&occ, color(rng, 0.1, 0.9));
            visible = ((1.0 - frac) * 1000.0).round() / 1000.0;
        }
        gts.push(GtBox { bbox: *b, visible_fraction: visible, ignore: false, frame_id });
    }
    let noise = Normal::new(0.0f32, 0.02).expect("valid noise");
    for p in canvas.px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    // Quantise to what a PNG stores so on-disk and in-memory frames agree.
    for p in canvas.px.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
    Frame { frame_id, image: canvas.into_tensor(), gts }
}

/// Frames of one split; `stream` separates train from test.
pub fn generate_split(cfg: &SynthConfig, count: usize, stream: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..count as u64).map(|id| render_frame(cfg, id, &mut rng)).collect()
}

pub const TRAIN_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;

/// Writes `out/train` and `out/test`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (train, test) = split_dirs(out);
    save_dataset(&train, &generate_split(cfg, cfg.train_frames, TRAIN_STREAM))?;
    save_dataset(&test, &generate_split(cfg, cfg.test_frames, TEST_STREAM))
}
