//! Finite-difference checks of every differentiable operator and of both
//! complete losses, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssacnn::config::{AttentionPool, NetworkConfig};
use ssacnn::geometry::BBox;
use ssacnn::rcnn::{rcnn_loss, Rcnn};
use ssacnn::rpn::{rpn_loss, Rpn};
use ssacnn::tensor::gradcheck::{grad_check, grad_check_params};
use ssacnn::tensor::{Graph, Tensor, Var, IGNORE_LABEL};
use ssacnn::Result;

pub const TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero and pairwise distinct, so ReLU and max-pool
/// kinks stay out of the finite-difference stencil.
fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 + 0.9 * i as f64 / n as f64).collect();
    for (i, v) in vals.iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = -*v;
        }
    }
    // Fisher-Yates keeps the values distinct.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Scalar probe `r · vec(v)` with fixed random `r`.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let n = g.value(v).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = g.reshape(v, &[1, n])?;
    let w = g.input(Tensor::from_fn([1, n], |_| rng.random_range(-1.0..1.0)));
    let b = g.input(Tensor::zeros([1]));
    g.linear(flat, w, b)
}

/// `(name, max relative error)` for every check.
pub fn run() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    let mut check = |name: &str, r: Result<f64>| out.push((name.to_string(), r.unwrap_or_else(|e| panic!("{name}: {e}"))));

    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let x = random(&[2, 2, 5, 6], &mut rng);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        check(
            &format!("conv2d input s{stride} p{pad}"),
            grad_check(
                |g, x| {
                    let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
                    let y = g.conv2d(x, wv, bv, stride, pad)?;
                    probe(g, y, 1)
                },
                &x,
                EPS,
            ),
        );
        check(
            &format!("conv2d weight s{stride} p{pad}"),
            grad_check(
                |g, wv| {
                    let (xv, bv) = (g.input(x.clone()), g.input(b.clone()));
                    let y = g.conv2d(xv, wv, bv, stride, pad)?;
                    probe(g, y, 2)
                },
                &w,
                EPS,
            ),
        );
    }
    check(
        "conv2d bias",
        grad_check(
            |g, bv| {
                let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
                let y = g.conv2d(xv, wv, bv, 1, 1)?;
                probe(g, y, 3)
            },
            &b,
            EPS,
        ),
    );

    let k = kink_free(&[2, 3, 5, 5], &mut rng);
    check("relu", grad_check(|g, x| {
        let y = g.relu(x)?;
        probe(g, y, 4)
    }, &k, EPS));
    check("maxpool 2/2 ceil", grad_check(|g, x| {
        let y = g.maxpool2d(x, 2, 2)?;
        probe(g, y, 5)
    }, &k, EPS));

    let a = random(&[2, 2, 3, 4], &mut rng);
    check("concat + slice", grad_check(|g, x| {
        let other = g.input(Tensor::full([2, 1, 3, 4], 0.5));
        let c = g.concat_channels(&[other, x, x])?;
        let s = g.channel_slice(c, 1, 3)?;
        probe(g, s, 6)
    }, &a, EPS));
    check("reshape", grad_check(|g, x| {
        let y = g.reshape(x, &[4, 12])?;
        probe(g, y, 7)
    }, &a, EPS));
    check("foreground_prob", grad_check(|g, x| {
        let y = g.foreground_prob(x)?;
        probe(g, y, 8)
    }, &a, EPS));
    check("bilinear up", grad_check(|g, x| {
        let y = g.bilinear_resize(x, 7, 9)?;
        probe(g, y, 9)
    }, &a, EPS));
    check("bilinear down", grad_check(|g, x| {
        let y = g.bilinear_resize(x, 2, 2)?;
        probe(g, y, 10)
    }, &a, EPS));
    check("global_avg_pool", grad_check(|g, x| {
        let y = g.global_avg_pool(x)?;
        probe(g, y, 11)
    }, &a, EPS));

    let lw = random(&[3, 5], &mut rng);
    let lx = random(&[4, 5], &mut rng);
    check("linear input", grad_check(|g, x| {
        let (wv, bv) = (g.input(lw.clone()), g.input(Tensor::full([3], 0.1)));
        let y = g.linear(x, wv, bv)?;
        probe(g, y, 12)
    }, &lx, EPS));
    check("linear weight", grad_check(|g, wv| {
        let (xv, bv) = (g.input(lx.clone()), g.input(Tensor::full([3], 0.1)));
        let y = g.linear(xv, wv, bv)?;
        probe(g, y, 13)
    }, &lw, EPS));

    let logits = random(&[2, 2, 3, 3], &mut rng);
    let labels: Vec<u8> = (0..18).map(|i| if i % 5 == 0 { IGNORE_LABEL } else { (i % 2) as u8 }).collect();
    check("softmax_cross_entropy", grad_check(|g, x| g.softmax_cross_entropy(x, &labels), &logits, EPS));

    // Residuals kept away from the ±1 switch point.
    let target: Vec<f64> = (0..24).map(|i| if i % 2 == 0 { 3.0 } else { 0.0 }).collect();
    let mask: Vec<f64> = (0..24).map(|i| if i % 7 == 3 { 0.0 } else { 1.0 }).collect();
    let pred = Tensor::from_fn([2, 4, 3], |i| if i % 2 == 0 { 0.3 * (i % 5) as f64 } else { 0.1 * (i % 7) as f64 - 0.3 });
    check("smooth_l1", grad_check(|g, x| g.smooth_l1(x, &target, &mask), &pred, EPS));

    check("sum + scale + weighted_sum", grad_check(|g, x| {
        let s = g.sum(x)?;
        let t = g.scale(s, 0.7)?;
        let u = probe(g, x, 14)?;
        g.weighted_sum(&[(t, 2.0), (u, 0.5)])
    }, &a, EPS));

    check("rpn loss", rpn_check());
    check("rcnn loss (max attention pool)", rcnn_check(AttentionPool::Max));
    check("rcnn loss (average attention pool)", rcnn_check(AttentionPool::Average));
    out
}

fn tiny_config() -> NetworkConfig {
    let mut c = NetworkConfig { width_factor: 16, crop_size: 32, ..NetworkConfig::default() };
    // Larger init so every term carries a visible gradient.
    c.init_std = 0.1;
    c.rpn.conv5_1_sa = true;
    c
}

fn rpn_check() -> Result<f64> {
    let cfg = tiny_config();
    let (rpn, mut store) = Rpn::build::<f64>(&cfg, 3)?;
    let (w, h) = (48, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = Tensor::from_fn([1, 3, h, w], |_| rng.random_range(-1.0..1.0));
    let gts = [BBox::new(10.0, 2.0, 12.0, 28.0)?, BBox::new(30.0, 5.0, 10.0, 24.0)?];
    let ignores = [BBox::new(0.0, 0.0, 6.0, 10.0)?];
    let targets = rpn.targets::<f64, _>(&gts, &ignores, w, h, &mut rng)?;
    let report = grad_check_params(
        &mut store,
        |g, store| {
            let x = g.input(image.clone());
            let out = rpn.forward(g, store, x, true)?;
            Ok(rpn_loss(g, &out, &targets, &cfg)?.total)
        },
        EPS,
        3,
    )?;
    Ok(report.max_rel_error)
}

fn rcnn_check(pool: AttentionPool) -> Result<f64> {
    let mut cfg = tiny_config();
    cfg.rcnn.attention_pool = pool;
    cfg.rcnn.conv5_2_sa = true;
    let (rcnn, mut store) = Rcnn::build::<f64>(&cfg, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let crops = Tensor::from_fn([3, 3, 32, 32], |_| rng.random_range(-1.0..1.0));
    let gts = [BBox::new(8.0, 4.0, 10.0, 24.0)?];
    let proposals = [BBox::new(7.0, 3.0, 12.0, 26.0)?, BBox::new(20.0, 0.0, 12.0, 30.0)?, BBox::new(0.0, 0.0, 16.0, 16.0)?];
    let req: Vec<(BBox, &[BBox], &[BBox])> = proposals.iter().map(|p| (*p, &gts[..], &[][..])).collect();
    let masks = rcnn.mask_targets(&req);
    let labels = [1u8, 0, 0];
    let report = grad_check_params(
        &mut store,
        |g, store| {
            let x = g.input(crops.clone());
            let out = rcnn.forward(g, store, x)?;
            Ok(rcnn_loss(g, &out, &labels, &masks, &cfg)?.total)
        },
        EPS,
        3,
    )?;
    Ok(report.max_rel_error)
}
