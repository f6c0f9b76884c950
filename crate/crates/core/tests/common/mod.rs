//! Direct loop implementations used as reference values by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubelet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `[C_out, T/kt, H/k, W/k]` by summing every kernel tap explicitly.
pub fn conv3d(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let [ci, t, h, w] = input.shape().try_into().unwrap();
    let [co, _, kt, kh, kw] = kernel.shape().try_into().unwrap();
    let (gt, gh, gw) = (t / kt, h / kh, w / kw);
    let mut out = Vec::with_capacity(co * gt * gh * gw);
    for o in 0..co {
        for a in 0..gt {
            for b in 0..gh {
                for c in 0..gw {
                    let mut acc = bias.data()[o];
                    for i in 0..ci {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let x = input[&[i, a * kt + dt, b * kh + dy, c * kw + dx][..]];
                                    acc += kernel[&[o, i, dt, dy, dx][..]] * x;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn sample_at(plane: &[f64], w: usize, y: f64, x: f64, h: usize) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let (y0, x0) = (y.floor(), x.floor());
    let (y1, x1) = ((y0 + 1.0).min((h - 1) as f64), (x0 + 1.0).min((w - 1) as f64));
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| plane[r as usize * w + c as usize];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Per-output-pixel bilinear sampling over the last two axes.
pub fn bilinear(x: &Tensor<f64>, scale: f64) -> Vec<f64> {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (oh, ow) = ((h as f64 * scale).ceil() as usize, (w as f64 * scale).ceil() as usize);
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let sy = (i as f64 + 0.5) / scale - 0.5;
                let sx = (j as f64 + 0.5) / scale - 0.5;
                out.push(sample_at(plane, w, sy, sx, h));
            }
        }
    }
    out
}

/// Mean SSIM with a full 2-D Gaussian window evaluated at every valid position.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let r = a.rank();
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    let n = 11usize;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut plane_means = Vec::new();
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        let mut sum = 0.0;
        let mut count = 0;
        for r0 in 0..=h - n {
            for c0 in 0..=w - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = (r0 + i) * w + c0 + j;
                        mx += win[i * n + j] * pa[k];
                        my += win[i * n + j] * pb[k];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = (r0 + i) * w + c0 + j;
                        let g = win[i * n + j];
                        vx += g * (pa[k] - mx) * (pa[k] - mx);
                        vy += g * (pb[k] - my) * (pb[k] - my);
                        cov += g * (pa[k] - mx) * (pb[k] - my);
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        plane_means.push(sum / count as f64);
    }
    plane_means.iter().sum::<f64>() / plane_means.len() as f64
}

/// Scalar Adam over a flat parameter vector; returns the parameters after every step.
pub fn adam(mut w: Vec<f64>, grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<Vec<f64>> {
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut history = Vec::new();
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        history.push(w.clone());
    }
    history
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst deviation of `conv3d` from the loop version over the given seeds.
pub fn conv3d_suite(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let (ci, co) = (r.random_range(1..4), r.random_range(1..5));
        let (kt, k) = (r.random_range(1..4), r.random_range(1..5));
        let (gt, gh, gw) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let x = uniform(&mut r, &[ci, gt * kt, gh * k, gw * k], -1.0, 1.0);
        let kernel = uniform(&mut r, &[co, ci, kt, k, k], -1.0, 1.0);
        let bias = uniform(&mut r, &[co], -1.0, 1.0);
        let got = tubelet_core::tensor::ops::conv3d(&x, &kernel, &bias, (kt, k, k)).unwrap();
        assert_eq!(got.shape(), [co, gt, gh, gw]);
        worst = worst.max(max_abs_diff(got.data(), &conv3d(&x, &kernel, &bias)));
    }
    worst
}

pub fn bilinear_suite(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let (planes, h, w) = (r.random_range(1..4), r.random_range(1..14), r.random_range(1..14));
        let scale = [1.0, 0.5, 0.25][r.random_range(0..3)];
        let x = uniform(&mut r, &[planes, h, w], -1.0, 1.0);
        let got = tubelet_core::tensor::ops::bilinear_resize(&x, scale).unwrap();
        worst = worst.max(max_abs_diff(got.data(), &bilinear(&x, scale)));
    }
    worst
}

pub fn ssim_suite(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let (planes, h, w) = (r.random_range(1..3), r.random_range(11..20), r.random_range(11..20));
        let a = uniform(&mut r, &[planes, h, w], 0.0, 1.0);
        // correlated partner so that SSIM is far from zero
        let b = Tensor::from_fn(vec![planes, h, w], |i| (0.7 * a.data()[i] + r.random_range(0.0..0.3)).min(1.0));
        let got = tubelet_core::objectives::ssim(&a, &b).unwrap();
        worst = worst.max((got - ssim(&a, &b)).abs());
    }
    worst
}

pub fn adam_suite(seeds: std::ops::Range<u64>) -> f64 {
    use tubelet_core::trainer::{adam_step, AdamState, TrainConfig};
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let (n, steps) = (r.random_range(1..20), r.random_range(1..12));
        let lr = r.random_range(1e-4..1e-1);
        let cfg = TrainConfig::default();
        let start: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps).map(|_| (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let expected = adam(start.clone(), &grads, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
        let mut p = Tensor::new(vec![n], start).unwrap();
        let mut state = AdamState::<f64>::new([p.shape()]);
        for (g, want) in grads.iter().zip(&expected) {
            let g = Tensor::new(vec![n], g.clone()).unwrap();
            adam_step([("w", &mut p)], &[g], &mut state, lr, &cfg).unwrap();
            worst = worst.max(max_abs_diff(p.data(), want));
        }
    }
    worst
}
