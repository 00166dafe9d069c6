//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use dacnn::idx::{BaseDataset, LabeledImage, IMAGE_PIXELS, IMAGE_SIDE};
use dacnn::nn::{Gradients, LayerSpec, NetworkModel, Workspace};
use dacnn::rbf::RbfConfig;
use dacnn::train::{loss_and_logit_gradient, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Blur by explicit 2-D convolution with an outer-product kernel, zero border.
pub fn direct_blur(pixels: &[f64], q: f64) -> Vec<f64> {
    let n = IMAGE_SIDE as isize;
    if q == 0.0 {
        return pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    }
    let r = (3.0 * q).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * q * q)).exp())
        .collect();
    let mut kernel2 = Vec::with_capacity(raw.len() * raw.len());
    for a in &raw {
        for b in &raw {
            kernel2.push(a * b);
        }
    }
    let total: f64 = kernel2.iter().sum();
    kernel2.iter_mut().for_each(|k| *k /= total);
    let width = 2 * r + 1;
    let mut out = vec![0.0; pixels.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sx < 0 || sy >= n || sx >= n {
                        continue;
                    }
                    acc += kernel2[((dy + r) * width + dx + r) as usize]
                        * pixels[(sy * n + sx) as usize];
                }
            }
            out[(y * n + x) as usize] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

pub fn random_image(rng: &mut impl Rng) -> Vec<f64> {
    (0..IMAGE_PIXELS).map(|_| rng.gen::<f64>()).collect()
}

fn pinball(points: &[(f64, f64)], tau: f64, b0: f64, b1: f64) -> f64 {
    points
        .iter()
        .map(|&(q, y)| {
            let r = y - b0 - b1 * q;
            if r >= 0.0 {
                tau * r
            } else {
                (tau - 1.0) * r
            }
        })
        .sum()
}

/// Lattice search over lines `c + b1 (q - mean q)`: a 0.01 grid over a box
/// in `(b0, b1)`, then at each finer step (10x per level, down to 1e-9) the
/// +-10 point window is re-centred on the incumbent until nothing improves.
/// Centring on the mean decorrelates the two coordinates, so the search does
/// not stall in the diagonal valley of the objective.
pub fn lattice_quantile_objective(
    points: &[(f64, f64)],
    tau: f64,
    box_b0: (f64, f64),
    box_b1: (f64, f64),
) -> f64 {
    let qbar = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let eval = |c: f64, b1: f64| pinball(points, tau, c - b1 * qbar, b1);
    let mut step = 0.01;
    let mut best = (0.0, 0.0, f64::INFINITY);
    let n0 = ((box_b0.1 - box_b0.0) / step).round() as i64;
    let n1 = ((box_b1.1 - box_b1.0) / step).round() as i64;
    for i in 0..=n0 {
        for j in 0..=n1 {
            let b1 = box_b1.0 + j as f64 * step;
            let c = box_b0.0 + i as f64 * step + b1 * qbar;
            let v = eval(c, b1);
            if v < best.2 {
                best = (c, b1, v);
            }
        }
    }
    loop {
        loop {
            let (c0, c1, before) = best;
            for i in -10..=10 {
                for j in -10..=10 {
                    let (c, b1) = (c0 + i as f64 * step, c1 + j as f64 * step);
                    let v = eval(c, b1);
                    if v < best.2 {
                        best = (c, b1, v);
                    }
                }
            }
            if best.2 >= before {
                break;
            }
        }
        if step < 1e-9 {
            break;
        }
        step /= 10.0;
    }
    best.2
}

/// Exact minimum by enumerating every line through two points.
pub fn pair_enumeration_objective(points: &[(f64, f64)], tau: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let ((qi, yi), (qj, yj)) = (points[i], points[j]);
            if qi == qj {
                continue;
            }
            let b1 = (yj - yi) / (qj - qi);
            best = best.min(pinball(points, tau, yi - b1 * qi, b1));
        }
    }
    best
}

/// Confidence-like scatter: falling median, spread growing with q.
pub fn confidence_scatter(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let q: f64 = rng.gen_range(0.0..4.0);
            let noise: f64 = rng.gen_range(-1.0..1.0) * (0.05 + 0.05 * q);
            (q, (0.95 - 0.12 * q + noise).clamp(0.1, 1.0))
        })
        .collect()
}

/// Small network exercising every layer kind, both conv paths included.
pub fn tiny_model(seed: u64, classes: usize) -> NetworkModel {
    let layers = vec![
        LayerSpec::Conv {
            in_channels: 1,
            out_channels: 2,
            kernel_size: 3,
            stride: 1,
        },
        LayerSpec::ReLU,
        LayerSpec::Subsample { pool_size: 2 },
        LayerSpec::Conv {
            in_channels: 2,
            out_channels: 3,
            kernel_size: 2,
            stride: 2,
        },
        LayerSpec::ReLU,
        LayerSpec::Dense {
            in_dim: 48,
            out_dim: 5,
        },
        LayerSpec::ReLU,
        LayerSpec::Dense {
            in_dim: 5,
            out_dim: classes,
        },
        LayerSpec::ReLU6,
    ];
    let mut model = NetworkModel::new([1, 18, 18], layers, classes)
        .unwrap()
        .init_parameters(seed);
    // Positive biases keep most units away from the rectifier kinks.
    let mut r = rng(seed ^ 0x5eed);
    for (i, s) in model.param_slices_mut().enumerate() {
        if i % 2 == 1 {
            s.iter_mut().for_each(|b| *b = r.gen_range(0.3..1.5));
        }
    }
    model
}

pub fn sample_loss(
    model: &NetworkModel,
    input: &[f64],
    label: usize,
    q: f64,
    mode: TrainMode,
    rbf: &RbfConfig,
) -> f64 {
    let mut ws = Workspace::new(model);
    let logits = ws.forward(model, input).unwrap().to_vec();
    let mut g = vec![0.0; logits.len()];
    loss_and_logit_gradient(&logits, label, q, mode, rbf, &mut g).unwrap()
}

/// Central-difference derivative at 0 of a piecewise-smooth `f` with
/// `f(0) = f0`.
///
/// A Richardson-extrapolated estimate on a wide step (2e-4) has little
/// roundoff, which matters when the gradient nearly vanishes. It is used
/// unless it disagrees with a narrow-step (1e-6) estimate by more than that
/// estimate's roundoff, which signals a rectifier kink inside the wide
/// stencil; the narrow estimate is then used instead.
pub fn estimate_derivative(f: &dyn Fn(f64) -> f64, f0: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let wide = (4.0 * d(1e-4) - d(2e-4)) / 3.0;
    let narrow_h = 1e-6;
    let narrow = d(narrow_h);
    let narrow_noise = 4.0 * f64::EPSILON * f0.abs().max(1.0) / narrow_h;
    if (wide - narrow).abs() <= narrow_noise {
        wide
    } else {
        narrow
    }
}

pub struct GradCheck {
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub params: usize,
}

/// Compares the analytic parameter and input gradients of one sample's loss
/// against central differences; error is `|a - n| / (|a| + |n|)` in the 2-norm.
pub fn gradient_check(seed: u64, mode: TrainMode) -> GradCheck {
    const K: usize = 4;
    let mut r = rng(seed);
    let model = tiny_model(seed, K);
    let rbf = RbfConfig {
        num_classes: K,
        ..RbfConfig::default()
    };
    let input: Vec<f64> = (0..model.input_len()).map(|_| r.gen::<f64>()).collect();
    let label = r.gen_range(0..K);
    let q = r.gen_range(0.0..=4.0);

    let mut ws = Workspace::new(&model);
    let logits = ws.forward(&model, &input).unwrap().to_vec();
    let mut upstream = vec![0.0; K];
    loss_and_logit_gradient(&logits, label, q, mode, &rbf, &mut upstream).unwrap();
    let mut grads = Gradients::zeros_like(&model);
    ws.backward_into(&model, &upstream, &mut grads, true)
        .unwrap();
    let mut analytic: Vec<f64> = grads.slices().flatten().copied().collect();
    analytic.extend_from_slice(&grads.input);

    let loss0 = sample_loss(&model, &input, label, q, mode, &rbf);
    let derivative = |f: &dyn Fn(f64) -> f64| estimate_derivative(f, loss0);
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_params = model.parameter_count();
    for idx in 0..n_params {
        let eval_at = |delta: f64| {
            let mut m = model.clone();
            let mut k = idx;
            for s in m.param_slices_mut() {
                if k < s.len() {
                    s[k] += delta;
                    break;
                }
                k -= s.len();
            }
            sample_loss(&m, &input, label, q, mode, &rbf)
        };
        numeric.push(derivative(&eval_at));
    }
    for idx in 0..input.len() {
        let at = |delta: f64| {
            let mut x = input.clone();
            x[idx] += delta;
            sample_loss(&model, &x, label, q, mode, &rbf)
        };
        numeric.push(derivative(&at));
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic) + norm(&numeric);
    GradCheck {
        relative_error: if denom == 0.0 {
            0.0
        } else {
            norm(&diff) / denom
        },
        analytic_norm: norm(&analytic),
        params: n_params,
    }
}

/// Ten distinguishable 28x28 stroke patterns with per-image jitter.
pub fn synthetic_digits(n: usize, seed: u64) -> BaseDataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| {
            let label = (i % 10) as u8;
            let mut px = [0u8; IMAGE_PIXELS];
            let (dx, dy): (i32, i32) = (r.gen_range(-1..=1), r.gen_range(-1..=1));
            let mut paint = |x0: i32, y0: i32, w: i32, h: i32| {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let (x, y) = (x + dx, y + dy);
                        if (0..28).contains(&x) && (0..28).contains(&y) {
                            px[(y * 28 + x) as usize] = 255;
                        }
                    }
                }
            };
            let c = i32::from(label);
            // Horizontal bar at a class-specific height plus a vertical bar at a
            // class-specific column.
            paint(4, 3 + 2 * c, 20, 3);
            paint(3 + 2 * ((c * 3) % 10), 4, 3, 20);
            LabeledImage {
                pixels: Box::new(px),
                label,
            }
        })
        .collect();
    BaseDataset {
        samples,
        source: "synthetic".into(),
    }
}

/// Worst relative error of the head's backward pass against central
/// differences. The head acts element-wise, so each component is
/// differentiated on its own term to keep cancellation noise out.
pub fn head_gradient_error(z: &[f64], center: f64, cfg: &RbfConfig, upstream: &[f64]) -> f64 {
    use dacnn::rbf::{rbf_backward, rbf_transform};
    let analytic = rbf_backward(z, center, cfg, upstream);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..z.len() {
        let term = |v: f64| {
            let mut zz = z.to_vec();
            zz[k] = v;
            rbf_transform(&zz, center, cfg)[k] * upstream[k]
        };
        let numeric = (term(z[k] + h) - term(z[k] - h)) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs());
        if scale > 1e-9 {
            worst = worst.max((analytic[k] - numeric).abs() / scale);
        }
    }
    worst
}
