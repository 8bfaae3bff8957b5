//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Posterior mean and variance from an explicit inverse of the kernel matrix.
pub fn dense_gp_posterior(
    inputs: &[Vec<f64>],
    targets: &[f64],
    x: &[f64],
    length_scales: &[f64],
    signal_variance: f64,
    noise_variance: f64,
    prior_mean: f64,
    jitter: f64,
) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| {
        let mut q = 0.0;
        for d in 0..a.len() {
            let r = (a[d] - b[d]) / length_scales[d];
            q += r * r;
        }
        signal_variance * (-0.5 * q).exp()
    };
    let n = inputs.len();
    if n == 0 {
        return (prior_mean, signal_variance);
    }
    let mut kmat = DMatrix::from_fn(n, n, |i, j| k(&inputs[i], &inputs[j]));
    for i in 0..n {
        kmat[(i, i)] += noise_variance + jitter;
    }
    let inv = kmat.try_inverse().expect("kernel matrix invertible");
    let kstar = DVector::from_fn(n, |i, _| k(x, &inputs[i]));
    let centered = DVector::from_fn(n, |i, _| targets[i] - prior_mean);
    let mean = prior_mean + (kstar.transpose() * &inv * centered)[0];
    let var = signal_variance - (kstar.transpose() * &inv * &kstar)[0];
    (mean, var)
}

/// `min_z z + mean((ℓ - z)⁺)/(1 - α)` over the sample values as candidates.
pub fn cvar_brute_force(losses: &[f64], alpha: f64) -> f64 {
    let n = losses.len() as f64;
    losses
        .iter()
        .map(|&z| z + losses.iter().map(|&l| (l - z).max(0.0)).sum::<f64>() / (n * (1.0 - alpha)))
        .fold(f64::INFINITY, f64::min)
}

/// Half-planes `a·p <= b` of a convex polygon.
pub struct Polygon {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<f64>,
}

impl Polygon {
    pub fn strictly_inside(&self, p: [f64; 2]) -> bool {
        self.a.iter().zip(&self.b).all(|(a, &b)| a[0] * p[0] + a[1] * p[1] < b)
    }

    /// Distance to the nearest non-interior grid point, by brute force over a
    /// grid of spacing `h` covering `[lo, hi]²`.
    pub fn grid_escape_distance(&self, p: [f64; 2], lo: [f64; 2], hi: [f64; 2], h: f64) -> f64 {
        let nx = ((hi[0] - lo[0]) / h).ceil() as usize + 1;
        let ny = ((hi[1] - lo[1]) / h).ceil() as usize + 1;
        let mut best = f64::INFINITY;
        for i in 0..nx {
            let gx = lo[0] + i as f64 * h;
            for j in 0..ny {
                let gy = lo[1] + j as f64 * h;
                if !self.strictly_inside([gx, gy]) {
                    best = best.min((gx - p[0]).hypot(gy - p[1]));
                }
            }
        }
        best
    }
}

/// Random convex polygon: a rectangle at a random pose, optionally with one
/// corner cut off.
pub fn random_polygon<R: Rng>(rng: &mut R) -> (Polygon, [f64; 2], f64) {
    let cx = rng.random_range(-5.0..5.0);
    let cy = rng.random_range(-5.0..5.0);
    let hl = rng.random_range(0.3..2.0);
    let hw = rng.random_range(0.2..1.5);
    let th: f64 = rng.random_range(-3.0..3.0);
    let (s, c) = th.sin_cos();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (n, e) in [([c, s], hl), ([-c, -s], hl), ([-s, c], hw), ([s, -c], hw)] {
        a.push(n);
        b.push(n[0] * cx + n[1] * cy + e);
    }
    if rng.random_bool(0.5) {
        let phi = th + std::f64::consts::FRAC_PI_4;
        let n = [phi.cos(), phi.sin()];
        let reach = 0.7 * (hl * hl + hw * hw).sqrt();
        a.push(n);
        b.push(n[0] * cx + n[1] * cy + reach);
    }
    let radius = (hl * hl + hw * hw).sqrt();
    (Polygon { a, b }, [cx, cy], radius)
}

/// Explicit bicycle step with bounded controls.
pub fn bicycle_formula(s: [f64; 4], v: f64, steer: f64, lf: f64, lr: f64, vmax: f64, smax: f64, ts: f64) -> [f64; 4] {
    let v = v.max(0.0).min(vmax);
    let steer = steer.max(-smax).min(smax);
    let [x, y, th, b] = s;
    [
        x + ts * v * (th + b).cos(),
        y + ts * v * (th + b).sin(),
        th + ts * v / lr * b.sin(),
        b + ts * (lr / (lr + lf) * steer.tan()).atan(),
    ]
}

/// Strict interior test by transforming into the rectangle's body frame.
pub fn inside_rectangle(p: [f64; 2], center: [f64; 2], theta: f64, hl: f64, hw: f64) -> bool {
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    let lx = dx * theta.cos() + dy * theta.sin();
    let ly = -dx * theta.sin() + dy * theta.cos();
    lx.abs() < hl && ly.abs() < hw
}

/// Robust CVaR bound for two samples with two faces each by exhaustive search
/// over the face weights. `f[i][j]` are the face values at the fixed position.
pub fn dr_bound_grid_2x2(f: [[f64; 2]; 2], a: f64, alpha: f64, theta: f64) -> f64 {
    let eval = |t1: f64, t2: f64| {
        let rho = [[t1, 1.0 - t1], [t2, 1.0 - t2]];
        let norm = |r: [f64; 2]| (r[0] * r[0] + r[1] * r[1]).sqrt();
        let lambda = a * norm(rho[0]).max(norm(rho[1]));
        let v = [
            rho[0][0] * f[0][0] + rho[0][1] * f[0][1],
            rho[1][0] * f[1][0] + rho[1][1] * f[1][1],
        ];
        // Piecewise linear and convex in z: the optimum sits on a kink.
        let mut best = f64::INFINITY;
        for z in [0.0, v[0], v[1], -v[0].abs(), -v[1].abs()] {
            let tail: f64 = v.iter().map(|&vi| (vi - z).max(-z).max(0.0)).sum::<f64>() / 2.0;
            best = best.min(z + (lambda * theta + tail) / (1.0 - alpha));
        }
        best
    };
    let search = |lo1: f64, hi1: f64, lo2: f64, hi2: f64, steps: usize| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            let t1 = lo1 + (hi1 - lo1) * i as f64 / steps as f64;
            for j in 0..=steps {
                let t2 = lo2 + (hi2 - lo2) * j as f64 / steps as f64;
                let v = eval(t1, t2);
                if v < best.0 {
                    best = (v, t1, t2);
                }
            }
        }
        best
    };
    let coarse = search(0.0, 1.0, 0.0, 1.0, 1000);
    let w = 2e-3;
    let fine = search(
        (coarse.1 - w).max(0.0),
        (coarse.1 + w).min(1.0),
        (coarse.2 - w).max(0.0),
        (coarse.2 + w).min(1.0),
        400,
    );
    coarse.0.min(fine.0)
}
