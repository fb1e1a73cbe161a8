//! Independent oracles shared by the integration tests and the acceptance
//! target.
#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::{PI, SQRT_2};

use nsldp::{FlowConfig, SpectralField};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;

/// Velocity and velocity gradient at `x`, summed mode by mode.
pub fn eval_field(u: &SpectralField, x: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let b = u.basis();
    let mut val = [0.0; 2];
    let mut grad = [[0.0; 2]; 2];
    for (i, k) in b.modes().iter().enumerate() {
        let kk = [f64::from(k[0]), f64::from(k[1])];
        let nrm = (kk[0] * kk[0] + kk[1] * kk[1]).sqrt();
        let d = [-kk[1] / nrm, kk[0] / nrm];
        let phase = Complex64::from_polar(1.0, kk[0] * x[0] + kk[1] * x[1]);
        let a = u.amps()[i];
        let re = SQRT_2 * (a * phase).re;
        let dre = SQRT_2 * (Complex64::i() * a * phase).re;
        for c in 0..2 {
            val[c] += re * d[c];
            for j in 0..2 {
                grad[c][j] += dre * kk[j] * d[c];
            }
        }
    }
    (val, grad)
}

/// Collocate (u·∇)v on an n×n grid and project each basis mode by
/// trapezoidal quadrature (exact for trigonometric polynomials of degree < n).
pub fn collocation_bilinear(u: &SpectralField, v: &SpectralField, n: usize) -> Vec<Complex64> {
    let b = u.basis();
    let h = 2.0 * PI / n as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); b.len()];
    for ix in 0..n {
        for iy in 0..n {
            let x = [ix as f64 * h, iy as f64 * h];
            let (uv, _) = eval_field(u, x);
            let (_, gv) = eval_field(v, x);
            let w = [uv[0] * gv[0][0] + uv[1] * gv[0][1], uv[0] * gv[1][0] + uv[1] * gv[1][1]];
            for (i, k) in b.modes().iter().enumerate() {
                let kk = [f64::from(k[0]), f64::from(k[1])];
                let nrm = (kk[0] * kk[0] + kk[1] * kk[1]).sqrt();
                let d = [-kk[1] / nrm, kk[0] / nrm];
                let proj = d[0] * w[0] + d[1] * w[1];
                out[i] += Complex64::from_polar(proj, -(kk[0] * x[0] + kk[1] * x[1]));
            }
        }
    }
    let scale = SQRT_2 / (n * n) as f64;
    out.iter().map(|c| c * scale).collect()
}

/// `P(X + Y > x)` for independent `X ~ Γ(2, t1)`, `Y ~ Γ(2, t2)` by
/// Simpson's rule on the density of `Y`.
pub fn gamma2_sum_tail(x: f64, t1: f64, t2: f64) -> f64 {
    let tail = |y: f64, t: f64| (-y / t).exp() * (1.0 + y / t);
    let pdf = |y: f64, t: f64| y * (-y / t).exp() / (t * t);
    let n = 20_000;
    let h = x / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let y = i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * pdf(y, t2) * tail(x - y, t1);
    }
    s * h / 3.0 + tail(x, t2)
}

/// Exact `μ^ε(‖u‖ > η)` for the cutoff-1 Ornstein–Uhlenbeck system: two
/// modes with `b²/λ = 1` and two with `b²/λ = 1/16`, each `|a|²`
/// exponential with mean `ε b²/λ`.
pub fn ou_ball_tail(eta: f64, eps: f64) -> f64 {
    gamma2_sum_tail(eta * eta, eps, eps / 16.0)
}

/// `Σ λ_k |u_k|² / b_k²`, the Ornstein–Uhlenbeck quasipotential.
pub fn ou_quasipotential(u: &SpectralField, cfg: &FlowConfig) -> f64 {
    let b = u.basis();
    let mut v = 0.0;
    for k in 0..b.len() {
        let w = cfg.noise().weights()[k];
        v += b.eigenvalues()[k] * u.amps()[k].norm_sqr() / (w * w);
    }
    v
}

/// Piecewise-constant random controls with total energy `∫|φ|² = energy`.
pub fn random_controls(
    cfg: &FlowConfig,
    n_steps: usize,
    block: usize,
    energy: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<SpectralField> {
    let mut out = Vec::with_capacity(n_steps);
    let mut cur = SpectralField::zeros(cfg.basis());
    for n in 0..n_steps {
        if n % block == 0 {
            cur = SpectralField::random(cfg.basis(), 1.0, rng);
        }
        out.push(cur.clone());
    }
    let e: f64 = out.iter().map(|p| p.norm().powi(2) * cfg.dt()).sum();
    let s = (energy / e).sqrt();
    out.iter().map(|p| p.scaled(s)).collect()
}

/// `inf ½∫|φ|²` over controls keeping `u` within the open tube of radius
/// `r` around the path driven by the constant control `φ₀` from the same
/// start, for `u̇ = −λu + φ` along one real direction (unit noise weight).
/// Dynamic programming on the deviation `y = u − ref`, which obeys
/// `ẏ = −λy + (φ − φ₀)`, over `steps` time layers and `grid` points.
pub fn tube_action_dp(phi0: f64, lambda: f64, r: f64, horizon: f64, steps: usize, grid: usize) -> f64 {
    let dt = horizon / steps as f64;
    let dy = 2.0 * r / (grid - 1) as f64;
    let y = |i: usize| -r + i as f64 * dy;
    // jumps beyond this many cells cost more than the whole free path
    let w = ((4.0 * phi0.abs().max(1.0) * dt / dy).ceil() as usize).max(1);
    let mut v = vec![f64::INFINITY; grid];
    v[(grid - 1) / 2] = 0.0;
    for _ in 0..steps {
        let mut next = vec![f64::INFINITY; grid];
        for (j, nj) in next.iter_mut().enumerate().take(grid - 1).skip(1) {
            let lo = j.saturating_sub(w).max(1);
            let hi = (j + w).min(grid - 2);
            for i in lo..=hi {
                if v[i].is_finite() {
                    let phi = phi0 + (y(j) - y(i)) / dt + lambda * y(i);
                    let c = v[i] + 0.5 * dt * phi * phi;
                    if c < *nj {
                        *nj = c;
                    }
                }
            }
        }
        v = next;
    }
    v.into_iter().fold(f64::INFINITY, f64::min)
}
