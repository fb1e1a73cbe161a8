//! Limited-memory BFGS with Armijo backtracking, used by the action
//! minimizers. Evaluation errors (e.g. blowup on an overlong step) are
//! treated as an infinite objective during the line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    /// Stop once the gradient norm (in whitened control coordinates, i.e.
    /// the discrete H_θ dual norm) falls below `grad_tol·max(1, |f|)`.
    pub grad_tol: f64,
    /// Curvature pairs kept; 0 gives plain gradient descent.
    pub memory: usize,
    /// Compare the adjoint gradient with central differences along a few
    /// random directions at the starting iterate.
    pub gradient_check: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iter: 5000,
            grad_tol: 1e-6,
            memory: 10,
            gradient_check: false,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn lbfgs<F>(mut eval: F, x0: Vec<f64>, s: &OptimizerSettings) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = eval(&x)?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut flat = 0usize;
    for it in 0..s.max_iter {
        let gn = norm(&g);
        if gn < s.grad_tol * f.abs().max(1.0) {
            return Ok(Outcome {
                x,
                grad_norm: gn,
                iterations: it,
                converged: true,
                message: "gradient tolerance reached".into(),
            });
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (sv, yv, rho) in hist.iter().rev() {
            let a = rho * dot(sv, &d);
            d.iter_mut().zip(yv).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((sv, yv, _)) = hist.back() {
            let gamma = dot(sv, yv) / dot(yv, yv);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((sv, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &d);
            d.iter_mut().zip(sv).for_each(|(di, si)| *di += (a - b) * si);
        }
        d.iter_mut().for_each(|di| *di = -*di);
        let mut slope = dot(&d, &g);
        if slope >= 0.0 || !slope.is_finite() {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }

        let mut step = if hist.is_empty() { (1.0 / gn).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Ok((ft, gt)) = eval(&xt) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn_)) = accepted else {
            if hist.is_empty() {
                return Ok(Outcome {
                    x,
                    grad_norm: gn,
                    iterations: it,
                    converged: gn < 10.0 * s.grad_tol * f.abs().max(1.0),
                    message: "line search failed along steepest descent".into(),
                });
            }
            hist.clear();
            continue;
        };

        let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn_.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&sv, &yv);
        if s.memory > 0 && sy > 1e-12 * norm(&sv) * norm(&yv) {
            if hist.len() == s.memory {
                hist.pop_front();
            }
            hist.push_back((sv, yv, 1.0 / sy));
        }
        flat = if (f - fn_).abs() <= 1e-15 * f.abs().max(1e-300) {
            flat + 1
        } else {
            0
        };
        x = xn;
        f = fn_;
        g = gn_;
        if flat >= 5 {
            let gn = norm(&g);
            return Ok(Outcome {
                x,
                grad_norm: gn,
                iterations: it + 1,
                converged: gn < s.grad_tol * f.abs().max(1.0),
                message: "objective stagnated at machine precision".into(),
            });
        }
    }
    let gn = norm(&g);
    Ok(Outcome {
        x,
        grad_norm: gn,
        iterations: s.max_iter,
        converged: gn < s.grad_tol * f.abs().max(1.0),
        message: "iteration limit reached".into(),
    })
}
