//! Preconditioned L-BFGS with a strong Wolfe line search.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once the gradient's infinity norm is below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 20,
            max_iter: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective value after every iteration, starting point first.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x, g);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimises `f`, which returns the objective and writes its gradient.
///
/// `precond(g, out)` applies the initial inverse-Hessian approximation to
/// `g`; pass an identity copy when none is available. An infinite objective
/// marks a point outside the domain and makes the line search back off.
pub fn minimize<F, P>(f: F, x0: &[f64], precond: P, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    let mut obj = Counted { f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    let mut trace = vec![fx];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = inf_norm(&g) < opts.grad_tol;

    while !converged && iterations < opts.max_iter && fx.is_finite() {
        two_loop(&g, &memory, &precond, &mut d);
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.clear();
            precond(&g, &mut d);
            d.iter_mut().for_each(|v| *v = -*v);
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                break;
            }
        }
        let step = line_search(&mut obj, &x, fx, &d, slope, opts, &mut x_new, &mut g_new);
        let Some((alpha, f_new)) = step else {
            if memory.is_empty() {
                break;
            }
            memory.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        trace.push(fx);
        converged = inf_norm(&g) < opts.grad_tol;
    }

    LbfgsResult {
        grad_inf_norm: inf_norm(&g),
        x,
        f: fx,
        iterations,
        evaluations: obj.evaluations,
        converged,
        trace,
    }
}

fn two_loop<P: Fn(&[f64], &mut [f64])>(
    g: &[f64],
    memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    precond: &P,
    out: &mut [f64],
) {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    precond(&q, out);
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, out);
        for (ri, si) in out.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Counted<F>,
    x: &[f64],
    f0: f64,
    d: &[f64],
    slope0: f64,
    opts: &LbfgsOptions,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<(f64, f64)> {
    let mut eval = |alpha: f64, xo: &mut [f64], go: &mut [f64]| -> (f64, f64) {
        for ((xi, x0), di) in xo.iter_mut().zip(x).zip(d) {
            *xi = x0 + alpha * di;
        }
        let f = obj.eval(xo, go);
        (f, if f.is_finite() { dot(go, d) } else { f64::NAN })
    };

    let (c1, c2) = (opts.c1, opts.c2);
    let mut lo = (0.0, f0, slope0);
    let mut alpha = 1.0;
    let mut prev = lo;
    let mut hi: Option<(f64, f64, f64)> = None;

    for i in 0..opts.max_line_search {
        let (f, s) = eval(alpha, x_out, g_out);
        if !f.is_finite() || f > f0 + c1 * alpha * slope0 || (i > 0 && f >= prev.1) {
            hi = Some((alpha, f, s));
            lo = prev;
            break;
        }
        if s.abs() <= -c2 * slope0 {
            return Some((alpha, f));
        }
        if s >= 0.0 {
            hi = Some(prev);
            lo = (alpha, f, s);
            break;
        }
        prev = (alpha, f, s);
        alpha *= 2.0;
    }
    let Some(mut hi) = hi else {
        let (f, _) = eval(prev.0, x_out, g_out);
        return (prev.0 > 0.0).then_some((prev.0, f));
    };

    // zoom
    for _ in 0..opts.max_line_search {
        let a = if hi.1.is_finite() && lo.1.is_finite() && hi.2.is_finite() {
            cubic_min(lo, hi)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        let (amin, amax) = if lo.0 < hi.0 { (lo.0, hi.0) } else { (hi.0, lo.0) };
        let width = amax - amin;
        let a = if a.is_finite() && a > amin + 0.1 * width && a < amax - 0.1 * width {
            a
        } else {
            0.5 * (lo.0 + hi.0)
        };
        let (f, s) = eval(a, x_out, g_out);
        if !f.is_finite() || f > f0 + c1 * a * slope0 || f >= lo.1 {
            hi = (a, f, s);
        } else {
            if s.abs() <= -c2 * slope0 {
                return Some((a, f));
            }
            if s * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, f, s);
        }
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
    }
    // accept the best sufficient-decrease point found
    if lo.0 > 0.0 && lo.1 < f0 {
        let (f, _) = eval(lo.0, x_out, g_out);
        return Some((lo.0, f));
    }
    None
}

/// Minimiser of the cubic interpolating values and slopes at `a` and `b`.
fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (x0, f0, g0) = a;
    let (x1, f1, g1) = b;
    let d1 = g0 + g1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1 * d1 - g0 * g1;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    x1 - (x1 - x0) * (g1 + d2 - d1) / (g1 - g0 + 2.0 * d2)
}

/// `out = g`.
pub fn identity(g: &[f64], out: &mut [f64]) {
    out.copy_from_slice(g);
}
