//! Unconstrained minimizers for the training objective: L-BFGS with a
//! backtracking Armijo line search (default) and Adam for large problems.
//!
//! Objectives may declare a point infeasible (e.g. an ill-conditioned Gram
//! matrix) by returning `None`; the line search treats that as an infinite
//! value and backtracks.

use std::collections::VecDeque;

/// A smooth objective with an auxiliary per-evaluation scalar that is carried
/// into the trace (the training code reports the Gram jitter through it).
pub trait Objective: Sync {
    /// Value only, or `None` if the point is infeasible.
    fn value(&self, x: &[f64]) -> Option<(f64, f64)>;
    /// Value and gradient, or `None` if the point is infeasible.
    fn value_grad(&self, x: &[f64]) -> Option<(f64, Vec<f64>, f64)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Limited-memory quasi-Newton with backtracking line search.
    QuasiNewton,
    /// Adaptive first-order (Adam); useful when gradients are cheap relative
    /// to the factorization or the surface is very rough.
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Relative decrease of the objective below which iteration stops.
    pub tol: f64,
    pub memory: usize,
    pub adam_lr: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            memory: 10,
            adam_lr: 0.05,
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub aux: f64,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("objective is infeasible at the starting point")]
    StartInfeasible,
}

pub fn minimize<O: Objective>(
    objective: &O,
    x0: &[f64],
    kind: OptimizerKind,
    opts: &OptimOptions,
) -> Result<OptimOutcome, OptimError> {
    match kind {
        OptimizerKind::QuasiNewton => lbfgs(objective, x0, opts),
        OptimizerKind::Adam => adam(objective, x0, opts),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lbfgs<O: Objective>(
    objective: &O,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<OptimOutcome, OptimError> {
    let mut x = x0.to_vec();
    let (mut f, mut g, mut aux) = objective
        .value_grad(&x)
        .ok_or(OptimError::StartInfeasible)?;

    let mut trace = vec![IterationRecord {
        iteration: 0,
        value: f,
        aux,
    }];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;

    for iter in 1..=opts.max_iters {
        let grad_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_inf <= 1e-10 {
            converged = true;
            break;
        }

        let mut dir = two_loop_direction(&g, &history);
        let mut descent = dot(&g, &dir);
        if !(descent < 0.0) {
            // stale curvature; fall back to steepest descent
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            descent = dot(&g, &dir);
        }

        let step = match line_search(objective, &x, f, &dir, descent) {
            Some(s) => s,
            None => {
                if history.is_empty() {
                    break; // stuck along -g: return the best point so far
                }
                history.clear();
                let dir: Vec<f64> = g.iter().map(|v| -v).collect();
                let descent = dot(&g, &dir);
                match line_search(objective, &x, f, &dir, descent) {
                    Some(s) => s,
                    None => break,
                }
            }
        };

        let Accepted {
            point: x_new,
            value: f_new,
            grad: g_new,
            aux: aux_new,
        } = step;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let df = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        aux = aux_new;
        trace.push(IterationRecord {
            iteration: iter,
            value: f,
            aux,
        });

        if df.abs() <= opts.tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }

    Ok(OptimOutcome {
        x,
        value: f,
        trace,
        converged,
    })
}

/// Two-loop recursion for the L-BFGS search direction `-H g`.
fn two_loop_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Accepted {
    point: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    aux: f64,
}

/// Weak-Wolfe bracketing line search: backtrack while the sufficient-decrease
/// condition fails, expand while the curvature condition fails. Curvature
/// acceptance keeps `s'y > 0`, which the quasi-Newton update needs; if it
/// cannot be met within the budget, the best sufficient-decrease point is
/// returned (plain backtracking behavior). Infeasible points shrink the
/// bracket like an Armijo failure.
fn line_search<O: Objective>(
    objective: &O,
    x: &[f64],
    f: f64,
    dir: &[f64],
    descent: f64,
) -> Option<Accepted> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    const MAX_TRIES: usize = 60;

    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut t = 1.0f64;
    let mut fallback: Option<(f64, Accepted)> = None;

    for attempt in 0..MAX_TRIES {
        let cand: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + t * d).collect();

        // screen with the cheap value-only evaluation after the first try, so
        // backtracking does not pay for gradients at rejected points
        let prescreened = if attempt == 0 {
            true
        } else {
            match objective.value(&cand) {
                Some((fc, _)) => fc.is_finite() && fc <= f + C1 * t * descent,
                None => false,
            }
        };

        let eval = if prescreened {
            objective.value_grad(&cand)
        } else {
            None
        };
        match eval {
            Some((fc, gc, aux)) if fc.is_finite() && fc <= f + C1 * t * descent => {
                let accepted = Accepted {
                    point: cand,
                    value: fc,
                    grad: gc,
                    aux,
                };
                if dot(&accepted.grad, dir) >= C2 * descent {
                    return Some(accepted);
                }
                // sufficient decrease but curvature too steep: remember and expand
                match &fallback {
                    Some((fb, _)) if *fb <= fc => {}
                    _ => fallback = Some((fc, accepted)),
                }
                lo = t;
                t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
            }
            _ => {
                // Armijo failure or infeasible: shrink toward lo
                hi = t;
                t = 0.5 * (lo + hi);
            }
        }
        if hi.is_finite() && (hi - lo) <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    fallback.map(|(_, a)| a)
}

fn adam<O: Objective>(
    objective: &O,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<OptimOutcome, OptimError> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g, mut aux) = objective
        .value_grad(&x)
        .ok_or(OptimError::StartInfeasible)?;
    let mut trace = vec![IterationRecord {
        iteration: 0,
        value: f,
        aux,
    }];
    let (mut best_x, mut best_f) = (x.clone(), f);

    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut lr = opts.adam_lr;
    let mut converged = false;

    for iter in 1..=opts.max_iters {
        for d in 0..n {
            m[d] = B1 * m[d] + (1.0 - B1) * g[d];
            v[d] = B2 * v[d] + (1.0 - B2) * g[d] * g[d];
        }
        let bc1 = 1.0 - B1.powi(iter as i32);
        let bc2 = 1.0 - B2.powi(iter as i32);

        // retry with smaller learning rates if the step leaves the feasible set
        let mut stepped = None;
        let mut try_lr = lr;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..n)
                .map(|d| x[d] - try_lr * (m[d] / bc1) / ((v[d] / bc2).sqrt() + EPS))
                .collect();
            if let Some(eval) = objective.value_grad(&cand) {
                stepped = Some((cand, eval));
                break;
            }
            try_lr *= 0.5;
        }
        let Some((cand, (fc, gc, auxc))) = stepped else {
            break;
        };
        lr = try_lr;

        let df = f - fc;
        x = cand;
        f = fc;
        g = gc;
        aux = auxc;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
        trace.push(IterationRecord {
            iteration: iter,
            value: f,
            aux,
        });
        if df.abs() <= opts.tol * (1.0 + f.abs()) && iter > 10 {
            converged = true;
            break;
        }
    }

    Ok(OptimOutcome {
        x: best_x,
        value: best_f,
        trace,
        converged,
    })
}
