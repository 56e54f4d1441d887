//! Generic smooth constrained minimization: an augmented Lagrangian outer
//! loop (Powell-Hestenes-Rockafellar multiplier updates) around an L-BFGS
//! inner minimizer with Armijo backtracking.
//!
//! The caller supplies analytic gradients for the objective and Jacobians for
//! all constraints. Tolerances are per-constraint vectors so mixed units
//! (mm, mm², rad) stay meaningful; the scaled violation of constraint j is
//! its raw violation divided by its tolerance entry, and feasibility means
//! every scaled violation is at most one.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

/// Smooth problem: minimize `f(x)` subject to `c(x) = 0` and `g(x) ≥ 0`.
pub trait ConstrainedProblem {
    fn dim(&self) -> usize;
    /// Objective value and gradient.
    fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>);
    /// Equality residuals (zero at a solution) and their Jacobian, one row
    /// per residual.
    fn equalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    /// Inequality values (non-negative when satisfied) and their Jacobian,
    /// one row per constraint.
    fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone)]
pub struct AugLagOptions {
    /// Per-equality absolute tolerance on |c|.
    pub eq_tol: DVector<f64>,
    /// Per-inequality absolute tolerance on max(0, −g).
    pub ineq_tol: DVector<f64>,
    /// Inner stationarity target, infinity norm of the Lagrangian gradient.
    pub grad_tol: f64,
    pub initial_mu: f64,
    pub mu_growth: f64,
    pub max_mu: f64,
    pub max_outer: usize,
    /// L-BFGS iteration cap per outer step.
    pub max_inner: usize,
    /// Cumulative inner-iteration budget across all outer steps.
    pub total_inner_cap: usize,
    pub memory: usize,
}

impl Default for AugLagOptions {
    fn default() -> Self {
        Self {
            eq_tol: DVector::zeros(0),
            ineq_tol: DVector::zeros(0),
            grad_tol: 1e-6,
            initial_mu: 10.0,
            mu_growth: 10.0,
            max_mu: 1e9,
            max_outer: 40,
            max_inner: 400,
            total_inner_cap: 6000,
            memory: 8,
        }
    }
}

/// How the most recent inner minimization ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerExit {
    /// Gradient infinity norm reached `grad_tol`.
    GradTol,
    /// Function decrease fell to line-search precision.
    Stalled,
    /// Iteration budget exhausted before stationarity.
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub eq_residual: DVector<f64>,
    pub ineq_values: DVector<f64>,
    /// Largest per-constraint violation divided by its tolerance; ≤ 1 means
    /// feasible.
    pub max_violation: f64,
    /// Infinity norm of `∇f + J_cᵀλ_eq − J_gᵀλ_in` at the final multipliers,
    /// the first-order stationarity residual.
    pub stationarity: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub last_inner_exit: InnerExit,
    pub feasible: bool,
    pub converged: bool,
}

fn scaled_violation(c: &DVector<f64>, g: &DVector<f64>, opts: &AugLagOptions) -> f64 {
    let mut viol: f64 = 0.0;
    for (ci, tol) in c.iter().zip(opts.eq_tol.iter()) {
        viol = viol.max(ci.abs() / tol);
    }
    for (gi, tol) in g.iter().zip(opts.ineq_tol.iter()) {
        viol = viol.max((-gi).max(0.0) / tol);
    }
    viol
}

/// Minimizes the problem from `x0`. Never errors: the best point found is
/// always returned with its feasibility and stationarity diagnostics, and
/// `converged` reports whether both reached tolerance.
pub fn augmented_lagrangian(
    problem: &impl ConstrainedProblem,
    x0: DVector<f64>,
    opts: &AugLagOptions,
) -> NlpSolution {
    let (c0, _) = problem.equalities(&x0);
    let (g0, _) = problem.inequalities(&x0);
    assert_eq!(c0.len(), opts.eq_tol.len(), "one eq_tol entry per equality");
    assert_eq!(
        g0.len(),
        opts.ineq_tol.len(),
        "one ineq_tol entry per inequality"
    );

    let mut lam_eq = DVector::zeros(c0.len());
    let mut lam_in: DVector<f64> = DVector::zeros(g0.len());
    let mut mu = opts.initial_mu;
    let mut x = x0;
    let mut viol_prev = f64::INFINITY;
    let mut stagnant_outers = 0usize;
    let mut total_inner = 0usize;
    let mut outer_done = 0usize;
    let mut last_exit = InnerExit::MaxIter;

    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        let budget = opts
            .max_inner
            .min(opts.total_inner_cap.saturating_sub(total_inner));
        let al = |p: &DVector<f64>| -> (f64, DVector<f64>) {
            let (fv, mut grad) = problem.objective(p);
            let (c, jc) = problem.equalities(p);
            let (g, jg) = problem.inequalities(p);
            let mut value = fv + c.dot(&(&lam_eq + &c * (0.5 * mu)));
            grad += jc.transpose() * (&lam_eq + &c * mu);
            let shifted = lam_in.zip_map(&g, |l, gi| (l - mu * gi).max(0.0));
            value += (shifted.norm_squared() - lam_in.norm_squared()) / (2.0 * mu);
            grad -= jg.transpose() * shifted;
            (value, grad)
        };
        let inner = lbfgs(&al, &mut x, budget, opts.grad_tol, opts.memory);
        total_inner += inner.iterations;
        last_exit = inner.exit;

        let (c, _) = problem.equalities(&x);
        let (g, _) = problem.inequalities(&x);
        let viol = scaled_violation(&c, &g, opts);
        lam_eq += &c * mu;
        lam_in = lam_in.zip_map(&g, |l, gi| (l - mu * gi).max(0.0));

        if viol <= 1.0 && inner.exit != InnerExit::MaxIter {
            break;
        }
        if viol > 0.25 * viol_prev {
            mu = (mu * opts.mu_growth).min(opts.max_mu);
        }
        // a high penalty no longer reducing violation means the iterate is
        // pinned against an infeasible constraint set
        if mu >= 1e7 && viol > 0.9 * viol_prev {
            stagnant_outers += 1;
            if stagnant_outers >= 3 {
                break;
            }
        } else {
            stagnant_outers = 0;
        }
        viol_prev = viol;
        if total_inner >= opts.total_inner_cap {
            break;
        }
    }

    let (objective, obj_grad) = problem.objective(&x);
    let (c, jc) = problem.equalities(&x);
    let (g, jg) = problem.inequalities(&x);
    let kkt = obj_grad + jc.transpose() * &lam_eq - jg.transpose() * &lam_in;
    let max_violation = scaled_violation(&c, &g, opts);
    let feasible = max_violation <= 1.0;
    NlpSolution {
        x,
        objective,
        eq_residual: c,
        ineq_values: g,
        max_violation,
        stationarity: kkt.amax(),
        inner_iterations: total_inner,
        outer_iterations: outer_done,
        last_inner_exit: last_exit,
        feasible,
        converged: feasible && last_exit != InnerExit::MaxIter,
    }
}

struct InnerOutcome {
    exit: InnerExit,
    iterations: usize,
}

/// L-BFGS with two-loop recursion and Armijo backtracking. Updates `x` in
/// place; skips curvature pairs with non-positive `sᵀy`.
fn lbfgs<F>(
    f: &F,
    x: &mut DVector<f64>,
    max_iter: usize,
    grad_tol: f64,
    memory: usize,
) -> InnerOutcome
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    const ARMIJO_C1: f64 = 1e-4;
    const SHRINK: f64 = 0.5;
    const MAX_BACKTRACKS: usize = 60;

    let (mut fx, mut gx) = f(x);
    if gx.amax() <= grad_tol {
        return InnerOutcome {
            exit: InnerExit::GradTol,
            iterations: 0,
        };
    }
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();

    for it in 0..max_iter {
        let mut d = two_loop_direction(&gx, &pairs);
        let mut dd = gx.dot(&d);
        if dd >= -1e-14 * gx.norm() * d.norm() {
            pairs.clear();
            d = -&gx;
            let scale = d.amax().max(1.0);
            d /= scale;
            dd = gx.dot(&d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let x_new = &*x + &d * step;
            let (f_new, g_new) = f(&x_new);
            if f_new <= fx + ARMIJO_C1 * step * dd {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            step *= SHRINK;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if pairs.is_empty() {
                return InnerOutcome {
                    exit: InnerExit::Stalled,
                    iterations: it,
                };
            }
            pairs.clear();
            continue;
        };

        let s = &x_new - &*x;
        let y = &g_new - &gx;
        let decrease = fx - f_new;
        *x = x_new;
        fx = f_new;
        gx = g_new;
        if gx.amax() <= grad_tol {
            return InnerOutcome {
                exit: InnerExit::GradTol,
                iterations: it + 1,
            };
        }
        if decrease <= 1e-14 * (1.0 + fx.abs()) {
            return InnerOutcome {
                exit: InnerExit::Stalled,
                iterations: it + 1,
            };
        }
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
    }
    InnerOutcome {
        exit: InnerExit::MaxIter,
        iterations: max_iter,
    }
}

fn two_loop_direction(
    g: &DVector<f64>,
    pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    if pairs.is_empty() {
        // no curvature information yet: unit-capped steepest descent
        let mut d = -g;
        let scale = d.amax().max(1.0);
        d /= scale;
        return d;
    }
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let alpha = rho * s.dot(&q);
        q -= y * alpha;
        alphas.push(alpha);
    }
    let (s_last, y_last, _) = pairs.back().expect("non-empty");
    q *= s_last.dot(y_last) / y_last.dot(y_last);
    for ((s, y, rho), alpha) in pairs.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * y.dot(&q);
        q += s * (alpha - beta);
    }
    -q
}
