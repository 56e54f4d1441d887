//! Inverse kinematics of the n-stack: reach a working-plane end effector
//! target, either minimizing the Jacobian Frobenius norm over the redundant
//! coordinates or accepting the first feasible configuration.
//!
//! Each candidate 2D state is lifted platform by platform to 3D at the
//! target's azimuth before leg constraints are evaluated. The solver is an
//! augmented Lagrangian with analytic gradients throughout; restarts perturb
//! the deterministic initial guess with seeded Gaussian noise, so identical
//! inputs give bit-identical results.

pub mod nlp;

use crate::geometry::{
    axis_from_phi, check_constraints, leg_vector, rodrigues_dtheta, rodrigues_unchecked,
    ConstraintReport, PlatformGeometry,
};
use crate::kinematics::{
    fn_variable_part_grad, forward_2d, frobenius_norm_sq, jacobian_2d, PlanarPose, StackState,
};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use nlp::{augmented_lagrangian, AugLagOptions, ConstrainedProblem, InnerExit, NlpSolution};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Desired end effector pose in the working plane at azimuth `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorTarget {
    pub rho: f64,
    pub z: f64,
    pub theta: f64,
    pub phi: f64,
}

impl EndEffectorTarget {
    /// Builds a target with `phi` normalized into `[0, 2π)`.
    pub fn new(rho: f64, z: f64, theta: f64, phi: f64) -> Self {
        Self {
            rho,
            z,
            theta,
            phi: phi.rem_euclid(TAU),
        }
    }
}

/// Solver tolerances and restart policy.
///
/// The equality tolerance is split by unit: `position_tol` (mm) bounds the
/// planar position error, `angle_tol` (rad) the orientation error.
/// `constraint_tol` applies to raw constraint-report values (mm² for squared
/// leg lengths, mm for joint-angle margins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub position_tol: f64,
    pub angle_tol: f64,
    pub constraint_tol: f64,
    /// Relative first-order stationarity target for the scaled objective.
    pub objective_tol: f64,
    /// Total inner-iteration budget per attempt.
    pub max_iterations: usize,
    pub restart_sigma_t: f64,
    pub restart_sigma_theta: f64,
    /// Cap on total attempts per solve, counting the first.
    pub max_restarts: usize,
    /// Converged attempts to collect before picking the lowest Frobenius
    /// norm (sensitivity-minimizing solves only).
    pub best_of: usize,
    pub rng_seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            position_tol: 1e-3,
            angle_tol: 1e-6,
            constraint_tol: 1e-2,
            objective_tol: 1e-6,
            max_iterations: 6000,
            restart_sigma_t: 50.0,
            restart_sigma_theta: 0.2,
            max_restarts: 20,
            best_of: 4,
            rng_seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("position_tol", self.position_tol),
            ("angle_tol", self.angle_tol),
            ("constraint_tol", self.constraint_tol),
            ("objective_tol", self.objective_tol),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(format!("solver.{name} must be positive and finite, got {value}"));
            }
        }
        for (name, value) in [
            ("restart_sigma_t", self.restart_sigma_t),
            ("restart_sigma_theta", self.restart_sigma_theta),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(format!("solver.{name} must be non-negative, got {value}"));
            }
        }
        if self.max_iterations == 0 {
            return Err("solver.max_iterations must be at least 1".into());
        }
        if self.max_restarts == 0 {
            return Err("solver.max_restarts must be at least 1".into());
        }
        if self.best_of == 0 {
            return Err("solver.best_of must be at least 1".into());
        }
        Ok(())
    }
}

/// Outcome of one solve: the state reached plus how well it meets the
/// target and the platform constraints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub state: StackState,
    /// Full squared Frobenius norm of the end effector Jacobian, constant
    /// part included.
    pub fn_value: f64,
    /// (position error mm, wrap-aware angle error rad) against the target.
    pub ee_error: (f64, f64),
    /// Per-platform constraint report of the lifted state.
    pub constraint_margins: Vec<ConstraintReport>,
    pub converged: bool,
    /// Inner-solver iterations spent, summed over all attempts.
    pub iterations: usize,
    /// Attempts beyond the first.
    pub restarts_used: usize,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(
        "no convergent solution within the restart budget \
         (best attempt: position error {:.3e} mm, angle error {:.3e} rad)",
        best.ee_error.0,
        best.ee_error.1
    )]
    NoConvergence { best: Box<SolveResult> },
    #[error(
        "target appears unreachable: every attempt ended constraint-infeasible \
         (best attempt: position error {:.3e} mm)",
        best.ee_error.0
    )]
    InfeasibleTarget { best: Box<SolveResult> },
}

/// Wraps an angle difference into `[−π, π)`.
pub fn wrap_angle(delta: f64) -> f64 {
    (delta + PI).rem_euclid(TAU) - PI
}

/// Deterministic starting state: the target tilt split evenly, a shared
/// translation `p` chosen so `Σᵢ R((i−1)·θ/n)·p` hits the target position,
/// then every height clamped up to the floor `l_min`.
///
/// Clamping may overshoot the target; the solver corrects that.
pub fn initial_guess(
    target: &EndEffectorTarget,
    n: usize,
    geom: &PlatformGeometry,
) -> StackState {
    assert!(n >= 1, "a stack needs at least one platform");
    let theta_each = target.theta / n as f64;
    let mut m = Matrix2::zeros();
    for i in 0..n {
        let (s, c) = (i as f64 * theta_each).sin_cos();
        m += Matrix2::new(c, -s, s, c);
    }
    let rhs = Vector2::new(target.rho, target.z);
    // Σᵢ R(i·α) is a scaled rotation; it degenerates only when the tilts
    // cancel around the full circle, in which case an even split is used.
    let p = if m.determinant().abs() > 1e-9 {
        m.try_inverse().expect("checked determinant") * rhs
    } else {
        rhs / n as f64
    };
    let z_floor = geom.l_min();
    let platforms = (0..n)
        .map(|_| PlanarPose::new(p.x, p.y.max(z_floor), theta_each))
        .collect();
    StackState::new(platforms, target.phi)
}

/// Reference leg length: geometries are normalized so `l_max` maps to this,
/// making the internal problem identical for geometrically similar
/// mechanisms and the solver path independent of absolute size.
const L_REF: f64 = 500.0;

/// The stack IK as a smooth constrained program over normalized flat
/// coordinates `[ρ₁/u, z₁/u, θ₁, …]` with `u = l_max / L_REF`. Equalities
/// pin the end effector; inequalities are the 24 per-platform leg
/// constraints of the lifted poses.
struct IkProblem<'a> {
    geom: &'a PlatformGeometry,
    target: &'a EndEffectorTarget,
    n: usize,
    minimize_fn: bool,
    /// Length unit `l_max / L_REF`; raw mm per internal length unit.
    unit: f64,
    /// Objective scale `(n·l_max)²`, keeping the scaled objective O(1).
    v_scale: f64,
}

/// Angle residuals are multiplied by this (`2·L_REF`), putting radians on
/// the internal length scale.
const ANG_SCALE: f64 = 2.0 * L_REF;

impl<'a> IkProblem<'a> {
    fn new(
        geom: &'a PlatformGeometry,
        target: &'a EndEffectorTarget,
        n: usize,
        minimize_fn: bool,
    ) -> Self {
        Self {
            geom,
            target,
            n,
            minimize_fn,
            unit: geom.l_max() / L_REF,
            v_scale: (n as f64 * geom.l_max()).powi(2),
        }
    }

    /// Squared-length rows are divided by this, giving internal length
    /// units.
    fn len_divisor(&self) -> f64 {
        2.0 * self.geom.l_max() * self.unit
    }

    fn raw_state(&self, x: &DVector<f64>) -> StackState {
        let platforms = (0..self.n)
            .map(|i| {
                PlanarPose::new(
                    x[3 * i] * self.unit,
                    x[3 * i + 1] * self.unit,
                    x[3 * i + 2],
                )
            })
            .collect();
        StackState::new(platforms, self.target.phi)
    }

    fn scaled_flat(&self, state: &StackState) -> DVector<f64> {
        let mut flat = state.to_flat();
        for i in 0..self.n {
            flat[3 * i] /= self.unit;
            flat[3 * i + 1] /= self.unit;
        }
        flat
    }
}

impl ConstrainedProblem for IkProblem<'_> {
    fn dim(&self) -> usize {
        3 * self.n
    }

    fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        if !self.minimize_fn {
            return (0.0, DVector::zeros(x.len()));
        }
        let (value, mut grad) = fn_variable_part_grad(&self.raw_state(x));
        for i in 0..self.n {
            grad[3 * i] *= self.unit;
            grad[3 * i + 1] *= self.unit;
        }
        (value / self.v_scale, grad / self.v_scale)
    }

    fn equalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let state = self.raw_state(x);
        let ee = forward_2d(&state);
        let c = DVector::from_vec(vec![
            (ee.rho - self.target.rho) / self.unit,
            (ee.z - self.target.z) / self.unit,
            ANG_SCALE * wrap_angle(ee.theta - self.target.theta),
        ]);
        let jac = jacobian_2d(&state);
        let mut rows = jac.matrix().clone();
        rows.row_mut(0).scale_mut(1.0 / self.unit);
        rows.row_mut(1).scale_mut(1.0 / self.unit);
        rows.row_mut(2).scale_mut(ANG_SCALE);
        for i in 0..self.n {
            rows.column_mut(3 * i).scale_mut(self.unit);
            rows.column_mut(3 * i + 1).scale_mut(self.unit);
        }
        (c, rows)
    }

    fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let geom = self.geom;
        let phi = self.target.phi;
        let axis = axis_from_phi(phi);
        let (sin_phi, cos_phi) = phi.sin_cos();
        let sin_min = geom.theta_min().sin();
        let lo_sq = geom.l_min() * geom.l_min();
        let hi_sq = geom.l_max() * geom.l_max();
        let len_divisor = self.len_divisor();
        let d_rho = Vector3::new(cos_phi, sin_phi, 0.0);
        let d_z = Vector3::z();

        let mut values = DVector::zeros(24 * self.n);
        let mut rows = DMatrix::zeros(24 * self.n, 3 * self.n);
        for i in 0..self.n {
            let (rho, z, theta) = (
                x[3 * i] * self.unit,
                x[3 * i + 1] * self.unit,
                x[3 * i + 2],
            );
            let rot = rodrigues_unchecked(&axis, theta);
            let rot_dtheta = rodrigues_dtheta(&axis, theta);
            let pose = crate::geometry::SpatialPose {
                rotation: rot,
                translation: Vector3::new(rho * cos_phi, rho * sin_phi, z),
            };
            let top_normal = rot * Vector3::z();
            let top_normal_dtheta = rot_dtheta * Vector3::z();
            for (leg, &(b, t)) in geom.leg_pairs().iter().enumerate() {
                let top_node = &geom.top_nodes()[t];
                let l = leg_vector(&pose, top_node, &geom.bottom_nodes()[b]);
                let d_theta = rot_dtheta * top_node;
                let norm = l.norm().max(1e-12);
                let unit_leg = l / norm;

                let base = 24 * i;
                let col = 3 * i;
                // squared length against both bounds
                let len_sq = l.norm_squared();
                values[base + leg] = (len_sq - lo_sq) / len_divisor;
                values[base + 6 + leg] = (hi_sq - len_sq) / len_divisor;
                // ball-joint margins against the bottom and top plate normals
                values[base + 12 + leg] = (l.z - norm * sin_min) / self.unit;
                values[base + 18 + leg] = (l.dot(&top_normal) - norm * sin_min) / self.unit;
                for (k, dl) in [(0, &d_rho), (1, &d_z), (2, &d_theta)] {
                    // raw derivatives pick up the variable unit for the
                    // normalized (ρ, z) coordinates
                    let var_unit = if k == 2 { 1.0 } else { self.unit };
                    let d_len_sq = 2.0 * l.dot(dl) / len_divisor;
                    rows[(base + leg, col + k)] = d_len_sq * var_unit;
                    rows[(base + 6 + leg, col + k)] = -d_len_sq * var_unit;
                    let d_norm = unit_leg.dot(dl);
                    rows[(base + 12 + leg, col + k)] =
                        (dl.z - d_norm * sin_min) / self.unit * var_unit;
                    let mut d_top = top_normal.dot(dl) - d_norm * sin_min;
                    if k == 2 {
                        d_top += l.dot(&top_normal_dtheta);
                    }
                    rows[(base + 18 + leg, col + k)] = d_top / self.unit * var_unit;
                }
            }
        }
        (values, rows)
    }
}

fn aug_lag_options(problem: &IkProblem, opts: &SolverOptions) -> AugLagOptions {
    // internal tolerances sit a factor 5 inside the reported ones so the raw
    // re-check cannot flip a converged attempt
    let deflate = 5.0;
    let eq_tol = DVector::from_vec(vec![
        opts.position_tol / problem.unit / deflate,
        opts.position_tol / problem.unit / deflate,
        ANG_SCALE * opts.angle_tol / deflate,
    ]);
    let mut ineq_tol = DVector::zeros(24 * problem.n);
    let len_tol = opts.constraint_tol / problem.len_divisor() / deflate;
    let margin_tol = opts.constraint_tol / problem.unit / deflate;
    for i in 0..problem.n {
        for leg in 0..6 {
            ineq_tol[24 * i + leg] = len_tol;
            ineq_tol[24 * i + 6 + leg] = len_tol;
            ineq_tol[24 * i + 12 + leg] = margin_tol;
            ineq_tol[24 * i + 18 + leg] = margin_tol;
        }
    }
    AugLagOptions {
        eq_tol,
        ineq_tol,
        grad_tol: opts.objective_tol,
        total_inner_cap: opts.max_iterations,
        ..AugLagOptions::default()
    }
}

/// Gaussian restart perturbation of the base guess; attempt indices map to
/// generator seeds `rng_seed + attempt`, so attempts are reproducible and
/// distinct seeds explore distinct starts.
fn perturbed_guess(base: &StackState, opts: &SolverOptions, attempt: u64) -> StackState {
    let mut rng = ChaCha12Rng::seed_from_u64(opts.rng_seed.wrapping_add(attempt));
    let noise_t = Normal::new(0.0, opts.restart_sigma_t).expect("validated sigma");
    let noise_theta = Normal::new(0.0, opts.restart_sigma_theta).expect("validated sigma");
    let platforms = base
        .platforms
        .iter()
        .map(|p| {
            PlanarPose::new(
                p.rho + noise_t.sample(&mut rng),
                p.z + noise_t.sample(&mut rng),
                p.theta + noise_theta.sample(&mut rng),
            )
        })
        .collect();
    StackState::new(platforms, base.phi)
}

fn raw_feasible(result: &SolveResult, geom: &PlatformGeometry, opts: &SolverOptions) -> bool {
    result.ee_error.0 <= opts.position_tol
        && result.ee_error.1 <= opts.angle_tol
        && result
            .constraint_margins
            .iter()
            .all(|report| report.worst_margin(geom) >= -opts.constraint_tol)
}

fn assemble_result(
    state: StackState,
    nlp_sol: &NlpSolution,
    target: &EndEffectorTarget,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
) -> SolveResult {
    let ee = forward_2d(&state);
    let ee_error = (
        (ee.rho - target.rho).hypot(ee.z - target.z),
        wrap_angle(ee.theta - target.theta).abs(),
    );
    let constraint_margins: Vec<ConstraintReport> = state
        .poses_3d()
        .iter()
        .map(|pose| check_constraints(geom, pose))
        .collect();
    let fn_value = frobenius_norm_sq(&state);
    let mut result = SolveResult {
        state,
        fn_value,
        ee_error,
        constraint_margins,
        converged: false,
        iterations: nlp_sol.inner_iterations,
        restarts_used: 0,
    };
    result.converged = nlp_sol.last_inner_exit != InnerExit::MaxIter
        && nlp_sol.feasible
        && raw_feasible(&result, geom, opts);
    result
}

struct Attempt {
    result: SolveResult,
    max_violation: f64,
}

fn run_attempt(
    x0: &StackState,
    target: &EndEffectorTarget,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
    minimize_fn: bool,
) -> Attempt {
    let problem = IkProblem::new(geom, target, x0.n(), minimize_fn);
    let al_opts = aug_lag_options(&problem, opts);
    let sol = augmented_lagrangian(&problem, problem.scaled_flat(x0), &al_opts);
    Attempt {
        result: assemble_result(problem.raw_state(&sol.x), &sol, target, geom, opts),
        max_violation: sol.max_violation,
    }
}

/// Ranks fallback attempts: constraint-wise feasible beats infeasible, then
/// smaller violation wins.
fn better_fallback(a: &Attempt, b: &Attempt, geom: &PlatformGeometry, opts: &SolverOptions) -> bool {
    let fa = raw_feasible(&a.result, geom, opts);
    let fb = raw_feasible(&b.result, geom, opts);
    if fa != fb {
        return fa;
    }
    a.max_violation < b.max_violation
}

fn classify_failure(
    best: Attempt,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
    iterations: usize,
    restarts_used: usize,
) -> SolveError {
    let mut result = best.result;
    result.iterations = iterations;
    result.restarts_used = restarts_used;
    if raw_feasible(&result, geom, opts) {
        SolveError::NoConvergence {
            best: Box::new(result),
        }
    } else {
        SolveError::InfeasibleTarget {
            best: Box::new(result),
        }
    }
}

fn solve_with_mode(
    target: &EndEffectorTarget,
    n: usize,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
    minimize_fn: bool,
) -> Result<SolveResult, SolveError> {
    opts.validate().expect("solver options");
    let base = initial_guess(target, n, geom);
    let wanted = if minimize_fn { opts.best_of } else { 1 };
    let mut converged: Vec<SolveResult> = Vec::new();
    let mut fallback: Option<Attempt> = None;
    let mut total_iterations = 0;
    let mut attempts = 0u64;
    while attempts < opts.max_restarts as u64 && converged.len() < wanted {
        // minimizing solves anchor on the deterministic guess before
        // exploring; feasible solves perturb every attempt so the returned
        // state varies with the seed
        let start = if minimize_fn && attempts == 0 {
            base.clone()
        } else {
            perturbed_guess(&base, opts, attempts)
        };
        let attempt = run_attempt(&start, target, geom, opts, minimize_fn);
        attempts += 1;
        total_iterations += attempt.result.iterations;
        if attempt.result.converged {
            converged.push(attempt.result);
        } else if fallback
            .as_ref()
            .is_none_or(|cur| better_fallback(&attempt, cur, geom, opts))
        {
            fallback = Some(attempt);
        }
    }
    let restarts_used = attempts.saturating_sub(1) as usize;
    match converged
        .into_iter()
        .min_by(|a, b| a.fn_value.partial_cmp(&b.fn_value).expect("finite"))
    {
        Some(mut best) => {
            best.iterations = total_iterations;
            best.restarts_used = restarts_used;
            Ok(best)
        }
        None => Err(classify_failure(
            fallback.expect("at least one attempt ran"),
            geom,
            opts,
            total_iterations,
            restarts_used,
        )),
    }
}

/// Reaches the target while minimizing the Frobenius norm, taking the best
/// of several converged restarts.
pub fn solve_optimal(
    target: &EndEffectorTarget,
    n: usize,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
) -> Result<SolveResult, SolveError> {
    solve_with_mode(target, n, geom, opts, true)
}

/// Reaches the target with a constant-zero objective, returning the first
/// feasible configuration found.
pub fn solve_feasible(
    target: &EndEffectorTarget,
    n: usize,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
) -> Result<SolveResult, SolveError> {
    solve_with_mode(target, n, geom, opts, false)
}

/// Collects `k` distinct feasible solves, one per perturbed restart.
/// Per-result `iterations` and `restarts_used` refer to the producing
/// attempt.
pub fn solve_multiple(
    target: &EndEffectorTarget,
    n: usize,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
    k: usize,
) -> Result<Vec<SolveResult>, SolveError> {
    assert!(k >= 1, "requested solve count must be at least 1");
    opts.validate().expect("solver options");
    let base = initial_guess(target, n, geom);
    let mut results: Vec<SolveResult> = Vec::new();
    let mut fallback: Option<Attempt> = None;
    let mut attempts = 0u64;
    while attempts < opts.max_restarts as u64 && results.len() < k {
        let start = perturbed_guess(&base, opts, attempts);
        let attempt = run_attempt(&start, target, geom, opts, false);
        attempts += 1;
        if attempt.result.converged {
            let mut result = attempt.result;
            result.restarts_used = attempts as usize - 1;
            results.push(result);
        } else if fallback
            .as_ref()
            .is_none_or(|cur| better_fallback(&attempt, cur, geom, opts))
        {
            fallback = Some(attempt);
        }
    }
    if results.len() == k {
        return Ok(results);
    }
    let best = match results.into_iter().next() {
        Some(result) => Attempt {
            result,
            max_violation: 0.0,
        },
        None => fallback.expect("at least one attempt ran"),
    };
    Err(classify_failure(best, geom, opts, 0, attempts.saturating_sub(1) as usize))
}

/// Polishes an existing state toward the Frobenius-norm minimum for the
/// target, without restarts. The state's azimuth must match the target's.
pub fn refine(
    seed_state: &StackState,
    target: &EndEffectorTarget,
    geom: &PlatformGeometry,
    opts: &SolverOptions,
) -> Result<SolveResult, SolveError> {
    opts.validate().expect("solver options");
    assert!(
        (seed_state.phi - target.phi).abs() < 1e-12,
        "seed state and target must share the working plane"
    );
    let attempt = run_attempt(seed_state, target, geom, opts, true);
    if attempt.result.converged {
        Ok(attempt.result)
    } else {
        let iterations = attempt.result.iterations;
        Err(classify_failure(attempt, geom, opts, iterations, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn paper_target() -> EndEffectorTarget {
        EndEffectorTarget::new(600.0, 1000.0, -1.57, 0.0)
    }

    #[test]
    fn initial_guess_splits_vertical_target() {
        let geom = PlatformGeometry::default();
        let st = initial_guess(&EndEffectorTarget::new(0.0, 1200.0, 0.0, 0.0), 4, &geom);
        for p in &st.platforms {
            assert_abs_diff_eq!(p.rho, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.z, 300.0, epsilon = 1e-12);
            assert_eq!(p.theta, 0.0);
        }
    }

    #[test]
    fn initial_guess_clamps_to_floor() {
        let geom = PlatformGeometry::default();
        let st = initial_guess(&EndEffectorTarget::new(0.0, 800.0, 0.0, 0.0), 4, &geom);
        // 800/4 = 200 is below the 300 mm floor; the guess overshoots
        for p in &st.platforms {
            assert_abs_diff_eq!(p.z, 300.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn initial_guess_single_platform_is_target() {
        let geom = PlatformGeometry::default();
        let st = initial_guess(&EndEffectorTarget::new(100.0, 400.0, 0.2, 0.0), 1, &geom);
        assert_abs_diff_eq!(st.platforms[0].rho, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(st.platforms[0].z, 400.0, epsilon = 1e-12);
        assert_abs_diff_eq!(st.platforms[0].theta, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn initial_guess_reproduces_target_when_unclamped() {
        let geom = PlatformGeometry::default();
        let target = EndEffectorTarget::new(300.0, 1500.0, -0.8, 0.0);
        let st = initial_guess(&target, 4, &geom);
        let ee = forward_2d(&st);
        assert_abs_diff_eq!(ee.rho, target.rho, epsilon = 1e-9);
        assert_abs_diff_eq!(ee.z, target.z, epsilon = 1e-9);
        assert_abs_diff_eq!(ee.theta, target.theta, epsilon = 1e-12);
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        let geom = PlatformGeometry::default();
        let target = EndEffectorTarget::new(120.0, 760.0, 0.4, 0.3);
        let problem = IkProblem::new(&geom, &target, 2, true);
        let x = DVector::from_vec(vec![40.0, 360.0, 0.25, -30.0, 410.0, 0.15]);
        let (_, rows) = problem.inequalities(&x);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut lo = x.clone();
            let mut hi = x.clone();
            lo[j] -= h * x[j].abs().max(1.0);
            hi[j] += h * x[j].abs().max(1.0);
            let (vlo, _) = problem.inequalities(&lo);
            let (vhi, _) = problem.inequalities(&hi);
            let fd = (vhi - vlo) / (hi[j] - lo[j]);
            for r in 0..fd.len() {
                let scale = rows[(r, j)].abs().max(fd[r].abs()).max(1.0);
                assert!(
                    (rows[(r, j)] - fd[r]).abs() <= 1e-5 * scale,
                    "row {r} col {j}: analytic {} vs fd {}",
                    rows[(r, j)],
                    fd[r]
                );
            }
        }
    }

    #[test]
    fn equality_jacobian_matches_finite_differences() {
        let geom = PlatformGeometry::default();
        let target = EndEffectorTarget::new(120.0, 760.0, 0.4, 0.0);
        let problem = IkProblem::new(&geom, &target, 2, true);
        let x = DVector::from_vec(vec![40.0, 360.0, 0.25, -30.0, 410.0, 0.15]);
        let (_, rows) = problem.equalities(&x);
        for j in 0..x.len() {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut lo = x.clone();
            let mut hi = x.clone();
            lo[j] -= h;
            hi[j] += h;
            let (clo, _) = problem.equalities(&lo);
            let (chi, _) = problem.equalities(&hi);
            let fd = (chi - clo) / (2.0 * h);
            for r in 0..3 {
                let scale = rows[(r, j)].abs().max(fd[r].abs()).max(1.0);
                assert!((rows[(r, j)] - fd[r]).abs() <= 1e-5 * scale);
            }
        }
    }

    #[test]
    fn solve_optimal_reaches_paper_target() {
        let geom = PlatformGeometry::default();
        let result = solve_optimal(&paper_target(), 4, &geom, &SolverOptions::default())
            .expect("reachable target");
        assert!(result.converged);
        assert!(result.ee_error.0 < 1e-3, "position error {}", result.ee_error.0);
        assert!(result.ee_error.1 < 1e-6, "angle error {}", result.ee_error.1);
        for report in &result.constraint_margins {
            assert!(report.worst_margin(&geom) >= -1e-2);
        }
    }

    #[test]
    fn optimal_beats_feasible() {
        let geom = PlatformGeometry::default();
        let opts = SolverOptions::default();
        let optimal = solve_optimal(&paper_target(), 4, &geom, &opts).expect("reachable");
        let feasible_opts = SolverOptions {
            rng_seed: 9,
            ..SolverOptions::default()
        };
        let feasible = solve_feasible(&paper_target(), 4, &geom, &feasible_opts).expect("reachable");
        assert!(optimal.fn_value <= feasible.fn_value * (1.0 + 1e-6));
    }

    #[test]
    fn solve_feasible_single_platform_equals_target() {
        let geom = PlatformGeometry::default();
        let target = EndEffectorTarget::new(50.0, 400.0, 0.1, 0.0);
        let result = solve_feasible(&target, 1, &geom, &SolverOptions::default())
            .expect("within single-platform reach");
        assert!(result.converged);
        assert_abs_diff_eq!(result.state.platforms[0].rho, 50.0, epsilon = 1e-3);
        assert_abs_diff_eq!(result.state.platforms[0].z, 400.0, epsilon = 1e-3);
        assert_abs_diff_eq!(result.state.platforms[0].theta, 0.1, epsilon = 1e-6);
    }

    #[test]
    fn solve_feasible_distinct_seeds_distinct_states() {
        let geom = PlatformGeometry::default();
        let target = paper_target();
        let a = solve_feasible(
            &target,
            4,
            &geom,
            &SolverOptions {
                rng_seed: 1,
                ..SolverOptions::default()
            },
        )
        .expect("reachable");
        let b = solve_feasible(
            &target,
            4,
            &geom,
            &SolverOptions {
                rng_seed: 2,
                ..SolverOptions::default()
            },
        )
        .expect("reachable");
        let gap = (a.state.to_flat() - b.state.to_flat()).norm();
        assert!(gap > 1e-3, "states should differ, distance {gap}");
        assert!(a.ee_error.0 < 1e-3 && b.ee_error.0 < 1e-3);
    }

    #[test]
    fn solve_optimal_is_deterministic() {
        let geom = PlatformGeometry::default();
        let opts = SolverOptions::default();
        let a = solve_optimal(&paper_target(), 4, &geom, &opts).expect("reachable");
        let b = solve_optimal(&paper_target(), 4, &geom, &opts).expect("reachable");
        assert_eq!(a, b);
    }

    #[test]
    fn solve_multiple_collects_distinct_states() {
        let geom = PlatformGeometry::default();
        let results =
            solve_multiple(&paper_target(), 4, &geom, &SolverOptions::default(), 3)
                .expect("reachable");
        assert_eq!(results.len(), 3);
        for i in 0..3 {
            assert!(results[i].converged);
            for j in i + 1..3 {
                let gap = (results[i].state.to_flat() - results[j].state.to_flat()).norm();
                assert!(gap > 1e-3, "pair ({i},{j}) distance {gap}");
            }
        }
    }

    #[test]
    fn solve_multiple_is_deterministic() {
        let geom = PlatformGeometry::default();
        let opts = SolverOptions::default();
        let a = solve_multiple(&paper_target(), 4, &geom, &opts, 2).expect("reachable");
        let b = solve_multiple(&paper_target(), 4, &geom, &opts, 2).expect("reachable");
        assert_eq!(a, b);
    }

    #[test]
    fn refine_improves_feasible_state() {
        let geom = PlatformGeometry::default();
        let target = paper_target();
        let opts = SolverOptions {
            rng_seed: 3,
            ..SolverOptions::default()
        };
        let feasible = solve_feasible(&target, 4, &geom, &opts).expect("reachable");
        let polished = refine(&feasible.state, &target, &geom, &opts).expect("polish");
        assert!(polished.converged);
        assert!(polished.fn_value <= feasible.fn_value * (1.0 + 1e-6));
    }

    #[test]
    fn unreachable_height_reports_infeasible() {
        let geom = PlatformGeometry::default();
        // a single platform tops out near z = 490.6, so 4 stacked platforms
        // cannot reach 2000
        let target = EndEffectorTarget::new(0.0, 2000.0, 0.0, 0.0);
        let opts = SolverOptions {
            max_restarts: 3,
            max_iterations: 3000,
            ..SolverOptions::default()
        };
        match solve_optimal(&target, 4, &geom, &opts) {
            Err(SolveError::InfeasibleTarget { best }) => {
                assert!(!best.converged);
            }
            other => panic!("expected InfeasibleTarget, got {other:?}"),
        }
    }

    #[test]
    fn near_full_extension_converges_with_tight_legs() {
        let geom = PlatformGeometry::default();
        let target = EndEffectorTarget::new(0.0, 1950.0, 0.0, 0.0);
        let result = solve_optimal(&target, 4, &geom, &SolverOptions::default())
            .expect("just inside reach");
        assert!(result.converged);
        // close to full extension every upper length bound is nearly active
        for report in &result.constraint_margins {
            let max_len_sq = report
                .leg_lengths_sq
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(geom.l_max() * geom.l_max() - max_len_sq < 2.0 * geom.l_max() * 15.0);
        }
    }

    /// The Frobenius norm ignores (ρ₁, z₁, θ₁, θₙ), so the constrained
    /// optimum is a flat family and exact states are path-dependent. What is
    /// scale-covariant is the optimal set: doubling the geometry and target
    /// doubles the minimum's translations and leaves its level and tilt
    /// structure intact.
    #[test]
    fn doubling_scale_maps_the_optimal_set() {
        let geom = PlatformGeometry::default();
        let scaled_geom =
            PlatformGeometry::symmetric(300.0, 240.0, 10f64.to_radians(), 600.0, 1000.0, 0.35)
                .expect("valid");
        let opts = SolverOptions::default();
        let target = EndEffectorTarget::new(145.0, 1500.0, -0.207, 0.0);
        let scaled_target = EndEffectorTarget::new(290.0, 3000.0, -0.207, 0.0);
        let base = solve_optimal(&target, 4, &geom, &opts).expect("reachable");
        let scaled = solve_optimal(&scaled_target, 4, &scaled_geom, &opts).expect("reachable");

        // identical minimum level: variable FN parts relate by the scale²
        let v_base = base.fn_value - 12.0;
        let v_scaled = scaled.fn_value - 12.0;
        assert_abs_diff_eq!(v_scaled / 4.0, v_base, epsilon = 1e-3 * v_base);

        // the scaled optimum, mapped down, is feasible and on target for the
        // original geometry
        let down = StackState::new(
            scaled
                .state
                .platforms
                .iter()
                .map(|p| PlanarPose::new(p.rho / 2.0, p.z / 2.0, p.theta))
                .collect(),
            scaled.state.phi,
        );
        for pose in down.poses_3d() {
            assert!(check_constraints(&geom, &pose).worst_margin(&geom) >= -1e-2);
        }
        let ee = forward_2d(&down);
        assert!((ee.rho - target.rho).hypot(ee.z - target.z) < 1e-3);
        assert!(wrap_angle(ee.theta - target.theta).abs() < 1e-6);
    }
}
