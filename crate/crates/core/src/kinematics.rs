//! Forward kinematics of an n-stack in the 2D working plane and in 3D, the
//! analytic end-effector Jacobian, and the Frobenius-norm sensitivity
//! measure.
//!
//! Platforms are indexed bottom to top. In the working plane each platform
//! contributes a translation `Pᵢ = (ρᵢ, zᵢ)` and a tilt `θᵢ`; the end
//! effector position is `P₁ + Σ_{i≥2} R(Θ_{i−1})·Pᵢ` with `Θ_k = θ₁+…+θ_k`,
//! and its orientation is `Σᵢ θᵢ`.

use crate::geometry::{lift_2d_to_3d, SpatialPose};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// One platform's working-plane coordinates: radial offset, height, tilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub rho: f64,
    pub z: f64,
    pub theta: f64,
}

impl PlanarPose {
    pub fn new(rho: f64, z: f64, theta: f64) -> Self {
        Self { rho, z, theta }
    }

    fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.rho, self.z)
    }
}

/// Full stack configuration: per-platform planar poses (bottom first) plus
/// the shared working-plane azimuth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackState {
    pub platforms: Vec<PlanarPose>,
    pub phi: f64,
}

impl StackState {
    pub fn new(platforms: Vec<PlanarPose>, phi: f64) -> Self {
        assert!(!platforms.is_empty(), "a stack needs at least one platform");
        Self { platforms, phi }
    }

    pub fn n(&self) -> usize {
        self.platforms.len()
    }

    /// Flattens to `[ρ₁, z₁, θ₁, ρ₂, z₂, θ₂, …]`, the coordinate order used
    /// by the Jacobian columns and the optimizer.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut flat = DVector::zeros(3 * self.n());
        for (i, p) in self.platforms.iter().enumerate() {
            flat[3 * i] = p.rho;
            flat[3 * i + 1] = p.z;
            flat[3 * i + 2] = p.theta;
        }
        flat
    }

    /// Inverse of [`to_flat`](Self::to_flat); `flat.len()` must be a
    /// positive multiple of 3.
    pub fn from_flat(flat: &[f64], phi: f64) -> Self {
        assert!(
            !flat.is_empty() && flat.len().is_multiple_of(3),
            "flat state length must be a positive multiple of 3"
        );
        let platforms = flat
            .chunks_exact(3)
            .map(|c| PlanarPose::new(c[0], c[1], c[2]))
            .collect();
        Self { platforms, phi }
    }

    /// Per-platform relative 3D poses obtained by lifting each planar pose
    /// at the shared azimuth.
    pub fn poses_3d(&self) -> Vec<SpatialPose> {
        self.platforms
            .iter()
            .map(|p| lift_2d_to_3d(p.rho, p.z, p.theta, self.phi))
            .collect()
    }
}

/// End effector coordinates in the working plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorOutput {
    pub rho: f64,
    pub z: f64,
    pub theta: f64,
}

/// In-plane rotation `[[cos θ, −sin θ], [sin θ, cos θ]]`; positive θ carries
/// the ρ axis toward +z.
fn rot2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `dR/dθ at θ = 0`, the 90° in-plane rotation.
fn spin2() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

/// Cumulative tilts `Θ_k = θ₁ + … + θ_k`, left-to-right, with `Θ₀ = 0`.
fn prefix_tilts(state: &StackState) -> Vec<f64> {
    let mut tilts = Vec::with_capacity(state.n() + 1);
    tilts.push(0.0);
    let mut acc = 0.0;
    for p in &state.platforms {
        acc += p.theta;
        tilts.push(acc);
    }
    tilts
}

/// Lever arms `vᵢ = Σ_{k>i} R(Θ_{k−1})·P_k` (0-based index i), the moment of
/// everything above platform i about its tilt. `v_{n−1} = 0`.
fn suffix_levers(state: &StackState, tilts: &[f64]) -> Vec<Vector2<f64>> {
    let n = state.n();
    let mut levers = vec![Vector2::zeros(); n];
    for i in (0..n.saturating_sub(1)).rev() {
        levers[i] = levers[i + 1] + rot2(tilts[i + 1]) * state.platforms[i + 1].translation();
    }
    levers
}

/// End effector pose in the working plane: position
/// `P₁ + Σ_{i≥2} R(Θ_{i−1})·Pᵢ`, orientation `Σᵢ θᵢ` summed bottom to top.
pub fn forward_2d(state: &StackState) -> EndEffectorOutput {
    let tilts = prefix_tilts(state);
    let mut pos = state.platforms[0].translation();
    for (i, p) in state.platforms.iter().enumerate().skip(1) {
        pos += rot2(tilts[i]) * p.translation();
    }
    let theta = state.platforms.iter().fold(0.0, |acc, p| acc + p.theta);
    EndEffectorOutput {
        rho: pos.x,
        z: pos.y,
        theta,
    }
}

/// End effector pose of a chain of relative 3D poses, bottom first.
///
/// Translation accumulates ascending left products `R₁⋯R_{i−1}·Pᵢ`; the
/// returned rotation is the product `Rₙ⋯R₁`. For poses sharing one rotation
/// axis the two orderings agree.
pub fn forward_3d(poses: &[SpatialPose]) -> SpatialPose {
    assert!(!poses.is_empty(), "a stack needs at least one platform");
    let mut translation = poses[0].translation;
    let mut ascending = poses[0].rotation;
    for pose in &poses[1..] {
        translation += ascending * pose.translation;
        ascending *= pose.rotation;
    }
    let mut rotation = Matrix3::identity();
    for pose in poses {
        rotation = pose.rotation * rotation;
    }
    SpatialPose {
        rotation,
        translation,
    }
}

/// Analytic Jacobian of [`forward_2d`]: 3 rows `(∂ρ_ee, ∂z_ee, ∂θ_ee)` by
/// 3n columns grouped per platform as `(∂ρᵢ, ∂zᵢ, ∂θᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackJacobian {
    matrix: DMatrix<f64>,
}

impl StackJacobian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The two position rows, the part that maps state noise to end effector
    /// position noise.
    pub fn position_rows(&self) -> DMatrix<f64> {
        self.matrix.rows(0, 2).into_owned()
    }

    /// `Trace(JᵀJ)`, the squared Frobenius norm.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.matrix.iter().map(|e| e * e).sum()
    }

    /// Largest relative entry disagreement against `other`, ignoring entries
    /// where `other` is below `floor` in magnitude.
    pub fn max_relative_error(&self, other: &StackJacobian, floor: f64) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .filter(|(_, o)| o.abs() > floor)
            .map(|(a, o)| (a - o).abs() / o.abs())
            .fold(0.0, f64::max)
    }
}

/// Analytic end-effector Jacobian. Per platform i the position block against
/// `(ρᵢ, zᵢ)` is the rotation `R(Θ_{i−1})`, the position column against `θᵢ`
/// is the 90°-rotated lever `S·vᵢ`, and the orientation row is `(0, 0, 1)`.
pub fn jacobian_2d(state: &StackState) -> StackJacobian {
    let n = state.n();
    let tilts = prefix_tilts(state);
    let levers = suffix_levers(state, &tilts);
    let spin = spin2();
    let mut matrix = DMatrix::zeros(3, 3 * n);
    for i in 0..n {
        let block = rot2(tilts[i]);
        let swung = spin * levers[i];
        for r in 0..2 {
            matrix[(r, 3 * i)] = block[(r, 0)];
            matrix[(r, 3 * i + 1)] = block[(r, 1)];
            matrix[(r, 3 * i + 2)] = swung[r];
        }
        matrix[(2, 3 * i + 2)] = 1.0;
    }
    StackJacobian { matrix }
}

/// Central-difference Jacobian of [`forward_2d`], for cross-checking
/// [`jacobian_2d`]. Per-coordinate step is `step · max(1, |xᵢ|)`.
pub fn jacobian_fd(state: &StackState, step: f64) -> StackJacobian {
    assert!(step > 0.0, "finite-difference step must be positive");
    let flat = state.to_flat();
    let n = flat.len();
    let mut matrix = DMatrix::zeros(3, n);
    for j in 0..n {
        let h = step * flat[j].abs().max(1.0);
        let mut lo = flat.clone();
        let mut hi = flat.clone();
        lo[j] -= h;
        hi[j] += h;
        let f_lo = forward_2d(&StackState::from_flat(lo.as_slice(), state.phi));
        let f_hi = forward_2d(&StackState::from_flat(hi.as_slice(), state.phi));
        let scale = 1.0 / (2.0 * h);
        matrix[(0, j)] = (f_hi.rho - f_lo.rho) * scale;
        matrix[(1, j)] = (f_hi.z - f_lo.z) * scale;
        matrix[(2, j)] = (f_hi.theta - f_lo.theta) * scale;
    }
    StackJacobian { matrix }
}

/// `Trace(JᵀJ)` of the full Jacobian in closed form: the rotation blocks and
/// orientation row contribute the constant `3n`, the lever columns the
/// variable part `Σᵢ ‖vᵢ‖²`.
pub fn frobenius_norm_sq(state: &StackState) -> f64 {
    3.0 * state.n() as f64 + fn_variable_part(state)
}

/// Row-weighted trace `Σ_r w_r·‖J row r‖²`; all-ones weights reduce to
/// [`frobenius_norm_sq`].
pub fn frobenius_norm_sq_weighted(state: &StackState, row_weights: &Vector3<f64>) -> f64 {
    let jac = jacobian_2d(state);
    let m = jac.matrix();
    (0..3)
        .map(|r| row_weights[r] * m.row(r).iter().map(|e| e * e).sum::<f64>())
        .sum()
}

/// State-dependent part of [`frobenius_norm_sq`]: `Σᵢ ‖vᵢ‖²`. Independent of
/// `ρ₁`, `z₁`, `θ₁`, and `θₙ`.
pub fn fn_variable_part(state: &StackState) -> f64 {
    let tilts = prefix_tilts(state);
    suffix_levers(state, &tilts)
        .iter()
        .map(|v| v.norm_squared())
        .sum()
}

/// [`fn_variable_part`] together with its gradient in flat coordinate order.
///
/// With `W_m = Σ_{i<m} vᵢ`: `∂V/∂Pₘ = 2·R(Θ_{m−1})ᵀ·Wₘ` and
/// `∂V/∂θₘ = 2·Wₘᵀ·S·vₘ` (terms with i ≥ m vanish by skew-symmetry).
pub fn fn_variable_part_grad(state: &StackState) -> (f64, DVector<f64>) {
    let n = state.n();
    let tilts = prefix_tilts(state);
    let levers = suffix_levers(state, &tilts);
    let spin = spin2();
    let value = levers.iter().map(|v| v.norm_squared()).sum();
    let mut grad = DVector::zeros(3 * n);
    let mut below = Vector2::zeros();
    for m in 0..n {
        let d_pos = 2.0 * rot2(tilts[m]).transpose() * below;
        grad[3 * m] = d_pos.x;
        grad[3 * m + 1] = d_pos.y;
        grad[3 * m + 2] = 2.0 * below.dot(&(spin * levers[m]));
        below += levers[m];
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_from_phi, rodrigues};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::FRAC_PI_2;

    fn state(platforms: &[(f64, f64, f64)], phi: f64) -> StackState {
        StackState::new(
            platforms
                .iter()
                .map(|&(rho, z, theta)| PlanarPose::new(rho, z, theta))
                .collect(),
            phi,
        )
    }

    fn random_state(rng: &mut impl Rng, n: usize) -> StackState {
        let platforms = (0..n)
            .map(|_| {
                PlanarPose::new(
                    rng.gen_range(-150.0..150.0),
                    rng.gen_range(300.0..480.0),
                    rng.gen_range(-0.6..0.6),
                )
            })
            .collect();
        StackState::new(platforms, rng.gen_range(-3.2..3.2))
    }

    #[test]
    fn forward_2d_single_platform_passes_through() {
        let out = forward_2d(&state(&[(100.0, 200.0, 0.3)], 0.0));
        assert_eq!((out.rho, out.z, out.theta), (100.0, 200.0, 0.3));
    }

    #[test]
    fn forward_2d_quarter_tilt() {
        let out = forward_2d(&state(&[(0.0, 200.0, FRAC_PI_2), (0.0, 200.0, 0.0)], 0.0));
        assert_abs_diff_eq!(out.rho, -200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.z, 200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.theta, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn forward_2d_untilted_stack_sums() {
        let out = forward_2d(&state(
            &[(50.0, 300.0, 0.0), (50.0, 300.0, 0.0), (50.0, 300.0, 0.0)],
            0.0,
        ));
        assert_abs_diff_eq!(out.rho, 150.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.z, 900.0, epsilon = 1e-12);
        assert_eq!(out.theta, 0.0);
    }

    #[test]
    fn theta_ee_is_exact_left_to_right_sum() {
        let thetas = [0.1, 0.2, 0.3, -0.04, 1e-17];
        let platforms: Vec<_> = thetas.iter().map(|&t| (0.0, 300.0, t)).collect();
        let out = forward_2d(&state(&platforms, 0.0));
        let expected = thetas.iter().fold(0.0, |a, &t| a + t);
        assert_eq!(out.theta, expected);
    }

    #[test]
    fn forward_3d_pure_translation() {
        let poses: Vec<_> = (0..4)
            .map(|_| SpatialPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.0, 0.0, 300.0),
            })
            .collect();
        let out = forward_3d(&poses);
        assert_abs_diff_eq!(out.translation, Vector3::new(0.0, 0.0, 1200.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out.rotation, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn forward_3d_single_pose_passes_through() {
        let pose = lift_2d_to_3d(30.0, 400.0, 0.2, 1.1);
        let out = forward_3d(&[pose]);
        assert_eq!(out.translation, pose.translation);
        assert_eq!(out.rotation, pose.rotation);
    }

    #[test]
    fn forward_3d_matches_lifted_planar_example() {
        let st = state(&[(0.0, 200.0, FRAC_PI_2), (0.0, 200.0, 0.0)], 0.0);
        let out = forward_3d(&st.poses_3d());
        assert_abs_diff_eq!(out.translation, Vector3::new(-200.0, 0.0, 200.0), epsilon = 1e-9);
        let expected_rot = rodrigues(&axis_from_phi(0.0), FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(out.rotation, expected_rot, epsilon = 1e-12);
    }

    #[test]
    fn lift_of_forward_2d_agrees_with_forward_3d() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let st = random_state(&mut rng, 4);
            let chained = forward_3d(&st.poses_3d());
            let ee = forward_2d(&st);
            let lifted = lift_2d_to_3d(ee.rho, ee.z, ee.theta, st.phi);
            assert_abs_diff_eq!(chained.translation, lifted.translation, epsilon = 1e-9);
            assert_abs_diff_eq!(chained.rotation, lifted.rotation, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_single_platform_is_identity() {
        let jac = jacobian_2d(&state(&[(40.0, 350.0, 0.25)], 0.0));
        assert_abs_diff_eq!(
            jac.matrix().clone_owned(),
            DMatrix::identity(3, 3),
            epsilon = 1e-15
        );
    }

    #[test]
    fn jacobian_untilted_two_stack_lever_column() {
        let jac = jacobian_2d(&state(&[(10.0, 300.0, 0.0), (70.0, 420.0, 0.0)], 0.0));
        let m = jac.matrix();
        // ∂P_ee/∂θ₁ = S·P₂ = (−z₂, ρ₂)
        assert_abs_diff_eq!(m[(0, 2)], -420.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 2)], 70.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_structure_invariants() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let st = random_state(&mut rng, 5);
        let jac = jacobian_2d(&st);
        let m = jac.matrix();
        let n = st.n();
        let mut tilt = 0.0f64;
        for i in 0..n {
            // orientation row: zero against translations, one against tilts
            assert_eq!(m[(2, 3 * i)], 0.0);
            assert_eq!(m[(2, 3 * i + 1)], 0.0);
            assert_eq!(m[(2, 3 * i + 2)], 1.0);
            // position block against (ρᵢ, zᵢ) is the rotation by Θ_{i−1}
            let block = Matrix2::new(
                m[(0, 3 * i)],
                m[(0, 3 * i + 1)],
                m[(1, 3 * i)],
                m[(1, 3 * i + 1)],
            );
            let (s, c) = tilt.sin_cos();
            assert_abs_diff_eq!(block, Matrix2::new(c, -s, s, c), epsilon = 1e-12);
            tilt += st.platforms[i].theta;
        }
        // topmost tilt moves nothing above it
        assert_eq!(m[(0, 3 * n - 1)], 0.0);
        assert_eq!(m[(1, 3 * n - 1)], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..25 {
            let st = random_state(&mut rng, 4);
            let analytic = jacobian_2d(&st);
            let fd = jacobian_fd(&st, 1e-6);
            assert!(analytic.max_relative_error(&fd, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn jacobian_fd_is_deterministic() {
        let st = state(&[(5.0, 310.0, 0.1), (-20.0, 400.0, -0.3)], 0.7);
        let a = jacobian_fd(&st, 1e-6);
        let b = jacobian_fd(&st, 1e-6);
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn frobenius_single_platform_is_constant() {
        assert_eq!(frobenius_norm_sq(&state(&[(87.0, 123.0, -0.9)], 0.3)), 3.0);
    }

    #[test]
    fn frobenius_untilted_two_stack_closed_form() {
        let (rho2, z2) = (70.0, 420.0);
        let value = frobenius_norm_sq(&state(&[(10.0, 300.0, 0.0), (rho2, z2, 0.0)], 0.0));
        assert_abs_diff_eq!(value, 6.0 + rho2 * rho2 + z2 * z2, epsilon = 1e-9);
    }

    #[test]
    fn frobenius_matches_explicit_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        for _ in 0..20 {
            let st = random_state(&mut rng, 4);
            let explicit = jacobian_2d(&st).frobenius_norm_sq();
            assert_abs_diff_eq!(frobenius_norm_sq(&st), explicit, epsilon = 1e-9 * explicit);
        }
    }

    #[test]
    fn frobenius_weighted_all_ones_reduces_to_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let st = random_state(&mut rng, 3);
        let weighted = frobenius_norm_sq_weighted(&st, &Vector3::new(1.0, 1.0, 1.0));
        assert_abs_diff_eq!(
            weighted,
            frobenius_norm_sq(&st),
            epsilon = 1e-9 * weighted
        );
        // zeroing the orientation row drops exactly n from the trace
        let positional = frobenius_norm_sq_weighted(&st, &Vector3::new(1.0, 1.0, 0.0));
        assert_abs_diff_eq!(
            positional,
            frobenius_norm_sq(&st) - st.n() as f64,
            epsilon = 1e-9 * weighted
        );
    }

    #[test]
    fn frobenius_ignores_base_translation_and_top_tilt() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        for _ in 0..20 {
            let mut st = random_state(&mut rng, 4);
            let baseline = frobenius_norm_sq(&st);
            st.platforms[0].rho += rng.gen_range(-500.0..500.0);
            st.platforms[0].z += rng.gen_range(-500.0..500.0);
            st.platforms[3].theta += rng.gen_range(-3.0..3.0);
            let changed = frobenius_norm_sq(&st);
            assert!((changed - baseline).abs() <= 1e-12 * baseline.abs());
        }
    }

    #[test]
    fn variable_part_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..10 {
            let st = random_state(&mut rng, 4);
            let (value, grad) = fn_variable_part_grad(&st);
            assert_abs_diff_eq!(value, fn_variable_part(&st), epsilon = 1e-12 * value.max(1.0));
            let flat = st.to_flat();
            for j in 0..flat.len() {
                let h = 1e-6 * flat[j].abs().max(1.0);
                let mut lo = flat.clone();
                let mut hi = flat.clone();
                lo[j] -= h;
                hi[j] += h;
                let fd = (fn_variable_part(&StackState::from_flat(hi.as_slice(), st.phi))
                    - fn_variable_part(&StackState::from_flat(lo.as_slice(), st.phi)))
                    / (2.0 * h);
                let scale = grad[j].abs().max(fd.abs()).max(1.0);
                // cancellation noise in the difference quotient is ε·V/h
                let noise_floor = 1e-8 * value.max(1.0);
                assert!(
                    (grad[j] - fd).abs() <= 1e-5 * scale + noise_floor,
                    "coordinate {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn local_gain_bounded_by_frobenius_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let st = random_state(&mut rng, 4);
        let bound = frobenius_norm_sq(&st).sqrt();
        let base = forward_2d(&st);
        let flat = st.to_flat();
        let eps = 1e-6;
        for _ in 0..200 {
            let mut delta = DVector::from_fn(flat.len(), |_, _| rng.gen_range(-1.0..1.0));
            delta /= delta.norm();
            let probe = &flat + &delta * eps;
            let out = forward_2d(&StackState::from_flat(probe.as_slice(), st.phi));
            let diff = Vector3::new(out.rho - base.rho, out.z - base.z, out.theta - base.theta);
            assert!(diff.norm() / eps <= bound + 1e-6);
        }
    }

    #[test]
    fn flat_round_trip() {
        let st = state(&[(1.0, 2.0, 3.0), (-4.0, 5.0, -6.0)], 0.4);
        let rebuilt = StackState::from_flat(st.to_flat().as_slice(), st.phi);
        assert_eq!(st, rebuilt);
    }
}
