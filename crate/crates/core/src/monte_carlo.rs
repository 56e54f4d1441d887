//! Monte Carlo perturbation experiments: shared actuation-noise draws across
//! a set of poses, distance and covariance statistics, the linearized
//! covariance prediction, and the F-factor agreement metric.
//!
//! Every sample draws one state perturbation δx and applies it to all poses
//! (common random numbers), so pose-to-pose comparisons cancel sampling
//! luck. Sample i derives its generator from (seed, stream i), which makes
//! datasets bit-identical regardless of how sampling is parallelized.

use crate::kinematics::{forward_2d, EndEffectorOutput, PlanarPose, StackJacobian, StackState};
use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// χ²(2) quantile at 95%, `−2·ln(0.05)`.
pub const CHI2_2DOF_95: f64 = 5.991464547107979;

/// Actuation noise model: i.i.d. zero-mean Gaussians, σ_t (mm) on every ρ
/// and z, σ_θ (rad) on every tilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub n_samples: usize,
    pub rng_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_t: 1.0,
            sigma_theta: 0.005,
            n_samples: 10_000,
            rng_seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [("sigma_t", self.sigma_t), ("sigma_theta", self.sigma_theta)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(format!("noise.{name} must be non-negative, got {value}"));
            }
        }
        if self.n_samples == 0 {
            return Err("noise.n_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Outputs of one perturbation experiment over a pose set.
///
/// `outputs[p][i]` is pose p's end effector under sample i's shared
/// perturbation `deltas[i]` (flat `[δρ₁, δz₁, δθ₁, …]` order).
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDataset {
    pub deltas: Vec<Vec<f64>>,
    pub baselines: Vec<EndEffectorOutput>,
    pub outputs: Vec<Vec<EndEffectorOutput>>,
}

impl PerturbationDataset {
    pub fn n_samples(&self) -> usize {
        self.deltas.len()
    }

    pub fn n_poses(&self) -> usize {
        self.baselines.len()
    }

    /// Statistics of one pose's output cloud against its baseline.
    pub fn stats(&self, pose: usize) -> PerturbationStats {
        compute_stats(&self.baselines[pose], &self.outputs[pose])
    }
}

/// Runs the shared-perturbation experiment: for each sample one δx is drawn
/// and added to every pose, and each pose's planar forward kinematics is
/// recorded. Poses must share the platform count and azimuth.
pub fn get_n_perturbations(poses: &[StackState], noise: &NoiseSpec) -> PerturbationDataset {
    assert!(!poses.is_empty(), "at least one pose required");
    noise.validate().expect("noise spec");
    let n = poses[0].n();
    for pose in poses {
        assert_eq!(pose.n(), n, "poses must share the platform count");
        assert_eq!(pose.phi, poses[0].phi, "poses must share the azimuth");
    }
    let noise_t = Normal::new(0.0, noise.sigma_t).expect("validated sigma");
    let noise_theta = Normal::new(0.0, noise.sigma_theta).expect("validated sigma");

    let baselines = poses.iter().map(forward_2d).collect();
    let per_sample: Vec<(Vec<f64>, Vec<EndEffectorOutput>)> = (0..noise.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(noise.rng_seed);
            rng.set_stream(i as u64);
            let mut delta = Vec::with_capacity(3 * n);
            for _ in 0..n {
                delta.push(noise_t.sample(&mut rng));
                delta.push(noise_t.sample(&mut rng));
                delta.push(noise_theta.sample(&mut rng));
            }
            let outputs = poses
                .iter()
                .map(|pose| {
                    let platforms = pose
                        .platforms
                        .iter()
                        .enumerate()
                        .map(|(k, p)| {
                            PlanarPose::new(
                                p.rho + delta[3 * k],
                                p.z + delta[3 * k + 1],
                                p.theta + delta[3 * k + 2],
                            )
                        })
                        .collect();
                    forward_2d(&StackState::new(platforms, pose.phi))
                })
                .collect();
            (delta, outputs)
        })
        .collect();

    let mut deltas = Vec::with_capacity(noise.n_samples);
    let mut outputs: Vec<Vec<EndEffectorOutput>> = vec![Vec::with_capacity(noise.n_samples); poses.len()];
    for (delta, sample_outputs) in per_sample {
        deltas.push(delta);
        for (pose_outputs, out) in outputs.iter_mut().zip(sample_outputs) {
            pose_outputs.push(out);
        }
    }
    PerturbationDataset {
        deltas,
        baselines,
        outputs,
    }
}

/// 95% confidence ellipse of a 2D output cloud: center is the sample mean,
/// axes are `√(χ²₉₅·λ)` along the covariance eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceEllipse {
    pub center: [f64; 2],
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the semi-major axis against the ρ axis, in (−π, π].
    pub orientation: f64,
}

/// Distance and dispersion summary of one pose's perturbed outputs.
///
/// Distances are planar (ρ_ee, z_ee) only; tilt statistics are reported in
/// the separate θ fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationStats {
    pub median_distance: f64,
    /// 2.5th and 97.5th percentile of distance, linear interpolation.
    pub ci95: (f64, f64),
    /// Unbiased sample covariance of (ρ_ee, z_ee) about the sample mean.
    pub observed_covariance: [[f64; 2]; 2],
    pub ellipse95: ConfidenceEllipse,
    pub theta_median_abs: f64,
    pub theta_ci95: (f64, f64),
}

impl PerturbationStats {
    pub fn observed_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.observed_covariance[0][0],
            self.observed_covariance[0][1],
            self.observed_covariance[1][0],
            self.observed_covariance[1][1],
        )
    }
}

/// Percentile by linear interpolation between order statistics of sorted
/// data, index `(len − 1)·q`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarizes one pose's output cloud against its unperturbed baseline.
/// Needs at least two samples for the covariance.
pub fn compute_stats(
    baseline: &EndEffectorOutput,
    outputs: &[EndEffectorOutput],
) -> PerturbationStats {
    assert!(outputs.len() >= 2, "covariance needs at least two samples");
    let n = outputs.len() as f64;
    let mut distances: Vec<f64> = outputs
        .iter()
        .map(|o| (o.rho - baseline.rho).hypot(o.z - baseline.z))
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut theta_moves: Vec<f64> = outputs
        .iter()
        .map(|o| (o.theta - baseline.theta).abs())
        .collect();
    theta_moves.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));

    // a constant cloud has exactly zero covariance; summation rounding must
    // not leak a nonzero matrix into the degenerate case
    let constant = outputs
        .iter()
        .all(|o| o.rho == outputs[0].rho && o.z == outputs[0].z);
    let mean = if constant {
        Vector2::new(outputs[0].rho, outputs[0].z)
    } else {
        outputs.iter().fold(Vector2::zeros(), |acc, o| {
            acc + Vector2::new(o.rho, o.z)
        }) / n
    };
    let mut cov = Matrix2::zeros();
    if !constant {
        for o in outputs {
            let d = Vector2::new(o.rho, o.z) - mean;
            cov += d * d.transpose();
        }
        cov /= n - 1.0;
    }

    let eig = nalgebra::SymmetricEigen::new(cov);
    // larger eigenvalue carries the semi-major axis
    let (major_idx, minor_idx) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let axis_len = |idx: usize| (CHI2_2DOF_95 * eig.eigenvalues[idx].max(0.0)).sqrt();
    let major_dir = eig.eigenvectors.column(major_idx);
    let ellipse95 = ConfidenceEllipse {
        center: [mean.x, mean.y],
        semi_major: axis_len(major_idx),
        semi_minor: axis_len(minor_idx),
        orientation: major_dir.y.atan2(major_dir.x),
    };
    PerturbationStats {
        median_distance: percentile(&distances, 0.5),
        ci95: (percentile(&distances, 0.025), percentile(&distances, 0.975)),
        observed_covariance: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        ellipse95,
        theta_median_abs: percentile(&theta_moves, 0.5),
        theta_ci95: (
            percentile(&theta_moves, 0.025),
            percentile(&theta_moves, 0.975),
        ),
    }
}

/// Linearized output covariance `C_y = J_pos·C_x·J_posᵀ` of the position
/// rows under the diagonal state covariance (σ_t², σ_t², σ_θ²) per platform.
pub fn predicted_covariance(jac: &StackJacobian, noise: &NoiseSpec) -> Matrix2<f64> {
    let j_pos = jac.position_rows();
    let n = j_pos.ncols() / 3;
    let mut c_x = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        c_x[(3 * i, 3 * i)] = noise.sigma_t * noise.sigma_t;
        c_x[(3 * i + 1, 3 * i + 1)] = noise.sigma_t * noise.sigma_t;
        c_x[(3 * i + 2, 3 * i + 2)] = noise.sigma_theta * noise.sigma_theta;
    }
    let c_y = &j_pos * c_x * j_pos.transpose();
    Matrix2::new(c_y[(0, 0)], c_y[(0, 1)], c_y[(1, 0)], c_y[(1, 1)])
}

/// Proportional covariance disagreement `Σ|c_est − c_obs| / Σ|c_obs|`.
/// `None` when the observed covariance is exactly zero.
pub fn f_factor(c_est: &Matrix2<f64>, c_obs: &Matrix2<f64>) -> Option<f64> {
    let denom: f64 = c_obs.iter().map(|e| e.abs()).sum();
    if denom == 0.0 {
        return None;
    }
    let num: f64 = (c_est - c_obs).iter().map(|e| e.abs()).sum();
    Some(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("regression needs at least 3 points, got {0}")]
    NotEnoughPoints(usize),
    #[error("regression abscissa has zero variance")]
    DegenerateAbscissa,
}

/// Ordinary least squares of median-distance ratio on FN ratio.
pub fn fn_vs_median_regression(pairs: &[(f64, f64)]) -> Result<Regression, RegressionError> {
    if pairs.len() < 3 {
        return Err(RegressionError::NotEnoughPoints(pairs.len()));
    }
    let n = pairs.len() as f64;
    let x_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - x_mean).powi(2)).sum();
    if sxx == 0.0 {
        return Err(RegressionError::DegenerateAbscissa);
    }
    let sxy: f64 = pairs
        .iter()
        .map(|p| (p.0 - x_mean) * (p.1 - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = pairs
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let ss_tot: f64 = pairs.iter().map(|p| (p.1 - y_mean).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        // a flat response fit exactly by the flat line
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Regression {
        slope,
        intercept,
        r_squared,
    })
}
