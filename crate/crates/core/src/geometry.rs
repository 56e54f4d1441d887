//! Single Stewart platform geometry: leg vectors, joint-limit feasibility,
//! rotation construction, and the lift from planar (ρ, z, θ) coordinates to a
//! full 3D pose.
//!
//! A platform is two plates joined by six linear actuators. Each actuator runs
//! from a node on the bottom plate to a node on the top plate; its vector in
//! the bottom-plate frame is `R·t + P − b`. Feasibility is governed by squared
//! length bounds and a minimum ball-joint angle against both plate normals.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit-axis tolerance for [`rodrigues`] and rotation validity checks.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("leg pairing must use each of the 6 {plate} nodes exactly once")]
    BadLegPairing { plate: &'static str },
    #[error("leg pair index {index} out of range (nodes are 0..6)")]
    LegIndexOutOfRange { index: usize },
    #[error("node {index} on the {plate} plate has nonzero z-component {z}")]
    NodeOutOfPlane {
        plate: &'static str,
        index: usize,
        z: f64,
    },
    #[error("leg length limits must satisfy 0 < l_min < l_max, got [{l_min}, {l_max}]")]
    BadLengthLimits { l_min: f64, l_max: f64 },
    #[error("theta_min must lie in [0, pi/2), got {0}")]
    BadJointAngle(f64),
    #[error("rotation axis must be unit length, got norm {0}")]
    AxisNotUnit(f64),
    #[error("rotation matrix is not orthonormal with determinant +1")]
    NotARotation,
}

/// Node layout and joint limits of one Stewart platform.
///
/// Node vectors are expressed in their own plate frame (z = 0 by invariant);
/// lengths are millimetres, angles radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformGeometry {
    top_nodes: [Vector3<f64>; 6],
    bottom_nodes: [Vector3<f64>; 6],
    leg_pairs: [(usize, usize); 6],
    l_min: f64,
    l_max: f64,
    theta_min: f64,
}

impl PlatformGeometry {
    /// Builds a geometry from explicit node layouts, validating all invariants.
    pub fn new(
        top_nodes: [Vector3<f64>; 6],
        bottom_nodes: [Vector3<f64>; 6],
        leg_pairs: [(usize, usize); 6],
        l_min: f64,
        l_max: f64,
        theta_min: f64,
    ) -> Result<Self, GeometryError> {
        for &(b, t) in &leg_pairs {
            if b >= 6 {
                return Err(GeometryError::LegIndexOutOfRange { index: b });
            }
            if t >= 6 {
                return Err(GeometryError::LegIndexOutOfRange { index: t });
            }
        }
        let mut seen_b = [false; 6];
        let mut seen_t = [false; 6];
        for &(b, t) in &leg_pairs {
            if seen_b[b] {
                return Err(GeometryError::BadLegPairing { plate: "bottom" });
            }
            if seen_t[t] {
                return Err(GeometryError::BadLegPairing { plate: "top" });
            }
            seen_b[b] = true;
            seen_t[t] = true;
        }
        for (plate, nodes) in [("top", &top_nodes), ("bottom", &bottom_nodes)] {
            if let Some((index, node)) = nodes.iter().enumerate().find(|(_, n)| n.z != 0.0) {
                return Err(GeometryError::NodeOutOfPlane {
                    plate,
                    index,
                    z: node.z,
                });
            }
        }
        if !(0.0 < l_min && l_min < l_max) || !l_min.is_finite() || !l_max.is_finite() {
            return Err(GeometryError::BadLengthLimits { l_min, l_max });
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&theta_min) {
            return Err(GeometryError::BadJointAngle(theta_min));
        }
        Ok(Self {
            top_nodes,
            bottom_nodes,
            leg_pairs,
            l_min,
            l_max,
            theta_min,
        })
    }

    /// Symmetric 6-6 layout: three node pairs per plate at 120° spacing, the
    /// top plate's pair centers offset 60° from the bottom's, legs zig-zagging
    /// between adjacent nodes.
    pub fn symmetric(
        bottom_radius: f64,
        top_radius: f64,
        pair_half_angle: f64,
        l_min: f64,
        l_max: f64,
        theta_min: f64,
    ) -> Result<Self, GeometryError> {
        let ring = |radius: f64, offset: f64| -> [Vector3<f64>; 6] {
            let mut nodes = [Vector3::zeros(); 6];
            for (k, node) in nodes.iter_mut().enumerate() {
                let center = offset + (k / 2) as f64 * 120f64.to_radians();
                let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
                let angle = center + sign * pair_half_angle;
                *node = Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
            }
            nodes
        };
        let bottom = ring(bottom_radius, 0.0);
        let top = ring(top_radius, 60f64.to_radians());
        // Alternating hexapod pattern: each top pair bridges two bottom pairs.
        let pairs = [(1, 0), (2, 1), (3, 2), (4, 3), (5, 4), (0, 5)];
        Self::new(top, bottom, pairs, l_min, l_max, theta_min)
    }

    pub fn top_nodes(&self) -> &[Vector3<f64>; 6] {
        &self.top_nodes
    }

    pub fn bottom_nodes(&self) -> &[Vector3<f64>; 6] {
        &self.bottom_nodes
    }

    pub fn leg_pairs(&self) -> &[(usize, usize); 6] {
        &self.leg_pairs
    }

    pub fn l_min(&self) -> f64 {
        self.l_min
    }

    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }
}

impl Default for PlatformGeometry {
    /// Default layout: bottom radius 150 mm, top radius 120 mm, pair
    /// half-angle 10°, leg lengths 300 to 500 mm, joint angle limit 0.35 rad.
    fn default() -> Self {
        Self::symmetric(150.0, 120.0, 10f64.to_radians(), 300.0, 500.0, 0.35)
            .expect("default layout is valid")
    }
}

/// Pose of one plate relative to another: rotation plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SpatialPose {
    /// Builds a pose, rejecting rotation matrices that are not orthonormal
    /// with determinant +1 (entrywise tolerance [`ROTATION_TOL`]).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let max_defect = (gram - Matrix3::identity()).abs().max();
        if max_defect > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

/// Per-leg constraint values for one platform pose.
///
/// Angle margins are `ℓᵀn̂ − ‖ℓ‖·sin θ_min` (bottom) and `ℓᵀRn̂ − ‖ℓ‖·sin θ_min`
/// (top); a pose is feasible iff every squared length lies in
/// `[l_min², l_max²]` and every margin is non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub leg_lengths_sq: [f64; 6],
    pub bottom_angle_margins: [f64; 6],
    pub top_angle_margins: [f64; 6],
    pub feasible: bool,
}

impl ConstraintReport {
    /// Smallest slack across all 18 constraints, in the report's native units
    /// (mm² for lengths, mm for angle margins). Negative means violated.
    pub fn worst_margin(&self, geom: &PlatformGeometry) -> f64 {
        let lo = geom.l_min * geom.l_min;
        let hi = geom.l_max * geom.l_max;
        let mut worst = f64::INFINITY;
        for i in 0..6 {
            worst = worst
                .min(self.leg_lengths_sq[i] - lo)
                .min(hi - self.leg_lengths_sq[i])
                .min(self.bottom_angle_margins[i])
                .min(self.top_angle_margins[i]);
        }
        worst
    }
}

/// Actuator vector `R·t + P − b` in the bottom-plate frame.
pub fn leg_vector(
    pose: &SpatialPose,
    top_node: &Vector3<f64>,
    bottom_node: &Vector3<f64>,
) -> Vector3<f64> {
    pose.rotation * top_node + pose.translation - bottom_node
}

/// Evaluates all six legs' length and joint-angle constraints for a pose.
///
/// Infeasibility is a report outcome, never an error: all values are returned
/// so callers can inspect margins.
pub fn check_constraints(geom: &PlatformGeometry, pose: &SpatialPose) -> ConstraintReport {
    let normal = Vector3::z();
    let top_normal = pose.rotation * normal;
    let sin_min = geom.theta_min.sin();
    let mut leg_lengths_sq = [0.0; 6];
    let mut bottom_angle_margins = [0.0; 6];
    let mut top_angle_margins = [0.0; 6];
    for (k, &(b, t)) in geom.leg_pairs.iter().enumerate() {
        let leg = leg_vector(pose, &geom.top_nodes[t], &geom.bottom_nodes[b]);
        let norm = leg.norm();
        leg_lengths_sq[k] = leg.dot(&leg);
        bottom_angle_margins[k] = leg.dot(&normal) - norm * sin_min;
        top_angle_margins[k] = leg.dot(&top_normal) - norm * sin_min;
    }
    let lo = geom.l_min * geom.l_min;
    let hi = geom.l_max * geom.l_max;
    let feasible = (0..6).all(|k| {
        leg_lengths_sq[k] >= lo
            && leg_lengths_sq[k] <= hi
            && bottom_angle_margins[k] >= 0.0
            && top_angle_margins[k] >= 0.0
    });
    ConstraintReport {
        leg_lengths_sq,
        bottom_angle_margins,
        top_angle_margins,
        feasible,
    }
}

/// Tilt axis for the working plane at azimuth `phi`:
/// `[cos φ, sin φ, 0] × [0, 0, 1] = [sin φ, −cos φ, 0]`. Always unit length.
pub fn axis_from_phi(phi: f64) -> Vector3<f64> {
    Vector3::new(phi.sin(), -phi.cos(), 0.0)
}

/// Rodrigues' rotation formula:
/// `R = cos θ·I + sin θ·[ŝ]ₓ + (1 − cos θ)·ŝŝᵀ`.
pub fn rodrigues(axis: &Vector3<f64>, theta: f64) -> Result<Matrix3<f64>, GeometryError> {
    let norm = axis.norm();
    if (norm - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::AxisNotUnit(norm));
    }
    Ok(rodrigues_unchecked(axis, theta))
}

pub(crate) fn rodrigues_unchecked(axis: &Vector3<f64>, theta: f64) -> Matrix3<f64> {
    let (sin, cos) = theta.sin_cos();
    let cross = cross_matrix(axis);
    Matrix3::identity() * cos + cross * sin + axis * axis.transpose() * (1.0 - cos)
}

/// Derivative of [`rodrigues`] with respect to the angle, at fixed axis.
pub(crate) fn rodrigues_dtheta(axis: &Vector3<f64>, theta: f64) -> Matrix3<f64> {
    let (sin, cos) = theta.sin_cos();
    let cross = cross_matrix(axis);
    Matrix3::identity() * -sin + cross * cos + axis * axis.transpose() * sin
}

fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Lifts planar working-plane coordinates to a 3D pose: translation
/// `[ρ cos φ, ρ sin φ, z]`, rotation by `θ` about [`axis_from_phi`]`(φ)`.
pub fn lift_2d_to_3d(rho: f64, z: f64, theta: f64, phi: f64) -> SpatialPose {
    let axis = axis_from_phi(phi);
    SpatialPose {
        rotation: rodrigues_unchecked(&axis, theta),
        translation: Vector3::new(rho * phi.cos(), rho * phi.sin(), z),
    }
}
