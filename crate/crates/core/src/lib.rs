//! Inverse kinematics for serial stacks of Stewart platforms, with redundancy
//! resolved by minimizing the Frobenius norm of the end-effector Jacobian, and
//! Monte Carlo machinery to measure the resulting actuation-noise sensitivity.
//!
//! Lengths are millimetres, angles radians throughout. A stack of `n`
//! platforms is parameterized in a vertical working plane at azimuth `phi` by
//! per-platform coordinates `(rho, z, theta)`; [`geometry::lift_2d_to_3d`]
//! recovers full 3D poses.

pub mod commands;
pub mod config;
pub mod geometry;
pub mod ik;
pub mod kinematics;
pub mod monte_carlo;
