//! Run configuration: TOML or JSON files with defaults for every section,
//! strict unknown-key rejection, and validation messages that name the
//! offending key.
//!
//! A resolved configuration is echoed verbatim into every result bundle, so
//! seed and sample-count overrides are applied to the structure itself
//! before any computation runs.

use crate::geometry::PlatformGeometry;
use crate::ik::{EndEffectorTarget, SolverOptions};
use crate::monte_carlo::NoiseSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Parametric symmetric platform layout; units mm and rad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub bottom_radius: f64,
    pub top_radius: f64,
    pub pair_half_angle: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub theta_min: f64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            bottom_radius: 150.0,
            top_radius: 120.0,
            pair_half_angle: 10f64.to_radians(),
            l_min: 300.0,
            l_max: 500.0,
            theta_min: 0.35,
        }
    }
}

impl PlatformConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("platform.bottom_radius", self.bottom_radius),
            ("platform.top_radius", self.top_radius),
            ("platform.pair_half_angle", self.pair_half_angle),
            ("platform.l_min", self.l_min),
        ];
        for (key, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::Invalid(format!(
                    "{key} must be positive, got {value}"
                )));
            }
        }
        if self.pair_half_angle >= std::f64::consts::FRAC_PI_3 {
            return Err(ConfigError::Invalid(format!(
                "platform.pair_half_angle must stay below 60°, got {}",
                self.pair_half_angle
            )));
        }
        if !(self.l_max > self.l_min && self.l_max.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "platform.l_max must exceed platform.l_min, got {} vs {}",
                self.l_max, self.l_min
            )));
        }
        if !(self.theta_min >= 0.0 && self.theta_min < std::f64::consts::FRAC_PI_2) {
            return Err(ConfigError::Invalid(format!(
                "platform.theta_min must lie in [0, π/2), got {}",
                self.theta_min
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<PlatformGeometry, ConfigError> {
        PlatformGeometry::symmetric(
            self.bottom_radius,
            self.top_radius,
            self.pair_half_angle,
            self.l_min,
            self.l_max,
            self.theta_min,
        )
        .map_err(|e| ConfigError::Invalid(format!("platform: {e}")))
    }
}

/// One end effector target; φ defaults to the x-z working plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub rho: f64,
    pub z: f64,
    pub theta: f64,
    pub phi: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            z: 0.0,
            theta: 0.0,
            phi: 0.0,
        }
    }
}

impl TargetConfig {
    pub fn to_target(self) -> EndEffectorTarget {
        EndEffectorTarget::new(self.rho, self.z, self.theta, self.phi)
    }
}

/// Tilt assignment for sweep grid targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    /// Upright end effector everywhere.
    Zero,
    /// One fixed tilt for the whole grid.
    Constant(f64),
}

/// Rectangular (ρ, z) target grid for the sensitivity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_steps: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub z_steps: usize,
    pub theta_rule: ThetaRule,
    pub phi: f64,
    /// Perturbation samples per grid point; 0 skips the median-ratio study.
    pub n_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rho_min: -600.0,
            rho_max: 600.0,
            rho_steps: 8,
            z_min: 750.0,
            z_max: 1750.0,
            z_steps: 7,
            theta_rule: ThetaRule::Zero,
            phi: 0.0,
            n_samples: 2000,
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        for (key, steps) in [
            ("sweep.rho_steps", self.rho_steps),
            ("sweep.z_steps", self.z_steps),
        ] {
            if steps == 0 {
                return Err(ConfigError::Invalid(format!("{key} must be at least 1")));
            }
        }
        for (key, lo, hi, steps) in [
            ("sweep.rho_min/rho_max", self.rho_min, self.rho_max, self.rho_steps),
            ("sweep.z_min/z_max", self.z_min, self.z_max, self.z_steps),
        ] {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(ConfigError::Invalid(format!("{key} must be finite")));
            }
            if steps > 1 && hi <= lo {
                return Err(ConfigError::Invalid(format!(
                    "{key} must span a positive range for multiple steps"
                )));
            }
        }
        if !self.phi.is_finite() {
            return Err(ConfigError::Invalid("sweep.phi must be finite".into()));
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
        if steps == 1 {
            return vec![lo];
        }
        (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect()
    }

    /// Grid targets in row-major order, ρ varying fastest.
    pub fn targets(&self) -> Vec<TargetConfig> {
        let theta = match self.theta_rule {
            ThetaRule::Zero => 0.0,
            ThetaRule::Constant(t) => t,
        };
        let rhos = Self::axis(self.rho_min, self.rho_max, self.rho_steps);
        let zs = Self::axis(self.z_min, self.z_max, self.z_steps);
        zs.iter()
            .flat_map(|&z| {
                rhos.iter().map(move |&rho| TargetConfig {
                    rho,
                    z,
                    theta,
                    phi: self.phi,
                })
            })
            .collect()
    }
}

/// Complete run description; every section is optional in the file and
/// falls back to the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    /// Master seed; when set (in the file, on the command line, or via the
    /// environment) it replaces the solver and noise seeds. A seed in the
    /// file beats the command line, which beats the environment.
    pub seed: Option<u64>,
    /// Feasible comparison poses per target in compare and linearity runs.
    pub feasible_count: usize,
    pub output_dir: String,
    pub platform: PlatformConfig,
    pub targets: Vec<TargetConfig>,
    pub solver: SolverOptions,
    /// Noise levels; single-level commands use the first entry.
    pub noise: Vec<NoiseSpec>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 4,
            seed: None,
            feasible_count: 2,
            output_dir: "out".into(),
            platform: PlatformConfig::default(),
            targets: Vec::new(),
            solver: SolverOptions::default(),
            noise: vec![NoiseSpec::default()],
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Invalid("n must be at least 1".into()));
        }
        self.platform.validate()?;
        for (i, t) in self.targets.iter().enumerate() {
            for (key, value) in [
                ("rho", t.rho),
                ("z", t.z),
                ("theta", t.theta),
                ("phi", t.phi),
            ] {
                if !value.is_finite() {
                    return Err(ConfigError::Invalid(format!(
                        "targets[{i}].{key} must be finite, got {value}"
                    )));
                }
            }
        }
        self.solver.validate().map_err(ConfigError::Invalid)?;
        if self.noise.is_empty() {
            return Err(ConfigError::Invalid(
                "noise must contain at least one spec".into(),
            ));
        }
        for (i, spec) in self.noise.iter().enumerate() {
            spec.validate()
                .map_err(|m| ConfigError::Invalid(format!("noise[{i}]: {m}")))?;
        }
        self.sweep.validate()?;
        Ok(())
    }

    /// Applies the master seed with file > CLI > environment precedence and
    /// pushes the winner into the solver and every noise level.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>, env_seed: Option<u64>) {
        let master = self.seed.or(cli_seed).or(env_seed);
        if let Some(seed) = master {
            self.seed = Some(seed);
            self.solver.rng_seed = seed;
            for spec in &mut self.noise {
                spec.rng_seed = seed;
            }
        }
    }

    /// Overrides every sample count (noise levels and sweep) when given.
    pub fn resolve_samples(&mut self, samples: Option<usize>) {
        if let Some(n) = samples {
            for spec in &mut self.noise {
                spec.n_samples = n;
            }
            self.sweep.n_samples = n;
        }
    }
}

/// Reads, parses (TOML, or JSON for a `.json` extension), and validates a
/// run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.display().to_string(),
        message,
    };
    let config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut file = std::fs::File::create(&path).expect("create");
        file.write_all(body.as_bytes()).expect("write");
        path
    }

    #[test]
    fn minimal_toml_fills_defaults() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = write_config(
            &dir,
            "run.toml",
            "n = 4\n\n[[targets]]\nrho = 600.0\nz = 1000.0\ntheta = -1.57\n",
        );
        let config = load_config(&path).expect("valid");
        assert_eq!(config.n, 4);
        assert_eq!(config.targets.len(), 1);
        assert_eq!(config.targets[0].phi, 0.0);
        assert_eq!(config.platform.l_min, 300.0);
        assert_eq!(config.platform.l_max, 500.0);
        assert_eq!(config.noise.len(), 1);
        assert_eq!(config.noise[0].sigma_t, 1.0);
        assert_eq!(config.feasible_count, 2);
        assert_eq!(config.seed, None);
    }

    #[test]
    fn json_extension_parses_json() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = write_config(
            &dir,
            "run.json",
            r#"{"n": 2, "targets": [{"rho": 10.0, "z": 700.0}]}"#,
        );
        let config = load_config(&path).expect("valid");
        assert_eq!(config.n, 2);
        assert_eq!(config.targets[0].z, 700.0);
        assert_eq!(config.targets[0].theta, 0.0);
    }

    #[test]
    fn negative_l_min_names_the_key() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = write_config(&dir, "run.toml", "[platform]\nl_min = -1.0\n");
        let err = load_config(&path).expect_err("invalid");
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(err.to_string().contains("platform.l_min"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = write_config(&dir, "run.toml", "bogus_knob = 3\n");
        let err = load_config(&path).expect_err("unknown key");
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_config(Path::new("/nonexistent/run.toml")).expect_err("missing");
        assert!(matches!(err, ConfigError::Io { .. }));
    }

    #[test]
    fn solver_and_noise_keys_are_validated() {
        let dir = tempfile::tempdir().expect("tempdir");
        let bad_solver = write_config(&dir, "a.toml", "[solver]\nposition_tol = 0.0\n");
        let err = load_config(&bad_solver).expect_err("invalid");
        assert!(err.to_string().contains("solver.position_tol"), "{err}");

        let bad_noise = write_config(&dir, "b.toml", "[[noise]]\nsigma_t = -2.0\n");
        let err = load_config(&bad_noise).expect_err("invalid");
        assert!(err.to_string().contains("sigma_t"), "{err}");
    }

    #[test]
    fn seed_precedence_is_file_then_cli_then_env() {
        let mut config = RunConfig {
            seed: Some(5),
            ..RunConfig::default()
        };
        config.resolve_seed(Some(9), Some(13));
        assert_eq!(config.seed, Some(5));
        assert_eq!(config.solver.rng_seed, 5);
        assert_eq!(config.noise[0].rng_seed, 5);

        let mut config = RunConfig::default();
        config.resolve_seed(Some(9), Some(13));
        assert_eq!(config.seed, Some(9));

        let mut config = RunConfig::default();
        config.resolve_seed(None, Some(13));
        assert_eq!(config.seed, Some(13));

        let mut config = RunConfig::default();
        let solver_default = config.solver.rng_seed;
        config.resolve_seed(None, None);
        assert_eq!(config.seed, None);
        assert_eq!(config.solver.rng_seed, solver_default);
    }

    #[test]
    fn samples_override_reaches_all_sections() {
        let mut config = RunConfig::default();
        config.resolve_samples(Some(123));
        assert_eq!(config.noise[0].n_samples, 123);
        assert_eq!(config.sweep.n_samples, 123);
    }

    #[test]
    fn sweep_grid_covers_requested_steps() {
        let sweep = SweepConfig::default();
        let targets = sweep.targets();
        assert_eq!(targets.len(), 56);
        assert_eq!(targets[0].rho, -600.0);
        assert_eq!(targets[0].z, 750.0);
        let last = targets.last().expect("nonempty");
        assert_eq!(last.rho, 600.0);
        assert_eq!(last.z, 1750.0);
        assert!(targets.iter().all(|t| t.theta == 0.0));
    }

    #[test]
    fn theta_rule_variants_parse() {
        let dir = tempfile::tempdir().expect("tempdir");
        let zero = write_config(&dir, "z.toml", "[sweep]\ntheta_rule = \"zero\"\n");
        assert_eq!(
            load_config(&zero).expect("valid").sweep.theta_rule,
            ThetaRule::Zero
        );
        let constant = write_config(&dir, "c.toml", "[sweep]\ntheta_rule = { constant = 0.3 }\n");
        assert_eq!(
            load_config(&constant).expect("valid").sweep.theta_rule,
            ThetaRule::Constant(0.3)
        );
    }

    #[test]
    fn config_roundtrips_through_serialization() {
        let config = RunConfig {
            targets: vec![TargetConfig {
                rho: 600.0,
                z: 1000.0,
                theta: -1.57,
                phi: 0.0,
            }],
            ..RunConfig::default()
        };
        let json = serde_json::to_string(&config).expect("serialize");
        let back: RunConfig = serde_json::from_str(&json).expect("deserialize");
        assert_eq!(back, config);
    }
}
